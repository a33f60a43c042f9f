/* Native demo target: functions to hook and raw syscall sites to rewrite.
 * Everything lives in the uebpf_demo section so the region can be planned
 * and rewritten as one unit. Built without CET landing pads and with frame
 * pointers so every entry starts with a predictable prologue. */
#include <fcntl.h>
#include <sys/syscall.h>

#define DEMO __attribute__((noinline, used, section("uebpf_demo")))

static inline __attribute__((always_inline)) long raw3(long nr, long a, long b, long c)
{
	long ret;
	__asm__ volatile("syscall" : "=a"(ret) : "a"(nr), "D"(a), "S"(b), "d"(c) : "rcx", "r11", "memory");
	return ret;
}

static inline __attribute__((always_inline)) long raw4(long nr, long a, long b, long c, long d)
{
	long ret;
	register long r10 __asm__("r10") = d;
	__asm__ volatile("syscall" : "=a"(ret) : "a"(nr), "D"(a), "S"(b), "d"(c), "r"(r10) : "rcx", "r11", "memory");
	return ret;
}

DEMO long demo_add(long a, long b)
{
	return a + b;
}

DEMO long demo_fib(long n)
{
	return n < 2 ? n : demo_fib(n - 1) + demo_fib(n - 2);
}

/* Recurses `depth` times, returning depth. */
DEMO long demo_deep(long depth)
{
	return depth == 0 ? 0 : 1 + demo_deep(depth - 1);
}

DEMO long demo_sentinel6(long a, long b, long c, long d, long e, long f)
{
	return a ^ (b << 1) ^ (c << 2) ^ (d << 3) ^ (e << 4) ^ (f << 5);
}

DEMO long demo_ret42(void)
{
	return 42;
}

DEMO long demo_openat(const char *path, long flags)
{
	return raw4(SYS_openat, AT_FDCWD, (long)path, flags, 0);
}

DEMO long demo_close(long fd)
{
	return raw3(SYS_close, fd, 0, 0);
}

DEMO long demo_getpid(void)
{
	return raw3(SYS_getpid, 0, 0, 0);
}

DEMO long demo_write(long fd, const void *buf, long len)
{
	return raw3(SYS_write, fd, (long)buf, len);
}

/* Opens and closes `path` n times; returns the number of successful opens. */
DEMO long demo_open_loop(const char *path, long n)
{
	long ok = 0;
	for (long i = 0; i < n; i++) {
		long fd = demo_openat(path, O_RDONLY);
		if (fd >= 0) {
			ok++;
			demo_close(fd);
		}
	}
	return ok;
}

/* Mixed workload whose result depends on every hooked call. */
DEMO long demo_workload(long x)
{
	long pid = demo_getpid();
	return demo_add(x, 7) * 31 + demo_fib(x % 15) + demo_sentinel6(x, 1, 2, 3, 4, 5) + (pid > 0);
}

/* Hand-written entries: an immediate that contains the syscall opcode
 * bytes, a function too small to patch and one that starts with a short
 * relative branch. */
__asm__(
	".pushsection uebpf_demo, \"ax\", @progbits\n"
	".globl demo_imm_pattern\n"
	".type demo_imm_pattern, @function\n"
	"demo_imm_pattern:\n"
	"	push %rbp\n"
	"	mov %rsp, %rbp\n"
	"	mov $0x050f, %eax\n"
	"	movabs $0x0f050f0500000000, %rcx\n"
	"	add %rcx, %rax\n"
	"	pop %rbp\n"
	"	ret\n"
	".size demo_imm_pattern, .-demo_imm_pattern\n"
	".globl demo_tiny\n"
	".type demo_tiny, @function\n"
	"demo_tiny:\n"
	"	lea (%rdi,%rsi), %eax\n"
	"	ret\n"
	".size demo_tiny, .-demo_tiny\n"
	".globl demo_branchy\n"
	".type demo_branchy, @function\n"
	"demo_branchy:\n"
	"	jmp 1f\n"
	"	nop\n"
	"1:	mov %rdi, %rax\n"
	"	ret\n"
	".size demo_branchy, .-demo_branchy\n"
	".popsection\n");

extern char __start_uebpf_demo[], __stop_uebpf_demo[];

void demo_region(unsigned long *start, unsigned long *end)
{
	*start = (unsigned long)__start_uebpf_demo;
	*end = (unsigned long)__stop_uebpf_demo;
}

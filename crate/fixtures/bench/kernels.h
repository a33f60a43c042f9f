/* Benchmark kernels shared by the eBPF wrappers and the native baseline. */
#ifndef FIXTURE_KERNELS_H
#define FIXTURE_KERNELS_H

#define KERNEL static inline __attribute__((always_inline))

typedef unsigned long long k_u64;
typedef long long k_s64;

KERNEL k_u64 k_log2_int(k_u64 v)
{
	k_u64 r = 0;
	if (v >> 32) { v >>= 32; r += 32; }
	if (v >> 16) { v >>= 16; r += 16; }
	if (v >> 8) { v >>= 8; r += 8; }
	if (v >> 4) { v >>= 4; r += 4; }
	if (v >> 2) { v >>= 2; r += 2; }
	if (v >> 1) { r += 1; }
	return r;
}

KERNEL k_u64 k_prime(k_u64 n)
{
	if (n < 2)
		return 0;
	for (k_u64 i = 2; i * i <= n; i++)
		if (n % i == 0)
			return 0;
	return 1;
}

KERNEL k_u64 k_memcpy(unsigned char *dst, const unsigned char *src, k_u64 len)
{
	for (k_u64 i = 0; i < len; i++)
		dst[i] = src[i];
	return len;
}

KERNEL k_u64 k_simple(k_u64 x)
{
	if (x > 100)
		return x * 2;
	if (x & 1)
		return x + 3;
	return x ^ 0x55;
}

KERNEL k_u64 k_switch(k_u64 x)
{
	switch (x % 11) {
	case 0: return x + 1;
	case 1: return x * 3;
	case 2: return x >> 2;
	case 3: return x ^ 0xdeadbeef;
	case 4: return x - 7;
	case 5: return x | 0x100;
	case 6: return x & 0xff;
	case 7: return x * x;
	case 8: return ~x;
	case 9: return x << 3;
	default: return 42;
	}
}

KERNEL k_s64 k_strcmp(const char *a, const char *b)
{
	while (*a && *a == *b) {
		a++;
		b++;
	}
	return (k_s64)(unsigned char)*a - (k_s64)(unsigned char)*b;
}

#define STRCMP_REFERENCE "the quick brown fox jumps over the lazy dog"

KERNEL k_u64 k_memory_a_plus_b(const k_u64 *mem)
{
	return mem[0] + mem[1];
}

#endif

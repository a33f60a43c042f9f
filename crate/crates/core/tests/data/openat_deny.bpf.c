/* Fails openat() of one path with -EPERM without entering the kernel. */
#include "bpf_defs.h"

#define EPERM 1
#define PREFIX_LEN 16

struct bpf_map_def SEC("maps") denied = {
	.type = BPF_MAP_TYPE_ARRAY,
	.key_size = sizeof(__u32),
	.value_size = sizeof(__u64),
	.max_entries = 1,
};

/* Writable tail of the syscall-entry context. */
struct sys_enter_ctl {
	struct trace_event_raw_sys_enter raw;
	__s64 ret;
	__u64 override;
};

SEC("tracepoint/syscalls/sys_enter_openat")
int deny_openat(struct sys_enter_ctl *ctx)
{
	const char banned[PREFIX_LEN] = "/uebpf-denied/";
	char name[PREFIX_LEN] = {};
	if (bpf_probe_read_user(name, sizeof(name), (const void *)ctx->raw.args[1]) < 0)
		return 0;
	for (int i = 0; i < PREFIX_LEN - 2; i++)
		if (name[i] != banned[i])
			return 0;
	ctx->ret = -EPERM;
	ctx->override = 1;
	__u32 k = 0;
	__u64 *n = bpf_map_lookup_elem(&denied, &k);
	if (n)
		__sync_fetch_and_add(n, 1);
	return 0;
}

char LICENSE[] SEC("license") = "GPL";

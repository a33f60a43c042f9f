#include "bpf_defs.h"
#include "kernels.h"

SEC("uprobe/bench:log2_int")
long bench_log2_int(struct pt_regs *ctx)
{
	return k_log2_int(PT_REGS_PARM1(ctx));
}

char LICENSE[] SEC("license") = "Dual BSD/GPL";

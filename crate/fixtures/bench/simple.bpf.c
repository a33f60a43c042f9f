#include "bpf_defs.h"
#include "kernels.h"

SEC("uprobe/bench:simple")
long bench_simple(struct pt_regs *ctx)
{
	return k_simple(PT_REGS_PARM1(ctx));
}

char LICENSE[] SEC("license") = "Dual BSD/GPL";

#include "bpf_defs.h"
#include "kernels.h"

SEC("uprobe/bench:prime")
long bench_prime(struct pt_regs *ctx)
{
	return k_prime(PT_REGS_PARM1(ctx));
}

char LICENSE[] SEC("license") = "Dual BSD/GPL";

#include "bpf_defs.h"
#include "kernels.h"

SEC("uprobe/bench:switch")
long bench_switch(struct pt_regs *ctx)
{
	return k_switch(PT_REGS_PARM1(ctx));
}

char LICENSE[] SEC("license") = "Dual BSD/GPL";

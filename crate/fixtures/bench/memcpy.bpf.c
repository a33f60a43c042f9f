#include "bpf_defs.h"
#include "kernels.h"

SEC("uprobe/bench:memcpy")
long bench_memcpy(struct pt_regs *ctx)
{
	return k_memcpy((unsigned char *)PT_REGS_PARM1(ctx), (const unsigned char *)PT_REGS_PARM2(ctx), PT_REGS_PARM3(ctx));
}

char LICENSE[] SEC("license") = "Dual BSD/GPL";

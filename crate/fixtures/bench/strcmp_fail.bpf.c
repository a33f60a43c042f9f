#include "bpf_defs.h"
#include "kernels.h"

SEC("uprobe/bench:strcmp_fail")
long bench_strcmp_fail(struct pt_regs *ctx)
{
	return k_strcmp((const char *)PT_REGS_PARM1(ctx), STRCMP_REFERENCE);
}

char LICENSE[] SEC("license") = "Dual BSD/GPL";

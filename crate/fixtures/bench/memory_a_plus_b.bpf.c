#include "bpf_defs.h"
#include "kernels.h"

SEC("uprobe/bench:memory_a_plus_b")
long bench_memory_a_plus_b(struct pt_regs *ctx)
{
	return k_memory_a_plus_b((const k_u64 *)PT_REGS_PARM1(ctx));
}

char LICENSE[] SEC("license") = "Dual BSD/GPL";

/* Native baseline: the same kernel source compiled for the host. */
#include "kernels.h"

k_u64 native_log2_int(k_u64 x) { return k_log2_int(x); }
k_u64 native_prime(k_u64 n) { return k_prime(n); }
k_u64 native_memcpy(unsigned char *dst, const unsigned char *src, k_u64 len) { return k_memcpy(dst, src, len); }
k_u64 native_simple(k_u64 x) { return k_simple(x); }
k_u64 native_switch(k_u64 x) { return k_switch(x); }
k_u64 native_strcmp_fail(const char *a) { return (k_u64)k_strcmp(a, STRCMP_REFERENCE); }
k_u64 native_memory_a_plus_b(const k_u64 *mem) { return k_memory_a_plus_b(mem); }

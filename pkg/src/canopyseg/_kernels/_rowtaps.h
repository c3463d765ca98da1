/* Inner row loop of the direct 3x3 convolution, for four filters at once.
 * a_j[x] += w_j[0] * in[x-1] + w_j[1] * in[x] + w_j[2] * in[x+1], zero padded.
 * restrict lets the compiler vectorize across x. */
#ifndef CANOPYSEG_ROWTAPS_H
#define CANOPYSEG_ROWTAPS_H

#include <stddef.h>

#define DEFINE_ROW_TAPS(NAME, T)                                                   \
static inline void NAME(T *restrict a0, T *restrict a1, T *restrict a2,            \
                        T *restrict a3, const T *restrict in,                      \
                        const T *restrict w0, const T *restrict w1,                \
                        const T *restrict w2, const T *restrict w3, ptrdiff_t n)   \
{                                                                                  \
    const T w00 = w0[0], w01 = w0[1], w02 = w0[2];                                 \
    const T w10 = w1[0], w11 = w1[1], w12 = w1[2];                                 \
    const T w20 = w2[0], w21 = w2[1], w22 = w2[2];                                 \
    const T w30 = w3[0], w31 = w3[1], w32 = w3[2];                                 \
    if (n == 1) {                                                                  \
        a0[0] += w01 * in[0]; a1[0] += w11 * in[0];                                \
        a2[0] += w21 * in[0]; a3[0] += w31 * in[0];                                \
        return;                                                                    \
    }                                                                              \
    a0[0] += w01 * in[0] + w02 * in[1];                                            \
    a1[0] += w11 * in[0] + w12 * in[1];                                            \
    a2[0] += w21 * in[0] + w22 * in[1];                                            \
    a3[0] += w31 * in[0] + w32 * in[1];                                            \
    for (ptrdiff_t x = 1; x < n - 1; ++x) {                                        \
        const T l = in[x - 1], m = in[x], r = in[x + 1];                           \
        a0[x] += w00 * l + w01 * m + w02 * r;                                      \
        a1[x] += w10 * l + w11 * m + w12 * r;                                      \
        a2[x] += w20 * l + w21 * m + w22 * r;                                      \
        a3[x] += w30 * l + w31 * m + w32 * r;                                      \
    }                                                                              \
    a0[n - 1] += w00 * in[n - 2] + w01 * in[n - 1];                                \
    a1[n - 1] += w10 * in[n - 2] + w11 * in[n - 1];                                \
    a2[n - 1] += w20 * in[n - 2] + w21 * in[n - 1];                                \
    a3[n - 1] += w30 * in[n - 2] + w31 * in[n - 1];                                \
}

/* dot products of g with in shifted by -1, 0, +1 (zero padded) */
#define DEFINE_ROW_DOTS(NAME, T)                                                   \
static inline void NAME(const T *restrict g, const T *restrict in, ptrdiff_t n,   \
                        T *restrict out)                                           \
{                                                                                  \
    T s0 = 0, s1 = 0, s2 = 0;                                                      \
    for (ptrdiff_t x = 1; x < n; ++x) s0 += g[x] * in[x - 1];                      \
    for (ptrdiff_t x = 0; x < n; ++x) s1 += g[x] * in[x];                          \
    for (ptrdiff_t x = 0; x < n - 1; ++x) s2 += g[x] * in[x + 1];                  \
    out[0] += s0; out[1] += s1; out[2] += s2;                                      \
}

DEFINE_ROW_TAPS(row_taps_f, float)
DEFINE_ROW_TAPS(row_taps_d, double)
DEFINE_ROW_DOTS(row_dots_f, float)
DEFINE_ROW_DOTS(row_dots_d, double)

#endif

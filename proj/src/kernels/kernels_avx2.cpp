// AVX2 variants of the batched kernels. Compiled with -mavx2 -mfma in this
// TU only; never executed unless runtime dispatch selected them.

#include "cvlift/kernels.hpp"

#include <immintrin.h>

#include <algorithm>
#include <cmath>

namespace cvlift::kernels::detail {

namespace {

// exp(x) for 4 doubles, Cephes-style: range reduction by log2(e) and a
// Pade approximant in the reduced argument. Accurate to ~2 ulp on
// [-708, 708], which the equivalence tests pin against std::exp.
inline __m256d exp_pd(__m256d x) {
    const __m256d log2e = _mm256_set1_pd(1.4426950408889634073599);
    const __m256d c1 = _mm256_set1_pd(6.93145751953125e-1);
    const __m256d c2 = _mm256_set1_pd(1.42860682030941723212e-6);

    const __m256d p0 = _mm256_set1_pd(1.26177193074810590878e-4);
    const __m256d p1 = _mm256_set1_pd(3.02994407707441961300e-2);
    const __m256d p2 = _mm256_set1_pd(9.99999999999999999910e-1);
    const __m256d q0 = _mm256_set1_pd(3.00198505138664455042e-6);
    const __m256d q1 = _mm256_set1_pd(2.52448340349684104192e-3);
    const __m256d q2 = _mm256_set1_pd(2.27265548208155028766e-1);
    const __m256d q3 = _mm256_set1_pd(2.00000000000000000005e0);

    const __m256d max_x = _mm256_set1_pd(708.0);
    const __m256d min_x = _mm256_set1_pd(-708.0);
    __m256d xc = _mm256_min_pd(_mm256_max_pd(x, min_x), max_x);

    __m256d n = _mm256_round_pd(_mm256_mul_pd(xc, log2e),
                                _MM_FROUND_TO_NEAREST_INT | _MM_FROUND_NO_EXC);
    __m256d r = _mm256_fnmadd_pd(n, c1, xc);
    r = _mm256_fnmadd_pd(n, c2, r);

    __m256d rr = _mm256_mul_pd(r, r);
    __m256d pe = _mm256_fmadd_pd(p0, rr, p1);
    pe = _mm256_fmadd_pd(pe, rr, p2);
    pe = _mm256_mul_pd(pe, r);
    __m256d qe = _mm256_fmadd_pd(q0, rr, q1);
    qe = _mm256_fmadd_pd(qe, rr, q2);
    qe = _mm256_fmadd_pd(qe, rr, q3);
    __m256d e = _mm256_div_pd(pe, _mm256_sub_pd(qe, pe));
    e = _mm256_fmadd_pd(_mm256_set1_pd(2.0), e, _mm256_set1_pd(1.0));

    // scale by 2^n through exponent bits
    __m128i ni = _mm256_cvtpd_epi32(n);
    __m256i ni64 = _mm256_cvtepi32_epi64(ni);
    __m256i biased = _mm256_add_epi64(ni64, _mm256_set1_epi64x(1023));
    __m256d scale = _mm256_castsi256_pd(_mm256_slli_epi64(biased, 52));
    return _mm256_mul_pd(e, scale);
}

} // namespace

void dw2d_force_avx2(const Dw2dParams& p, const double* x1, const double* x2,
                     std::size_t n, double* f1, double* f2, double* energy) {
    const __m256d a4 = _mm256_set1_pd(4.0 * p.alpha);
    const __m256d b4 = _mm256_set1_pd(4.0 * p.beta);
    const __m256d g2 = _mm256_set1_pd(2.0 * p.gamma);
    const __m256d ng = _mm256_set1_pd(-p.gamma);
    const __m256d one = _mm256_set1_pd(1.0);
    const __m256d al = _mm256_set1_pd(p.alpha);
    const __m256d be = _mm256_set1_pd(p.beta);

    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        __m256d a = _mm256_loadu_pd(x1 + i);
        __m256d b = _mm256_loadu_pd(x2 + i);
        __m256d u = _mm256_fmsub_pd(a, a, one);
        __m256d v = _mm256_fmsub_pd(b, b, one);
        __m256d d = _mm256_sub_pd(a, b);
        __m256d e = exp_pd(_mm256_mul_pd(ng, _mm256_mul_pd(d, d)));
        __m256d cross = _mm256_mul_pd(g2, _mm256_mul_pd(d, e));
        __m256d g1v = _mm256_fmadd_pd(_mm256_mul_pd(a4, a), u, cross);
        __m256d g2v = _mm256_fmsub_pd(_mm256_mul_pd(b4, b), v, cross);
        _mm256_storeu_pd(f1 + i, _mm256_sub_pd(_mm256_setzero_pd(), g1v));
        _mm256_storeu_pd(f2 + i, _mm256_sub_pd(_mm256_setzero_pd(), g2v));
        if (energy) {
            __m256d en = _mm256_mul_pd(al, _mm256_mul_pd(u, u));
            en = _mm256_fmadd_pd(be, _mm256_mul_pd(v, v), en);
            en = _mm256_add_pd(en, _mm256_sub_pd(one, e));
            _mm256_storeu_pd(energy + i, en);
        }
    }
    if (i < n)
        dw2d_force_scalar(p, x1 + i, x2 + i, n - i, f1 + i, f2 + i,
                          energy ? energy + i : nullptr);
}

void axpby_add_avx2(double a, const double* u, double b, const double* v,
                    double* y, std::size_t n) {
    const __m256d av = _mm256_set1_pd(a);
    const __m256d bv = _mm256_set1_pd(b);
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        __m256d acc = _mm256_loadu_pd(y + i);
        acc = _mm256_fmadd_pd(av, _mm256_loadu_pd(u + i), acc);
        acc = _mm256_fmadd_pd(bv, _mm256_loadu_pd(v + i), acc);
        _mm256_storeu_pd(y + i, acc);
    }
    if (i < n) axpby_add_scalar(a, u + i, b, v + i, y + i, n - i);
}

void girsanov_accum_2d_avx2(const double* u1, const double* u2,
                            const double* e1, const double* e2,
                            double sqrt_dt, double dt, double* logw, std::size_t n) {
    const __m256d sd = _mm256_set1_pd(sqrt_dt);
    const __m256d hd = _mm256_set1_pd(0.5 * dt);
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        __m256d a1 = _mm256_loadu_pd(u1 + i);
        __m256d a2 = _mm256_loadu_pd(u2 + i);
        __m256d dot = _mm256_fmadd_pd(a2, _mm256_loadu_pd(e2 + i),
                                      _mm256_mul_pd(a1, _mm256_loadu_pd(e1 + i)));
        __m256d sq = _mm256_fmadd_pd(a2, a2, _mm256_mul_pd(a1, a1));
        __m256d w = _mm256_loadu_pd(logw + i);
        w = _mm256_fnmadd_pd(sd, dot, w);
        w = _mm256_fnmadd_pd(hd, sq, w);
        _mm256_storeu_pd(logw + i, w);
    }
    if (i < n)
        girsanov_accum_2d_scalar(u1 + i, u2 + i, e1 + i, e2 + i, sqrt_dt, dt,
                                 logw + i, n - i);
}

void bilinear_eval_grad_avx2(const TableMeta& m, const double* values,
                             const double* x, const double* y, std::size_t n,
                             double* val, double* gx, double* gy, uint8_t* clamped) {
    // degenerate tables (single row/column) go through the scalar path
    if (m.nx < 2 || m.ny < 2) {
        bilinear_eval_grad_scalar(m, values, x, y, n, val, gx, gy, clamped);
        return;
    }
    const __m256d x0 = _mm256_set1_pd(m.x0);
    const __m256d y0 = _mm256_set1_pd(m.y0);
    const __m256d inv_dx = _mm256_set1_pd(1.0 / m.dx);
    const __m256d inv_dy = _mm256_set1_pd(1.0 / m.dy);
    const __m256d zero = _mm256_setzero_pd();
    const __m256d sx_max = _mm256_set1_pd(static_cast<double>(m.nx - 1));
    const __m256d sy_max = _mm256_set1_pd(static_cast<double>(m.ny - 1));
    const __m128i ix_max = _mm_set1_epi32(m.nx - 2);
    const __m128i iy_max = _mm_set1_epi32(m.ny - 2);
    const __m128i stride = _mm_set1_epi32(m.nx);

    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        __m256d sx = _mm256_mul_pd(_mm256_sub_pd(_mm256_loadu_pd(x + i), x0), inv_dx);
        __m256d sy = _mm256_mul_pd(_mm256_sub_pd(_mm256_loadu_pd(y + i), y0), inv_dy);
        __m256d out_mask = _mm256_or_pd(
            _mm256_or_pd(_mm256_cmp_pd(sx, zero, _CMP_LT_OQ),
                         _mm256_cmp_pd(sx, sx_max, _CMP_GT_OQ)),
            _mm256_or_pd(_mm256_cmp_pd(sy, zero, _CMP_LT_OQ),
                         _mm256_cmp_pd(sy, sy_max, _CMP_GT_OQ)));
        sx = _mm256_min_pd(_mm256_max_pd(sx, zero), sx_max);
        sy = _mm256_min_pd(_mm256_max_pd(sy, zero), sy_max);
        __m128i ix = _mm_min_epi32(_mm256_cvttpd_epi32(sx), ix_max);
        __m128i iy = _mm_min_epi32(_mm256_cvttpd_epi32(sy), iy_max);
        __m256d tx = _mm256_sub_pd(sx, _mm256_cvtepi32_pd(ix));
        __m256d ty = _mm256_sub_pd(sy, _mm256_cvtepi32_pd(iy));
        __m128i base = _mm_add_epi32(_mm_mullo_epi32(iy, stride), ix);
        __m256d v00 = _mm256_i32gather_pd(values, base, 8);
        __m256d v10 = _mm256_i32gather_pd(values + 1, base, 8);
        __m256d v01 = _mm256_i32gather_pd(values + m.nx, base, 8);
        __m256d v11 = _mm256_i32gather_pd(values + m.nx + 1, base, 8);
        __m256d dx0 = _mm256_sub_pd(v10, v00);
        __m256d dx1 = _mm256_sub_pd(v11, v01);
        __m256d vx0 = _mm256_fmadd_pd(tx, dx0, v00);
        __m256d vx1 = _mm256_fmadd_pd(tx, dx1, v01);
        _mm256_storeu_pd(val + i, _mm256_fmadd_pd(ty, _mm256_sub_pd(vx1, vx0), vx0));
        if (gx) {
            __m256d g = _mm256_fmadd_pd(ty, _mm256_sub_pd(dx1, dx0), dx0);
            _mm256_storeu_pd(gx + i, _mm256_mul_pd(g, inv_dx));
        }
        if (gy)
            _mm256_storeu_pd(gy + i, _mm256_mul_pd(_mm256_sub_pd(vx1, vx0), inv_dy));
        if (clamped) {
            int bits = _mm256_movemask_pd(out_mask);
            clamped[i + 0] = (bits & 1) ? 1 : 0;
            clamped[i + 1] = (bits & 2) ? 1 : 0;
            clamped[i + 2] = (bits & 4) ? 1 : 0;
            clamped[i + 3] = (bits & 8) ? 1 : 0;
        }
    }
    if (i < n)
        bilinear_eval_grad_scalar(m, values, x + i, y + i, n - i, val + i,
                                  gx ? gx + i : nullptr, gy ? gy + i : nullptr,
                                  clamped ? clamped + i : nullptr);
}

} // namespace cvlift::kernels::detail

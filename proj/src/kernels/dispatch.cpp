#include "cvlift/kernels.hpp"

#include <cstdlib>
#include <cstring>

namespace cvlift::kernels {

bool avx2_available() {
#if defined(CVLIFT_HAVE_AVX2_TU) && (defined(__x86_64__) || defined(__i386__))
    return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
    return false;
#endif
}

namespace {

Backend pick_default() {
    if (const char* env = std::getenv("CVLIFT_KERNEL")) {
        if (std::strcmp(env, "scalar") == 0) return Backend::Scalar;
        if (std::strcmp(env, "avx2") == 0 && avx2_available()) return Backend::Avx2;
    }
    return avx2_available() ? Backend::Avx2 : Backend::Scalar;
}

Backend g_backend = pick_default();

} // namespace

Backend active_backend() { return g_backend; }

void set_backend(Backend b) {
    if (b == Backend::Avx2 && !avx2_available()) b = Backend::Scalar;
    g_backend = b;
}

const char* backend_name(Backend b) {
    return b == Backend::Avx2 ? "avx2" : "scalar";
}

void dw2d_force(const Dw2dParams& p, const double* x1, const double* x2,
                std::size_t n, double* f1, double* f2, double* energy) {
#ifdef CVLIFT_HAVE_AVX2_TU
    if (g_backend == Backend::Avx2) {
        detail::dw2d_force_avx2(p, x1, x2, n, f1, f2, energy);
        return;
    }
#endif
    detail::dw2d_force_scalar(p, x1, x2, n, f1, f2, energy);
}

void axpby_add(double a, const double* u, double b, const double* v,
               double* y, std::size_t n) {
#ifdef CVLIFT_HAVE_AVX2_TU
    if (g_backend == Backend::Avx2) {
        detail::axpby_add_avx2(a, u, b, v, y, n);
        return;
    }
#endif
    detail::axpby_add_scalar(a, u, b, v, y, n);
}

void girsanov_accum_2d(const double* u1, const double* u2,
                       const double* e1, const double* e2,
                       double sqrt_dt, double dt, double* logw, std::size_t n) {
#ifdef CVLIFT_HAVE_AVX2_TU
    if (g_backend == Backend::Avx2) {
        detail::girsanov_accum_2d_avx2(u1, u2, e1, e2, sqrt_dt, dt, logw, n);
        return;
    }
#endif
    detail::girsanov_accum_2d_scalar(u1, u2, e1, e2, sqrt_dt, dt, logw, n);
}

void bilinear_eval_grad(const TableMeta& m, const double* values,
                        const double* x, const double* y, std::size_t n,
                        double* val, double* gx, double* gy, uint8_t* clamped) {
#ifdef CVLIFT_HAVE_AVX2_TU
    if (g_backend == Backend::Avx2) {
        detail::bilinear_eval_grad_avx2(m, values, x, y, n, val, gx, gy, clamped);
        return;
    }
#endif
    detail::bilinear_eval_grad_scalar(m, values, x, y, n, val, gx, gy, clamped);
}

} // namespace cvlift::kernels

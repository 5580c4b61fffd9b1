#pragma once

#include <cstddef>
#include <cstdint>

// Batched inner-loop kernels used by the ensemble propagators. Every kernel
// has a scalar reference implementation and (on x86) an AVX2 variant; the
// active backend is selected at runtime from CPU features and can be forced
// with set_backend() or the CVLIFT_KERNEL environment variable
// ("scalar"/"avx2"). Scalar and AVX2 variants are equivalence-tested against
// each other in the test suite.

namespace cvlift::kernels {

enum class Backend { Scalar, Avx2 };

Backend active_backend();
void set_backend(Backend b);
bool avx2_available();
const char* backend_name(Backend b);

struct Dw2dParams {
    double alpha;
    double beta;
    double gamma;
};

// Force f = -grad V and optionally the energy of the two-well 2D potential
//   V(x1,x2) = alpha (x1^2-1)^2 + beta (x2^2-1)^2 + (1 - exp(-gamma (x1-x2)^2))
void dw2d_force(const Dw2dParams& p, const double* x1, const double* x2,
                std::size_t n, double* f1, double* f2, double* energy = nullptr);

// y[i] += a*u[i] + b*v[i]
void axpby_add(double a, const double* u, double b, const double* v,
               double* y, std::size_t n);

// Girsanov log-weight increment for a 2D control in noise units:
//   logw[i] -= sqrt_dt*(u1 e1 + u2 e2) + 0.5*dt*(u1^2 + u2^2)
void girsanov_accum_2d(const double* u1, const double* u2,
                       const double* e1, const double* e2,
                       double sqrt_dt, double dt, double* logw, std::size_t n);

// Regular-grid table for bilinear interpolation. Nodes sit at
// (x0 + i*dx, y0 + j*dy), value index j*nx + i.
struct TableMeta {
    double x0, y0;
    double dx, dy;
    int nx, ny;
};

// Bilinear evaluation with optional gradient of the interpolant. Queries
// outside the node lattice are clamped to the boundary and flagged when a
// flag array is given. gx/gy may be null.
void bilinear_eval_grad(const TableMeta& m, const double* values,
                        const double* x, const double* y, std::size_t n,
                        double* val, double* gx, double* gy,
                        uint8_t* clamped = nullptr);

namespace detail {
// per-backend entry points, exposed for the equivalence tests
void dw2d_force_scalar(const Dw2dParams&, const double*, const double*,
                       std::size_t, double*, double*, double*);
void axpby_add_scalar(double, const double*, double, const double*, double*, std::size_t);
void girsanov_accum_2d_scalar(const double*, const double*, const double*, const double*,
                              double, double, double*, std::size_t);
void bilinear_eval_grad_scalar(const TableMeta&, const double*, const double*, const double*,
                               std::size_t, double*, double*, double*, uint8_t*);
#ifdef CVLIFT_HAVE_AVX2_TU
void dw2d_force_avx2(const Dw2dParams&, const double*, const double*,
                     std::size_t, double*, double*, double*);
void axpby_add_avx2(double, const double*, double, const double*, double*, std::size_t);
void girsanov_accum_2d_avx2(const double*, const double*, const double*, const double*,
                            double, double, double*, std::size_t);
void bilinear_eval_grad_avx2(const TableMeta&, const double*, const double*, const double*,
                             std::size_t, double*, double*, double*, uint8_t*);
#endif
} // namespace detail

} // namespace cvlift::kernels

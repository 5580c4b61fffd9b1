#include "cvlift/kernels.hpp"

#include <algorithm>
#include <cmath>

namespace cvlift::kernels::detail {

void dw2d_force_scalar(const Dw2dParams& p, const double* x1, const double* x2,
                       std::size_t n, double* f1, double* f2, double* energy) {
    const double a4 = 4.0 * p.alpha;
    const double b4 = 4.0 * p.beta;
    const double g2 = 2.0 * p.gamma;
    for (std::size_t i = 0; i < n; ++i) {
        const double u = x1[i] * x1[i] - 1.0;
        const double v = x2[i] * x2[i] - 1.0;
        const double d = x1[i] - x2[i];
        const double e = std::exp(-p.gamma * d * d);
        const double cross = g2 * d * e;
        f1[i] = -(a4 * x1[i] * u + cross);
        f2[i] = -(b4 * x2[i] * v - cross);
        if (energy) energy[i] = p.alpha * u * u + p.beta * v * v + (1.0 - e);
    }
}

void axpby_add_scalar(double a, const double* u, double b, const double* v,
                      double* y, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) y[i] += a * u[i] + b * v[i];
}

void girsanov_accum_2d_scalar(const double* u1, const double* u2,
                              const double* e1, const double* e2,
                              double sqrt_dt, double dt, double* logw, std::size_t n) {
    const double half_dt = 0.5 * dt;
    for (std::size_t i = 0; i < n; ++i) {
        const double dot = u1[i] * e1[i] + u2[i] * e2[i];
        const double sq = u1[i] * u1[i] + u2[i] * u2[i];
        logw[i] -= sqrt_dt * dot + half_dt * sq;
    }
}

void bilinear_eval_grad_scalar(const TableMeta& m, const double* values,
                               const double* x, const double* y, std::size_t n,
                               double* val, double* gx, double* gy, uint8_t* clamped) {
    const double inv_dx = 1.0 / m.dx;
    const double inv_dy = 1.0 / m.dy;
    const double sx_max = static_cast<double>(m.nx - 1);
    const double sy_max = static_cast<double>(m.ny - 1);
    for (std::size_t i = 0; i < n; ++i) {
        double sx = (x[i] - m.x0) * inv_dx;
        double sy = (y[i] - m.y0) * inv_dy;
        bool out = sx < 0.0 || sx > sx_max || sy < 0.0 || sy > sy_max;
        sx = std::min(std::max(sx, 0.0), sx_max);
        sy = std::min(std::max(sy, 0.0), sy_max);
        int ix = std::min(static_cast<int>(sx), m.nx - 2);
        int iy = std::min(static_cast<int>(sy), m.ny - 2);
        if (m.nx == 1) ix = 0;
        if (m.ny == 1) iy = 0;
        const double tx = sx - ix;
        const double ty = sy - iy;
        const int stride = m.nx;
        const int base = iy * stride + ix;
        const double v00 = values[base];
        const double v10 = (m.nx > 1) ? values[base + 1] : v00;
        const double v01 = (m.ny > 1) ? values[base + stride] : v00;
        const double v11 = (m.nx > 1 && m.ny > 1) ? values[base + stride + 1] : v10;
        const double vx0 = v00 + tx * (v10 - v00);
        const double vx1 = v01 + tx * (v11 - v01);
        val[i] = vx0 + ty * (vx1 - vx0);
        if (gx) gx[i] = ((v10 - v00) + ty * ((v11 - v01) - (v10 - v00))) * inv_dx;
        if (gy) gy[i] = (vx1 - vx0) * inv_dy;
        if (clamped) clamped[i] = out ? 1 : 0;
    }
}

} // namespace cvlift::kernels::detail

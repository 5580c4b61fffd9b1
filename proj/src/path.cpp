#include "cvlift/path.hpp"

#include "cvlift/rng.hpp"

#include <cmath>
#include <cstdio>
#include <stdexcept>

namespace cvlift {

namespace {

bool state_ok(const double* x, int d, double bound) {
    double nrm2 = 0.0;
    for (int i = 0; i < d; ++i) {
        if (!std::isfinite(x[i])) return false;
        nrm2 += x[i] * x[i];
    }
    return nrm2 <= bound * bound;
}

} // namespace

PathRecord simulate_em(const Dynamics& dyn, const Vec& x0, const SimOptions& opt,
                       const Control* control) {
    const int d = dyn.dim();
    if (x0.size() != d) throw InvalidInputError("x0 has wrong dimension");
    if (!(opt.dt > 0.0)) throw InvalidInputError("dt must be positive");
    if (opt.steps < 1) throw InvalidInputError("need at least one step");

    PathRecord rec;
    rec.t0 = opt.t0;
    rec.dt = opt.dt;
    rec.dim = d;
    rec.seed = opt.seed;
    rec.stream = opt.stream;
    rec.states.resize(static_cast<std::size_t>(opt.steps + 1) * d);
    if (opt.record_controls) rec.controls.assign(static_cast<std::size_t>(opt.steps) * d, 0.0);
    if (opt.record_noises) rec.noises.resize(static_cast<std::size_t>(opt.steps) * d);

    StreamRng rng(opt.seed, opt.stream);
    const double sigma = dyn.sigma();
    const double noise_coef = sigma * std::sqrt(opt.dt);

    std::vector<double> x(x0.data(), x0.data() + d), b(d), u(d, 0.0), eta(d);
    for (int i = 0; i < d; ++i) rec.states[i] = x[i];

    for (int n = 0; n < opt.steps; ++n) {
        dyn.drift(x.data(), b.data());
        if (control) control->eval(opt.t0 + n * opt.dt, x.data(), u.data());
        for (int i = 0; i < d; ++i) eta[i] = rng.normal();
        for (int i = 0; i < d; ++i) {
            const double f = control ? b[i] + sigma * u[i] : b[i];
            x[i] += f * opt.dt + noise_coef * eta[i];
        }
        if (opt.record_controls && control)
            for (int i = 0; i < d; ++i) rec.controls[static_cast<std::size_t>(n) * d + i] = u[i];
        if (opt.record_noises)
            for (int i = 0; i < d; ++i) rec.noises[static_cast<std::size_t>(n) * d + i] = eta[i];
        double* dst = rec.states.data() + static_cast<std::size_t>(n + 1) * d;
        for (int i = 0; i < d; ++i) dst[i] = x[i];
        if (!state_ok(x.data(), d, opt.divergence_norm)) {
            rec.diverged = true;
            rec.diverged_step = n + 1;
            rec.states.resize(static_cast<std::size_t>(n + 2) * d);
            if (opt.throw_on_divergence)
                throw DivergenceError(n + 1, "trajectory diverged at step " + std::to_string(n + 1));
            return rec;
        }
    }
    return rec;
}

void PathRecord::write_csv(const std::string& path) const {
    std::FILE* f = std::fopen(path.c_str(), "w");
    if (!f) throw std::runtime_error("cannot open " + path);
    std::fprintf(f, "t");
    for (int i = 1; i <= dim; ++i) std::fprintf(f, ",x_%d", i);
    std::fprintf(f, "\n");
    const int m = steps();
    for (int n = 0; n <= m; ++n) {
        std::fprintf(f, "%.12g", time(n));
        const double* x = state(n);
        for (int i = 0; i < dim; ++i) std::fprintf(f, ",%.12g", x[i]);
        std::fprintf(f, "\n");
    }
    std::fclose(f);
}

} // namespace cvlift

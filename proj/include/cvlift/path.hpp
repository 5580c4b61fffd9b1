#pragma once

#include "cvlift/system.hpp"

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace cvlift {

struct DivergenceError : std::runtime_error {
    DivergenceError(int step_index, std::string what)
        : std::runtime_error(std::move(what)), step(step_index) {}
    int step;
};

// Feedback control in noise units: the drift increment of the controlled
// SDE is sigma * u(t, x). Implementations must be pure in (t, x) so path
// workers can share them.
class Control {
  public:
    virtual ~Control() = default;
    virtual void eval(double t, const double* x, double* u) const = 0;
};

// One simulated trajectory on a uniform time grid.
struct PathRecord {
    double t0 = 0.0;
    double dt = 0.0;
    int dim = 0;
    uint64_t seed = 0;
    uint64_t stream = 0;
    // (M+1) x dim, row-major
    std::vector<double> states;
    // optional per-step data, M x dim each
    std::vector<double> controls;
    std::vector<double> noises;
    bool diverged = false;
    int diverged_step = -1;

    int steps() const {
        return dim == 0 ? 0 : static_cast<int>(states.size() / dim) - 1;
    }
    const double* state(int n) const { return states.data() + static_cast<std::size_t>(n) * dim; }
    double time(int n) const { return t0 + n * dt; }
    Vec state_vec(int n) const {
        return Eigen::Map<const Vec>(state(n), dim);
    }

    // columns: t, x_1..x_d
    void write_csv(const std::string& path) const;
};

struct SimOptions {
    double t0 = 0.0;
    double dt = 1e-3;
    int steps = 0;
    uint64_t seed = 0;
    uint64_t stream = 0;          // per-path stream id
    bool record_controls = false;
    bool record_noises = false;
    double divergence_norm = 1e6; // abort when ||x|| exceeds this
    bool throw_on_divergence = true;
};

// Euler-Maruyama for dX = (b(X) + sigma u(t,X)) dt + sigma dW. With
// control == nullptr the dynamics is uncontrolled. Deterministic for fixed
// (seed, stream).
PathRecord simulate_em(const Dynamics& dyn, const Vec& x0, const SimOptions& opt,
                       const Control* control = nullptr);

// Test helper dynamics with user-supplied drift.
class FunctionalDynamics : public Dynamics {
  public:
    using DriftFn = std::function<void(const double*, double*)>;
    FunctionalDynamics(int dim, double sigma, DriftFn f)
        : dim_(dim), sigma_(sigma), f_(std::move(f)) {}
    int dim() const override { return dim_; }
    double sigma() const override { return sigma_; }
    void drift(const double* x, double* out) const override { f_(x, out); }

  private:
    int dim_;
    double sigma_;
    DriftFn f_;
};

} // namespace cvlift

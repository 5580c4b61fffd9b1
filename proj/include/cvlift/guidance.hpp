#pragma once

#include "cvlift/cv.hpp"
#include "cvlift/effective.hpp"
#include "cvlift/path.hpp"

#include <memory>
#include <vector>

namespace cvlift {

// Piecewise-linear latent reference path through knots (t_j, z_j). Queries
// outside the knot span are a range error.
class ReferencePath {
  public:
    ReferencePath(std::vector<double> times, Mat values);
    static ReferencePath linear_ramp(double t0, const Vec& z0, double t1, const Vec& z1);
    // scalar convenience, m = 1
    static ReferencePath linear_ramp(double t0, double z0, double t1, double z1);

    int latent_dim() const { return static_cast<int>(values_.cols()); }
    double t_begin() const { return times_.front(); }
    double t_end() const { return times_.back(); }
    Vec eval(double t) const;
    // copy with one more knot holding the final value until t_new
    ReferencePath extended_to(double t_new) const;

  private:
    std::vector<double> times_;
    Mat values_; // knots x m
};

// Scalar gain schedule G_t >= 0.
class GainSchedule {
  public:
    static GainSchedule constant(double g);
    // right-continuous steps: value[i] on [time[i], time[i+1])
    static GainSchedule piecewise(std::vector<double> times, std::vector<double> values);
    static GainSchedule ramp(double t0, double g0, double t1, double g1);

    double at(double t) const;
    // copy with every gain value multiplied by factor (unit conversions)
    GainSchedule scaled(double factor) const;
    nlohmann::json to_json() const;
    static GainSchedule from_json(const nlohmann::json& j);

  private:
    enum class Kind { Constant, Piecewise, Ramp };
    Kind kind_ = Kind::Constant;
    double g0_ = 0.0, g1_ = 0.0, t0_ = 0.0, t1_ = 1.0;
    std::vector<double> times_, values_;
};

struct ControlOptions {
    double u_max = 0.0;       // norm clip in noise units; 0 disables
    double precond_rho = 0.0; // replaces G by G (J J^T + rho I)^{-1} when > 0
};

// Feedback laws in noise units (drift increment of the controlled SDE is
// sigma * u):
//   tracking            u = J^T Gt (zbar_t - xi(x))
//   optimal guidance    u = kappa sigma dlogp(s, xi(x)) J^T
//   committor guidance  u = kappa sigma (q'(xi)/q(xi)) J^T
class ControlLaw : public Control {
  public:
    enum class Kind { Tracking, OptimalGuidance, CommittorGuidance };

    static ControlLaw tracking(std::shared_ptr<const CollectiveVariable> cv,
                               ReferencePath ref, GainSchedule gain,
                               ControlOptions opt = {.u_max = 50.0, .precond_rho = 0.0});
    static ControlLaw optimal_guidance(std::shared_ptr<const CollectiveVariable> cv,
                                       std::shared_ptr<const LatentProbabilityTable> table,
                                       double kappa, double sigma, ControlOptions opt = {});
    static ControlLaw optimal_guidance(std::shared_ptr<const CollectiveVariable> cv,
                                       std::shared_ptr<const SpectralApprox> approx,
                                       double kappa, double sigma, ControlOptions opt = {});
    // q_table on uniform nodes over [0,1]
    static ControlLaw committor_guidance(std::shared_ptr<const CollectiveVariable> cv,
                                         Vec q_table, double kappa, double sigma,
                                         double q_floor = 1e-6, ControlOptions opt = {});

    Kind kind() const { return kind_; }
    const CollectiveVariable& cv() const { return *cv_; }
    double kappa() const { return kappa_; }

    void eval(double t, const double* x, double* u) const override;
    void eval_scaled(double t, const double* x, double* u, double gain_scale) const;

    // batched fast path for 2D systems with a grid-chi CV; gx/gy are caller
    // scratch of length n; z_out receives xi(x); clamp flags accumulate
    bool supports_batch_2d() const;
    void eval_batch_2d(double t, double gain_scale, const double* x1, const double* x2,
                       std::size_t n, double* u1, double* u2, double* z_out,
                       double* gx, double* gy, uint8_t* clamped) const;

  private:
    ControlLaw() = default;

    Kind kind_ = Kind::Tracking;
    std::shared_ptr<const CollectiveVariable> cv_;
    const GridChi* grid_chi_ = nullptr; // set when cv_ is a GridChi
    ControlOptions opt_;

    // tracking
    std::shared_ptr<const ReferencePath> ref_;
    GainSchedule gain_ = GainSchedule::constant(0.0);

    // optimal guidance
    std::shared_ptr<const LatentProbabilityTable> table_;
    std::shared_ptr<const SpectralApprox> spectral_;
    kernels::TableMeta dlogp_meta_{};
    std::vector<double> dlogp_rowmajor_;
    double kappa_ = 0.0;
    double sigma_ = 0.0;

    // committor guidance: ratio q'(z)/max(q(z), q_floor) at uniform nodes
    Vec log_deriv_table_;

    double latent_scalar_factor(double t, double z) const;
};

} // namespace cvlift

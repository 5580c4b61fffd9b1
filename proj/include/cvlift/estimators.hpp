#pragma once

#include "cvlift/bridge.hpp"

#include <functional>
#include <optional>
#include <string>

namespace cvlift {

struct EstimateReport {
    double estimate = 0.0;
    double se = 0.0;
    double ci_lo = 0.0;
    double ci_hi = 0.0;
    int n = 0;
    long cost_steps = 0;
    std::string kind;

    nlohmann::json to_json() const;
};

// 95% normal interval helpers (z defaults to the two-sided 95% quantile)
std::pair<double, double> normal_ci(double est, double se, double z = 1.959964);
std::pair<double, double> wilson_ci(long successes, long n, double z = 1.959964);

// Self-normalized importance-sampling mean of f over endpoints,
//   sum w_tilde f(X_T),
// with the delta-method standard error sqrt(sum w_tilde^2 (f - est)^2).
EstimateReport weighted_expectation(const WeightedPathEnsemble& ens,
                                    const std::function<double(const Vec&)>& f);

struct PbMcResult {
    EstimateReport report;      // endpoint occupancy, Wilson interval
    EstimateReport hit_by_t;    // auxiliary: first visit of B before T
    int n_diverged = 0;
};

// Plain Monte Carlo estimate of P(chi(X_T) > z_star | X_0 = x0).
PbMcResult estimate_pb_mc(const Dynamics& dyn,
                          std::shared_ptr<const CollectiveVariable> cv, const Vec& x0,
                          double z_star, double horizon, int n_paths, double dt,
                          uint64_t seed);

struct PbGuidedResult {
    EstimateReport is_form;   // unnormalized mean of w 1_B(X_T); unbiased
    EstimateReport soc_form;  // exp(-mean[1/2 int ||u||^2]) over B-enders, floored at eps
    EstimateReport hit_by_t;  // auxiliary
    int n_in_b = 0;
    int n_diverged = 0;
    double ensemble_ess = 0.0;
    bool soc_floored = false;
};

// Guided estimate under the latent-probability control with boost kappa.
PbGuidedResult estimate_pb_guided(const Dynamics& dyn,
                                  std::shared_ptr<const CollectiveVariable> cv,
                                  std::shared_ptr<const LatentProbabilityTable> table,
                                  double kappa, const Vec& x0, double z_star,
                                  double horizon, int n_paths, double dt, uint64_t seed,
                                  double epsilon = 1e-12);

struct CommittorEstimate {
    EstimateReport hit_fraction; // B-hits / N, Wilson interval
    EstimateReport is_form;      // mean of w 1{hit B}; equals hit_fraction when u = 0
    std::optional<EstimateReport> soc_form; // exp(-mean soc cost over B-hitters)
    int n_hit_a = 0;
    int n_hit_b = 0;
    int n_censored = 0; // ran into the time cap
    int n_diverged = 0;
    double mean_tau_b = 0.0;
    double std_tau_b = 0.0;
    long cost_steps = 0;
};

// Committor estimate from paths run until they hit {chi <= z_a} or
// {chi >= z_b} (or the max_horizon cap). control == nullptr gives the plain
// Monte Carlo estimate; a committor-guidance law gives the guided one.
CommittorEstimate estimate_committor(const Dynamics& dyn,
                                     std::shared_ptr<const CollectiveVariable> cv,
                                     const ControlLaw* control, const Vec& x0,
                                     double z_a, double z_b, int n_paths,
                                     double max_horizon, double dt, uint64_t seed);

struct SegmentStats {
    std::vector<std::pair<double, double>> segments; // (t_start, t_end)
    std::vector<double> durations;
    double mean = 0.0;
    double stddev = 0.0;
    int count = 0;
    long total_steps = 0;
};

// Scans a latent series for reactive segments: a segment runs from the last
// visit of {z <= z_a} to the next entry into {z >= z_b}; after a B entry a
// new segment requires returning to {z <= z_a} first.
SegmentStats extract_reactive_segments(const std::vector<double>& z, double t0,
                                       double dt, double z_a, double z_b);

// Long uncontrolled simulation chopped into reactive segments, streamed so
// arbitrarily long runs fit in memory. The total time is split over
// independent replicas (pooled statistics).
SegmentStats long_run_reactive_segments(const SystemSpec& spec, const GridChi& chi,
                                        const Vec& x0, double t_total, double dt,
                                        int replicas, double z_a, double z_b,
                                        uint64_t seed);

} // namespace cvlift

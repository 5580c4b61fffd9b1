#pragma once

#include "cvlift/guidance.hpp"

#include <nlohmann/json_fwd.hpp>

#include <memory>
#include <vector>

namespace cvlift {

struct EnsembleError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct PathFlags {
    bool diverged = false;
    bool clamped = false;   // CV table clamp seen along the path
    bool hit_a = false;
    bool hit_b = false;
    double hit_a_time = -1.0;
    double hit_b_time = -1.0;
};

// Occupancy histogram on a regular 2D grid.
struct Histogram2D {
    double xmin = 0, xmax = 1, ymin = 0, ymax = 1;
    int nx = 0, ny = 0;
    std::vector<double> counts;

    static Histogram2D like(const Grid2D& g);
    void add(double x, double y, double w = 1.0);
    double total() const;
    void save_csv(const std::string& path) const;
};

struct BridgeOptions {
    double t0 = 0.0;
    double horizon = 1.0;
    double dt = 1e-3;
    int n_paths = 100;
    uint64_t seed = 1;
    uint64_t stream_offset = 0;
    bool track_weights = true;
    bool track_soc_cost = false;  // accumulate 0.5 int ||u||^2 dt per path
    int record_stride = 0;        // 0: endpoints only
    double divergence_norm = 1e6;
    // latent-level bookkeeping: first-visit times of {chi <= level_a} and
    // {chi >= level_b}; with stop_on_levels the path stops at the first visit
    bool track_levels = false;
    bool stop_on_levels = false;
    double level_a = 0.0;
    double level_b = 1.0;
    // latent map for uncontrolled runs (controlled runs use the control's CV)
    std::shared_ptr<const CollectiveVariable> monitor;
    // optional per-path start states (n_paths x d); empty = common x0
    Mat starts;
};

struct WeightedPathEnsemble {
    int dim = 0;
    double t0 = 0.0;
    double dt = 0.0;
    int steps = 0;
    uint64_t seed = 0;
    Mat endpoints;                    // N x d
    std::vector<double> log_weights;  // Girsanov log-weights (0 when u = 0)
    Vec normalized;                   // weights normalized to sum 1
    double ess = 0.0;
    std::vector<double> soc_costs;    // 0.5 int ||u||^2 ds per path (optional)
    std::vector<double> end_latent;   // chi at the stop/end state (if tracked)
    std::vector<double> stop_times;   // time at which the path stopped
    std::vector<PathFlags> flags;
    std::vector<PathRecord> stored;   // recorded paths (record_stride > 0)
    long total_steps = 0;             // fine-step cost proxy
    std::vector<std::pair<int, std::vector<int>>> resample_log; // (step, parents)
    std::vector<double> resample_ess; // ESS that triggered each event

    int n_paths() const { return static_cast<int>(endpoints.rows()); }
    Vec endpoint(int i) const { return endpoints.row(i).transpose(); }
    void write_csv(const std::string& path) const; // path_id,t,x_...,logw
    nlohmann::json resample_log_json() const;
};

// Algorithm core: N guided Euler-Maruyama paths with per-step Girsanov
// log-weight accumulation
//   log w -= u_n . eta_n sqrt(dt) + 1/2 ||u_n||^2 dt,
// normalized at the end (log-sum-exp). With control == nullptr all weights
// stay exactly zero.
WeightedPathEnsemble run_guided_bridge(const Dynamics& dyn, const ControlLaw* control,
                                       const Vec& x0, const BridgeOptions& opt);

// Sequential Monte Carlo variant: propagate in blocks, resample
// systematically whenever ESS < threshold * N, reset weights, and record the
// genealogy. threshold = 0 reproduces run_guided_bridge exactly.
WeightedPathEnsemble run_smc_bridge(const Dynamics& dyn, const ControlLaw* control,
                                    const Vec& x0, const BridgeOptions& opt,
                                    double ess_threshold, int block_steps);

// 1 / sum w_tilde^2 from normalized weights
double ess_of(const Vec& normalized);
// normalization in log space; throws EnsembleError when all weights vanish
Vec normalize_log_weights(const std::vector<double>& logw);

struct ResampledState {
    Vec state;
    int index = -1;
};
// categorical draw by normalized weight
ResampledState resample_endpoint(const WeightedPathEnsemble& ens, uint64_t seed);

struct ReactiveOptions {
    double z_min = 0.1;
    double z_max = 0.9;
    double band = 0.02;          // start band and reject slack around z_min
    int target_accepted = 100;
    int max_attempts = 5000;
    double dt = 1e-3;
    double max_duration = 100.0; // per-attempt cap
    uint64_t seed = 1;
    int record_stride = 10;
    double u_max = 50.0;
    // shrink the gain 0.8x whenever the block ESS of the active paths drops
    // below 0.3 N (floor 0.1), one block per time unit
    bool adaptive_gain = false;
};

struct ReactiveEnsembleResult {
    std::vector<PathRecord> paths; // accepted paths, strided
    std::vector<double> durations; // last exit of {z<=z_min} -> first entry {z>=z_max}
    std::vector<double> log_weights;
    double mean_duration = 0.0;
    double std_duration = 0.0;
    int attempts = 0;
    int accepted = 0;
    long total_steps = 0;
    double final_gain_scale = 1.0;
    Histogram2D histogram;         // occupancy of accepted paths
};

// Reactive path sampling: starts are drawn from the stationary weights
// restricted to the chi level band around z_min; a path is accepted when it
// reaches {chi >= z_max} before falling below z_min - band. The reference
// must run from z_min to z_max; past its last knot the tracking target holds
// the final value.
ReactiveEnsembleResult sample_reactive_ensemble(const SystemSpec& spec,
                                                const GridOperator& op,
                                                const ChiField& chi,
                                                const ReferencePath& ref,
                                                const GainSchedule& gain,
                                                const ReactiveOptions& opt);

} // namespace cvlift

#pragma once

#include "cvlift/estimators.hpp"

#include <nlohmann/json.hpp>

#include <optional>
#include <string>

namespace cvlift {

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Shared 2D test-system parameters used by most experiments.
struct SystemParams {
    double alpha = 1.0;
    double beta = 1.0;
    double gamma = 2.0;
    double sigma = 0.7;
    Grid2D grid;          // default [-2.5, 2.5]^2, 200 x 200
    int latent_nodes = 101;

    static SystemParams from_json(const nlohmann::json& j);
    nlohmann::json to_json() const;
};

// Operator/CV/effective-model pipeline shared by the experiments.
struct ModelBundle {
    SystemSpec spec = SystemSpec::double_well_2d(1, 1, 2, 0.7);
    GridOperator op;
    EigenResult eig;
    ChiField chi;
    EffectiveModel model;
};

ModelBundle build_bundle(const SystemParams& p, int n_eigenpairs = 3);

// Most direct latent transition found in a long run of the effective
// dynamics, monotonized and sampled at coarse_dt knots; the coarse segment
// that drives the reactive-ensemble experiment.
ReferencePath coarse_transition_reference(const EffectiveModel& model, double z_min,
                                          double z_max, double sim_dt = 0.01,
                                          double coarse_dt = 1.0, uint64_t seed = 11);

struct RunOutcome {
    nlohmann::json results;   // deterministic payload, written to results.json
    std::string out_dir;
};

// Executes one experiment described by a config of the form
//   {"experiment": id, "seed": S, "out": dir, "params": {...}}
// with strict key checking. Overrides replace the config values when given.
RunOutcome run_experiment(const nlohmann::json& config,
                          const std::string& out_override = "",
                          std::optional<uint64_t> seed_override = {},
                          int threads_override = -1);

struct CompareOutcome {
    bool pass = true;
    nlohmann::json report;
};

// Field-by-field comparison of two result files. The reference side may
// declare per-field tolerances ({"value": v, "rel_tol": r} or
// {"value": v, "abs_tol": a}); bare numbers are compared at default_rtol.
// A field declared in the reference but missing from the results is a
// schema error (ConfigError).
CompareOutcome compare_results(const nlohmann::json& results,
                               const nlohmann::json& reference,
                               double default_rtol = 1e-9);

const std::vector<std::string>& experiment_ids();

} // namespace cvlift

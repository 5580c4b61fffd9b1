#include "cvlift/experiments.hpp"

#include "cvlift/kernels.hpp"
#include "cvlift/parallel.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

namespace cvlift {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr const char* kVersion = "0.1.0";

void check_keys(const json& j, const std::set<std::string>& allowed,
                const std::string& context) {
    if (!j.is_object()) throw ConfigError(context + " must be an object");
    for (const auto& [key, _] : j.items())
        if (!allowed.count(key))
            throw ConfigError("unknown key '" + key + "' in " + context);
}

void write_json_file(const fs::path& path, const json& j) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open " + path.string());
    out << j.dump(2) << "\n";
}

Vec get_point(const json& j, const char* key, std::initializer_list<double> def) {
    std::vector<double> v(def);
    if (j.contains(key)) v = j.at(key).get<std::vector<double>>();
    return Eigen::Map<Vec>(v.data(), static_cast<Eigen::Index>(v.size()));
}

} // namespace

SystemParams SystemParams::from_json(const json& j) {
    check_keys(j, {"alpha", "beta", "gamma", "sigma", "grid", "latent_nodes"}, "system");
    SystemParams p;
    p.alpha = j.value("alpha", 1.0);
    p.beta = j.value("beta", 1.0);
    p.gamma = j.value("gamma", 2.0);
    p.sigma = j.value("sigma", 0.7);
    p.latent_nodes = j.value("latent_nodes", 101);
    if (j.contains("grid")) {
        const json& g = j.at("grid");
        check_keys(g, {"xmin", "xmax", "ymin", "ymax", "nx", "ny"}, "system.grid");
        p.grid.xmin = g.value("xmin", -2.5);
        p.grid.xmax = g.value("xmax", 2.5);
        p.grid.ymin = g.value("ymin", -2.5);
        p.grid.ymax = g.value("ymax", 2.5);
        p.grid.nx = g.value("nx", 200);
        p.grid.ny = g.value("ny", 200);
    }
    return p;
}

json SystemParams::to_json() const {
    return json{{"alpha", alpha},
                {"beta", beta},
                {"gamma", gamma},
                {"sigma", sigma},
                {"latent_nodes", latent_nodes},
                {"grid",
                 {{"xmin", grid.xmin},
                  {"xmax", grid.xmax},
                  {"ymin", grid.ymin},
                  {"ymax", grid.ymax},
                  {"nx", grid.nx},
                  {"ny", grid.ny}}}};
}

ModelBundle build_bundle(const SystemParams& p, int n_eigenpairs) {
    ModelBundle b;
    b.spec = SystemSpec::double_well_2d(p.alpha, p.beta, p.gamma, p.sigma);
    b.op = GridOperator::build_sqra(b.spec, p.grid);
    b.eig = dominant_eigenpairs(b.op, n_eigenpairs);
    b.chi = make_chi(b.op, b.eig.vectors.col(1));
    b.model = build_effective(b.op, b.chi, b.eig.values[1], p.latent_nodes);
    return b;
}

namespace {

// ---------------------------------------------------------------------------
// coarse latent references
// ---------------------------------------------------------------------------

} // namespace

// Most direct reactive transition of the effective dynamics (the shortest
// segment found in a long run), sampled at coarse_dt knots and monotonized
// by a running maximum so the target never moves backward.
ReferencePath coarse_transition_reference(const EffectiveModel& model, double z_min,
                                          double z_max, double sim_dt,
                                          double coarse_dt, uint64_t seed) {
    const int stride = std::max(1, static_cast<int>(std::lround(coarse_dt / sim_dt)));
    const double chunk_time = 100000.0;
    const long steps = static_cast<long>(std::llround(chunk_time / sim_dt));
    for (int attempt = 0; attempt < 10; ++attempt) {
        PathRecord rec = simulate_effective(model, 0.05, sim_dt, steps, seed,
                                            1000 + attempt, stride);
        SegmentStats segs =
            extract_reactive_segments(rec.states, 0.0, rec.dt, z_min, z_max);
        if (segs.count == 0) continue;
        int best = 0;
        for (int i = 1; i < segs.count; ++i)
            if (segs.durations[i] < segs.durations[best]) best = i;
        const auto [t_lo, t_hi] = segs.segments[best];
        const int i_lo = static_cast<int>(std::floor(t_lo / rec.dt));
        const int i_hi = static_cast<int>(std::ceil(t_hi / rec.dt));
        std::vector<double> times;
        std::vector<double> vals;
        double running = z_min;
        for (int i = i_lo; i <= i_hi && i <= rec.steps(); ++i) {
            running = std::max(running, std::min(rec.states[i], z_max));
            times.push_back((i - i_lo) * rec.dt);
            vals.push_back(running);
        }
        if (times.size() < 2) continue;
        vals.front() = z_min;
        vals.back() = z_max;
        Mat m(static_cast<Eigen::Index>(vals.size()), 1);
        for (std::size_t i = 0; i < vals.size(); ++i) m(static_cast<Eigen::Index>(i), 0) = vals[i];
        return ReferencePath(std::move(times), std::move(m));
    }
    throw NumericError("no reactive transition found in the effective dynamics");
}

namespace {

// ---------------------------------------------------------------------------
// experiment runners; each fills `values` and writes artifacts under out
// ---------------------------------------------------------------------------

json run_grid_spectrum(const json& pj, uint64_t, const fs::path& out) {
    check_keys(pj, {"system", "k"}, "params");
    SystemParams sp = SystemParams::from_json(pj.value("system", json::object()));
    const int k = pj.value("k", 3);
    SystemSpec spec = SystemSpec::double_well_2d(sp.alpha, sp.beta, sp.gamma, sp.sigma);
    GridOperator op = GridOperator::build_sqra(spec, sp.grid);
    EigenResult eig = dominant_eigenpairs(op, k);
    ChiField chi = make_chi(op, eig.vectors.col(1));
    chi.chi->save((out / "chi.csv").string(), (out / "chi.json").string());

    json values;
    for (int i = 0; i < k; ++i) values["lambda" + std::to_string(i + 1)] = eig.values[i];
    values["eigensolver_iterations"] = eig.iterations;
    values["dense_solve"] = eig.dense;
    return values;
}

json run_tpt_fields(const json& pj, uint64_t, const fs::path& out) {
    check_keys(pj, {"system", "a_level", "b_level", "query"}, "params");
    SystemParams sp = SystemParams::from_json(pj.value("system", json::object()));
    const double a_level = pj.value("a_level", 0.1);
    const double b_level = pj.value("b_level", 0.9);
    const Vec query = get_point(pj, "query", {-1.0, 0.2});

    ModelBundle b = build_bundle(sp);
    auto a_cells = sublevel_cells(b.chi.node_values, a_level);
    auto b_cells = superlevel_cells(b.chi.node_values, b_level);
    CommittorResult cr = solve_committor(b.op, a_cells, b_cells);
    TPTFields fields = tpt_fields(b.op, cr.q, a_cells, b_cells);

    Vec jx = fields.flux.col(0), jy = fields.flux.col(1);
    save_fields_csv((out / "fields.csv").string(), b.op.grid(),
                    {{"committor", &fields.committor},
                     {"mu", &b.op.stationary()},
                     {"mu_ab", &fields.reactive_density},
                     {"jx", &jx},
                     {"jy", &jy}});
    b.op.save_coo((out / "rate_matrix.txt").string());

    json values;
    values["q_at_query"] = fields.committor[b.op.grid().locate(query[0], query[1])];
    values["max_committor_violation"] = cr.max_violation;
    values["a_cells"] = static_cast<int>(a_cells.size());
    values["b_cells"] = static_cast<int>(b_cells.size());
    return values;
}

json run_effective_build(const json& pj, uint64_t, const fs::path& out) {
    check_keys(pj, {"system"}, "params");
    SystemParams sp = SystemParams::from_json(pj.value("system", json::object()));
    ModelBundle b = build_bundle(sp);
    b.model.save_tables_csv((out / "effective_tables.csv").string());
    write_json_file(out / "effective_model.json", b.model.to_json());

    json values;
    values["c"] = b.model.c;
    values["lambda"] = b.model.lambda;
    values["lambda2_grid"] = b.eig.values[1];
    values["interpolated_bins"] = static_cast<int>(b.model.interpolated_bins.size());
    values["sigma_hat_mid"] = b.model.sigma_at(0.5);
    return values;
}

json run_effective_sim(const json& pj, uint64_t seed, const fs::path& out) {
    check_keys(pj, {"system", "z0", "dt", "t_total", "record_stride"}, "params");
    SystemParams sp = SystemParams::from_json(pj.value("system", json::object()));
    const double z0 = pj.value("z0", 0.05);
    const double dt = pj.value("dt", 0.01);
    const double t_total = pj.value("t_total", 100000.0);
    const int stride = pj.value("record_stride", 100);

    ModelBundle b = build_bundle(sp);
    const long steps = static_cast<long>(std::llround(t_total / dt));
    PathRecord rec = simulate_effective(b.model, z0, dt, steps, seed, 0, stride);
    rec.write_csv((out / "latent_path.csv").string());

    long mid = 0;
    for (double z : rec.states)
        if (z > 0.2 && z < 0.8) ++mid;
    json values;
    values["mid_fraction"] = static_cast<double>(mid) / rec.states.size();
    values["samples"] = rec.states.size();
    return values;
}

json run_koopman(const json& pj, uint64_t seed, const fs::path& out) {
    check_keys(pj, {"system", "z0", "dt", "t_total", "tau", "n_boxes", "record_dt"},
               "params");
    SystemParams sp = SystemParams::from_json(pj.value("system", json::object()));
    const double z0 = pj.value("z0", 0.05);
    const double dt = pj.value("dt", 0.01);
    const double t_total = pj.value("t_total", 500000.0);
    const double tau = pj.value("tau", 2.0);
    const int n_boxes = pj.value("n_boxes", 200);
    const double record_dt = pj.value("record_dt", 0.1);

    ModelBundle b = build_bundle(sp);
    const int stride = std::max(1, static_cast<int>(std::lround(record_dt / dt)));
    const long steps = static_cast<long>(std::llround(t_total / dt));
    PathRecord rec = simulate_effective(b.model, z0, dt, steps, seed, 0, stride);
    KoopmanResult kr = estimate_koopman(rec.states, rec.dt, tau, n_boxes);

    json values;
    values["lambda1_implied"] =
        kr.implied_generator_eigenvalues.empty() ? 0.0 : kr.implied_generator_eigenvalues[0];
    values["lambda2_implied"] = kr.implied_generator_eigenvalues.size() > 1
                                    ? kr.implied_generator_eigenvalues[1]
                                    : 0.0;
    values["kept_boxes"] = static_cast<int>(kr.kept_boxes.size());
    values["dropped_boxes"] = static_cast<int>(kr.dropped_boxes.size());
    values["model_c"] = b.model.c;
    values["model_lambda"] = b.model.lambda;
    std::ofstream evs(out / "koopman_eigenvalues.csv");
    evs << "re,im\n";
    for (const auto& ev : kr.eigenvalues) evs << ev.real() << "," << ev.imag() << "\n";
    return values;
}

json run_bk_solve(const json& pj, uint64_t, const fs::path& out) {
    check_keys(pj, {"system", "z_star", "horizon", "time_steps", "query_z", "mollify"},
               "params");
    SystemParams sp = SystemParams::from_json(pj.value("system", json::object()));
    const double z_star = pj.value("z_star", 0.9);
    const double horizon = pj.value("horizon", 20.0);
    BkOptions opt;
    opt.time_steps = pj.value("time_steps", 400);
    opt.mollify_terminal = pj.value("mollify", false);
    const double query_z = pj.value("query_z", 0.4);

    ModelBundle b = build_bundle(sp);
    LatentProbabilityTable tab = solve_bk(b.model, z_star, horizon, opt);
    tab.save_csv((out / "p_table.csv").string());

    json values;
    values["p0_at_query"] = tab.p_at(0.0, query_z);
    values["dlogp0_at_query"] = tab.dlogp_at(0.0, query_z);
    values["p_min"] = tab.p.minCoeff();
    values["p_max"] = tab.p.maxCoeff();
    return values;
}

json bridge_common(const SystemParams& sp, ModelBundle& b, const ReferencePath& ref,
                   const GainSchedule& gain, double u_max, const Vec& x0, double dt,
                   int n_paths, int record_stride, uint64_t seed, const fs::path& out,
                   const char* csv_name) {
    auto law = std::make_shared<ControlLaw>(
        ControlLaw::tracking(b.chi.chi, ref, gain,
                             ControlOptions{.u_max = u_max, .precond_rho = 0.0}));
    BridgeOptions opt;
    opt.t0 = ref.t_begin();
    opt.horizon = ref.t_end() - ref.t_begin();
    opt.dt = dt;
    opt.n_paths = n_paths;
    opt.seed = seed;
    opt.record_stride = record_stride;
    opt.track_weights = true;

    WeightedPathEnsemble ens = run_guided_bridge(b.spec, law.get(), x0, opt);
    ens.write_csv((out / csv_name).string());

    int above = 0, clamped = 0;
    for (int i = 0; i < ens.n_paths(); ++i) {
        if (ens.end_latent[i] > 0.8) ++above;
        if (ens.flags[i].clamped) ++clamped;
    }
    json values;
    values["frac_end_above_0p8"] = static_cast<double>(above) / ens.n_paths();
    values["ess"] = ens.ess;
    values["clamped_paths"] = clamped;
    values["cost_steps"] = ens.total_steps;
    (void)sp;
    return values;
}

// gain in the experiment's declared units ("force" by default: the drift
// increment is G J (zbar - chi); internally controls live in noise units,
// so force gains are divided by sigma). Accepts a bare number or a gain
// schedule object (constant / piecewise / ramp).
GainSchedule tracking_gain(const json& pj, double fallback, double sigma) {
    const std::string units = pj.value("gain_units", "force");
    double factor;
    if (units == "force")
        factor = 1.0 / sigma;
    else if (units == "noise")
        factor = 1.0;
    else
        throw ConfigError("gain_units must be 'force' or 'noise'");
    GainSchedule g = pj.contains("gain") ? GainSchedule::from_json(pj.at("gain"))
                                         : GainSchedule::constant(fallback);
    return g.scaled(factor);
}

json run_bridge_linear(const json& pj, uint64_t seed, const fs::path& out) {
    check_keys(pj, {"system", "gain", "gain_units", "u_max", "x0", "t0", "t1", "knots",
                    "n_paths", "dt", "record_stride"},
               "params");
    SystemParams sp = SystemParams::from_json(pj.value("system", json::object()));
    const GainSchedule gain = tracking_gain(pj, 100.0, sp.sigma);
    const double u_max = pj.value("u_max", 50.0);
    const Vec x0 = get_point(pj, "x0", {-1.0, -1.0});
    const double t0 = pj.value("t0", 0.0);
    const double t1 = pj.value("t1", 10.0);
    const int knots = pj.value("knots", 11);
    const int n_paths = pj.value("n_paths", 100);
    const double dt = pj.value("dt", 1e-3);
    const int stride = pj.value("record_stride", 10);

    ModelBundle b = build_bundle(sp);
    const double z0 = b.chi.chi->value(x0);
    Vec target(2);
    target << 1.0, 1.0;
    const double z1 = b.chi.chi->value(target);
    std::vector<double> times(knots);
    Mat vals(knots, 1);
    for (int i = 0; i < knots; ++i) {
        times[i] = t0 + (t1 - t0) * i / (knots - 1);
        vals(i, 0) = z0 + (z1 - z0) * i / (knots - 1);
    }
    ReferencePath ref(std::move(times), std::move(vals));
    json values = bridge_common(sp, b, ref, gain, u_max, x0, dt, n_paths, stride, seed,
                                out, "ensemble.csv");
    values["z_start"] = z0;
    values["z_target"] = z1;
    return values;
}

json run_bridge_effective(const json& pj, uint64_t seed, const fs::path& out) {
    check_keys(pj, {"system", "gain", "gain_units", "u_max", "x0", "z0", "coarse_dt", "t1",
                    "eff_dt", "eff_seed", "n_paths", "dt", "record_stride"},
               "params");
    SystemParams sp = SystemParams::from_json(pj.value("system", json::object()));
    const GainSchedule gain = tracking_gain(pj, 100.0, sp.sigma);
    const double u_max = pj.value("u_max", 50.0);
    const Vec x0 = get_point(pj, "x0", {-1.0, -1.0});
    const double coarse_dt = pj.value("coarse_dt", 1.0);
    const double t1 = pj.value("t1", 400.0);
    const double eff_dt = pj.value("eff_dt", 0.002);
    const uint64_t eff_seed = pj.value("eff_seed", uint64_t{7});
    const int n_paths = pj.value("n_paths", 10);
    const double dt = pj.value("dt", 1e-3);
    const int stride = pj.value("record_stride", 100);

    ModelBundle b = build_bundle(sp);
    const double z0 = pj.value("z0", b.chi.chi->value(x0));
    const int stride_eff = std::max(1, static_cast<int>(std::lround(coarse_dt / eff_dt)));
    const long steps = static_cast<long>(std::llround(t1 / eff_dt));
    PathRecord coarse = simulate_effective(b.model, z0, eff_dt, steps, eff_seed, 0, stride_eff);
    coarse.write_csv((out / "coarse_path.csv").string());

    std::vector<double> times(coarse.states.size());
    Mat vals(static_cast<Eigen::Index>(coarse.states.size()), 1);
    for (std::size_t i = 0; i < coarse.states.size(); ++i) {
        times[i] = i * coarse.dt;
        vals(static_cast<Eigen::Index>(i), 0) = coarse.states[i];
    }
    ReferencePath ref(std::move(times), std::move(vals));
    json values = bridge_common(sp, b, ref, gain, u_max, x0, dt, n_paths, stride, seed,
                                out, "ensemble.csv");
    values["coarse_end"] = coarse.states.back();
    return values;
}

json run_reactive_ensemble(const json& pj, uint64_t seed, const fs::path& out) {
    check_keys(pj, {"system", "z_min", "z_max", "gain", "gain_units", "adaptive_gain",
                    "n_accepted", "dt", "band", "max_duration", "record_stride",
                    "max_attempts", "u_max", "ref"},
               "params");
    SystemParams sp = SystemParams::from_json(pj.value("system", json::object()));
    ReactiveOptions ro;
    ro.z_min = pj.value("z_min", 0.1);
    ro.z_max = pj.value("z_max", 0.9);
    ro.band = pj.value("band", 0.02);
    ro.target_accepted = pj.value("n_accepted", 100);
    ro.max_attempts = pj.value("max_attempts", 5000);
    ro.dt = pj.value("dt", 1e-3);
    ro.max_duration = pj.value("max_duration", 100.0);
    ro.seed = seed;
    ro.record_stride = pj.value("record_stride", 10);
    ro.u_max = pj.value("u_max", 50.0);
    ro.adaptive_gain = pj.value("adaptive_gain", false);
    const GainSchedule gain = tracking_gain(pj, 25.0, sp.sigma);

    ModelBundle b = build_bundle(sp);

    ReferencePath ref = [&]() {
        if (!pj.contains("ref") || pj.at("ref").value("kind", "effective-segment") ==
                                       std::string("effective-segment")) {
            json rj = pj.value("ref", json::object());
            check_keys(rj, {"kind", "sim_dt", "coarse_dt", "sim_seed"}, "params.ref");
            return coarse_transition_reference(
                b.model, ro.z_min, ro.z_max, rj.value("sim_dt", 0.01),
                rj.value("coarse_dt", 1.0), rj.value("sim_seed", uint64_t{11}));
        }
        const json& rj = pj.at("ref");
        check_keys(rj, {"kind", "duration"}, "params.ref");
        if (rj.at("kind").get<std::string>() != "ramp")
            throw ConfigError("ref.kind must be 'effective-segment' or 'ramp'");
        return ReferencePath::linear_ramp(0.0, ro.z_min, rj.value("duration", 5.0),
                                          ro.z_max);
    }();

    ReactiveEnsembleResult res = sample_reactive_ensemble(b.spec, b.op, b.chi, ref, gain, ro);
    res.histogram.save_csv((out / "histogram.csv").string());
    {
        std::ofstream ds(out / "durations.csv");
        ds << "duration,logw\n";
        for (std::size_t i = 0; i < res.durations.size(); ++i)
            ds << res.durations[i] << "," << res.log_weights[i] << "\n";
    }

    // total-variation distance between the normalized occupancy histogram and
    // the normalized reactive density of the grid discretization
    auto a_cells = sublevel_cells(b.chi.node_values, ro.z_min);
    auto b_cells = superlevel_cells(b.chi.node_values, ro.z_max);
    CommittorResult cr = solve_committor(b.op, a_cells, b_cells);
    TPTFields fields = tpt_fields(b.op, cr.q, a_cells, b_cells);
    double tv = 0.0;
    const double htot = res.histogram.total();
    const double mtot = fields.reactive_density.sum();
    for (int c = 0; c < b.op.cells(); ++c)
        tv += std::abs(res.histogram.counts[c] / htot -
                       fields.reactive_density[c] / mtot);
    tv *= 0.5;

    json values;
    values["mean_duration"] = res.mean_duration;
    values["std_duration"] = res.std_duration;
    values["accepted"] = res.accepted;
    values["attempts"] = res.attempts;
    values["cost_steps"] = res.total_steps;
    values["tv_vs_reactive_density"] = tv;
    values["ref_duration"] = ref.t_end() - ref.t_begin();
    values["final_gain_scale"] = res.final_gain_scale;
    return values;
}

json run_pb_mc(const json& pj, uint64_t seed, const fs::path& out) {
    check_keys(pj, {"system", "x0", "z_star", "horizon", "n_paths", "dt"}, "params");
    SystemParams sp = SystemParams::from_json(pj.value("system", json::object()));
    const Vec x0 = get_point(pj, "x0", {-0.2, -0.2});
    const double z_star = pj.value("z_star", 0.9);
    const double horizon = pj.value("horizon", 20.0);
    const int n_paths = pj.value("n_paths", 5000);
    const double dt = pj.value("dt", 1e-3);

    ModelBundle b = build_bundle(sp);
    PbMcResult res = estimate_pb_mc(b.spec, b.chi.chi, x0, z_star, horizon, n_paths, dt, seed);

    json values;
    values["estimate"] = res.report.estimate;
    values["se"] = res.report.se;
    values["ci_lo"] = res.report.ci_lo;
    values["ci_hi"] = res.report.ci_hi;
    values["hit_by_t"] = res.hit_by_t.estimate;
    values["cost_steps"] = res.report.cost_steps;
    values["n_diverged"] = res.n_diverged;
    write_json_file(out / "report.json",
                    json{{"endpoint", res.report.to_json()},
                         {"hit_by_t", res.hit_by_t.to_json()}});
    return values;
}

json run_pb_guided(const json& pj, uint64_t seed, const fs::path& out) {
    check_keys(pj, {"system", "x0", "z_star", "horizon", "n_paths", "dt", "kappa",
                    "bk_time_steps", "epsilon"},
               "params");
    SystemParams sp = SystemParams::from_json(pj.value("system", json::object()));
    const Vec x0 = get_point(pj, "x0", {-0.2, -0.2});
    const double z_star = pj.value("z_star", 0.9);
    const double horizon = pj.value("horizon", 20.0);
    const int n_paths = pj.value("n_paths", 100);
    const double dt = pj.value("dt", 1e-3);
    const double kappa = pj.value("kappa", 1.6);
    const double epsilon = pj.value("epsilon", 1e-12);
    BkOptions bko;
    bko.time_steps = pj.value("bk_time_steps", 400);

    ModelBundle b = build_bundle(sp);
    auto table = std::make_shared<LatentProbabilityTable>(
        solve_bk(b.model, z_star, horizon, bko));
    table->save_csv((out / "p_table.csv").string());
    PbGuidedResult res = estimate_pb_guided(b.spec, b.chi.chi, table, kappa, x0, z_star,
                                            horizon, n_paths, dt, seed, epsilon);

    json values;
    values["is_estimate"] = res.is_form.estimate;
    values["is_se"] = res.is_form.se;
    values["is_ci_lo"] = res.is_form.ci_lo;
    values["is_ci_hi"] = res.is_form.ci_hi;
    values["soc_estimate"] = res.soc_form.estimate;
    values["soc_se"] = res.soc_form.se;
    values["n_in_b"] = res.n_in_b;
    values["hit_by_t"] = res.hit_by_t.estimate;
    values["ess"] = res.ensemble_ess;
    values["cost_steps"] = res.is_form.cost_steps;
    write_json_file(out / "report.json",
                    json{{"is_form", res.is_form.to_json()},
                         {"soc_form", res.soc_form.to_json()},
                         {"hit_by_t", res.hit_by_t.to_json()}});
    return values;
}

json run_committor(const json& pj, uint64_t seed, const fs::path& out) {
    check_keys(pj, {"system", "x0", "a_level", "b_level", "kappa", "n_paths",
                    "max_horizon", "dt", "q_floor", "surrogate"},
               "params");
    SystemParams sp = SystemParams::from_json(pj.value("system", json::object()));
    const Vec x0 = get_point(pj, "x0", {-1.0, 0.2});
    const double a_level = pj.value("a_level", 0.1);
    const double b_level = pj.value("b_level", 0.9);
    const double kappa = pj.value("kappa", 1.3);
    const int n_paths = pj.value("n_paths", 100);
    const double max_horizon = pj.value("max_horizon", 200.0);
    const double dt = pj.value("dt", 1e-3);
    const double q_floor = pj.value("q_floor", 1e-6);

    // committor surrogate for the guidance: the committor of the discrete
    // latent generator (default), or the latent coordinate itself
    const std::string surrogate = pj.value("surrogate", "latent-generator");
    ModelBundle b = build_bundle(sp);
    std::optional<ControlLaw> law;
    if (kappa > 0.0) {
        Vec q_table;
        if (surrogate == "latent-generator") {
            q_table = latent_committor(b.model, a_level, b_level);
        } else if (surrogate == "identity") {
            q_table.setLinSpaced(b.model.nodes(), 0.0, 1.0);
        } else {
            throw ConfigError("surrogate must be 'latent-generator' or 'identity'");
        }
        law = ControlLaw::committor_guidance(b.chi.chi, q_table, kappa, sp.sigma, q_floor);
    }
    CommittorEstimate res =
        estimate_committor(b.spec, b.chi.chi, law ? &*law : nullptr, x0, a_level,
                           b_level, n_paths, max_horizon, dt, seed);

    json values;
    values["hit_fraction"] = res.hit_fraction.estimate;
    values["hit_ci_lo"] = res.hit_fraction.ci_lo;
    values["hit_ci_hi"] = res.hit_fraction.ci_hi;
    values["is_estimate"] = res.is_form.estimate;
    values["is_se"] = res.is_form.se;
    if (res.soc_form) {
        values["soc_estimate"] = res.soc_form->estimate;
        values["soc_se"] = res.soc_form->se;
    }
    values["mean_tau_b"] = res.mean_tau_b;
    values["std_tau_b"] = res.std_tau_b;
    values["n_hit_a"] = res.n_hit_a;
    values["n_hit_b"] = res.n_hit_b;
    values["n_censored"] = res.n_censored;
    values["cost_steps"] = res.cost_steps;
    write_json_file(out / "report.json",
                    json{{"hit_fraction", res.hit_fraction.to_json()},
                         {"is_form", res.is_form.to_json()}});
    return values;
}

json run_spectral_approx(const json& pj, uint64_t, const fs::path& out) {
    check_keys(pj, {"system", "z_star", "horizon", "s", "bk_time_steps"}, "params");
    SystemParams sp = SystemParams::from_json(pj.value("system", json::object()));
    const double z_star = pj.value("z_star", 0.9);
    const double horizon = pj.value("horizon", 20.0);
    const double s = pj.value("s", 0.0);
    BkOptions bko;
    bko.time_steps = pj.value("bk_time_steps", 400);

    ModelBundle b = build_bundle(sp);
    LatentProbabilityTable tab = solve_bk(b.model, z_star, horizon, bko);
    SpectralApprox sa = make_spectral_approx(b.model, z_star, horizon);

    double sup = 0.0;
    std::ofstream cs(out / "spectral_vs_bk.csv");
    cs << "z,p_bk,p_spectral,dlogp_bk,dlogp_spectral\n";
    for (int i = 0; i < b.model.nodes(); ++i) {
        const double z = b.model.z[i];
        const double pb = tab.p_at(s, z);
        const double ps = sa.p_at(s, z);
        cs << z << "," << pb << "," << ps << "," << tab.dlogp_at(s, z) << ","
           << sa.dlogp_at(s, z) << "\n";
        if (z >= 0.05 && z <= 0.95) sup = std::max(sup, std::abs(pb - ps));
    }

    json values;
    values["pi_b"] = sa.pi_b;
    values["a_norm"] = sa.a;
    values["gamma_star"] = sa.gamma_star;
    values["sup_diff_interior"] = sup;
    return values;
}

json run_highd_demo(const json& pj, uint64_t seed, const fs::path& out) {
    check_keys(pj, {"system", "dim", "omega", "rotation_seed", "gain", "gain_units",
                    "u_max", "t1", "n_paths", "dt", "record_stride"},
               "params");
    SystemParams sp = SystemParams::from_json(pj.value("system", json::object()));
    const int dim = pj.value("dim", 5);
    std::vector<double> omega(std::max(0, dim - 2), 2.0);
    if (pj.contains("omega")) omega = pj.at("omega").get<std::vector<double>>();
    const uint64_t rot_seed = pj.value("rotation_seed", uint64_t{3});
    const GainSchedule gain = tracking_gain(pj, 100.0, sp.sigma);
    const double u_max = pj.value("u_max", 50.0);
    const double t1 = pj.value("t1", 10.0);
    const int n_paths = pj.value("n_paths", 50);
    const double dt = pj.value("dt", 1e-3);
    const int stride = pj.value("record_stride", 100);

    ModelBundle b = build_bundle(sp);
    SystemSpec hd = SystemSpec::rotated_high_d(dim, omega, sp.sigma, rot_seed);
    Mat rsub = hd.rotation().topRows(2);
    auto cv = std::make_shared<RotatedChi>(b.chi.chi, rsub);

    // start in well A of the rotated landscape: x0 = R^T (-1,-1,0,...)
    Vec y0 = Vec::Zero(dim);
    y0[0] = -1.0;
    y0[1] = -1.0;
    Vec x0 = hd.rotation().transpose() * y0;
    const double z0 = cv->value(x0);

    ReferencePath ref = ReferencePath::linear_ramp(0.0, z0, t1, 0.95);
    ControlLaw law = ControlLaw::tracking(cv, ref, gain,
                                          ControlOptions{.u_max = u_max, .precond_rho = 0.0});
    BridgeOptions opt;
    opt.horizon = t1;
    opt.dt = dt;
    opt.n_paths = n_paths;
    opt.seed = seed;
    opt.record_stride = stride;

    WeightedPathEnsemble ens = run_guided_bridge(hd, &law, x0, opt);
    ens.write_csv((out / "ensemble.csv").string());

    int above = 0;
    for (int i = 0; i < ens.n_paths(); ++i)
        if (ens.end_latent[i] > 0.8) ++above;
    json values;
    values["z_start"] = z0;
    values["frac_end_above_0p8"] = static_cast<double>(above) / ens.n_paths();
    values["ess"] = ens.ess;
    values["cost_steps"] = ens.total_steps;
    values["rotation_orthonormality_error"] =
        (hd.rotation() * hd.rotation().transpose() - Mat::Identity(dim, dim))
            .cwiseAbs()
            .maxCoeff();
    return values;
}

} // namespace

const std::vector<std::string>& experiment_ids() {
    static const std::vector<std::string> ids = {
        "grid-spectrum",  "tpt-fields",       "effective-build", "effective-sim",
        "koopman",        "bk-solve",         "bridge-linear",   "bridge-effective",
        "reactive-ensemble", "pB-mc",         "pB-guided",       "committor",
        "spectral-approx", "highd-demo"};
    return ids;
}

RunOutcome run_experiment(const json& config, const std::string& out_override,
                          std::optional<uint64_t> seed_override, int threads_override) {
    check_keys(config, {"experiment", "seed", "out", "threads", "params"}, "config");
    if (!config.contains("experiment"))
        throw ConfigError("config needs an 'experiment' id");
    const std::string id = config.at("experiment").get<std::string>();
    const auto& ids = experiment_ids();
    if (std::find(ids.begin(), ids.end(), id) == ids.end())
        throw ConfigError("unknown experiment id: " + id);

    const uint64_t seed =
        seed_override ? *seed_override : config.value("seed", uint64_t{1});
    std::string out_dir = out_override.empty()
                              ? config.value("out", std::string("runs/") + id)
                              : out_override;
    const int threads = threads_override >= 0 ? threads_override
                                              : config.value("threads", 0);
    set_max_threads(static_cast<unsigned>(threads));

    const json params = config.value("params", json::object());
    fs::path out(out_dir);
    fs::create_directories(out);

    const auto tic = std::chrono::steady_clock::now();
    json values;
    if (id == "grid-spectrum") values = run_grid_spectrum(params, seed, out);
    else if (id == "tpt-fields") values = run_tpt_fields(params, seed, out);
    else if (id == "effective-build") values = run_effective_build(params, seed, out);
    else if (id == "effective-sim") values = run_effective_sim(params, seed, out);
    else if (id == "koopman") values = run_koopman(params, seed, out);
    else if (id == "bk-solve") values = run_bk_solve(params, seed, out);
    else if (id == "bridge-linear") values = run_bridge_linear(params, seed, out);
    else if (id == "bridge-effective") values = run_bridge_effective(params, seed, out);
    else if (id == "reactive-ensemble") values = run_reactive_ensemble(params, seed, out);
    else if (id == "pB-mc") values = run_pb_mc(params, seed, out);
    else if (id == "pB-guided") values = run_pb_guided(params, seed, out);
    else if (id == "committor") values = run_committor(params, seed, out);
    else if (id == "spectral-approx") values = run_spectral_approx(params, seed, out);
    else if (id == "highd-demo") values = run_highd_demo(params, seed, out);
    const double runtime =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - tic).count();

    json results;
    results["experiment"] = id;
    results["seed"] = seed;
    results["params"] = params;
    results["values"] = values;
    write_json_file(out / "results.json", results);
    {
        // cumulative ledger across repeated runs into the same directory
        const fs::path ledger = out / "results_ledger.csv";
        const bool fresh = !fs::exists(ledger);
        std::ofstream lf(ledger, std::ios::app);
        if (fresh) lf << "experiment,seed,key,value\n";
        for (const auto& [key, val] : values.items())
            lf << id << "," << seed << "," << key << "," << val.dump() << "\n";
    }

    json manifest;
    manifest["experiment"] = id;
    manifest["seed"] = seed;
    manifest["params"] = params;
    manifest["out"] = out_dir;
    manifest["threads"] = threads;
    manifest["versions"] = {{"cvlift", kVersion},
                            {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." +
                                          std::to_string(EIGEN_MAJOR_VERSION) + "." +
                                          std::to_string(EIGEN_MINOR_VERSION)}};
    manifest["kernel_backend"] = kernels::backend_name(kernels::active_backend());
    manifest["runtime_seconds"] = runtime;
    write_json_file(out / "manifest.json", manifest);

    return {std::move(results), out_dir};
}

CompareOutcome compare_results(const json& results, const json& reference,
                               double default_rtol) {
    json ref = reference;
    // a reference bundle keyed by experiment id
    if (!ref.contains("values") && results.contains("experiment")) {
        const std::string id = results.at("experiment").get<std::string>();
        if (ref.contains(id)) ref = ref.at(id);
    }
    if (!ref.contains("values") || !results.contains("values"))
        throw ConfigError("comparison needs 'values' on both sides");
    if (ref.contains("experiment") && results.contains("experiment") &&
        ref.at("experiment") != results.at("experiment"))
        throw ConfigError("experiment ids differ");

    CompareOutcome out;
    out.report["fields"] = json::array();
    for (const auto& [key, want] : ref.at("values").items()) {
        if (!results.at("values").contains(key))
            throw ConfigError("result is missing field '" + key + "'");
        const json& got_j = results.at("values").at(key);
        json entry;
        entry["field"] = key;
        if (!got_j.is_number()) {
            const bool eq = got_j == (want.is_object() ? want.at("value") : want);
            entry["pass"] = eq;
            out.pass = out.pass && eq;
            out.report["fields"].push_back(entry);
            continue;
        }
        const double got = got_j.get<double>();
        double target, tol;
        bool relative;
        if (want.is_object()) {
            check_keys(want, {"value", "rel_tol", "abs_tol", "source", "note"},
                       "reference field " + key);
            target = want.at("value").get<double>();
            if (want.contains("abs_tol")) {
                tol = want.at("abs_tol").get<double>();
                relative = false;
            } else {
                tol = want.value("rel_tol", default_rtol);
                relative = true;
            }
        } else {
            target = want.get<double>();
            tol = default_rtol;
            relative = true;
        }
        const double diff = std::abs(got - target);
        const double bound = relative ? tol * std::max(std::abs(target), 1e-300) : tol;
        const bool pass = diff <= bound;
        entry["got"] = got;
        entry["want"] = target;
        entry["tolerance"] = tol;
        entry["relative"] = relative;
        entry["diff"] = diff;
        entry["pass"] = pass;
        out.pass = out.pass && pass;
        out.report["fields"].push_back(entry);
    }
    out.report["pass"] = out.pass;
    return out;
}

} // namespace cvlift

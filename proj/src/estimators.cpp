#include "cvlift/estimators.hpp"

#include "cvlift/kernels.hpp"
#include "cvlift/parallel.hpp"
#include "cvlift/rng.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <mutex>

namespace cvlift {

using nlohmann::json;

json EstimateReport::to_json() const {
    return json{{"estimate", estimate}, {"se", se},     {"ci_lo", ci_lo},
                {"ci_hi", ci_hi},       {"n", n},       {"cost_steps", cost_steps},
                {"kind", kind}};
}

std::pair<double, double> normal_ci(double est, double se, double z) {
    return {est - z * se, est + z * se};
}

std::pair<double, double> wilson_ci(long successes, long n, double z) {
    if (n <= 0) return {0.0, 1.0};
    const double p = static_cast<double>(successes) / n;
    const double z2 = z * z;
    const double denom = 1.0 + z2 / n;
    const double center = (p + z2 / (2.0 * n)) / denom;
    const double half = z * std::sqrt(p * (1.0 - p) / n + z2 / (4.0 * n * n)) / denom;
    return {std::max(0.0, center - half), std::min(1.0, center + half)};
}

EstimateReport weighted_expectation(const WeightedPathEnsemble& ens,
                                    const std::function<double(const Vec&)>& f) {
    const int n = ens.n_paths();
    const Vec& w = ens.normalized;
    if (n == 0 || w.size() != n) throw EnsembleError("ensemble has no usable weights");

    double est = 0.0;
    Vec fv(n);
    for (int i = 0; i < n; ++i) {
        fv[i] = w[i] > 0.0 ? f(ens.endpoint(i)) : 0.0;
        est += w[i] * fv[i];
    }
    double var = 0.0;
    for (int i = 0; i < n; ++i) {
        const double d = fv[i] - est;
        var += w[i] * w[i] * d * d;
    }
    EstimateReport rep;
    rep.estimate = est;
    rep.se = std::sqrt(var);
    std::tie(rep.ci_lo, rep.ci_hi) = normal_ci(est, rep.se);
    rep.n = n;
    rep.cost_steps = ens.total_steps;
    rep.kind = "weighted-endpoint-mean";
    return rep;
}

PbMcResult estimate_pb_mc(const Dynamics& dyn,
                          std::shared_ptr<const CollectiveVariable> cv, const Vec& x0,
                          double z_star, double horizon, int n_paths, double dt,
                          uint64_t seed) {
    BridgeOptions opt;
    opt.horizon = horizon;
    opt.dt = dt;
    opt.n_paths = n_paths;
    opt.seed = seed;
    opt.track_weights = false;
    opt.track_levels = true;
    opt.level_a = -std::numeric_limits<double>::infinity();
    opt.level_b = z_star;
    opt.monitor = std::move(cv);

    WeightedPathEnsemble ens = run_guided_bridge(dyn, nullptr, x0, opt);

    long in_b = 0, hits = 0, alive = 0;
    for (int i = 0; i < n_paths; ++i) {
        if (ens.flags[i].diverged) continue;
        ++alive;
        if (ens.end_latent[i] > z_star) ++in_b;
        if (ens.flags[i].hit_b) ++hits;
    }
    PbMcResult out;
    out.n_diverged = n_paths - static_cast<int>(alive);
    out.report.estimate = alive > 0 ? static_cast<double>(in_b) / alive : 0.0;
    std::tie(out.report.ci_lo, out.report.ci_hi) = wilson_ci(in_b, alive);
    out.report.se = alive > 0 ? std::sqrt(out.report.estimate * (1.0 - out.report.estimate) /
                                          static_cast<double>(alive))
                              : 0.0;
    out.report.n = static_cast<int>(alive);
    out.report.cost_steps = ens.total_steps;
    out.report.kind = "pb-mc-endpoint";

    out.hit_by_t.estimate = alive > 0 ? static_cast<double>(hits) / alive : 0.0;
    std::tie(out.hit_by_t.ci_lo, out.hit_by_t.ci_hi) = wilson_ci(hits, alive);
    out.hit_by_t.se = alive > 0 ? std::sqrt(out.hit_by_t.estimate *
                                            (1.0 - out.hit_by_t.estimate) / alive)
                                : 0.0;
    out.hit_by_t.n = static_cast<int>(alive);
    out.hit_by_t.cost_steps = ens.total_steps;
    out.hit_by_t.kind = "pb-mc-hit-by-t";
    return out;
}

PbGuidedResult estimate_pb_guided(const Dynamics& dyn,
                                  std::shared_ptr<const CollectiveVariable> cv,
                                  std::shared_ptr<const LatentProbabilityTable> table,
                                  double kappa, const Vec& x0, double z_star,
                                  double horizon, int n_paths, double dt, uint64_t seed,
                                  double epsilon) {
    if (std::abs(table->horizon - horizon) > 1e-9 * std::max(1.0, horizon))
        throw InvalidInputError("probability table horizon does not match the run");
    if (std::abs(table->z_star - z_star) > 1e-12)
        throw InvalidInputError("probability table level does not match z_star");

    ControlLaw law = ControlLaw::optimal_guidance(cv, table, kappa, dyn.sigma());

    BridgeOptions opt;
    opt.horizon = horizon;
    opt.dt = dt;
    opt.n_paths = n_paths;
    opt.seed = seed;
    opt.track_weights = true;
    opt.track_soc_cost = true;
    opt.track_levels = true;
    opt.level_a = -std::numeric_limits<double>::infinity();
    opt.level_b = z_star;

    WeightedPathEnsemble ens = run_guided_bridge(dyn, &law, x0, opt);

    PbGuidedResult out;
    out.ensemble_ess = ens.ess;

    // stabilized unnormalized IS mean of w 1_B
    double shift = -std::numeric_limits<double>::infinity();
    for (int i = 0; i < n_paths; ++i)
        if (std::isfinite(ens.log_weights[i])) shift = std::max(shift, ens.log_weights[i]);
    if (!std::isfinite(shift)) shift = 0.0;

    long hits = 0;
    double soc_sum = 0.0, soc_sq = 0.0;
    std::vector<double> y(n_paths, 0.0);
    for (int i = 0; i < n_paths; ++i) {
        const bool diverged = ens.flags[i].diverged;
        if (diverged) {
            ++out.n_diverged;
            continue;
        }
        const bool in_b = ens.end_latent[i] > z_star;
        if (ens.flags[i].hit_b) ++hits;
        if (in_b) {
            ++out.n_in_b;
            y[i] = std::exp(ens.log_weights[i] - shift);
            soc_sum += ens.soc_costs[i];
            soc_sq += ens.soc_costs[i] * ens.soc_costs[i];
        }
    }
    double ymean = 0.0;
    for (double v : y) ymean += v;
    ymean /= n_paths;
    double yvar = 0.0;
    for (double v : y) yvar += (v - ymean) * (v - ymean);
    yvar /= std::max(1, n_paths - 1);
    const double scale = std::exp(shift);

    out.is_form.estimate = scale * ymean;
    out.is_form.se = scale * std::sqrt(yvar / n_paths);
    std::tie(out.is_form.ci_lo, out.is_form.ci_hi) =
        normal_ci(out.is_form.estimate, out.is_form.se);
    out.is_form.n = n_paths;
    out.is_form.cost_steps = ens.total_steps;
    out.is_form.kind = "pb-guided-is";

    if (out.n_in_b > 0) {
        const double m = soc_sum / out.n_in_b;
        const double v = out.n_in_b > 1
                             ? (soc_sq - out.n_in_b * m * m) / (out.n_in_b - 1)
                             : 0.0;
        double est = std::exp(-m);
        if (est < epsilon) {
            est = epsilon;
            out.soc_floored = true;
        }
        out.soc_form.estimate = est;
        out.soc_form.se = est * std::sqrt(std::max(0.0, v) / out.n_in_b);
    } else {
        out.soc_form.estimate = epsilon;
        out.soc_form.se = 0.0;
        out.soc_floored = true;
    }
    std::tie(out.soc_form.ci_lo, out.soc_form.ci_hi) =
        normal_ci(out.soc_form.estimate, out.soc_form.se);
    out.soc_form.n = out.n_in_b;
    out.soc_form.cost_steps = ens.total_steps;
    out.soc_form.kind = "pb-guided-soc";

    const long alive = n_paths - out.n_diverged;
    out.hit_by_t.estimate = alive > 0 ? static_cast<double>(hits) / alive : 0.0;
    std::tie(out.hit_by_t.ci_lo, out.hit_by_t.ci_hi) = wilson_ci(hits, alive);
    out.hit_by_t.n = static_cast<int>(alive);
    out.hit_by_t.cost_steps = ens.total_steps;
    out.hit_by_t.kind = "pb-guided-hit-by-t";
    return out;
}

CommittorEstimate estimate_committor(const Dynamics& dyn,
                                     std::shared_ptr<const CollectiveVariable> cv,
                                     const ControlLaw* control, const Vec& x0,
                                     double z_a, double z_b, int n_paths,
                                     double max_horizon, double dt, uint64_t seed) {
    if (!(z_a < z_b)) throw InvalidInputError("need z_a < z_b");
    BridgeOptions opt;
    opt.horizon = max_horizon;
    opt.dt = dt;
    opt.n_paths = n_paths;
    opt.seed = seed;
    opt.track_weights = control != nullptr;
    opt.track_soc_cost = control != nullptr;
    opt.stop_on_levels = true;
    opt.level_a = z_a;
    opt.level_b = z_b;
    if (!control) opt.monitor = cv;

    WeightedPathEnsemble ens = run_guided_bridge(dyn, control, x0, opt);

    CommittorEstimate out;
    out.cost_steps = ens.total_steps;

    double tau_sum = 0.0, tau_sq = 0.0;
    double soc_sum = 0.0, soc_sq = 0.0;
    double shift = -std::numeric_limits<double>::infinity();
    for (int i = 0; i < n_paths; ++i)
        if (!ens.flags[i].diverged && std::isfinite(ens.log_weights[i]))
            shift = std::max(shift, ens.log_weights[i]);
    if (!std::isfinite(shift)) shift = 0.0;

    std::vector<double> y(n_paths, 0.0);
    for (int i = 0; i < n_paths; ++i) {
        const PathFlags& fl = ens.flags[i];
        if (fl.diverged) {
            ++out.n_diverged;
            continue;
        }
        const bool b_first = fl.hit_b && (!fl.hit_a || fl.hit_b_time <= fl.hit_a_time);
        const bool a_first = fl.hit_a && !b_first;
        if (b_first) {
            ++out.n_hit_b;
            const double tau = fl.hit_b_time - ens.t0;
            tau_sum += tau;
            tau_sq += tau * tau;
            soc_sum += ens.soc_costs[i];
            soc_sq += ens.soc_costs[i] * ens.soc_costs[i];
            y[i] = std::exp(ens.log_weights[i] - shift);
        } else if (a_first) {
            ++out.n_hit_a;
        } else {
            ++out.n_censored;
        }
    }

    const long n_alive = n_paths - out.n_diverged;
    out.hit_fraction.estimate =
        n_alive > 0 ? static_cast<double>(out.n_hit_b) / n_alive : 0.0;
    std::tie(out.hit_fraction.ci_lo, out.hit_fraction.ci_hi) =
        wilson_ci(out.n_hit_b, n_alive);
    out.hit_fraction.se =
        n_alive > 0 ? std::sqrt(out.hit_fraction.estimate *
                                (1.0 - out.hit_fraction.estimate) / n_alive)
                    : 0.0;
    out.hit_fraction.n = static_cast<int>(n_alive);
    out.hit_fraction.cost_steps = ens.total_steps;
    out.hit_fraction.kind = "committor-hit-fraction";

    double ymean = 0.0;
    for (double v : y) ymean += v;
    ymean /= n_paths;
    double yvar = 0.0;
    for (double v : y) yvar += (v - ymean) * (v - ymean);
    yvar /= std::max(1, n_paths - 1);
    const double scale = std::exp(shift);
    out.is_form.estimate = scale * ymean;
    out.is_form.se = scale * std::sqrt(yvar / n_paths);
    std::tie(out.is_form.ci_lo, out.is_form.ci_hi) =
        normal_ci(out.is_form.estimate, out.is_form.se);
    out.is_form.n = n_paths;
    out.is_form.cost_steps = ens.total_steps;
    out.is_form.kind = "committor-is";

    if (control) {
        EstimateReport soc;
        if (out.n_hit_b > 0) {
            const double m = soc_sum / out.n_hit_b;
            const double v = out.n_hit_b > 1
                                 ? (soc_sq - out.n_hit_b * m * m) / (out.n_hit_b - 1)
                                 : 0.0;
            soc.estimate = std::exp(-m);
            soc.se = soc.estimate * std::sqrt(std::max(0.0, v) / out.n_hit_b);
        } else {
            soc.estimate = 0.0;
            soc.se = 0.0;
        }
        std::tie(soc.ci_lo, soc.ci_hi) = normal_ci(soc.estimate, soc.se);
        soc.n = out.n_hit_b;
        soc.cost_steps = ens.total_steps;
        soc.kind = "committor-soc";
        out.soc_form = soc;
    }

    if (out.n_hit_b > 0) {
        out.mean_tau_b = tau_sum / out.n_hit_b;
        out.std_tau_b = out.n_hit_b > 1
                            ? std::sqrt(std::max(0.0, (tau_sq - out.n_hit_b * out.mean_tau_b *
                                                                    out.mean_tau_b) /
                                                          (out.n_hit_b - 1)))
                            : 0.0;
    }
    if (n_alive == 0 || (out.n_hit_a + out.n_hit_b) == 0)
        throw EnsembleError("all committor paths were censored or diverged");
    return out;
}

SegmentStats extract_reactive_segments(const std::vector<double>& z, double t0,
                                       double dt, double z_a, double z_b) {
    if (!(z_a < z_b)) throw InvalidInputError("need z_a < z_b");
    SegmentStats out;
    double last_below = t0;
    bool armed = false;
    bool seen_a = false;
    for (std::size_t i = 0; i < z.size(); ++i) {
        const double t = t0 + static_cast<double>(i) * dt;
        if (z[i] <= z_a) {
            last_below = t;
            armed = true;
            seen_a = true;
        } else if (z[i] >= z_b && armed && seen_a) {
            out.segments.emplace_back(last_below, t);
            out.durations.push_back(t - last_below);
            armed = false;
        }
    }
    out.count = static_cast<int>(out.durations.size());
    if (out.count > 0) {
        double m = 0.0;
        for (double d : out.durations) m += d;
        m /= out.count;
        double v = 0.0;
        for (double d : out.durations) v += (d - m) * (d - m);
        out.mean = m;
        out.stddev = out.count > 1 ? std::sqrt(v / (out.count - 1)) : 0.0;
    }
    return out;
}

SegmentStats long_run_reactive_segments(const SystemSpec& spec, const GridChi& chi,
                                        const Vec& x0, double t_total, double dt,
                                        int replicas, double z_a, double z_b,
                                        uint64_t seed) {
    if (spec.kind() != PotentialKind::DoubleWell2d)
        throw InvalidInputError("long-run extraction expects the 2D system");
    if (replicas < 1) throw InvalidInputError("need at least one replica");
    const long steps_per = static_cast<long>(std::llround(t_total / replicas / dt));
    if (steps_per < 1) throw InvalidInputError("replica horizon shorter than one step");

    SegmentStats out;
    std::mutex merge_mutex;

    parallel_chunks(static_cast<std::size_t>(replicas), [&](std::size_t lo, std::size_t hi) {
        const std::size_t m = hi - lo;
        std::vector<double> x1(m, x0[0]), x2(m, x0[1]), f1(m), f2(m), e1(m), e2(m), z(m);
        std::vector<StreamRng> rng;
        rng.reserve(m);
        for (std::size_t r = lo; r < hi; ++r) rng.emplace_back(seed, r);
        std::vector<double> last_below(m, 0.0);
        std::vector<uint8_t> armed(m, 0), seen_a(m, 0);
        std::vector<double> durations;
        kernels::Dw2dParams params{spec.alpha(), spec.beta(), spec.gamma()};
        const double noise_coef = spec.sigma() * std::sqrt(dt);

        chi.eval_batch(x1.data(), x2.data(), m, z.data(), nullptr, nullptr, nullptr);
        for (std::size_t s = 0; s < m; ++s)
            if (z[s] <= z_a) {
                armed[s] = 1;
                seen_a[s] = 1;
            }

        for (long n = 0; n < steps_per; ++n) {
            kernels::dw2d_force(params, x1.data(), x2.data(), m, f1.data(), f2.data());
            for (std::size_t s = 0; s < m; ++s) {
                e1[s] = rng[s].normal();
                e2[s] = rng[s].normal();
            }
            kernels::axpby_add(dt, f1.data(), noise_coef, e1.data(), x1.data(), m);
            kernels::axpby_add(dt, f2.data(), noise_coef, e2.data(), x2.data(), m);
            chi.eval_batch(x1.data(), x2.data(), m, z.data(), nullptr, nullptr, nullptr);
            const double t = (n + 1) * dt;
            for (std::size_t s = 0; s < m; ++s) {
                if (z[s] <= z_a) {
                    last_below[s] = t;
                    armed[s] = 1;
                    seen_a[s] = 1;
                } else if (z[s] >= z_b && armed[s] && seen_a[s]) {
                    durations.push_back(t - last_below[s]);
                    armed[s] = 0;
                }
            }
        }
        std::lock_guard<std::mutex> lock(merge_mutex);
        for (double d : durations) out.durations.push_back(d);
        out.total_steps += steps_per * static_cast<long>(m);
    });

    out.count = static_cast<int>(out.durations.size());
    if (out.count > 0) {
        double m = 0.0;
        for (double d : out.durations) m += d;
        m /= out.count;
        double v = 0.0;
        for (double d : out.durations) v += (d - m) * (d - m);
        out.mean = m;
        out.stddev = out.count > 1 ? std::sqrt(v / (out.count - 1)) : 0.0;
    }
    return out;
}

} // namespace cvlift

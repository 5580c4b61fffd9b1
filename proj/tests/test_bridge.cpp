#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <nlohmann/json.hpp>

#include "cvlift/bridge.hpp"
#include "cvlift/kernels.hpp"
#include "cvlift/rng.hpp"

#include <cmath>

using namespace cvlift;

namespace {

Vec vec1(double a) {
    Vec v(1);
    v << a;
    return v;
}

// dX = -X dt + sigma dW
FunctionalDynamics ou(double sigma = 0.7) {
    return FunctionalDynamics(1, sigma, [](const double* x, double* out) { out[0] = -x[0]; });
}

// constant control in noise units
class ConstantControl : public Control {
  public:
    explicit ConstantControl(double c) : c_(c) {}
    void eval(double, const double*, double* u) const override { u[0] = c_; }

  private:
    double c_;
};

// ControlLaw wrapper is needed by the bridge API; emulate a constant control
// with a tracking law on a linear CV and a far-off constant reference
ControlLaw constant_law(double c, double t_end) {
    Mat a(1, 1);
    a << 1.0;
    auto cv = std::make_shared<LinearCV>(a);
    // u = G (zbar - x); pick zbar large and G small so u ~ c over the
    // visited range... not exact. Instead use gain 0 trick? A dedicated law
    // kind is overkill; tests below that need exact constants use the
    // generic Control interface through simulate_em.
    ReferencePath ref = ReferencePath::linear_ramp(0.0, c * 1e6, t_end, c * 1e6);
    return ControlLaw::tracking(cv, ref, GainSchedule::constant(1e-6),
                                ControlOptions{.u_max = 0.0, .precond_rho = 0.0});
}

} // namespace

TEST_CASE("zero control gives unit weights and full ESS") {
    FunctionalDynamics dyn = ou();
    BridgeOptions opt;
    opt.horizon = 0.5;
    opt.dt = 0.01;
    opt.n_paths = 64;
    opt.seed = 5;
    WeightedPathEnsemble ens = run_guided_bridge(dyn, nullptr, vec1(1.0), opt);
    for (double lw : ens.log_weights) CHECK(lw == 0.0);
    CHECK(ens.ess == doctest::Approx(64.0).epsilon(1e-12));
    CHECK(ens.normalized.sum() == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(ens.total_steps == 64 * 50);
}

TEST_CASE("ess of hand-built weight vectors") {
    CHECK(ess_of(Vec::Constant(100, 0.01)) == doctest::Approx(100.0));
    Vec one = Vec::Zero(5);
    one[3] = 1.0;
    CHECK(ess_of(one) == doctest::Approx(1.0));
    Vec w(3);
    w << 0.5, 0.25, 0.25;
    CHECK(ess_of(w) == doctest::Approx(1.0 / 0.375).epsilon(1e-12));

    std::vector<double> logw = {0.0, std::log(0.5), std::log(0.5)};
    Vec norm = normalize_log_weights(logw);
    CHECK(norm[0] == doctest::Approx(0.5).epsilon(1e-12));
    std::vector<double> dead(4, -std::numeric_limits<double>::infinity());
    CHECK_THROWS_AS(normalize_log_weights(dead), EnsembleError);
}

TEST_CASE("girsanov identity on the OU process") {
    // weighted mean under a constant control matches the uncontrolled mean
    const double sigma = 0.7, c0 = 0.8, T = 1.0, dt = 0.01;
    const int n = 40000, steps = static_cast<int>(T / dt);
    FunctionalDynamics dyn = ou(sigma);

    double plain_sum = 0.0, plain_sq = 0.0;
    std::vector<double> logw(n), endpoint(n);
    ConstantControl u(c0);
    for (int p = 0; p < n; ++p) {
        StreamRng rng(11, p);
        double x_plain = 1.0, x_ctrl = 1.0, lw = 0.0;
        StreamRng rng2(12, p);
        for (int k = 0; k < steps; ++k) {
            const double eta = rng.normal();
            x_plain += -x_plain * dt + sigma * std::sqrt(dt) * eta;
            const double eta2 = rng2.normal();
            x_ctrl += (-x_ctrl + sigma * c0) * dt + sigma * std::sqrt(dt) * eta2;
            lw += -c0 * eta2 * std::sqrt(dt) - 0.5 * c0 * c0 * dt;
        }
        plain_sum += x_plain;
        plain_sq += x_plain * x_plain;
        logw[p] = lw;
        endpoint[p] = x_ctrl;
    }
    const double plain_mean = plain_sum / n;
    const double plain_se =
        std::sqrt((plain_sq / n - plain_mean * plain_mean) / n);
    // unnormalized importance-sampling mean
    double wsum = 0.0, wsq = 0.0;
    for (int p = 0; p < n; ++p) {
        const double y = std::exp(logw[p]) * endpoint[p];
        wsum += y;
        wsq += y * y;
    }
    const double is_mean = wsum / n;
    const double is_se = std::sqrt((wsq / n - is_mean * is_mean) / n);
    const double se = std::sqrt(plain_se * plain_se + is_se * is_se);
    CHECK(std::abs(is_mean - plain_mean) < 3.0 * se);
}

TEST_CASE("bridge runner reproduces itself bitwise and decomposes over blocks") {
    FunctionalDynamics dyn = ou();
    ControlLaw law = constant_law(0.5, 1.0);
    BridgeOptions opt;
    opt.horizon = 1.0;
    opt.dt = 0.02;
    opt.n_paths = 32;
    opt.seed = 7;
    WeightedPathEnsemble a = run_guided_bridge(dyn, &law, vec1(0.3), opt);
    WeightedPathEnsemble b = run_guided_bridge(dyn, &law, vec1(0.3), opt);
    CHECK(a.log_weights == b.log_weights);
    CHECK(a.endpoints == b.endpoints);

    // the SMC variant with a threshold of zero is the same computation
    WeightedPathEnsemble c = run_smc_bridge(dyn, &law, vec1(0.3), opt, 0.0, 10);
    CHECK(c.resample_log.empty());
    CHECK(a.log_weights == c.log_weights);
    CHECK(a.endpoints == c.endpoints);
}

TEST_CASE("smc resamples under weight degeneracy and stays consistent") {
    const double sigma = 0.7;
    FunctionalDynamics dyn = ou(sigma);
    // strong tracking toward a far target degrades weights quickly
    Mat am(1, 1);
    am << 1.0;
    auto cv = std::make_shared<LinearCV>(am);
    ReferencePath ref = ReferencePath::linear_ramp(0.0, 4.0, 1.0, 4.0);
    ControlLaw law = ControlLaw::tracking(cv, ref, GainSchedule::constant(8.0),
                                          ControlOptions{.u_max = 0.0, .precond_rho = 0.0});
    BridgeOptions opt;
    opt.horizon = 1.0;
    opt.dt = 0.005;
    opt.n_paths = 200;
    opt.seed = 13;
    WeightedPathEnsemble ens = run_smc_bridge(dyn, &law, vec1(0.0), opt, 0.5, 20);
    CHECK(!ens.resample_log.empty());
    for (const auto& [step, parents] : ens.resample_log) {
        CHECK(step > 0);
        CHECK(static_cast<int>(parents.size()) == 200);
    }
    CHECK(ens.resample_log_json().is_array());
    CHECK(ens.normalized.sum() == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("smc weighted mean matches plain Monte Carlo on the OU process") {
    const double sigma = 0.7;
    FunctionalDynamics dyn = ou(sigma);
    ControlLaw law = constant_law(0.6, 1.0);
    BridgeOptions opt;
    opt.horizon = 1.0;
    opt.dt = 0.01;
    opt.n_paths = 20000;
    opt.seed = 3;

    // hand-build the constant control exactly through the generic interface:
    // tracking with tiny gain is close enough only approximately, so compare
    // a weighted SMC mean against an uncontrolled run of the same size
    WeightedPathEnsemble plain = run_guided_bridge(dyn, nullptr, vec1(1.0), opt);
    WeightedPathEnsemble smc = run_smc_bridge(dyn, &law, vec1(1.0), opt, 0.6, 25);
    double plain_mean = 0.0;
    for (int i = 0; i < plain.n_paths(); ++i) plain_mean += plain.endpoints(i, 0);
    plain_mean /= plain.n_paths();
    double smc_mean = 0.0;
    for (int i = 0; i < smc.n_paths(); ++i)
        smc_mean += smc.normalized[i] * smc.endpoints(i, 0);
    const double spread = sigma / std::sqrt(2.0);
    CHECK(std::abs(smc_mean - plain_mean) <
          4.0 * spread / std::sqrt(static_cast<double>(smc.ess)) +
              3.0 * spread / std::sqrt(static_cast<double>(opt.n_paths)));
}

TEST_CASE("endpoint resampling follows the weights") {
    FunctionalDynamics dyn = ou();
    BridgeOptions opt;
    opt.horizon = 0.2;
    opt.dt = 0.01;
    opt.n_paths = 3;
    opt.seed = 4;
    WeightedPathEnsemble ens = run_guided_bridge(dyn, nullptr, vec1(0.0), opt);

    SUBCASE("degenerate weight vectors") {
        ens.normalized = Vec::Zero(3);
        ens.normalized[1] = 1.0;
        for (uint64_t s = 0; s < 20; ++s) CHECK(resample_endpoint(ens, s).index == 1);
    }
    SUBCASE("multinomial frequencies within three sigma") {
        ens.normalized = Vec(3);
        ens.normalized << 0.6, 0.3, 0.1;
        const int draws = 100000;
        int counts[3] = {0, 0, 0};
        for (int s = 0; s < draws; ++s) ++counts[resample_endpoint(ens, 1000 + s).index];
        for (int k = 0; k < 3; ++k) {
            const double p = ens.normalized[k];
            const double se = std::sqrt(p * (1 - p) * draws);
            CHECK(std::abs(counts[k] - p * draws) < 3.0 * se);
        }
    }
}

TEST_CASE("divergent paths are flagged and starved of weight") {
    FunctionalDynamics exploding(1, 0.05, [](const double* x, double* out) {
        out[0] = x[0] * x[0] * x[0];
    });
    BridgeOptions opt;
    opt.horizon = 1.0;
    opt.dt = 0.1;
    opt.n_paths = 8;
    opt.seed = 2;
    opt.divergence_norm = 1e3;
    // starts split between the basin of slow motion and the explosive region
    opt.starts.resize(8, 1);
    for (int i = 0; i < 8; ++i) opt.starts(i, 0) = i < 4 ? 0.0 : 3.0;
    WeightedPathEnsemble ens = run_guided_bridge(exploding, nullptr, vec1(0.0), opt);
    int diverged = 0;
    for (int i = 0; i < 8; ++i) {
        if (ens.flags[i].diverged) {
            ++diverged;
            CHECK(ens.normalized[i] == 0.0);
            CHECK(ens.stop_times[i] < 5.0);
        }
    }
    CHECK(diverged == 4);
    CHECK(ens.ess == doctest::Approx(4.0).epsilon(1e-9));
}

TEST_CASE("batched and generic engines produce the same ensemble") {
    // the 2D double well with a grid-chi control runs through the SoA
    // kernels; forcing the generic path through a monitor wrapper must agree
    SystemSpec spec = SystemSpec::double_well_2d(1, 1, 2, 0.7);
    const int n = 17;
    kernels::TableMeta meta{-2.0, -2.0, 0.25, 0.25, 17, 17};
    std::vector<double> vals(17 * 17);
    for (int j = 0; j < 17; ++j)
        for (int i = 0; i < 17; ++i)
            vals[static_cast<std::size_t>(j) * 17 + i] =
                0.5 * (1.0 + std::tanh(meta.x0 + i * meta.dx + meta.y0 + j * meta.dy));
    auto chi = std::make_shared<GridChi>(meta, std::move(vals));
    ReferencePath ref = ReferencePath::linear_ramp(0.0, 0.1, 1.0, 0.9);
    ControlLaw law = ControlLaw::tracking(chi, ref, GainSchedule::constant(10.0),
                                          ControlOptions{.u_max = 20.0, .precond_rho = 0.0});

    BridgeOptions opt;
    opt.horizon = 1.0;
    opt.dt = 0.01;
    opt.n_paths = n;
    opt.seed = 21;
    opt.track_soc_cost = true;
    Vec x0(2);
    x0 << -1.0, -1.0;
    WeightedPathEnsemble batch = run_guided_bridge(spec, &law, x0, opt);

    // wrap the dynamics so the batch dispatch cannot trigger
    FunctionalDynamics generic(2, spec.sigma(), [&spec](const double* x, double* out) {
        spec.drift(x, out);
    });
    WeightedPathEnsemble plain = run_guided_bridge(generic, &law, x0, opt);
    for (int i = 0; i < n; ++i) {
        CHECK(batch.endpoints(i, 0) ==
              doctest::Approx(plain.endpoints(i, 0)).epsilon(1e-10));
        CHECK(batch.endpoints(i, 1) ==
              doctest::Approx(plain.endpoints(i, 1)).epsilon(1e-10));
        CHECK(batch.log_weights[i] ==
              doctest::Approx(plain.log_weights[i]).epsilon(1e-8));
        CHECK(batch.soc_costs[i] == doctest::Approx(plain.soc_costs[i]).epsilon(1e-8));
    }
}

TEST_CASE("smc runs through the batched engine on the 2D system") {
    SystemSpec spec = SystemSpec::double_well_2d(1, 1, 2, 0.7);
    kernels::TableMeta meta{-2.5, -2.5, 0.05, 0.05, 101, 101};
    std::vector<double> vals(101 * 101);
    for (int j = 0; j < 101; ++j)
        for (int i = 0; i < 101; ++i) {
            const double x = meta.x0 + i * meta.dx, y = meta.y0 + j * meta.dy;
            vals[static_cast<std::size_t>(j) * 101 + i] = 0.5 * (1.0 + std::tanh(x + y));
        }
    auto chi = std::make_shared<GridChi>(meta, std::move(vals));
    ReferencePath ref = ReferencePath::linear_ramp(0.0, 0.0, 2.0, 1.0);
    ControlLaw law = ControlLaw::tracking(chi, ref, GainSchedule::constant(30.0),
                                          ControlOptions{.u_max = 0.0, .precond_rho = 0.0});
    BridgeOptions opt;
    opt.horizon = 2.0;
    opt.dt = 0.002;
    opt.n_paths = 64;
    opt.seed = 17;
    Vec x0(2);
    x0 << -1.0, -1.0;
    WeightedPathEnsemble plain = run_guided_bridge(spec, &law, x0, opt);
    WeightedPathEnsemble same = run_smc_bridge(spec, &law, x0, opt, 0.0, 100);
    CHECK(plain.endpoints == same.endpoints);
    CHECK(plain.log_weights == same.log_weights);

    WeightedPathEnsemble smc = run_smc_bridge(spec, &law, x0, opt, 0.5, 50);
    CHECK(!smc.resample_log.empty()); // strong tracking degrades weights fast
    CHECK(smc.normalized.sum() == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(smc.ess >= 1.0);
}

TEST_CASE("level stopping records first-hit times") {
    SystemSpec spec = SystemSpec::double_well_2d(1, 1, 2, 0.7);
    kernels::TableMeta meta{-2.5, -2.5, 0.05, 0.05, 101, 101};
    std::vector<double> vals(101 * 101);
    for (int j = 0; j < 101; ++j)
        for (int i = 0; i < 101; ++i) {
            const double x = meta.x0 + i * meta.dx, y = meta.y0 + j * meta.dy;
            vals[static_cast<std::size_t>(j) * 101 + i] = 0.5 * (1.0 + std::tanh(x + y));
        }
    auto chi = std::make_shared<GridChi>(meta, std::move(vals));
    BridgeOptions opt;
    opt.horizon = 50.0;
    opt.dt = 1e-3;
    opt.n_paths = 16;
    opt.seed = 31;
    opt.stop_on_levels = true;
    opt.level_a = 0.05;
    opt.level_b = 0.95;
    opt.monitor = chi;
    Vec x0(2);
    x0 << -0.2, 0.2; // chi = 0.5, between the levels
    WeightedPathEnsemble ens = run_guided_bridge(spec, nullptr, x0, opt);
    for (int i = 0; i < 16; ++i) {
        const PathFlags& fl = ens.flags[i];
        const bool stopped = fl.hit_a || fl.hit_b;
        CHECK(stopped);
        if (fl.hit_a) CHECK(ens.end_latent[i] <= 0.05 + 1e-9);
        if (fl.hit_b && !fl.hit_a) CHECK(ens.end_latent[i] >= 0.95 - 1e-9);
        CHECK(ens.stop_times[i] <= 50.0);
        CHECK(ens.stop_times[i] > 0.0);
    }
    CHECK(ens.total_steps < 16L * 50000L); // early stopping saves steps
}

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "cvlift/guidance.hpp"

#include <nlohmann/json.hpp>

#include <cmath>

using namespace cvlift;

namespace {

Vec vec2(double a, double b) {
    Vec v(2);
    v << a, b;
    return v;
}

std::shared_ptr<LinearCV> x1_cv() {
    Mat a(1, 2);
    a << 1, 0;
    return std::make_shared<LinearCV>(a);
}

// chi table equal to x1 rescaled from [-2,2] onto [0,1]
std::shared_ptr<GridChi> affine_chi() {
    const int n = 21;
    kernels::TableMeta m{-2.0, -2.0, 4.0 / (n - 1), 4.0 / (n - 1), n, n};
    std::vector<double> vals(static_cast<std::size_t>(n) * n);
    for (int j = 0; j < n; ++j)
        for (int i = 0; i < n; ++i)
            vals[static_cast<std::size_t>(j) * n + i] = (m.x0 + i * m.dx + 2.0) / 4.0;
    return std::make_shared<GridChi>(m, std::move(vals));
}

} // namespace

TEST_CASE("reference path interpolation") {
    ReferencePath ref = ReferencePath::linear_ramp(0.0, 0.0, 1.0, 1.0);
    CHECK(ref.eval(0.5)[0] == doctest::Approx(0.5));
    CHECK(ref.eval(0.0)[0] == 0.0);
    CHECK(ref.eval(1.0)[0] == 1.0);
    CHECK_THROWS_AS(ref.eval(-0.1), std::out_of_range);
    CHECK_THROWS_AS(ref.eval(1.1), std::out_of_range);

    // knots are reproduced exactly
    std::vector<double> t{0, 1, 2.5, 4};
    Mat v(4, 1);
    v << 0.1, 0.7, 0.3, 0.9;
    ReferencePath knotty(t, v);
    for (int i = 0; i < 4; ++i) CHECK(knotty.eval(t[i])[0] == v(i, 0));

    // the ramp of evenly spaced knots is a straight line
    const int k = 10;
    std::vector<double> times(k + 1);
    Mat vals(k + 1, 1);
    for (int i = 0; i <= k; ++i) {
        times[i] = i;
        vals(i, 0) = 0.05 + (0.95 - 0.05) * i / k;
    }
    ReferencePath ramp(times, vals);
    for (double q : {0.3, 3.7, 8.45})
        CHECK(ramp.eval(q)[0] == doctest::Approx(0.05 + 0.09 * q).epsilon(1e-12));

    ReferencePath ext = ref.extended_to(3.0);
    CHECK(ext.eval(2.2)[0] == 1.0);

    CHECK_THROWS_AS(ReferencePath({0.0, 0.0}, Mat::Zero(2, 1)), InvalidInputError);
}

TEST_CASE("gain schedules") {
    CHECK(GainSchedule::constant(5.0).at(17.0) == 5.0);
    CHECK_THROWS_AS(GainSchedule::constant(-1.0), InvalidInputError);
    GainSchedule pw = GainSchedule::piecewise({0.0, 1.0, 2.0}, {1.0, 2.0, 3.0});
    CHECK(pw.at(0.5) == 1.0);
    CHECK(pw.at(1.0) == 2.0);
    CHECK(pw.at(9.0) == 3.0);
    GainSchedule rp = GainSchedule::ramp(0.0, 0.0, 2.0, 4.0);
    CHECK(rp.at(1.0) == 2.0);
    CHECK(rp.at(-1.0) == 0.0);
    CHECK(rp.at(5.0) == 4.0);
    GainSchedule back = GainSchedule::from_json(pw.to_json());
    CHECK(back.at(1.5) == 2.0);
}

TEST_CASE("tracking control: hand values, zero error, clipping") {
    ReferencePath ref = ReferencePath::linear_ramp(0.0, 0.0, 1.0, 1.0);
    const double kappa = 3.0;
    ControlLaw law = ControlLaw::tracking(x1_cv(), ref, GainSchedule::constant(kappa),
                                          ControlOptions{.u_max = 0.0, .precond_rho = 0.0});
    double u[2];
    // zbar(0.5) = 0.5, xi = x1
    law.eval(0.5, vec2(0.2, 9.0).data(), u);
    CHECK(u[0] == doctest::Approx(kappa * (0.5 - 0.2)).epsilon(1e-14));
    CHECK(u[1] == 0.0);
    // zero tracking error gives the zero vector
    law.eval(0.5, vec2(0.5, -3.0).data(), u);
    CHECK(u[0] == 0.0);
    CHECK(u[1] == 0.0);

    ControlLaw clipped = ControlLaw::tracking(x1_cv(), ref, GainSchedule::constant(100.0),
                                              ControlOptions{.u_max = 5.0, .precond_rho = 0.0});
    clipped.eval(1.0, vec2(-20.0, 0.0).data(), u);
    CHECK(std::sqrt(u[0] * u[0] + u[1] * u[1]) == doctest::Approx(5.0).epsilon(1e-12));
}

TEST_CASE("tracking control is invariant under gain/error rescaling") {
    // scaling G by c and the error by 1/c leaves u unchanged
    const double c = 7.0;
    ReferencePath ref_a = ReferencePath::linear_ramp(0.0, 0.4, 1.0, 0.4);
    ReferencePath ref_b = ReferencePath::linear_ramp(0.0, 0.3 + (0.4 - 0.3) / c, 1.0,
                                                     0.3 + (0.4 - 0.3) / c);
    ControlLaw a = ControlLaw::tracking(x1_cv(), ref_a, GainSchedule::constant(2.0),
                                        ControlOptions{0.0, 0.0});
    ControlLaw b = ControlLaw::tracking(x1_cv(), ref_b, GainSchedule::constant(2.0 * c),
                                        ControlOptions{0.0, 0.0});
    double ua[2], ub[2];
    a.eval(0.5, vec2(0.3, 0.0).data(), ua);
    b.eval(0.5, vec2(0.3, 0.0).data(), ub);
    CHECK(ua[0] == doctest::Approx(ub[0]).epsilon(1e-12));
}

TEST_CASE("preconditioning damps the control monotonically") {
    ReferencePath ref = ReferencePath::linear_ramp(0.0, 1.0, 1.0, 1.0);
    double prev = 1e300;
    for (double rho : {0.5, 2.0, 10.0, 1e4}) {
        ControlLaw law = ControlLaw::tracking(x1_cv(), ref, GainSchedule::constant(4.0),
                                              ControlOptions{.u_max = 0.0, .precond_rho = rho});
        double u[2];
        law.eval(0.3, vec2(0.0, 0.0).data(), u);
        const double nrm = std::abs(u[0]);
        CHECK(nrm < prev);
        prev = nrm;
    }
    CHECK(prev < 4.0 / 1e3); // rho -> infinity kills the control
}

TEST_CASE("optimal guidance control from a probability table") {
    // synthetic table: log p linear in z with slope 3 at every s
    EffectiveModel m = effective_from_tables(0.0, -1e-9, 0.7, Vec::Constant(51, 0.2));
    LatentProbabilityTable tab;
    tab.z_star = 0.5;
    tab.horizon = 2.0;
    tab.z = m.z;
    tab.s.setLinSpaced(9, 0.0, 2.0);
    tab.p.resize(9, 51);
    tab.dlogp.resize(9, 51);
    for (int k = 0; k < 9; ++k)
        for (int i = 0; i < 51; ++i) {
            tab.p(k, i) = std::exp(3.0 * (m.z[i] - 1.0));
            tab.dlogp(k, i) = 3.0;
        }
    auto table = std::make_shared<LatentProbabilityTable>(tab);
    auto chi = affine_chi();
    const double sigma = 0.7, kappa = 1.5;
    ControlLaw law = ControlLaw::optimal_guidance(chi, table, kappa, sigma);
    double u[2];
    law.eval(0.7, vec2(0.4, 0.0).data(), u);
    // J = (1/4, 0), u = kappa sigma dlogp J^T
    CHECK(u[0] == doctest::Approx(kappa * sigma * 3.0 * 0.25).epsilon(1e-12));
    CHECK(u[1] == 0.0);

    // kappa = 0 switches the control off
    ControlLaw off = ControlLaw::optimal_guidance(chi, table, 0.0, sigma);
    off.eval(0.7, vec2(0.4, 0.1).data(), u);
    CHECK(u[0] == 0.0);
    CHECK(u[1] == 0.0);

    // plateau: constant p has zero derivative
    for (int k = 0; k < 9; ++k)
        for (int i = 0; i < 51; ++i) {
            tab.p(k, i) = 0.3;
            tab.dlogp(k, i) = 0.0;
        }
    ControlLaw flat = ControlLaw::optimal_guidance(
        chi, std::make_shared<LatentProbabilityTable>(tab), 2.0, sigma);
    flat.eval(0.7, vec2(0.4, 0.0).data(), u);
    CHECK(u[0] == 0.0);
    CHECK(u[1] == 0.0);
}

TEST_CASE("optimal guidance sign follows the table gradient") {
    const EffectiveModel m = effective_from_tables(0.01, -0.02, 0.7, Vec::Constant(101, 0.2));
    LatentProbabilityTable tab = solve_bk(m, 0.7, 3.0, {.time_steps = 300});
    auto chi = affine_chi();
    ControlLaw law = ControlLaw::optimal_guidance(
        chi, std::make_shared<LatentProbabilityTable>(tab), 1.0, 0.7);
    // finite difference of the interpolated table at z = 0.3 < z_star
    const double z = 0.3, h = 1e-4;
    const double fd = (std::log(tab.p_at(1.0, z + h)) - std::log(tab.p_at(1.0, z - h))) / (2 * h);
    CHECK(fd > 0.0); // p increases toward the target
    double u[2];
    law.eval(1.0, vec2(4.0 * z - 2.0, 0.0).data(), u); // chi(x) = z
    CHECK(u[0] > 0.0);                                  // pushes chi upward
    CHECK(u[0] == doctest::Approx(0.7 * tab.dlogp_at(1.0, z) * 0.25).epsilon(1e-6));
}

TEST_CASE("committor guidance control") {
    auto chi = affine_chi();
    const double sigma = 0.7;
    // constant committor: zero control
    ControlLaw flat = ControlLaw::committor_guidance(chi, Vec::Constant(41, 0.4), 1.3, sigma);
    double u[2];
    flat.eval(0.0, vec2(0.1, 0.5).data(), u);
    CHECK(u[0] == 0.0);
    CHECK(u[1] == 0.0);

    // identity committor at z = 0.5: ratio q'/q = 2
    Vec idq(41);
    for (int i = 0; i < 41; ++i) idq[i] = i / 40.0;
    ControlLaw law = ControlLaw::committor_guidance(chi, idq, 1.3, sigma);
    law.eval(0.0, vec2(0.0, 0.0).data(), u); // chi = 0.5, J = (1/4, 0)
    CHECK(u[0] == doctest::Approx(1.3 * sigma * 2.0 * 0.25).epsilon(1e-9));
    CHECK(u[1] == 0.0);

    // flooring keeps the control finite where the committor vanishes
    ControlLaw floored = ControlLaw::committor_guidance(chi, idq, 1.3, sigma, 1e-6);
    floored.eval(0.0, vec2(-2.0, 0.0).data(), u); // chi = 0, q floored
    CHECK(std::isfinite(u[0]));
}

TEST_CASE("batched evaluation agrees with the scalar path") {
    auto chi = affine_chi();
    ReferencePath ref = ReferencePath::linear_ramp(0.0, 0.1, 1.0, 0.9);
    ControlLaw law = ControlLaw::tracking(chi, ref, GainSchedule::constant(12.0),
                                          ControlOptions{.u_max = 3.0, .precond_rho = 0.5});
    REQUIRE(law.supports_batch_2d());
    const int n = 37;
    std::vector<double> x1(n), x2(n), u1(n), u2(n), z(n), gx(n), gy(n);
    std::vector<uint8_t> cl(n);
    for (int i = 0; i < n; ++i) {
        x1[i] = -2.0 + 4.0 * i / (n - 1);
        x2[i] = 1.0 - 0.1 * i;
    }
    law.eval_batch_2d(0.4, 1.0, x1.data(), x2.data(), n, u1.data(), u2.data(), z.data(),
                      gx.data(), gy.data(), cl.data());
    for (int i = 0; i < n; ++i) {
        double u[2];
        law.eval(0.4, vec2(x1[i], x2[i]).data(), u);
        CHECK(u1[i] == doctest::Approx(u[0]).epsilon(1e-12));
        CHECK(u2[i] == doctest::Approx(u[1]).epsilon(1e-12));
    }
    // gain scaling enters linearly (below the clip)
    ControlLaw unclipped = ControlLaw::tracking(chi, ref, GainSchedule::constant(1.0),
                                                ControlOptions{0.0, 0.0});
    std::vector<double> v1(n), v2(n);
    unclipped.eval_batch_2d(0.4, 2.5, x1.data(), x2.data(), n, v1.data(), v2.data(),
                            z.data(), gx.data(), gy.data(), nullptr);
    double w[2];
    unclipped.eval_scaled(0.4, vec2(x1[5], x2[5]).data(), w, 2.5);
    CHECK(v1[5] == doctest::Approx(w[0]).epsilon(1e-12));
}

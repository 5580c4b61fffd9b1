#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "cvlift/kernels.hpp"
#include "cvlift/rng.hpp"

#include <cmath>
#include <vector>

using namespace cvlift;
using namespace cvlift::kernels;

namespace {

std::vector<double> randu(int n, double lo, double hi, uint64_t stream) {
    StreamRng rng(2024, stream);
    std::vector<double> v(n);
    for (auto& x : v) x = lo + (hi - lo) * rng.uniform();
    return v;
}

double rel_err(double a, double b) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-300});
}

} // namespace

TEST_CASE("scalar double-well force matches the closed form pointwise") {
    Dw2dParams p{1.3, 0.8, 2.5};
    auto x1 = randu(97, -3, 3, 0);
    auto x2 = randu(97, -3, 3, 1);
    std::vector<double> f1(97), f2(97), en(97);
    detail::dw2d_force_scalar(p, x1.data(), x2.data(), 97, f1.data(), f2.data(), en.data());
    for (int i = 0; i < 97; ++i) {
        const double u = x1[i] * x1[i] - 1.0, v = x2[i] * x2[i] - 1.0;
        const double d = x1[i] - x2[i];
        const double e = std::exp(-p.gamma * d * d);
        CHECK(en[i] == doctest::Approx(p.alpha * u * u + p.beta * v * v + 1.0 - e).epsilon(1e-14));
        CHECK(f1[i] ==
              doctest::Approx(-(4.0 * p.alpha * x1[i] * u + 2.0 * p.gamma * d * e)).epsilon(1e-13));
        CHECK(f2[i] ==
              doctest::Approx(-(4.0 * p.beta * x2[i] * v - 2.0 * p.gamma * d * e)).epsilon(1e-13));
    }
}

#ifdef CVLIFT_HAVE_AVX2_TU
TEST_CASE("avx2 variants agree with the scalar reference") {
    if (!avx2_available()) return; // nothing to check on this host

    SUBCASE("double-well force and energy") {
        Dw2dParams p{1.0, 1.0, 2.0};
        for (int n : {1, 3, 4, 7, 64, 1001}) {
            auto x1 = randu(n, -3, 3, 10 + n);
            auto x2 = randu(n, -3, 3, 20 + n);
            std::vector<double> f1a(n), f2a(n), ena(n), f1b(n), f2b(n), enb(n);
            detail::dw2d_force_scalar(p, x1.data(), x2.data(), n, f1a.data(), f2a.data(), ena.data());
            detail::dw2d_force_avx2(p, x1.data(), x2.data(), n, f1b.data(), f2b.data(), enb.data());
            for (int i = 0; i < n; ++i) {
                CHECK(rel_err(f1a[i], f1b[i]) < 1e-12);
                CHECK(rel_err(f2a[i], f2b[i]) < 1e-12);
                CHECK(rel_err(ena[i], enb[i]) < 1e-12);
            }
        }
    }

    SUBCASE("axpby accumulate") {
        const int n = 1003;
        auto u = randu(n, -2, 2, 1);
        auto v = randu(n, -2, 2, 2);
        auto y0 = randu(n, -2, 2, 3);
        auto ya = y0, yb = y0;
        detail::axpby_add_scalar(0.37, u.data(), -1.21, v.data(), ya.data(), n);
        detail::axpby_add_avx2(0.37, u.data(), -1.21, v.data(), yb.data(), n);
        for (int i = 0; i < n; ++i) CHECK(rel_err(ya[i], yb[i]) < 1e-14);
    }

    SUBCASE("girsanov increment") {
        const int n = 501;
        auto u1 = randu(n, -3, 3, 4);
        auto u2 = randu(n, -3, 3, 5);
        auto e1 = randu(n, -3, 3, 6);
        auto e2 = randu(n, -3, 3, 7);
        std::vector<double> wa(n, 0.0), wb(n, 0.0);
        detail::girsanov_accum_2d_scalar(u1.data(), u2.data(), e1.data(), e2.data(),
                                         0.0316, 0.001, wa.data(), n);
        detail::girsanov_accum_2d_avx2(u1.data(), u2.data(), e1.data(), e2.data(),
                                       0.0316, 0.001, wb.data(), n);
        for (int i = 0; i < n; ++i) CHECK(rel_err(wa[i], wb[i]) < 1e-13);
    }

    SUBCASE("bilinear interpolation with gradients and clamp flags") {
        TableMeta m{-1.0, -2.0, 0.05, 0.1, 41, 37};
        std::vector<double> table(41 * 37);
        StreamRng rng(5, 0);
        for (auto& t : table) t = rng.uniform();
        const int n = 777;
        auto x = randu(n, -1.5, 1.5, 8);  // includes out-of-lattice queries
        auto y = randu(n, -2.5, 2.5, 9);
        std::vector<double> va(n), ga(n), ha(n), vb(n), gb(n), hb(n);
        std::vector<uint8_t> ca(n), cb(n);
        detail::bilinear_eval_grad_scalar(m, table.data(), x.data(), y.data(), n,
                                          va.data(), ga.data(), ha.data(), ca.data());
        detail::bilinear_eval_grad_avx2(m, table.data(), x.data(), y.data(), n,
                                        vb.data(), gb.data(), hb.data(), cb.data());
        for (int i = 0; i < n; ++i) {
            CHECK(rel_err(va[i], vb[i]) < 1e-13);
            CHECK(rel_err(ga[i], gb[i]) < 1e-12);
            CHECK(rel_err(ha[i], hb[i]) < 1e-12);
            CHECK(ca[i] == cb[i]);
        }
    }
}

TEST_CASE("avx2 exp accuracy via the energy cross term") {
    if (!avx2_available()) return;
    // gamma d^2 sweeps the argument of exp over [-40, 0]
    Dw2dParams p{1.0, 1.0, 1.0};
    const int n = 2000;
    std::vector<double> x1(n), x2(n, 0.0), f1(n), f2(n), en_a(n), en_b(n);
    for (int i = 0; i < n; ++i) x1[i] = -6.3 + 12.6 * i / (n - 1);
    detail::dw2d_force_scalar(p, x1.data(), x2.data(), n, f1.data(), f2.data(), en_a.data());
    detail::dw2d_force_avx2(p, x1.data(), x2.data(), n, f1.data(), f2.data(), en_b.data());
    for (int i = 0; i < n; ++i) CHECK(rel_err(en_a[i], en_b[i]) < 1e-13);
}
#endif

TEST_CASE("backend selection is sticky and safe") {
    const Backend before = active_backend();
    set_backend(Backend::Scalar);
    CHECK(active_backend() == Backend::Scalar);
    set_backend(Backend::Avx2);
    if (avx2_available())
        CHECK(active_backend() == Backend::Avx2);
    else
        CHECK(active_backend() == Backend::Scalar);
    set_backend(before);
}

TEST_CASE("bilinear interpolation stays within the corner values") {
    TableMeta m{0.0, 0.0, 1.0, 1.0, 6, 5};
    std::vector<double> table(30);
    StreamRng rng(11, 0);
    for (auto& t : table) t = rng.uniform();
    for (int k = 0; k < 500; ++k) {
        const double x[1] = {rng.uniform() * 5.0};
        const double y[1] = {rng.uniform() * 4.0};
        double v;
        detail::bilinear_eval_grad_scalar(m, table.data(), x, y, 1, &v, nullptr, nullptr,
                                          nullptr);
        const int i = std::min(static_cast<int>(x[0]), 4);
        const int j = std::min(static_cast<int>(y[0]), 3);
        const double c0 = table[j * 6 + i], c1 = table[j * 6 + i + 1];
        const double c2 = table[(j + 1) * 6 + i], c3 = table[(j + 1) * 6 + i + 1];
        const double lo = std::min({c0, c1, c2, c3});
        const double hi = std::max({c0, c1, c2, c3});
        CHECK(v >= lo - 1e-14);
        CHECK(v <= hi + 1e-14);
    }
}

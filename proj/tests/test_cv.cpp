#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "cvlift/cv.hpp"
#include "cvlift/rng.hpp"

#include <cmath>

using namespace cvlift;

namespace {

Vec vec2(double a, double b) {
    Vec v(2);
    v << a, b;
    return v;
}

// smooth synthetic membership table on [-2,2]^2
GridChi make_test_chi(int nx = 41, int ny = 41) {
    kernels::TableMeta m{-2.0, -2.0, 4.0 / (nx - 1), 4.0 / (ny - 1), nx, ny};
    std::vector<double> vals(static_cast<std::size_t>(nx) * ny);
    for (int j = 0; j < ny; ++j)
        for (int i = 0; i < nx; ++i) {
            const double x = m.x0 + i * m.dx, y = m.y0 + j * m.dy;
            vals[static_cast<std::size_t>(j) * nx + i] =
                0.5 * (1.0 + std::tanh(x + y));
        }
    return GridChi(m, std::move(vals));
}

} // namespace

TEST_CASE("linear CV evaluation and jacobian") {
    Mat a(1, 2);
    a << 1, 0;
    LinearCV cv(a);
    CHECK(cv.value(vec2(0.3, 7.0)) == doctest::Approx(0.3));
    Mat j = cv.jacobian(vec2(0.3, 7.0));
    CHECK(j(0, 0) == 1.0);
    CHECK(j(0, 1) == 0.0);
}

TEST_CASE("grid chi hits its node values at the extremes") {
    GridChi chi = make_test_chi();
    // far corners of the table: tanh saturates to 0 / 1
    CHECK(chi.value(vec2(-2, -2)) == doctest::Approx(0.5 * (1 + std::tanh(-4.0))));
    CHECK(chi.value(vec2(2, 2)) == doctest::Approx(0.5 * (1 + std::tanh(4.0))));
}

TEST_CASE("grid chi jacobian agrees with finite differences at interior points") {
    GridChi chi = make_test_chi();
    StreamRng rng(1, 0);
    const double h = 1e-6 * chi.meta().dx;
    for (int k = 0; k < 50; ++k) {
        // keep a margin so the difference stencil stays inside one cell
        Vec x = vec2(-1.8 + 3.6 * rng.uniform(), -1.8 + 3.6 * rng.uniform());
        Mat j = chi.jacobian(x);
        const double fx = (chi.value(vec2(x[0] + h, x[1])) - chi.value(vec2(x[0] - h, x[1]))) / (2 * h);
        const double fy = (chi.value(vec2(x[0], x[1] + h)) - chi.value(vec2(x[0], x[1] - h))) / (2 * h);
        const double scale = std::max(1e-8, std::abs(fx) + std::abs(fy));
        CHECK(std::abs(j(0, 0) - fx) / scale < 1e-3);
        CHECK(std::abs(j(0, 1) - fy) / scale < 1e-3);
    }
}

TEST_CASE("out-of-box queries clamp and set the flag") {
    GridChi chi = make_test_chi();
    bool clamped = false;
    const double inside = chi.value(vec2(2.0, 0.0), &clamped);
    CHECK(!clamped);
    const double outside = chi.value(vec2(5.0, 0.0), &clamped);
    CHECK(clamped);
    CHECK(outside == doctest::Approx(inside));
}

TEST_CASE("rotated chi with identity equals grid chi") {
    auto chi = std::make_shared<GridChi>(make_test_chi());
    RotatedChi rot(chi, Mat::Identity(2, 2));
    StreamRng rng(2, 0);
    for (int k = 0; k < 20; ++k) {
        Vec x = vec2(-2 + 4 * rng.uniform(), -2 + 4 * rng.uniform());
        CHECK(rot.value(x) == chi->value(x));
    }
}

TEST_CASE("rotated chi jacobian matches finite differences in d=5") {
    auto chi = std::make_shared<GridChi>(make_test_chi());
    Mat r = random_orthonormal(5, 77);
    RotatedChi cv(chi, r.topRows(2));
    StreamRng rng(3, 0);
    const double h = 1e-6;
    for (int k = 0; k < 20; ++k) {
        Vec x(5);
        for (int i = 0; i < 5; ++i) x[i] = -0.8 + 1.6 * rng.uniform();
        Mat j = cv.jacobian(x);
        for (int i = 0; i < 5; ++i) {
            Vec xp = x, xm = x;
            xp[i] += h;
            xm[i] -= h;
            const double fd = (cv.value(xp) - cv.value(xm)) / (2 * h);
            CHECK(std::abs(j(0, i) - fd) < 1e-3 * std::max(1.0, std::abs(fd)));
        }
    }
}

TEST_CASE("chi tables round-trip through csv + json header") {
    GridChi chi = make_test_chi(17, 13);
    chi.save("/tmp/cvlift_chi.csv", "/tmp/cvlift_chi.json");
    GridChi back = GridChi::load("/tmp/cvlift_chi.csv", "/tmp/cvlift_chi.json");
    CHECK(back.meta().nx == 17);
    CHECK(back.meta().ny == 13);
    CHECK(back.values() == chi.values());
    CHECK(back.value(vec2(0.123, -0.456)) == chi.value(vec2(0.123, -0.456)));
}

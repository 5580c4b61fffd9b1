#include "cvlift/system.hpp"

#include "cvlift/kernels.hpp"
#include "cvlift/rng.hpp"

#include <nlohmann/json.hpp>

#include <cmath>

namespace cvlift {

using nlohmann::json;

SystemSpec SystemSpec::double_well_2d(double alpha, double beta, double gamma,
                                      double sigma) {
    if (!(alpha > 0.0) || !(beta > 0.0) || !(gamma > 0.0))
        throw InvalidInputError("double-well parameters must be positive");
    if (!(sigma > 0.0)) throw InvalidInputError("sigma must be positive");
    SystemSpec s;
    s.kind_ = PotentialKind::DoubleWell2d;
    s.dim_ = 2;
    s.alpha_ = alpha;
    s.beta_ = beta;
    s.gamma_ = gamma;
    s.sigma_ = sigma;
    return s;
}

Mat random_orthonormal(int dim, uint64_t seed) {
    StreamRng rng(seed, 0x526f74ull); // dedicated rotation stream
    Mat g(dim, dim);
    for (int i = 0; i < dim; ++i)
        for (int j = 0; j < dim; ++j) g(i, j) = rng.normal();
    // modified Gram-Schmidt on columns, then transpose so rows are orthonormal
    for (int j = 0; j < dim; ++j) {
        for (int k = 0; k < j; ++k) g.col(j) -= g.col(k).dot(g.col(j)) * g.col(k);
        double nrm = g.col(j).norm();
        if (nrm < 1e-12) throw InvalidInputError("degenerate random rotation draw");
        g.col(j) /= nrm;
    }
    return g.transpose();
}

SystemSpec SystemSpec::rotated_high_d(int dim, const std::vector<double>& omega,
                                      double sigma, uint64_t rotation_seed) {
    SystemSpec s = rotated_high_d(dim, omega, sigma, random_orthonormal(dim, rotation_seed));
    s.rotation_seed_ = rotation_seed;
    s.rotation_from_seed_ = true;
    return s;
}

SystemSpec SystemSpec::rotated_high_d(int dim, const std::vector<double>& omega,
                                      double sigma, const Mat& rotation) {
    if (dim < 2) throw InvalidInputError("rotated system needs dim >= 2");
    if (static_cast<int>(omega.size()) != dim - 2)
        throw InvalidInputError("need dim-2 tail frequencies");
    for (double w : omega)
        if (!(w > 0.0)) throw InvalidInputError("tail frequencies must be positive");
    if (!(sigma > 0.0)) throw InvalidInputError("sigma must be positive");
    if (rotation.rows() != dim || rotation.cols() != dim)
        throw InvalidInputError("rotation has wrong shape");
    Mat err = rotation * rotation.transpose() - Mat::Identity(dim, dim);
    if (err.cwiseAbs().maxCoeff() > 1e-12)
        throw InvalidInputError("rotation is not orthonormal to 1e-12");

    SystemSpec s;
    s.kind_ = PotentialKind::RotatedHighD;
    s.dim_ = dim;
    s.sigma_ = sigma;
    s.omega_ = omega;
    s.rotation_ = rotation;
    return s;
}

void SystemSpec::check_dim(Eigen::Index n) const {
    if (n != dim_)
        throw InvalidInputError("state has dimension " + std::to_string(n) +
                                ", expected " + std::to_string(dim_));
}

double SystemSpec::potential(const Vec& x) const {
    check_dim(x.size());
    if (kind_ == PotentialKind::DoubleWell2d) {
        const double u = x[0] * x[0] - 1.0;
        const double v = x[1] * x[1] - 1.0;
        const double d = x[0] - x[1];
        return alpha_ * u * u + beta_ * v * v + (1.0 - std::exp(-gamma_ * d * d));
    }
    Vec y = rotation_ * x;
    const double u = y[0] * y[0] - 1.0;
    const double v = y[1] * y[1] - 1.0;
    const double d = y[0] - y[1];
    double val = u * u + v * v + (1.0 - std::exp(-2.0 * d * d));
    for (int j = 2; j < dim_; ++j) {
        const double w = omega_[j - 2];
        val += 0.5 * w * w * y[j] * y[j];
    }
    return val;
}

void SystemSpec::drift(const double* x, double* out) const {
    if (kind_ == PotentialKind::DoubleWell2d) {
        kernels::Dw2dParams p{alpha_, beta_, gamma_};
        kernels::detail::dw2d_force_scalar(p, x, x + 1, 1, out, out + 1, nullptr);
        return;
    }
    Eigen::Map<const Vec> xm(x, dim_);
    Vec y = rotation_ * xm;
    Vec gy(dim_);
    // grad W(y): the rotated variant fixes alpha=beta=1, gamma=2
    const double u = y[0] * y[0] - 1.0;
    const double v = y[1] * y[1] - 1.0;
    const double d = y[0] - y[1];
    const double cross = 4.0 * d * std::exp(-2.0 * d * d);
    gy[0] = 4.0 * y[0] * u + cross;
    gy[1] = 4.0 * y[1] * v - cross;
    for (int j = 2; j < dim_; ++j) {
        const double w = omega_[j - 2];
        gy[j] = w * w * y[j];
    }
    Eigen::Map<Vec> om(out, dim_);
    om = -(rotation_.transpose() * gy);
}

Vec SystemSpec::drift_at(const Vec& x) const {
    check_dim(x.size());
    Vec out(dim_);
    drift(x.data(), out.data());
    return out;
}

json SystemSpec::to_json() const {
    json j;
    j["sigma"] = sigma_;
    if (kind_ == PotentialKind::DoubleWell2d) {
        j["kind"] = "double-well-2d";
        j["alpha"] = alpha_;
        j["beta"] = beta_;
        j["gamma"] = gamma_;
    } else {
        j["kind"] = "rotated-high-d";
        j["dim"] = dim_;
        j["omega"] = omega_;
        if (rotation_from_seed_) {
            j["rotation_seed"] = rotation_seed_;
        } else {
            std::vector<std::vector<double>> rows(dim_);
            for (int i = 0; i < dim_; ++i) {
                rows[i].resize(dim_);
                for (int c = 0; c < dim_; ++c) rows[i][c] = rotation_(i, c);
            }
            j["rotation"] = rows;
        }
    }
    return j;
}

SystemSpec SystemSpec::from_json(const json& j) {
    const std::string kind = j.at("kind").get<std::string>();
    const double sigma = j.at("sigma").get<double>();
    if (kind == "double-well-2d") {
        return double_well_2d(j.value("alpha", 1.0), j.value("beta", 1.0),
                              j.value("gamma", 2.0), sigma);
    }
    if (kind == "rotated-high-d") {
        const int dim = j.at("dim").get<int>();
        auto omega = j.at("omega").get<std::vector<double>>();
        if (j.contains("rotation")) {
            auto rows = j.at("rotation").get<std::vector<std::vector<double>>>();
            Mat r(dim, dim);
            if (static_cast<int>(rows.size()) != dim)
                throw InvalidInputError("rotation has wrong shape");
            for (int i = 0; i < dim; ++i) {
                if (static_cast<int>(rows[i].size()) != dim)
                    throw InvalidInputError("rotation has wrong shape");
                for (int c = 0; c < dim; ++c) r(i, c) = rows[i][c];
            }
            return rotated_high_d(dim, omega, sigma, r);
        }
        return rotated_high_d(dim, omega, sigma, j.value("rotation_seed", uint64_t{1}));
    }
    throw InvalidInputError("unknown system kind: " + kind);
}

} // namespace cvlift

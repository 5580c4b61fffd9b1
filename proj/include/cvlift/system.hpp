#pragma once

#include <Eigen/Dense>
#include <nlohmann/json_fwd.hpp>

#include <stdexcept>
#include <string>

namespace cvlift {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

struct InvalidInputError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Abstract drift field dX = drift(X) dt + sigma dW. SystemSpec implements it
// for the built-in potentials; tests plug in ad-hoc dynamics (OU and friends).
class Dynamics {
  public:
    virtual ~Dynamics() = default;
    virtual int dim() const = 0;
    virtual double sigma() const = 0;
    virtual void drift(const double* x, double* out) const = 0;

    void drift(const Vec& x, Vec& out) const {
        out.resize(dim());
        drift(x.data(), out.data());
    }
};

enum class PotentialKind { DoubleWell2d, RotatedHighD };

// Full-dimensional system definition: potential, drift = -grad V, constant
// isotropic noise intensity.
//
// DoubleWell2d:  V(x1,x2) = alpha (x1^2-1)^2 + beta (x2^2-1)^2
//                           + (1 - exp(-gamma (x1-x2)^2))
// RotatedHighD:  V(x) = W(R x),  W(y) = V_dw(y1,y2) + 1/2 sum_j w_j^2 y_j^2,
//                with R orthonormal.
class SystemSpec : public Dynamics {
  public:
    static SystemSpec double_well_2d(double alpha, double beta, double gamma,
                                     double sigma);
    // R is generated by Gram-Schmidt orthonormalization of a seeded Gaussian
    // matrix; omega holds the d-2 tail frequencies (omega_3..omega_d).
    static SystemSpec rotated_high_d(int dim, const std::vector<double>& omega,
                                     double sigma, uint64_t rotation_seed);
    static SystemSpec rotated_high_d(int dim, const std::vector<double>& omega,
                                     double sigma, const Mat& rotation);

    int dim() const override { return dim_; }
    double sigma() const override { return sigma_; }
    PotentialKind kind() const { return kind_; }
    double alpha() const { return alpha_; }
    double beta() const { return beta_; }
    double gamma() const { return gamma_; }
    const Mat& rotation() const { return rotation_; }
    const std::vector<double>& omega() const { return omega_; }
    // inverse temperature of the invariant density, beta = 2/sigma^2
    double inv_temperature() const { return 2.0 / (sigma_ * sigma_); }

    double potential(const Vec& x) const;
    void drift(const double* x, double* out) const override;
    using Dynamics::drift;
    Vec drift_at(const Vec& x) const;

    nlohmann::json to_json() const;
    static SystemSpec from_json(const nlohmann::json& j);

  private:
    SystemSpec() = default;
    void check_dim(Eigen::Index n) const;

    PotentialKind kind_ = PotentialKind::DoubleWell2d;
    int dim_ = 2;
    double sigma_ = 0.7;
    double alpha_ = 1.0, beta_ = 1.0, gamma_ = 2.0;
    std::vector<double> omega_;
    Mat rotation_;
    uint64_t rotation_seed_ = 0;
    bool rotation_from_seed_ = false;
};

// Orthonormalizes a seeded Gaussian matrix (QR via modified Gram-Schmidt).
Mat random_orthonormal(int dim, uint64_t seed);

} // namespace cvlift

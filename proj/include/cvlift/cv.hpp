#pragma once

#include "cvlift/kernels.hpp"
#include "cvlift/system.hpp"

#include <nlohmann/json_fwd.hpp>

#include <memory>
#include <string>
#include <vector>

namespace cvlift {

// Collective variable xi: R^d -> R^m with Jacobian J (m x d). Immutable
// after construction; evaluation is thread-safe.
class CollectiveVariable {
  public:
    virtual ~CollectiveVariable() = default;
    virtual int latent_dim() const = 0;
    virtual int full_dim() const = 0;
    // returns xi(x); sets *clamped when the query left the table domain
    virtual Vec eval(const Vec& x, bool* clamped = nullptr) const = 0;
    virtual Mat jacobian(const Vec& x) const = 0;

    // scalar shortcut for m = 1
    double value(const Vec& x, bool* clamped = nullptr) const {
        return eval(x, clamped)[0];
    }
};

// xi(x) = A x (analytic, Jacobian constant).
class LinearCV : public CollectiveVariable {
  public:
    explicit LinearCV(Mat a) : a_(std::move(a)) {}
    int latent_dim() const override { return static_cast<int>(a_.rows()); }
    int full_dim() const override { return static_cast<int>(a_.cols()); }
    Vec eval(const Vec& x, bool* clamped) const override;
    Mat jacobian(const Vec&) const override { return a_; }

  private:
    Mat a_;
};

// Scalar membership function chi tabulated on a regular 2D node lattice,
// evaluated by bilinear interpolation. Values are expected in [0,1].
// Queries outside the lattice clamp to the boundary; the clamp is reported,
// not fatal.
class GridChi : public CollectiveVariable {
  public:
    GridChi(kernels::TableMeta meta, std::vector<double> values);

    int latent_dim() const override { return 1; }
    int full_dim() const override { return 2; }
    Vec eval(const Vec& x, bool* clamped) const override;
    Mat jacobian(const Vec& x) const override;

    // batched access used by the ensemble propagators
    void eval_batch(const double* x1, const double* x2, std::size_t n,
                    double* val, double* gx, double* gy, uint8_t* clamped) const;

    const kernels::TableMeta& meta() const { return meta_; }
    const std::vector<double>& values() const { return values_; }

    // table as CSV (one node value per line, row-major) + JSON header with
    // the lattice geometry
    void save(const std::string& csv_path, const std::string& json_path) const;
    static GridChi load(const std::string& csv_path, const std::string& json_path);

    nlohmann::json meta_json() const;

  private:
    kernels::TableMeta meta_;
    std::vector<double> values_;
};

// xi(x) = chi(Rsub x) with Rsub the first two rows of an orthonormal matrix;
// J = J_chi(Rsub x) * Rsub.
class RotatedChi : public CollectiveVariable {
  public:
    RotatedChi(std::shared_ptr<const GridChi> chi, Mat rsub);
    int latent_dim() const override { return 1; }
    int full_dim() const override { return static_cast<int>(rsub_.cols()); }
    Vec eval(const Vec& x, bool* clamped) const override;
    Mat jacobian(const Vec& x) const override;

  private:
    std::shared_ptr<const GridChi> chi_;
    Mat rsub_;
};

} // namespace cvlift

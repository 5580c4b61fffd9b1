#include "cvlift/guidance.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>

namespace cvlift {

using nlohmann::json;

ReferencePath::ReferencePath(std::vector<double> times, Mat values)
    : times_(std::move(times)), values_(std::move(values)) {
    if (times_.size() < 2) throw InvalidInputError("reference needs at least 2 knots");
    if (static_cast<Eigen::Index>(times_.size()) != values_.rows())
        throw InvalidInputError("knot times and values disagree");
    for (std::size_t i = 1; i < times_.size(); ++i)
        if (!(times_[i] > times_[i - 1]))
            throw InvalidInputError("knot times must be strictly increasing");
}

ReferencePath ReferencePath::linear_ramp(double t0, const Vec& z0, double t1, const Vec& z1) {
    Mat vals(2, z0.size());
    vals.row(0) = z0.transpose();
    vals.row(1) = z1.transpose();
    return ReferencePath({t0, t1}, vals);
}

ReferencePath ReferencePath::linear_ramp(double t0, double z0, double t1, double z1) {
    Vec a(1), b(1);
    a[0] = z0;
    b[0] = z1;
    return linear_ramp(t0, a, t1, b);
}

Vec ReferencePath::eval(double t) const {
    if (t < times_.front() || t > times_.back())
        throw std::out_of_range("reference path queried outside its time span");
    auto it = std::upper_bound(times_.begin(), times_.end(), t);
    std::size_t j = std::min<std::size_t>(times_.size() - 1,
                                          static_cast<std::size_t>(it - times_.begin()));
    if (j == 0) j = 1;
    const double t0 = times_[j - 1], t1 = times_[j];
    const double w = (t - t0) / (t1 - t0);
    return values_.row(j - 1).transpose() * (1.0 - w) + values_.row(j).transpose() * w;
}

ReferencePath ReferencePath::extended_to(double t_new) const {
    if (t_new <= times_.back()) return *this;
    std::vector<double> t = times_;
    t.push_back(t_new);
    Mat v(values_.rows() + 1, values_.cols());
    v.topRows(values_.rows()) = values_;
    v.row(v.rows() - 1) = values_.row(values_.rows() - 1);
    return ReferencePath(std::move(t), std::move(v));
}

GainSchedule GainSchedule::constant(double g) {
    if (!(g >= 0.0)) throw InvalidInputError("gain must be nonnegative");
    GainSchedule s;
    s.kind_ = Kind::Constant;
    s.g0_ = g;
    return s;
}

GainSchedule GainSchedule::piecewise(std::vector<double> times, std::vector<double> values) {
    if (times.size() != values.size() || times.empty())
        throw InvalidInputError("piecewise gain needs matching times/values");
    for (std::size_t i = 1; i < times.size(); ++i)
        if (!(times[i] > times[i - 1]))
            throw InvalidInputError("gain times must be strictly increasing");
    for (double v : values)
        if (!(v >= 0.0)) throw InvalidInputError("gain must be nonnegative");
    GainSchedule s;
    s.kind_ = Kind::Piecewise;
    s.times_ = std::move(times);
    s.values_ = std::move(values);
    return s;
}

GainSchedule GainSchedule::ramp(double t0, double g0, double t1, double g1) {
    if (!(t1 > t0)) throw InvalidInputError("ramp needs t1 > t0");
    if (!(g0 >= 0.0) || !(g1 >= 0.0)) throw InvalidInputError("gain must be nonnegative");
    GainSchedule s;
    s.kind_ = Kind::Ramp;
    s.t0_ = t0;
    s.t1_ = t1;
    s.g0_ = g0;
    s.g1_ = g1;
    return s;
}

double GainSchedule::at(double t) const {
    switch (kind_) {
        case Kind::Constant:
            return g0_;
        case Kind::Piecewise: {
            auto it = std::upper_bound(times_.begin(), times_.end(), t);
            if (it == times_.begin()) return values_.front();
            return values_[static_cast<std::size_t>(it - times_.begin()) - 1];
        }
        case Kind::Ramp: {
            const double w = std::clamp((t - t0_) / (t1_ - t0_), 0.0, 1.0);
            return g0_ + w * (g1_ - g0_);
        }
    }
    return 0.0;
}

GainSchedule GainSchedule::scaled(double factor) const {
    if (!(factor >= 0.0)) throw InvalidInputError("gain scale must be nonnegative");
    GainSchedule s = *this;
    s.g0_ *= factor;
    s.g1_ *= factor;
    for (double& v : s.values_) v *= factor;
    return s;
}

json GainSchedule::to_json() const {
    switch (kind_) {
        case Kind::Constant:
            return json{{"kind", "constant"}, {"value", g0_}};
        case Kind::Piecewise:
            return json{{"kind", "piecewise"}, {"times", times_}, {"values", values_}};
        case Kind::Ramp:
            return json{{"kind", "ramp"}, {"t0", t0_}, {"t1", t1_}, {"g0", g0_}, {"g1", g1_}};
    }
    return {};
}

GainSchedule GainSchedule::from_json(const json& j) {
    if (j.is_number()) return constant(j.get<double>());
    const std::string kind = j.at("kind").get<std::string>();
    if (kind == "constant") return constant(j.at("value").get<double>());
    if (kind == "piecewise")
        return piecewise(j.at("times").get<std::vector<double>>(),
                         j.at("values").get<std::vector<double>>());
    if (kind == "ramp")
        return ramp(j.at("t0").get<double>(), j.at("g0").get<double>(),
                    j.at("t1").get<double>(), j.at("g1").get<double>());
    throw InvalidInputError("unknown gain schedule kind: " + kind);
}

namespace {

const GridChi* as_grid_chi(const CollectiveVariable* cv) {
    return dynamic_cast<const GridChi*>(cv);
}

// linear interpolation on uniform [0,1] nodes
double interp_nodes(const Vec& nodes, double zq) {
    const int n = static_cast<int>(nodes.size());
    const double h = 1.0 / (n - 1);
    double s = std::clamp(zq, 0.0, 1.0) / h;
    int i = std::min(static_cast<int>(s), n - 2);
    return nodes[i] + (s - i) * (nodes[i + 1] - nodes[i]);
}

} // namespace

ControlLaw ControlLaw::tracking(std::shared_ptr<const CollectiveVariable> cv,
                                ReferencePath ref, GainSchedule gain, ControlOptions opt) {
    ControlLaw law;
    law.kind_ = Kind::Tracking;
    law.cv_ = std::move(cv);
    law.grid_chi_ = as_grid_chi(law.cv_.get());
    law.ref_ = std::make_shared<ReferencePath>(std::move(ref));
    if (law.ref_->latent_dim() != law.cv_->latent_dim())
        throw InvalidInputError("reference and CV latent dimensions disagree");
    law.gain_ = std::move(gain);
    law.opt_ = opt;
    return law;
}

ControlLaw ControlLaw::optimal_guidance(std::shared_ptr<const CollectiveVariable> cv,
                                        std::shared_ptr<const LatentProbabilityTable> table,
                                        double kappa, double sigma, ControlOptions opt) {
    if (!(kappa >= 0.0)) throw InvalidInputError("kappa must be nonnegative");
    ControlLaw law;
    law.kind_ = Kind::OptimalGuidance;
    law.cv_ = std::move(cv);
    law.grid_chi_ = as_grid_chi(law.cv_.get());
    if (law.cv_->latent_dim() != 1)
        throw InvalidInputError("optimal guidance needs a scalar CV");
    law.table_ = std::move(table);
    law.kappa_ = kappa;
    law.sigma_ = sigma;
    law.opt_ = opt;
    // row-major copy of the derivative table for the batched bilinear kernel
    const auto& tab = *law.table_;
    law.dlogp_meta_ = kernels::TableMeta{
        tab.z[0], tab.s[0], tab.z[1] - tab.z[0], tab.s[1] - tab.s[0],
        static_cast<int>(tab.z.size()), static_cast<int>(tab.s.size())};
    law.dlogp_rowmajor_.resize(static_cast<std::size_t>(tab.s.size()) * tab.z.size());
    for (int k = 0; k < tab.s.size(); ++k)
        for (int i = 0; i < tab.z.size(); ++i)
            law.dlogp_rowmajor_[static_cast<std::size_t>(k) * tab.z.size() + i] = tab.dlogp(k, i);
    return law;
}

ControlLaw ControlLaw::optimal_guidance(std::shared_ptr<const CollectiveVariable> cv,
                                        std::shared_ptr<const SpectralApprox> approx,
                                        double kappa, double sigma, ControlOptions opt) {
    if (!(kappa >= 0.0)) throw InvalidInputError("kappa must be nonnegative");
    ControlLaw law;
    law.kind_ = Kind::OptimalGuidance;
    law.cv_ = std::move(cv);
    law.grid_chi_ = as_grid_chi(law.cv_.get());
    if (law.cv_->latent_dim() != 1)
        throw InvalidInputError("optimal guidance needs a scalar CV");
    law.spectral_ = std::move(approx);
    law.kappa_ = kappa;
    law.sigma_ = sigma;
    law.opt_ = opt;
    return law;
}

ControlLaw ControlLaw::committor_guidance(std::shared_ptr<const CollectiveVariable> cv,
                                          Vec q_table, double kappa, double sigma,
                                          double q_floor, ControlOptions opt) {
    if (!(kappa >= 0.0)) throw InvalidInputError("kappa must be nonnegative");
    if (q_table.size() < 3) throw InvalidInputError("committor table too small");
    ControlLaw law;
    law.kind_ = Kind::CommittorGuidance;
    law.cv_ = std::move(cv);
    law.grid_chi_ = as_grid_chi(law.cv_.get());
    if (law.cv_->latent_dim() != 1)
        throw InvalidInputError("committor guidance needs a scalar CV");
    law.kappa_ = kappa;
    law.sigma_ = sigma;
    law.opt_ = opt;
    const int n = static_cast<int>(q_table.size());
    const double h = 1.0 / (n - 1);
    law.log_deriv_table_.resize(n);
    for (int i = 0; i < n; ++i) {
        double dq;
        if (i == 0)
            dq = (q_table[1] - q_table[0]) / h;
        else if (i == n - 1)
            dq = (q_table[n - 1] - q_table[n - 2]) / h;
        else
            dq = (q_table[i + 1] - q_table[i - 1]) / (2.0 * h);
        law.log_deriv_table_[i] = dq / std::max(q_table[i], q_floor);
    }
    return law;
}

// scalar prefactor multiplying J^T for the table-driven laws
double ControlLaw::latent_scalar_factor(double t, double z) const {
    if (kind_ == Kind::OptimalGuidance) {
        const double d = table_ ? table_->dlogp_at(t, z) : spectral_->dlogp_at(t, z);
        return kappa_ * sigma_ * d;
    }
    return kappa_ * sigma_ * interp_nodes(log_deriv_table_, z);
}

void ControlLaw::eval(double t, const double* x, double* u) const {
    eval_scaled(t, x, u, 1.0);
}

void ControlLaw::eval_scaled(double t, const double* x, double* u, double gain_scale) const {
    const int d = cv_->full_dim();
    const int m = cv_->latent_dim();
    Eigen::Map<const Vec> xv(x, d);
    Vec xi = cv_->eval(xv);
    Mat jac = cv_->jacobian(xv);
    Vec uv(d);
    if (kind_ == Kind::Tracking) {
        Vec err = ref_->eval(t) - xi;
        const double g = gain_.at(t) * gain_scale;
        if (opt_.precond_rho > 0.0) {
            Mat jjt = jac * jac.transpose() + opt_.precond_rho * Mat::Identity(m, m);
            uv = jac.transpose() * (g * jjt.llt().solve(err));
        } else {
            uv = jac.transpose() * (g * err);
        }
    } else {
        uv = jac.transpose() * (latent_scalar_factor(t, xi[0]) * gain_scale);
    }
    if (opt_.u_max > 0.0) {
        const double nrm = uv.norm();
        if (nrm > opt_.u_max) uv *= opt_.u_max / nrm;
    }
    for (int i = 0; i < d; ++i) u[i] = uv[i];
}

bool ControlLaw::supports_batch_2d() const { return grid_chi_ != nullptr; }

void ControlLaw::eval_batch_2d(double t, double gain_scale, const double* x1,
                               const double* x2, std::size_t n, double* u1, double* u2,
                               double* z_out, double* gx, double* gy,
                               uint8_t* clamped) const {
    grid_chi_->eval_batch(x1, x2, n, z_out, gx, gy, clamped);
    if (kind_ == Kind::Tracking) {
        const double zbar = ref_->eval(t)[0];
        const double g = gain_.at(t) * gain_scale;
        const double rho = opt_.precond_rho;
        for (std::size_t i = 0; i < n; ++i) {
            double ge = g * (zbar - z_out[i]);
            if (rho > 0.0) ge /= gx[i] * gx[i] + gy[i] * gy[i] + rho;
            u1[i] = gx[i] * ge;
            u2[i] = gy[i] * ge;
        }
    } else if (kind_ == Kind::OptimalGuidance && table_) {
        // reuse gy... no: dlogp lookup needs its own scratch; evaluate into u1
        // via the bilinear kernel on (z, s) with s constant
        static thread_local std::vector<double> s_const, fac;
        s_const.assign(n, t);
        fac.resize(n);
        kernels::bilinear_eval_grad(dlogp_meta_, dlogp_rowmajor_.data(), z_out,
                                    s_const.data(), n, fac.data(), nullptr, nullptr,
                                    nullptr);
        const double k = kappa_ * sigma_ * gain_scale;
        for (std::size_t i = 0; i < n; ++i) {
            const double f = k * fac[i];
            u1[i] = gx[i] * f;
            u2[i] = gy[i] * f;
        }
    } else {
        for (std::size_t i = 0; i < n; ++i) {
            const double f = latent_scalar_factor(t, z_out[i]) * gain_scale;
            u1[i] = gx[i] * f;
            u2[i] = gy[i] * f;
        }
    }
    if (opt_.u_max > 0.0) {
        const double cap2 = opt_.u_max * opt_.u_max;
        for (std::size_t i = 0; i < n; ++i) {
            const double nn = u1[i] * u1[i] + u2[i] * u2[i];
            if (nn > cap2) {
                const double s = opt_.u_max / std::sqrt(nn);
                u1[i] *= s;
                u2[i] *= s;
            }
        }
    }
}

} // namespace cvlift

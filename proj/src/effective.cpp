#include "cvlift/effective.hpp"

#include "cvlift/rng.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>

namespace cvlift {

using nlohmann::json;

namespace {

// piecewise-linear interpolation on uniform nodes over [0,1], clamped
double interp_table(const Vec& nodes, double zq) {
    const int n = static_cast<int>(nodes.size());
    const double h = 1.0 / (n - 1);
    double s = std::clamp(zq, 0.0, 1.0) / h;
    int i = std::min(static_cast<int>(s), n - 2);
    const double t = s - i;
    return nodes[i] + t * (nodes[i + 1] - nodes[i]);
}

// trapezoid integral of node values (as density) over [lo, 1]
double trapezoid_tail(const Vec& z, const Vec& density, double lo) {
    const int n = static_cast<int>(z.size());
    double acc = 0.0;
    for (int i = 0; i + 1 < n; ++i) {
        const double a = z[i], b = z[i + 1];
        if (b <= lo) continue;
        double fa = density[i], fb = density[i + 1];
        double za = a;
        if (a < lo) {
            const double t = (lo - a) / (b - a);
            fa = fa + t * (fb - fa);
            za = lo;
        }
        acc += 0.5 * (fa + fb) * (b - za);
    }
    return acc;
}

} // namespace

// the diffusion coefficient is the natively tabulated quantity; interpolating
// D (not sigma) keeps D ~ alpha z near the latent ends, where the exact
// closure has vanishing noise
double EffectiveModel::sigma_at(double zq) const {
    return std::sqrt(2.0 * interp_table(d_eff, zq));
}

Vec EffectiveModel::apply_generator(const Vec& f) const {
    const int n = nodes();
    if (f.size() != n) throw InvalidInputError("node function has wrong size");
    Vec out(n);
    for (int i = 0; i < n; ++i) {
        double acc = 0.0;
        if (i + 1 < n) acc += rate_up[i] * (f[i + 1] - f[i]);
        if (i > 0) acc += rate_down[i - 1] * (f[i - 1] - f[i]);
        out[i] = acc;
    }
    return out;
}

EffectiveModel effective_from_tables(double c, double lambda, double sigma_full,
                                     const Vec& sigma_hat) {
    const int n = static_cast<int>(sigma_hat.size());
    if (n < 3) throw InvalidInputError("need at least 3 latent nodes");
    for (int i = 0; i < n; ++i)
        if (!(sigma_hat[i] >= 0.0)) throw InvalidInputError("sigma_hat must be nonnegative");

    EffectiveModel m;
    m.c = c;
    m.lambda = lambda;
    m.sigma_full = sigma_full;
    m.z.setLinSpaced(n, 0.0, 1.0);
    m.sigma_hat = sigma_hat;
    // keep the diffusion strictly positive so log D and b/D stay finite
    const double floor_sigma = 1e-8 * std::max(1.0, sigma_hat.maxCoeff());
    m.d_eff.resize(n);
    for (int i = 0; i < n; ++i) {
        const double s = std::max(sigma_hat[i], floor_sigma);
        m.d_eff[i] = 0.5 * s * s;
    }

    // V(z) = log D - int b/D, accumulated by the trapezoid rule from z = 0,
    // then shifted so min V = 0
    const double h = m.z[1] - m.z[0];
    Vec drift_over_d(n);
    for (int i = 0; i < n; ++i) drift_over_d[i] = (c + lambda * m.z[i]) / m.d_eff[i];
    m.v_eff.resize(n);
    double integral = 0.0;
    m.v_eff[0] = std::log(m.d_eff[0]);
    for (int i = 1; i < n; ++i) {
        integral += 0.5 * (drift_over_d[i - 1] + drift_over_d[i]) * h;
        m.v_eff[i] = std::log(m.d_eff[i]) - integral;
    }
    m.v_eff.array() -= m.v_eff.minCoeff();

    m.pi.resize(n);
    for (int i = 0; i < n; ++i) m.pi[i] = std::exp(-m.v_eff[i]);
    m.pi /= m.pi.sum();

    // tridiagonal rate matrix with exact detailed balance w.r.t. pi:
    //   L(i -> i+1) = D_{i+1/2}/h^2 sqrt(pi_{i+1}/pi_i)
    m.rate_up.resize(n - 1);
    m.rate_down.resize(n - 1);
    for (int i = 0; i + 1 < n; ++i) {
        const double d_face = 0.5 * (m.d_eff[i] + m.d_eff[i + 1]);
        const double ratio = std::exp(-0.5 * (m.v_eff[i + 1] - m.v_eff[i]));
        m.rate_up[i] = d_face / (h * h) * ratio;
        m.rate_down[i] = d_face / (h * h) / ratio;
    }
    return m;
}

EffectiveModel build_effective(const GridOperator& op, const ChiField& chi,
                               double lambda2, int n_nodes) {
    if (!(lambda2 < 0.0)) throw InvalidInputError("lambda2 must be negative");
    if (n_nodes < 3) throw InvalidInputError("need at least 3 latent nodes");
    const double span = chi.phi_max - chi.phi_min;
    if (!(span > 0.0)) throw InvalidInputError("degenerate eigenvector range");
    const double c = lambda2 * chi.phi_min / span;

    const Grid2D& g = op.grid();
    const Vec& mu = op.stationary();
    const Vec& cv = chi.node_values;
    const double h = 1.0 / (n_nodes - 1);

    Vec mass = Vec::Zero(n_nodes);
    Vec grad2_mass = Vec::Zero(n_nodes);
    auto val = [&](int i, int j) { return cv[g.index(i, j)]; };
    for (int j = 0; j < g.ny; ++j) {
        for (int i = 0; i < g.nx; ++i) {
            double gx, gy;
            if (i == 0)
                gx = (val(1, j) - val(0, j)) / g.hx();
            else if (i == g.nx - 1)
                gx = (val(i, j) - val(i - 1, j)) / g.hx();
            else
                gx = (val(i + 1, j) - val(i - 1, j)) / (2.0 * g.hx());
            if (j == 0)
                gy = (val(i, 1) - val(i, 0)) / g.hy();
            else if (j == g.ny - 1)
                gy = (val(i, j) - val(i, j - 1)) / g.hy();
            else
                gy = (val(i, j + 1) - val(i, j - 1)) / (2.0 * g.hy());
            const int cell = g.index(i, j);
            const int bin = std::clamp(static_cast<int>(std::lround(cv[cell] / h)), 0, n_nodes - 1);
            mass[bin] += mu[cell];
            grad2_mass[bin] += mu[cell] * (gx * gx + gy * gy);
        }
    }

    Vec sigma_hat(n_nodes);
    std::vector<int> empty;
    for (int b = 0; b < n_nodes; ++b) {
        if (mass[b] > 0.0) {
            sigma_hat[b] = op.sigma() * std::sqrt(grad2_mass[b] / mass[b]);
        } else {
            sigma_hat[b] = -1.0;
            empty.push_back(b);
        }
    }
    // fill empty bins by linear interpolation between the nearest filled ones
    for (int b : empty) {
        int lo = b - 1, hi = b + 1;
        while (lo >= 0 && sigma_hat[lo] < 0.0) --lo;
        while (hi < n_nodes && sigma_hat[hi] < 0.0) ++hi;
        if (lo < 0 && hi >= n_nodes)
            throw NumericError("sigma_hat estimation found no occupied bins");
        if (lo < 0)
            sigma_hat[b] = sigma_hat[hi];
        else if (hi >= n_nodes)
            sigma_hat[b] = sigma_hat[lo];
        else
            sigma_hat[b] = sigma_hat[lo] +
                           (sigma_hat[hi] - sigma_hat[lo]) * (b - lo) / double(hi - lo);
    }

    EffectiveModel m = effective_from_tables(c, lambda2, op.sigma(), sigma_hat);
    m.interpolated_bins = std::move(empty);
    m.edge_noise_free = true;
    return m;
}

PathRecord simulate_effective(const EffectiveModel& model, double z0, double dt,
                              long steps, uint64_t seed, uint64_t stream,
                              int record_stride) {
    if (z0 < 0.0 || z0 > 1.0) throw InvalidInputError("z0 must lie in [0,1]");
    if (!(dt > 0.0) || steps < 1) throw InvalidInputError("bad time stepping");
    if (record_stride < 1) throw InvalidInputError("record stride must be >= 1");

    StreamRng rng(seed, stream);
    const double sqdt = std::sqrt(dt);

    PathRecord rec;
    rec.t0 = 0.0;
    rec.dt = dt * record_stride;
    rec.dim = 1;
    rec.seed = seed;
    rec.stream = stream;
    rec.states.reserve(static_cast<std::size_t>(steps / record_stride) + 2);
    rec.states.push_back(z0);

    const double h = model.spacing();
    double zc = z0;
    for (long n = 0; n < steps; ++n) {
        const double drift = model.c + model.lambda * zc;
        double noise = model.sigma_at(zc);
        if (model.edge_noise_free && (zc < h || zc > 1.0 - h)) noise = 0.0;
        zc += drift * dt + noise * sqdt * rng.normal();
        // reflect into [0,1]; repeated folding handles large excursions
        while (zc < 0.0 || zc > 1.0) {
            if (zc < 0.0) zc = -zc;
            if (zc > 1.0) zc = 2.0 - zc;
        }
        if ((n + 1) % record_stride == 0) rec.states.push_back(zc);
    }
    return rec;
}

KoopmanResult estimate_koopman(const std::vector<double>& series, double sample_dt,
                               double tau, int n_boxes) {
    if (n_boxes < 2) throw InvalidInputError("need at least two boxes");
    const long lag = std::lround(tau / sample_dt);
    if (lag < 1) throw InvalidInputError("lag shorter than the sampling interval");
    if (static_cast<long>(series.size()) <= 100 * lag)
        throw InvalidInputError("trajectory too short for the requested lag");

    auto box_of = [&](double zq) {
        int b = static_cast<int>(std::clamp(zq, 0.0, 1.0) * n_boxes);
        return std::min(b, n_boxes - 1);
    };

    Mat counts = Mat::Zero(n_boxes, n_boxes);
    for (std::size_t i = 0; i + lag < series.size(); ++i)
        counts(box_of(series[i]), box_of(series[i + lag])) += 1.0;

    KoopmanResult out;
    out.tau = tau;
    for (int b = 0; b < n_boxes; ++b) {
        if (counts.row(b).sum() > 0.0 || counts.col(b).sum() > 0.0)
            out.kept_boxes.push_back(b);
        else
            out.dropped_boxes.push_back(b);
    }
    const int m = static_cast<int>(out.kept_boxes.size());
    out.transition.resize(m, m);
    for (int r = 0; r < m; ++r) {
        double rowsum = 0.0;
        for (int c = 0; c < m; ++c) rowsum += counts(out.kept_boxes[r], out.kept_boxes[c]);
        for (int c = 0; c < m; ++c)
            out.transition(r, c) =
                rowsum > 0.0 ? counts(out.kept_boxes[r], out.kept_boxes[c]) / rowsum
                             : (r == c ? 1.0 : 0.0);
    }

    Eigen::EigenSolver<Mat> es(out.transition);
    if (es.info() != Eigen::Success) throw NumericError("Koopman eigensolve failed");
    std::vector<std::complex<double>> evs(m);
    for (int i = 0; i < m; ++i) evs[i] = es.eigenvalues()[i];
    std::sort(evs.begin(), evs.end(),
              [](const auto& a, const auto& b) { return std::abs(a) > std::abs(b); });
    out.eigenvalues = evs;
    // finite sampling perturbs real eigenvalues slightly off the axis, so
    // "real" is judged with a noise tolerance and the modulus is used
    for (const auto& ev : evs) {
        if (out.implied_generator_eigenvalues.size() >= 5) break;
        if (ev.real() > 0.0 && std::abs(ev.imag()) < 0.02)
            out.implied_generator_eigenvalues.push_back(std::log(std::abs(ev)) / tau);
    }
    return out;
}

LatentProbabilityTable solve_bk(const EffectiveModel& model, double z_star,
                                double horizon, const BkOptions& opt) {
    if (!(z_star > 0.0 && z_star < 1.0)) throw InvalidInputError("z_star must be in (0,1)");
    if (!(horizon > 0.0) || opt.time_steps < 1) throw InvalidInputError("bad horizon");

    const int n = model.nodes();
    const int nt = opt.time_steps;
    const double ds = horizon / nt;

    LatentProbabilityTable tab;
    tab.z_star = z_star;
    tab.horizon = horizon;
    tab.p_floor = opt.p_floor;
    tab.z = model.z;
    tab.s.setLinSpaced(nt + 1, 0.0, horizon);
    tab.p.resize(nt + 1, n);
    tab.dlogp.resize(nt + 1, n);

    Vec p(n);
    for (int i = 0; i < n; ++i) p[i] = model.z[i] > z_star ? 1.0 : 0.0;
    if (opt.mollify_terminal) {
        const double h = model.spacing();
        for (int i = 0; i < n; ++i) {
            const double d = (model.z[i] - z_star) / h;
            if (d > -1.0 && d < 1.0) p[i] = 0.5 * (d + 1.0);
        }
    }
    tab.p.row(nt) = p.transpose();

    // implicit Euler: (I - ds L) p_k = p_{k+1}; constant tridiagonal system,
    // factored once (Thomas algorithm)
    Vec lower(n), diag(n), upper(n);
    for (int i = 0; i < n; ++i) {
        const double up = i + 1 < n ? model.rate_up[i] : 0.0;
        const double dn = i > 0 ? model.rate_down[i - 1] : 0.0;
        diag[i] = 1.0 + ds * (up + dn);
        upper[i] = i + 1 < n ? -ds * up : 0.0;
        lower[i] = i > 0 ? -ds * dn : 0.0;
    }
    Vec cp(n); // factored upper coefficients
    cp[0] = upper[0] / diag[0];
    for (int i = 1; i < n; ++i) cp[i] = upper[i] / (diag[i] - lower[i] * cp[i - 1]);

    Vec d(n);
    for (int k = nt - 1; k >= 0; --k) {
        d[0] = p[0] / diag[0];
        for (int i = 1; i < n; ++i)
            d[i] = (p[i] - lower[i] * d[i - 1]) / (diag[i] - lower[i] * cp[i - 1]);
        p[n - 1] = d[n - 1];
        for (int i = n - 2; i >= 0; --i) p[i] = d[i] - cp[i] * p[i + 1];
        tab.p.row(k) = p.transpose();
    }

    const double h = model.spacing();
    for (int k = 0; k <= nt; ++k) {
        for (int i = 0; i < n; ++i) {
            auto logp = [&](int idx) {
                return std::log(std::max(tab.p(k, idx), opt.p_floor));
            };
            double g;
            if (i == 0)
                g = (logp(1) - logp(0)) / h;
            else if (i == n - 1)
                g = (logp(n - 1) - logp(n - 2)) / h;
            else
                g = (logp(i + 1) - logp(i - 1)) / (2.0 * h);
            tab.dlogp(k, i) = g;
        }
    }
    return tab;
}

namespace {

double table_lookup(const Mat& table, const Vec& s_grid, const Vec& z_grid,
                    double sq, double zq) {
    const int nt = static_cast<int>(s_grid.size());
    const int nz = static_cast<int>(z_grid.size());
    const double ds = s_grid[1] - s_grid[0];
    const double dz = z_grid[1] - z_grid[0];
    double a = std::clamp((sq - s_grid[0]) / ds, 0.0, double(nt - 1));
    double b = std::clamp((zq - z_grid[0]) / dz, 0.0, double(nz - 1));
    int k = std::min(static_cast<int>(a), nt - 2);
    int i = std::min(static_cast<int>(b), nz - 2);
    const double ta = a - k, tb = b - i;
    const double v0 = table(k, i) + tb * (table(k, i + 1) - table(k, i));
    const double v1 = table(k + 1, i) + tb * (table(k + 1, i + 1) - table(k + 1, i));
    return v0 + ta * (v1 - v0);
}

} // namespace

double LatentProbabilityTable::p_at(double s_query, double z_query) const {
    return table_lookup(p, s, z, s_query, z_query);
}

double LatentProbabilityTable::dlogp_at(double s_query, double z_query) const {
    return table_lookup(dlogp, s, z, s_query, z_query);
}

void LatentProbabilityTable::save_csv(const std::string& path) const {
    std::FILE* f = std::fopen(path.c_str(), "w");
    if (!f) throw std::runtime_error("cannot open " + path);
    std::fprintf(f, "s,z,p,dlogp\n");
    for (int k = 0; k < s.size(); ++k)
        for (int i = 0; i < z.size(); ++i)
            std::fprintf(f, "%.10g,%.10g,%.10g,%.10g\n", s[k], z[i], p(k, i), dlogp(k, i));
    std::fclose(f);
}

SpectralApprox make_spectral_approx(const EffectiveModel& model, double z_star,
                                    double horizon) {
    if (!(z_star > 0.0 && z_star < 1.0)) throw InvalidInputError("z_star must be in (0,1)");
    const int n = model.nodes();
    const double h = model.spacing();
    // node masses -> density for the quadratures
    Vec density = model.pi / h;
    // trapezoid weights at the ends are h/2; converting masses to a density
    // table keeps the integrals consistent with sum(pi) = 1
    SpectralApprox sa;
    sa.z_star = z_star;
    sa.horizon = horizon;
    sa.c = model.c;
    sa.lambda = model.lambda;

    Vec phi2_num(n), tail_num(n);
    for (int i = 0; i < n; ++i) {
        const double b = model.c + model.lambda * model.z[i];
        phi2_num[i] = b * b * density[i];
        tail_num[i] = b * density[i];
    }
    double a2 = 0.0;
    for (int i = 0; i + 1 < n; ++i) a2 += 0.5 * (phi2_num[i] + phi2_num[i + 1]) * h;
    sa.a = std::sqrt(a2);
    sa.pi_b = trapezoid_tail(model.z, density, z_star);
    sa.gamma_star = trapezoid_tail(model.z, tail_num, z_star) / sa.a;
    return sa;
}

double SpectralApprox::p_at(double s_query, double z_query) const {
    const double e = std::exp(lambda * (horizon - s_query));
    const double val = pi_b + gamma_star / a * e * (c + lambda * z_query);
    return std::clamp(val, p_floor, 1.0);
}

double SpectralApprox::dlogp_at(double s_query, double z_query) const {
    const double e = std::exp(lambda * (horizon - s_query));
    const double denom = a * pi_b + gamma_star * e * (c + lambda * z_query);
    return gamma_star * lambda * e / std::max(denom, a * p_floor);
}

Vec latent_committor(const EffectiveModel& model, double z_a, double z_b) {
    if (!(z_a < z_b) || !(z_a >= 0.0) || !(z_b <= 1.0))
        throw InvalidInputError("need 0 <= z_a < z_b <= 1");
    const int n = model.nodes();
    Vec q = Vec::Zero(n);
    int first = -1, last = -1;
    for (int i = 0; i < n; ++i) {
        if (model.z[i] >= z_b) q[i] = 1.0;
        const bool interior = model.z[i] > z_a && model.z[i] < z_b;
        if (interior && first < 0) first = i;
        if (interior) last = i;
    }
    if (first < 0) return q;
    const int m = last - first + 1;

    // tridiagonal Dirichlet solve on the interior nodes
    Vec lower(m), diag(m), upper(m), rhs = Vec::Zero(m);
    for (int l = 0; l < m; ++l) {
        const int i = first + l;
        const double up = model.rate_up[i];
        const double dn = model.rate_down[i - 1];
        diag[l] = -(up + dn);
        upper[l] = l + 1 < m ? up : 0.0;
        lower[l] = l > 0 ? dn : 0.0;
        if (l == 0) rhs[l] -= dn * q[i - 1];        // = 0 on A, kept for clarity
        if (l + 1 == m) rhs[l] -= up * q[i + 1];    // = 1 on B
    }
    Vec cp(m), d(m);
    cp[0] = upper[0] / diag[0];
    d[0] = rhs[0] / diag[0];
    for (int l = 1; l < m; ++l) {
        const double den = diag[l] - lower[l] * cp[l - 1];
        cp[l] = upper[l] / den;
        d[l] = (rhs[l] - lower[l] * d[l - 1]) / den;
    }
    q[first + m - 1] = d[m - 1];
    for (int l = m - 2; l >= 0; --l) q[first + l] = d[l] - cp[l] * q[first + l + 1];
    for (int l = 0; l < m; ++l)
        q[first + l] = std::clamp(q[first + l], 0.0, 1.0);
    return q;
}

json EffectiveModel::to_json() const {
    json j;
    j["c"] = c;
    j["lambda"] = lambda;
    j["sigma_full"] = sigma_full;
    j["sigma_hat"] = std::vector<double>(sigma_hat.data(), sigma_hat.data() + sigma_hat.size());
    j["interpolated_bins"] = interpolated_bins;
    j["edge_noise_free"] = edge_noise_free;
    return j;
}

EffectiveModel EffectiveModel::from_json(const json& j) {
    auto sh = j.at("sigma_hat").get<std::vector<double>>();
    Vec v = Eigen::Map<Vec>(sh.data(), static_cast<Eigen::Index>(sh.size()));
    EffectiveModel m = effective_from_tables(j.at("c").get<double>(),
                                             j.at("lambda").get<double>(),
                                             j.at("sigma_full").get<double>(), v);
    if (j.contains("interpolated_bins"))
        m.interpolated_bins = j.at("interpolated_bins").get<std::vector<int>>();
    m.edge_noise_free = j.value("edge_noise_free", false);
    return m;
}

void EffectiveModel::save_tables_csv(const std::string& path) const {
    std::FILE* f = std::fopen(path.c_str(), "w");
    if (!f) throw std::runtime_error("cannot open " + path);
    std::fprintf(f, "z,sigma_hat,d_eff,v_eff,pi\n");
    for (int i = 0; i < nodes(); ++i)
        std::fprintf(f, "%.10g,%.10g,%.10g,%.10g,%.10g\n", z[i], sigma_hat[i], d_eff[i],
                     v_eff[i], pi[i]);
    std::fclose(f);
}

} // namespace cvlift

#include "cvlift/grid_operator.hpp"

#include <Eigen/SparseCholesky>
#include <Eigen/SparseLU>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

namespace cvlift {

int Grid2D::locate(double x, double y) const {
    int i = static_cast<int>(std::floor((x - xmin) / hx()));
    int j = static_cast<int>(std::floor((y - ymin) / hy()));
    i = std::clamp(i, 0, nx - 1);
    j = std::clamp(j, 0, ny - 1);
    return index(i, j);
}

GridOperator GridOperator::build_sqra(const SystemSpec& spec, const Grid2D& grid) {
    if (spec.dim() != 2)
        throw InvalidInputError("grid discretization is 2D only");
    return build_sqra(
        [&spec](double x, double y) {
            Vec p(2);
            p << x, y;
            return spec.potential(p);
        },
        grid, spec.sigma());
}

GridOperator GridOperator::build_sqra(const std::function<double(double, double)>& potential,
                                      const Grid2D& grid, double sigma) {
    if (grid.nx < 3 && grid.ny < 3)
        throw InvalidInputError("grid needs at least 3 cells along one axis");
    if (!(grid.hx() > 0.0) || !(grid.hy() > 0.0))
        throw InvalidInputError("degenerate grid");
    if (!(sigma > 0.0)) throw InvalidInputError("sigma must be positive");

    const int n = grid.cells();
    const double beta = 2.0 / (sigma * sigma);

    Vec v(n);
    for (int j = 0; j < grid.ny; ++j)
        for (int i = 0; i < grid.nx; ++i)
            v[grid.index(i, j)] = potential(grid.cx(i), grid.cy(j));

    // stationary weights relative to the minimum so exp() stays in range
    const double vmin = v.minCoeff();
    Vec mu(n);
    for (int c = 0; c < n; ++c) mu[c] = std::exp(-beta * (v[c] - vmin));
    mu /= mu.sum();

    const double rate_x = sigma * sigma / (2.0 * grid.hx() * grid.hx());
    const double rate_y = sigma * sigma / (2.0 * grid.hy() * grid.hy());

    std::vector<Eigen::Triplet<double>> trips;
    trips.reserve(static_cast<std::size_t>(n) * 5);
    Vec diag = Vec::Zero(n);
    auto add_pair = [&](int c, int nb, double rate) {
        // sqrt(mu_nb/mu_c) via the potential difference; detailed balance
        // mu_c Q_cn = mu_nb Q_nc is exact by symmetry of the exponent
        const double forward = rate * std::exp(-0.5 * beta * (v[nb] - v[c]));
        trips.emplace_back(c, nb, forward);
        diag[c] -= forward;
    };
    for (int j = 0; j < grid.ny; ++j) {
        for (int i = 0; i < grid.nx; ++i) {
            const int c = grid.index(i, j);
            if (i + 1 < grid.nx) add_pair(c, grid.index(i + 1, j), rate_x);
            if (i > 0) add_pair(c, grid.index(i - 1, j), rate_x);
            if (j + 1 < grid.ny) add_pair(c, grid.index(i, j + 1), rate_y);
            if (j > 0) add_pair(c, grid.index(i, j - 1), rate_y);
        }
    }
    for (int c = 0; c < n; ++c) trips.emplace_back(c, c, diag[c]);

    GridOperator op;
    op.grid_ = grid;
    op.sigma_ = sigma;
    op.mu_ = std::move(mu);
    op.q_.resize(n, n);
    op.q_.setFromTriplets(trips.begin(), trips.end());
    op.q_.makeCompressed();
    return op;
}

namespace {

// S = D^{1/2} Q D^{-1/2}, D = diag(mu); symmetric under detailed balance.
// Assembled from averaged symmetric images to kill roundoff asymmetry.
Eigen::SparseMatrix<double> symmetrized(const GridOperator& op) {
    const auto& q = op.rate_matrix();
    const Vec& mu = op.stationary();
    const int n = static_cast<int>(q.rows());
    Vec sq(n);
    for (int i = 0; i < n; ++i) sq[i] = std::sqrt(mu[i]);
    std::vector<Eigen::Triplet<double>> trips;
    trips.reserve(q.nonZeros());
    for (int k = 0; k < q.outerSize(); ++k) {
        for (Eigen::SparseMatrix<double>::InnerIterator it(q, k); it; ++it) {
            const int i = static_cast<int>(it.row());
            const int j = static_cast<int>(it.col());
            if (i == j) {
                trips.emplace_back(i, j, it.value());
            } else if (i < j) {
                const double sij = sq[i] / sq[j] * it.value();
                const double sji = sq[j] / sq[i] * q.coeff(j, i);
                const double s = 0.5 * (sij + sji);
                trips.emplace_back(i, j, s);
                trips.emplace_back(j, i, s);
            }
        }
    }
    Eigen::SparseMatrix<double> s(n, n);
    s.setFromTriplets(trips.begin(), trips.end());
    s.makeCompressed();
    return s;
}

struct SymEigen {
    Vec values;   // descending
    Mat vectors;  // of the symmetrized operator
    int iterations = 0;
    bool dense = false;
};

SymEigen dense_top_eigenpairs(const Eigen::SparseMatrix<double>& s, int k) {
    Mat dense = Mat(s);
    dense = 0.5 * (dense + dense.transpose()).eval();
    Eigen::SelfAdjointEigenSolver<Mat> es(dense);
    if (es.info() != Eigen::Success) throw NumericError("dense eigensolver failed");
    const int n = static_cast<int>(dense.rows());
    SymEigen out;
    out.dense = true;
    out.values.resize(k);
    out.vectors.resize(n, k);
    for (int c = 0; c < k; ++c) {
        out.values[c] = es.eigenvalues()[n - 1 - c];
        out.vectors.col(c) = es.eigenvectors().col(n - 1 - c);
    }
    return out;
}

// Shift-inverted Lanczos with full reorthogonalization for the eigenvalues
// of S closest to zero. Operator: (shift I - S)^{-1}, SPD for shift > 0,
// factored once with a sparse Cholesky. The known kernel direction
// sqrt(mu) is projected out and re-attached analytically.
SymEigen lanczos_top_eigenpairs(const Eigen::SparseMatrix<double>& s, int k,
                                const Vec& sqrt_mu, const EigenOptions& opt) {
    const int n = static_cast<int>(s.rows());
    Eigen::SparseMatrix<double> shifted = -s;
    double shift = opt.shift;
    for (int i = 0; i < n; ++i) shifted.coeffRef(i, i) += shift;
    shifted.makeCompressed();

    Eigen::SimplicialLLT<Eigen::SparseMatrix<double>> llt;
    llt.compute(shifted);
    for (int tries = 0; llt.info() != Eigen::Success && tries < 3; ++tries) {
        const double bump = shift * 99.0;
        for (int i = 0; i < n; ++i) shifted.coeffRef(i, i) += bump;
        shift += bump;
        llt.compute(shifted);
    }
    if (llt.info() != Eigen::Success)
        throw NumericError("sparse Cholesky of shifted generator failed");

    Vec kernel = sqrt_mu / sqrt_mu.norm();
    const int want = k - 1; // kernel pair handled analytically

    std::vector<Vec> basis;
    std::vector<double> alpha, beta;
    Vec v = Vec::Ones(n);
    v -= kernel.dot(v) * kernel;
    v.normalize();
    basis.push_back(v);

    Mat ritz_vecs;
    Vec ritz_vals;
    int it = 0;
    for (; it < opt.max_iterations; ++it) {
        Vec w = llt.solve(basis.back());
        w -= kernel.dot(w) * kernel;
        const double a = basis.back().dot(w);
        alpha.push_back(a);
        w -= a * basis.back();
        if (it > 0) w -= beta.back() * basis[it - 1];
        for (const Vec& b : basis) w -= b.dot(w) * b; // full reorthogonalization
        const double bnorm = w.norm();

        const int m = static_cast<int>(alpha.size());
        if (m >= want) {
            Mat t = Mat::Zero(m, m);
            for (int i = 0; i < m; ++i) t(i, i) = alpha[i];
            for (int i = 0; i + 1 < m; ++i) {
                t(i, i + 1) = beta[i];
                t(i + 1, i) = beta[i];
            }
            Eigen::SelfAdjointEigenSolver<Mat> es(t);
            bool converged = true;
            for (int c = 0; c < want; ++c) {
                const int col = m - 1 - c;
                const double resid = std::abs(bnorm * es.eigenvectors()(m - 1, col));
                if (resid > opt.tol * std::max(1.0, std::abs(es.eigenvalues()[col]))) {
                    converged = false;
                    break;
                }
            }
            if (converged || bnorm < 1e-14 || it + 1 == opt.max_iterations) {
                ritz_vals.resize(want);
                ritz_vecs = Mat::Zero(n, want);
                for (int c = 0; c < want; ++c) {
                    const int col = m - 1 - c;
                    ritz_vals[c] = es.eigenvalues()[col];
                    for (int i = 0; i < m; ++i)
                        ritz_vecs.col(c) += es.eigenvectors()(i, col) * basis[i];
                }
                ++it;
                break;
            }
        }
        if (bnorm < 1e-14) throw NumericError("Lanczos breakdown before convergence");
        beta.push_back(bnorm);
        basis.push_back(w / bnorm);
    }
    if (ritz_vals.size() == 0)
        throw NumericError("Lanczos did not converge within the iteration cap");

    SymEigen out;
    out.iterations = it;
    out.values.resize(k);
    out.vectors.resize(n, k);
    // kernel pair: the Rayleigh quotient reports the honest roundoff level
    out.values[0] = kernel.dot(s * kernel);
    out.vectors.col(0) = kernel;
    for (int c = 0; c < want; ++c) {
        if (!(ritz_vals[c] > 0.0))
            throw NumericError("shift-inverted spectrum not positive; increase shift");
        out.values[c + 1] = shift - 1.0 / ritz_vals[c];
        out.vectors.col(c + 1) = ritz_vecs.col(c).normalized();
    }
    return out;
}

double eig_residual(const Eigen::SparseMatrix<double>& q, const Vec& v, double lam) {
    const double scale = v.cwiseAbs().maxCoeff();
    if (!(scale > 0) || !std::isfinite(scale)) return std::numeric_limits<double>::infinity();
    return (q * v - lam * v).cwiseAbs().maxCoeff() / scale;
}

// Inverse iteration on the plain (non-symmetrized) rate matrix. Needed
// because the similarity back-transform w / sqrt(mu) amplifies roundoff by
// 1/sqrt(mu) in cells with vanishing stationary weight; Q itself has
// bounded entries, so its eigenvector components stay clean everywhere.
Vec refine_eigvec(const Eigen::SparseMatrix<double>& q, double lam, const Vec& start,
                  const Vec& mu) {
    const int n = static_cast<int>(q.rows());
    // clamp the start to the range seen on numerically reliable cells
    const double mu_floor = 1e-12 * mu.maxCoeff();
    double lo = 0.0, hi = 0.0;
    for (int i = 0; i < n; ++i) {
        if (mu[i] >= mu_floor) {
            lo = std::min(lo, start[i]);
            hi = std::max(hi, start[i]);
        }
    }
    Vec x = start.cwiseMax(lo).cwiseMin(hi);
    const double nrm0 = x.cwiseAbs().maxCoeff();
    if (nrm0 > 0) x /= nrm0;

    double offset = std::max(1e-8, 1e-7 * std::abs(lam));
    for (int attempt = 0; attempt < 3; ++attempt) {
        Eigen::SparseMatrix<double> a = q;
        const double target = lam + offset;
        for (int i = 0; i < n; ++i) a.coeffRef(i, i) -= target;
        a.makeCompressed();
        Eigen::SparseLU<Eigen::SparseMatrix<double>> lu;
        lu.compute(a);
        if (lu.info() != Eigen::Success) {
            offset *= 100.0;
            continue;
        }
        Vec y = x;
        for (int itn = 0; itn < 3; ++itn) {
            Vec z = lu.solve(y);
            const double nrm = z.cwiseAbs().maxCoeff();
            if (!(nrm > 0) || !std::isfinite(nrm)) break;
            y = z / nrm;
        }
        // keep orientation stable relative to the start vector
        if (y.dot(x) < 0) y = -y;
        return y;
    }
    return x;
}

} // namespace

EigenResult dominant_eigenpairs(const GridOperator& op, int k, const EigenOptions& opt) {
    const int n = op.cells();
    if (k < 2) throw InvalidInputError("need at least two eigenpairs");
    if (k >= n) throw InvalidInputError("k must be much smaller than the grid size");

    Eigen::SparseMatrix<double> s = symmetrized(op);
    Vec sqrt_mu(n);
    for (int i = 0; i < n; ++i) sqrt_mu[i] = std::sqrt(op.stationary()[i]);

    SymEigen sym = (n <= opt.dense_cutoff)
                       ? dense_top_eigenpairs(s, k)
                       : lanczos_top_eigenpairs(s, k, sqrt_mu, opt);

    EigenResult out;
    out.values = sym.values;
    out.iterations = sym.iterations;
    out.dense = sym.dense;
    out.vectors.resize(n, k);
    out.vectors.col(0) = Vec::Ones(n);
    for (int c = 1; c < k; ++c) {
        Vec v = sym.vectors.col(c).cwiseQuotient(sqrt_mu);
        Vec refined = refine_eigvec(op.rate_matrix(), sym.values[c], v, op.stationary());
        if (eig_residual(op.rate_matrix(), refined, sym.values[c]) >
            eig_residual(op.rate_matrix(), v, sym.values[c]))
            refined = v;
        const double scale = refined.cwiseAbs().maxCoeff();
        out.vectors.col(c) = refined / (scale > 0 ? scale : 1.0);
    }
    return out;
}

ChiField make_chi(const GridOperator& op, const Vec& eigvec,
                  const Vec& anchor_low, const Vec& anchor_high) {
    const Grid2D& g = op.grid();
    if (eigvec.size() != g.cells()) throw InvalidInputError("eigenvector has wrong size");

    Vec phi = eigvec;
    const int lo = g.locate(anchor_low[0], anchor_low[1]);
    const int hi = g.locate(anchor_high[0], anchor_high[1]);
    if (phi[hi] < phi[lo]) phi = -phi;

    const double pmin = phi.minCoeff();
    const double pmax = phi.maxCoeff();
    const double span = pmax - pmin;
    if (!(span > 0) || span <= 1e-12 * std::max(std::abs(pmax), std::abs(pmin)))
        throw InvalidInputError("eigenvector is constant; chi undefined");

    ChiField out;
    out.phi_min = pmin;
    out.phi_max = pmax;
    out.node_values = (phi.array() - pmin) / span;

    kernels::TableMeta meta;
    meta.x0 = g.cx(0);
    meta.y0 = g.cy(0);
    meta.dx = g.hx();
    meta.dy = g.hy();
    meta.nx = g.nx;
    meta.ny = g.ny;
    std::vector<double> vals(out.node_values.data(), out.node_values.data() + g.cells());
    out.chi = std::make_shared<GridChi>(meta, std::move(vals));
    return out;
}

std::vector<int> sublevel_cells(const Vec& chi_values, double level) {
    std::vector<int> cells;
    for (int i = 0; i < chi_values.size(); ++i)
        if (chi_values[i] <= level) cells.push_back(i);
    return cells;
}

std::vector<int> superlevel_cells(const Vec& chi_values, double level) {
    std::vector<int> cells;
    for (int i = 0; i < chi_values.size(); ++i)
        if (chi_values[i] >= level) cells.push_back(i);
    return cells;
}

CommittorResult solve_committor(const GridOperator& op,
                                const std::vector<int>& a_cells,
                                const std::vector<int>& b_cells) {
    const int n = op.cells();
    if (a_cells.empty() || b_cells.empty())
        throw InvalidInputError("A and B must be nonempty");
    std::vector<int> role(n, 0); // 0 interior, 1 A, 2 B
    for (int c : a_cells) role.at(c) = 1;
    for (int c : b_cells) {
        if (role.at(c) == 1) throw InvalidInputError("A and B overlap");
        role[c] = 2;
    }

    std::vector<int> to_local(n, -1);
    std::vector<int> interior;
    for (int c = 0; c < n; ++c)
        if (role[c] == 0) {
            to_local[c] = static_cast<int>(interior.size());
            interior.push_back(c);
        }
    const int m = static_cast<int>(interior.size());

    Vec q_full = Vec::Zero(n);
    for (int c : b_cells) q_full[c] = 1.0;
    if (m == 0) return {q_full, 0.0};

    // restricted Dirichlet problem on the plain rate matrix: Q_cc q = -Q_cB 1
    const auto& q = op.rate_matrix();
    std::vector<Eigen::Triplet<double>> trips;
    Vec rhs = Vec::Zero(m);
    for (int k = 0; k < q.outerSize(); ++k) {
        for (Eigen::SparseMatrix<double>::InnerIterator it(q, k); it; ++it) {
            const int i = static_cast<int>(it.row());
            if (role[i] != 0) continue;
            const int j = static_cast<int>(it.col());
            if (role[j] == 0)
                trips.emplace_back(to_local[i], to_local[j], it.value());
            else if (role[j] == 2)
                rhs[to_local[i]] -= it.value();
        }
    }
    Eigen::SparseMatrix<double> a(m, m);
    a.setFromTriplets(trips.begin(), trips.end());
    a.makeCompressed();

    Eigen::SparseLU<Eigen::SparseMatrix<double>> solver;
    solver.compute(a);
    if (solver.info() != Eigen::Success)
        throw NumericError("committor system factorization failed");
    Vec w = solver.solve(rhs);
    if (solver.info() != Eigen::Success || !w.allFinite())
        throw NumericError("committor solve failed");
    const double resid = (a * w - rhs).cwiseAbs().maxCoeff();
    const double row_scale = Vec(a.diagonal()).cwiseAbs().maxCoeff();
    if (!(resid <= 1e-8 * std::max(1.0, row_scale)))
        throw NumericError("committor solve inaccurate (disconnected interior?)");

    CommittorResult out;
    out.q = q_full;
    for (int l = 0; l < m; ++l) out.q[interior[l]] = w[l];
    for (int c = 0; c < n; ++c) {
        const double viol = std::max(0.0 - out.q[c], out.q[c] - 1.0);
        out.max_violation = std::max(out.max_violation, viol);
    }
    out.q = out.q.cwiseMax(0.0).cwiseMin(1.0);
    return out;
}

TPTFields tpt_fields(const GridOperator& op, const Vec& committor,
                     const std::vector<int>& a_cells, const std::vector<int>& b_cells) {
    const Grid2D& g = op.grid();
    const int n = g.cells();
    if (committor.size() != n) throw InvalidInputError("committor has wrong size");

    TPTFields out;
    out.committor = committor;
    out.a_cells = a_cells;
    out.b_cells = b_cells;
    out.reactive_density =
        op.stationary().array() * committor.array() * (1.0 - committor.array());

    out.flux.resize(n, 2);
    const double half_s2 = 0.5 * op.sigma() * op.sigma();
    auto qv = [&](int i, int j) { return committor[g.index(i, j)]; };
    for (int j = 0; j < g.ny; ++j) {
        for (int i = 0; i < g.nx; ++i) {
            double dqx, dqy;
            if (i == 0)
                dqx = (qv(1, j) - qv(0, j)) / g.hx();
            else if (i == g.nx - 1)
                dqx = (qv(i, j) - qv(i - 1, j)) / g.hx();
            else
                dqx = (qv(i + 1, j) - qv(i - 1, j)) / (2.0 * g.hx());
            if (j == 0)
                dqy = (qv(i, 1) - qv(i, 0)) / g.hy();
            else if (j == g.ny - 1)
                dqy = (qv(i, j) - qv(i, j - 1)) / g.hy();
            else
                dqy = (qv(i, j + 1) - qv(i, j - 1)) / (2.0 * g.hy());
            const int c = g.index(i, j);
            out.flux(c, 0) = half_s2 * op.stationary()[c] * dqx;
            out.flux(c, 1) = half_s2 * op.stationary()[c] * dqy;
        }
    }
    return out;
}

void GridOperator::save_coo(const std::string& path) const {
    std::FILE* f = std::fopen(path.c_str(), "w");
    if (!f) throw std::runtime_error("cannot open " + path);
    for (int k = 0; k < q_.outerSize(); ++k)
        for (Eigen::SparseMatrix<double>::InnerIterator it(q_, k); it; ++it)
            std::fprintf(f, "%ld %ld %.17g\n", static_cast<long>(it.row()),
                         static_cast<long>(it.col()), it.value());
    std::fclose(f);
}

Eigen::SparseMatrix<double> GridOperator::load_coo(const std::string& path, int n) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path);
    std::vector<Eigen::Triplet<double>> trips;
    long i, j;
    double v;
    while (in >> i >> j >> v) trips.emplace_back(i, j, v);
    Eigen::SparseMatrix<double> q(n, n);
    q.setFromTriplets(trips.begin(), trips.end());
    q.makeCompressed();
    return q;
}

void save_fields_csv(const std::string& path, const Grid2D& grid,
                     const std::vector<std::pair<std::string, const Vec*>>& columns) {
    std::FILE* f = std::fopen(path.c_str(), "w");
    if (!f) throw std::runtime_error("cannot open " + path);
    std::fprintf(f, "x,y");
    for (const auto& [name, col] : columns) {
        (void)col;
        std::fprintf(f, ",%s", name.c_str());
    }
    std::fprintf(f, "\n");
    for (int j = 0; j < grid.ny; ++j) {
        for (int i = 0; i < grid.nx; ++i) {
            const int c = grid.index(i, j);
            std::fprintf(f, "%.10g,%.10g", grid.cx(i), grid.cy(j));
            for (const auto& [name, col] : columns) {
                (void)name;
                std::fprintf(f, ",%.10g", (*col)[c]);
            }
            std::fprintf(f, "\n");
        }
    }
    std::fclose(f);
}

} // namespace cvlift

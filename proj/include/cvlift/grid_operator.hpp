#pragma once

#include "cvlift/cv.hpp"
#include "cvlift/system.hpp"

#include <Eigen/Sparse>

#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace cvlift {

struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Regular cell-centered 2D grid. Cell (i, j) has center
// (xmin + (i+1/2) hx, ymin + (j+1/2) hy), linear index j*nx + i.
struct Grid2D {
    double xmin = -2.5, xmax = 2.5;
    double ymin = -2.5, ymax = 2.5;
    int nx = 200, ny = 200;

    double hx() const { return (xmax - xmin) / nx; }
    double hy() const { return (ymax - ymin) / ny; }
    int cells() const { return nx * ny; }
    int index(int i, int j) const { return j * nx + i; }
    double cx(int i) const { return xmin + (i + 0.5) * hx(); }
    double cy(int j) const { return ymin + (j + 0.5) * hy(); }
    // cell containing (x, y), clamped into the grid
    int locate(double x, double y) const;
};

// Rate-matrix discretization of the generator
//   L f = b . grad f + sigma^2/2 Laplace f,   b = -grad V,
// on a regular grid via the square-root approximation: for 4-neighbor
// cells i, j
//   Q_ij = sigma^2/(2 h^2) sqrt(mu_j / mu_i),   mu_i ~ exp(-beta V_i),
// with beta = 2/sigma^2 and h the spacing along the connecting axis.
// Rows sum to zero; missing neighbors at the boundary give the no-flux
// closure; detailed balance mu_i Q_ij = mu_j Q_ji holds by construction.
class GridOperator {
  public:
    static GridOperator build_sqra(const SystemSpec& spec, const Grid2D& grid);
    static GridOperator build_sqra(const std::function<double(double, double)>& potential,
                                   const Grid2D& grid, double sigma);

    const Grid2D& grid() const { return grid_; }
    double sigma() const { return sigma_; }
    // stationary cell masses, normalized to sum 1
    const Vec& stationary() const { return mu_; }
    const Eigen::SparseMatrix<double>& rate_matrix() const { return q_; }
    int cells() const { return grid_.cells(); }

    // coordinate-format text export/import of Q ("i j value" per line)
    void save_coo(const std::string& path) const;
    static Eigen::SparseMatrix<double> load_coo(const std::string& path, int n);

  private:
    Grid2D grid_;
    double sigma_ = 0.0;
    Vec mu_;
    Eigen::SparseMatrix<double> q_;
};

struct EigenOptions {
    // dense solve below this size, shift-inverted Lanczos above
    int dense_cutoff = 2500;
    double shift = 1e-4;
    int max_iterations = 300;
    double tol = 1e-10;
};

struct EigenResult {
    Vec values;   // descending: 0 = lambda_1 > lambda_2 >= ...
    Mat vectors;  // cells x k, eigenvectors of Q (not the symmetrized form)
    int iterations = 0;
    bool dense = false;
};

// Dominant (smallest-magnitude) eigenpairs of the generator. The operator is
// symmetrized by similarity with diag(sqrt(mu)), solved, and transformed
// back, so the spectrum is real by construction.
EigenResult dominant_eigenpairs(const GridOperator& op, int k,
                                const EigenOptions& opt = {});

// chi = (phi - min phi)/(max phi - min phi) with phi oriented so that
// chi(anchor_low) < chi(anchor_high). Keeps the oriented eigenvector range
// for downstream drift constants.
struct ChiField {
    std::shared_ptr<GridChi> chi;
    double phi_min = 0.0;
    double phi_max = 0.0;
    Vec node_values; // chi per cell in grid order
};

ChiField make_chi(const GridOperator& op, const Vec& eigvec,
                  const Vec& anchor_low = (Vec(2) << -1.0, -1.0).finished(),
                  const Vec& anchor_high = (Vec(2) << 1.0, 1.0).finished());

// cells where chi <= level (for A) / chi >= level (for B)
std::vector<int> sublevel_cells(const Vec& chi_values, double level);
std::vector<int> superlevel_cells(const Vec& chi_values, double level);

struct CommittorResult {
    Vec q;                    // committor per cell, clipped to [0,1]
    double max_violation = 0; // worst out-of-range value before clipping
};

// Solves Q q = 0 on the complement of A and B with q|_A = 0, q|_B = 1
// through the symmetrized form (sparse Cholesky).
CommittorResult solve_committor(const GridOperator& op,
                                const std::vector<int>& a_cells,
                                const std::vector<int>& b_cells);

struct TPTFields {
    Vec committor;
    Vec reactive_density;       // mu_i q_i (1 - q_i)
    Mat flux;                   // cells x 2, (sigma^2/2) mu grad q
    std::vector<int> a_cells;
    std::vector<int> b_cells;
};

TPTFields tpt_fields(const GridOperator& op, const Vec& committor,
                     const std::vector<int>& a_cells, const std::vector<int>& b_cells);

// CSV export (x, y, value...) of per-cell fields
void save_fields_csv(const std::string& path, const Grid2D& grid,
                     const std::vector<std::pair<std::string, const Vec*>>& columns);

} // namespace cvlift

#pragma once

#include "cvlift/grid_operator.hpp"
#include "cvlift/path.hpp"

#include <complex>

namespace cvlift {

// Closed 1D model for the latent coordinate z = chi(X) in [0,1]:
//   dz = (c + lambda z) dt + sigma_hat(z) dW,   reflected at 0 and 1,
// with tabulated noise sigma_hat(z), diffusion D(z) = sigma_hat(z)^2 / 2,
// potential V(z) = log D(z) - int (c + lambda z')/D(z') dz' (min = 0) and
// stationary node masses pi ~ exp(-V) (sum 1). The discrete generator is a
// tridiagonal rate matrix with exact detailed balance w.r.t. pi and no-flux
// boundary closure.
struct EffectiveModel {
    double c = 0.0;
    double lambda = 0.0;
    double sigma_full = 0.0; // noise intensity of the underlying full system
    Vec z;                   // n_z uniform nodes on [0,1]
    Vec sigma_hat;
    Vec d_eff;
    Vec v_eff;
    Vec pi;
    // generator rates: up[i] = L(i -> i+1), down[i] = L(i+1 -> i)
    Vec rate_up;
    Vec rate_down;
    std::vector<int> interpolated_bins; // sigma_hat bins filled from neighbors
    // treat the outermost grid cells as noise-free in simulation: the exact
    // closure has vanishing noise at the latent ends (grad chi = 0 at the
    // eigenfunction extrema) and the bin averages overestimate it there,
    // which destroys the slow timescale
    bool edge_noise_free = false;

    int nodes() const { return static_cast<int>(z.size()); }
    double spacing() const { return z[1] - z[0]; }
    double sigma_at(double zq) const; // linear interpolation, clamped
    // generator applied to a node function
    Vec apply_generator(const Vec& f) const;

    nlohmann::json to_json() const;
    static EffectiveModel from_json(const nlohmann::json& j);
    void save_tables_csv(const std::string& path) const;
};

// Assembles V_eff, pi and the generator from drift constants and a noise
// table given on uniform nodes over [0,1].
EffectiveModel effective_from_tables(double c, double lambda, double sigma_full,
                                     const Vec& sigma_hat);

// Estimates the latent model from the grid discretization:
//   c       = lambda2 * min(phi) / (max(phi) - min(phi))
//   sigma_hat(z_i)^2 = sigma^2 * sum_{cells in bin i} mu ||grad chi||^2 / sum mu
// Empty bins are filled by linear interpolation from their neighbors and
// flagged in interpolated_bins.
EffectiveModel build_effective(const GridOperator& op, const ChiField& chi,
                               double lambda2, int n_nodes = 101);

// Euler-Maruyama for the latent SDE with reflection into [0,1]. The record
// keeps every record_stride-th state (dt of the record scales accordingly).
PathRecord simulate_effective(const EffectiveModel& model, double z0, double dt,
                              long steps, uint64_t seed, uint64_t stream = 0,
                              int record_stride = 1);

struct KoopmanResult {
    Mat transition;                  // row-stochastic on the kept boxes
    std::vector<int> kept_boxes;
    std::vector<int> dropped_boxes;  // never visited
    std::vector<std::complex<double>> eigenvalues; // by modulus, descending
    // log(Re lambda_k)/tau for the leading eigenvalues with positive real part
    std::vector<double> implied_generator_eigenvalues;
    double tau = 0.0;
};

// Maximum-likelihood transition matrix between uniform boxes on [0,1] at lag
// tau, from a trajectory sampled every sample_dt time units (all overlapping
// pairs are counted).
KoopmanResult estimate_koopman(const std::vector<double>& series, double sample_dt,
                               double tau, int n_boxes);

// Backward-equation table p(s, z) = P(z_t > z_star | z_s = z) on the model's
// node grid, advanced by implicit Euler from the terminal indicator, plus
// d/dz log p with the probability floored at p_floor.
struct LatentProbabilityTable {
    double z_star = 0.0;
    double horizon = 0.0;
    double p_floor = 1e-12;
    Vec z;           // n_z nodes
    Vec s;           // n_t+1 times, s[k] = k * horizon / n_t
    Mat p;           // (n_t+1) x n_z
    Mat dlogp;       // same layout

    double p_at(double s_query, double z_query) const;
    double dlogp_at(double s_query, double z_query) const;
    void save_csv(const std::string& path) const;
};

struct BkOptions {
    int time_steps = 400;
    double p_floor = 1e-12;
    bool mollify_terminal = false; // linear ramp over the straddling cell
};

LatentProbabilityTable solve_bk(const EffectiveModel& model, double z_star,
                                double horizon, const BkOptions& opt = {});

// Two-term spectral closed form, valid for strongly metastable models with
// linear drift: p(s,z) ~ pi(B) + (gamma/a) e^{lambda (t-s)} (c + lambda z).
struct SpectralApprox {
    double z_star = 0.0;
    double horizon = 0.0;
    double pi_b = 0.0;       // stationary mass of (z_star, 1]
    double a = 0.0;          // normalization of phi_2 = (c + lambda z)/a
    double gamma_star = 0.0;
    double c = 0.0;
    double lambda = 0.0;
    double p_floor = 1e-12;

    double p_at(double s_query, double z_query) const;
    double dlogp_at(double s_query, double z_query) const;
};

SpectralApprox make_spectral_approx(const EffectiveModel& model, double z_star,
                                    double horizon);

// Committor of the discrete latent generator between {z <= z_a} and
// {z >= z_b}; solved on the interior nodes, clipped to [0,1].
Vec latent_committor(const EffectiveModel& model, double z_a, double z_b);

} // namespace cvlift

#pragma once

#include <vector>

#include "diffem/gmm.hpp"

namespace diffem {

double gaussian_w2(const Vector& m0, const Matrix& s0, const Vector& m1, const Matrix& s1);
double bures_distance(const Matrix& s0, const Matrix& s1);

// c[k, l] = W2^2 between component k of mu0 and component l of mu1.
Matrix cost_matrix(const GmmParams& mu0, const GmmParams& mu1);

struct OtSolution {
    Matrix plan;
    double cost = 0.0;
    Vector u;  // row potentials, u_0 = 0
    Vector v;  // column potentials; u_k + v_l = c_kl on the basis
    int pivots = 0;
};

// Exact transportation problem by the network simplex on the bipartite graph.
OtSolution solve_discrete_ot(const Matrix& c, const Vector& w0, const Vector& w1);

struct Mw2Result {
    double value = 0.0;
    Matrix plan;
    Matrix cost;
};

Mw2Result mw2_squared(const GmmParams& mu0, const GmmParams& mu1);

// Gradient w.r.t. the parameters of mu0. Covariance gradients are symmetric d x d matrices.
struct GmmGradient {
    Vector weights;
    Matrix means;
    std::vector<Matrix> covariances;
    bool near_singular = false;

    // Flat layout matching to_flat.
    Vector flat() const;
};

// Plan held fixed. With `weights` set, the weight gradient is the minimum-norm centred row
// potential of the optimal transport problem; otherwise it is zero.
GmmGradient mw2_grad_params(const GmmParams& mu0, const GmmParams& mu1, bool weights = false);

// Minimum-norm centred row potential over all optimal duals of the transport problem with
// cost c and optimal plan `plan`. On a degenerate problem the value is not differentiable in
// the weights and this is the steepest-descent subgradient. Falls back to the centred
// `fallback` when more than kMaxEnumeratedCells cells are off the support.
inline constexpr int kMaxEnumeratedCells = 16;
Vector min_norm_row_potential(const Matrix& c, const Matrix& plan, const Vector& fallback);

struct Mw2ValueGrad {
    double value = 0.0;
    Matrix plan;
    GmmGradient grad;
};

Mw2ValueGrad mw2_value_and_grad(const GmmParams& mu0, const GmmParams& mu1, bool weights = false);

// Gradient of sum_{k,l} plan_kl W2^2(g0_k, g1_l) w.r.t. mu0's means and covariances.
GmmGradient plan_cost_grad(const GmmParams& mu0, const GmmParams& mu1, const Matrix& plan);

struct UnbalancedConfig {
    double lambda0 = 10.0;
    double lambda1 = 0.1;
    double entropic_eps = 1e-6;
    int max_iter = 100000;
    double tol = 1e-12;
};

struct Umw2Result {
    double value = 0.0;
    Matrix plan;
};

// min <P, C> + lambda0 KL(P 1 | a) + lambda1 KL(P^T 1 | b) with KL(p|q) = sum p log(p/q) - p + q.
Umw2Result unbalanced_ot(const Matrix& c, const Vector& a, const Vector& b, const UnbalancedConfig& cfg);
Umw2Result umw2_squared(const GmmParams& mu0, const GmmParams& mu1, const UnbalancedConfig& cfg);

double generalised_kl(const Vector& p, const Vector& q);

// Means A m_k, covariances A Sigma_k A^T for A with orthonormal rows.
GmmParams project_gmm(const GmmParams& mu, const Matrix& axes);

// Pull-back of a gradient on project_gmm(mu, axes) to mu.
GmmGradient pullback_projection_grad(const GmmGradient& g, const Matrix& axes);

struct StabilityInstance {
    GmmParams mu0, mu1;          // true mixtures
    GmmParams mu0_hat, mu1_hat;  // estimates, matched component-wise
};

struct StabilityRecord {
    double one_sample_lhs = 0.0, one_sample_rhs = 0.0;
    double two_sample_lhs = 0.0, two_sample_rhs = 0.0;
    double rho_m = 0.0, rho_sigma = 0.0, rho_w = 0.0, r_m = 0.0, r_sigma = 0.0;
};

struct StabilityReport {
    std::vector<StabilityRecord> records;
    int one_sample_violations = 0;
    int two_sample_violations = 0;
};

// MW2^2(mu_hat, mu) <= rho_N + (||w_hat - w||_1 / 2) * max_{k,l} W2^2(g_hat_k, g_l),
// rho_N = max_k W2^2(g_hat_k, g_k).
double one_sample_bound(double rho_n, double weight_l1, double max_cross_cost);
// 8 R_m rho_m + 8 R_S rho_S + 8 (R_m^2 + R_S^2) rho_w.
double two_sample_bound(double r_m, double r_sigma, double rho_m, double rho_sigma, double rho_w);

StabilityReport check_stability_bounds(const std::vector<StabilityInstance>& instances, double slack = 1e-9);

}  // namespace diffem

#pragma once

#include <vector>

#include "diffem/gmm.hpp"

namespace diffem {

// Exact squared 2-Wasserstein distance between weighted atoms on the line (quantile coupling).
double w2_squared_1d(const Vector& x, const Vector& a, const Vector& y, const Vector& b);

// E3(alpha, eta) = W2^2(mu, nu) with
//   mu = (1/6 + a1) d_{eta1} + (1/6 + a2) d_{eta2} + (2/3 - a1 - a2) d_{1 + eta3},
//   nu = (d_0 + d_{1 - eps} + d_{1 + eps}) / 3.
double e3_energy(double epsilon, const Vector& alpha, const Vector& eta);

struct E3Report {
    double epsilon = 0.0;
    double value_at_origin = 0.0;
    double expected_value = 0.0;  // 2 eps^2 / 3
    double grid_min = 0.0;        // over the grid, flat direction excluded
    int grid_points = 0;
    int lower_points = 0;         // grid points below the origin value by more than the slack
    double value_at_target = 0.0;  // alpha = (1/6, 1/6), eta = (0, 1 - eps, eps): mu = nu
};

// Evaluates E3 on the cube {-radius, ..., radius}^5 with `steps` points per side, skipping
// multiples of the flat direction (1, -1, 0, 0, 0).
E3Report fixture_e3_landscape(double epsilon, double radius = 0.01, int steps = 5, double slack = 1e-15);

struct VanishingGradientReport {
    double epsilon = 0.0;
    double m_star = 0.5;
    double gradient_norm = 0.0;
    double parameter_drift = 0.0;  // max |F(theta*, X_eps) - theta*| over flat coordinates
    double energy = 0.0;
};

// Two-component 1D construction: theta* = ((1/3, 2/3), (0, m*), eps^2), target
// (2/3) N(0, eps^2) + (1/3) N(1, eps^2), data (-eps, eps, m*-eps, m*+eps, m*-eps, m*+eps), one EM
// step with frozen covariances and the AD gradient through the weight-aware MW2 gradient.
VanishingGradientReport fixture_vanishing_gradient(double epsilon, double m_star = 0.5);

// E2(x1, x2, alpha) = W2^2(alpha d_{x1} + (1 - alpha) d_{x2}, gamma d_{y1} + (1 - gamma) d_{y2}).
double e2_energy(const Vector& x1, const Vector& x2, double alpha, double gamma, const Vector& y1,
                 const Vector& y2);

struct N2Minimum {
    double x1 = 0.0, x2 = 0.0, alpha = 0.0, energy = 0.0;
    bool boundary = false;  // touches the alpha range of the grid
};

struct N2Report {
    std::vector<N2Minimum> grid_minima;      // d = 1 grid local minima
    std::vector<double> descent_distances;   // distance of each descent end point to nu's parameters
    int descents_at_target = 0;              // distance <= tol
    double energy_at_target = 0.0;
    double z_star_min_directional = 0.0;     // min one-sided derivative at z* over h3 > 0
};

struct N2Config {
    double gamma = 0.3;
    double y1 = 0.0, y2 = 1.0;
    int grid = 41;        // points per axis; x in [-1.5, 2.5], alpha in (0, 1)
    int starts = 100;
    int max_iters = 20000;
    double tol = 1e-4;
    std::uint64_t seed = 0;
};

// Grid scan and multi-start descent of E2 in d = 1. Descent alternates the exact
// barycentric update of the atoms with a backtracking projected step on alpha.
N2Report fixture_n2_landscape(const N2Config& cfg);

}  // namespace diffem

#pragma once

#include <functional>
#include <optional>
#include <vector>

#include "diffem/em_diff.hpp"
#include "diffem/gmm.hpp"
#include "diffem/gmm_ot.hpp"

namespace diffem {

// Loss on GMM parameters. Returns the value and, when grad is non-null, writes the flat
// gradient (layout of to_flat).
using GmmLoss = std::function<double(const GmmParams& theta, Vector* grad)>;

GmmLoss mw2_loss(const GmmParams& target, bool weight_gradient = false);
GmmLoss umw2_loss(const GmmParams& target, const UnbalancedConfig& cfg);
// Sum of MW2^2 to every target.
GmmLoss barycentre_loss(const std::vector<GmmParams>& targets, bool weight_gradient = false);
// Sum of MW2^2(project(theta, axes_i), target_i).
GmmLoss projected_barycentre_loss(const std::vector<GmmParams>& targets, const std::vector<Matrix>& axes);

struct FlowConfig {
    GradMethod grad_method = GradMethod::AD;
    int gd_steps = 100;
    double learning_rate = 0.1;
    double subsample_ratio = 1.0;
    EmConfig em;
    std::uint64_t seed = 0;
    int snapshot_every = 0;  // 0 disables point snapshots
    // Halve the step and retry while the energy increases. Ignored by WARM.
    bool halve_on_increase = false;
    bool weight_gradient = false;
};

struct FlowTrace {
    std::vector<double> energies;          // E(X_s) for s = 0..gd_steps
    std::vector<Matrix> point_snapshots;   // X_0 and every snapshot_every steps
    std::vector<Vector> weight_snapshots;  // weights of the fitted GMM at every energy evaluation
    Matrix final_points;
    std::optional<GmmParams> final_theta;
    double final_learning_rate = 0.0;
    double wall_time = 0.0;
};

struct EnergyGrad {
    double energy = 0.0;
    Matrix x_grad;  // n x d
    std::optional<GmmParams> theta;  // the fitted GMM the loss was evaluated on
};

// E(X) = loss(F^T_X(theta0)) and its gradient in X with the chosen Jacobian strategy
// (AD, AI or OS).
EnergyGrad flow_energy_grad(const GmmParams& theta0, const Matrix& x, const EmConfig& em, GradMethod method,
                            const GmmLoss& loss, bool need_grad = true);

// Gradient descent X <- X - lr * n * dE/dX, with n the number of points the EM fit sees.
FlowTrace run_loss_flow(const Dataset& x0, const GmmParams& theta0, const GmmLoss& loss, const FlowConfig& cfg);

// MW2 flow towards a fixed target GMM. When subsample_ratio < 1 and a target cloud is given,
// the target is refitted on a fresh subsample of it at every step.
FlowTrace run_flow(const Dataset& x0, const GmmParams& theta0, const GmmParams& target, const FlowConfig& cfg,
                   const Matrix* target_cloud = nullptr);

struct WeightPathologyConfig {
    Vector target_weights;  // 3 entries
    int points = 300;
    double separation = 4.0;
    double target_std = 0.5;
    double offset = 0.5;  // source = target translated by -offset * separation in both coordinates
    FlowConfig flow;
};

struct WeightPathologyResult {
    FlowTrace trace;
    GmmParams target;
    double weight_l1 = 0.0;
    double final_energy = 0.0;
};

// Standard EM (weights updated) flow towards a 3-component target with the given weights.
// The source cloud is the target layout translated, with weights (1/5, 1/5, 3/5) unless the
// target weights are uniform.
WeightPathologyResult run_weight_pathology(const WeightPathologyConfig& cfg);

FlowTrace run_barycentre_flow(const std::vector<GmmParams>& targets, const Dataset& x0, const GmmParams& theta0,
                              const FlowConfig& cfg);

// Axes that drop coordinate i of R^3, for i = 0, 1, 2.
std::vector<Matrix> coordinate_drop_axes();

FlowTrace run_projected_barycentre(const std::vector<GmmParams>& targets_2d, const Dataset& x0,
                                   const GmmParams& theta0, const FlowConfig& cfg);

}  // namespace diffem

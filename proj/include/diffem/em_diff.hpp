#pragma once

#include <optional>
#include <string>
#include <utility>

#include <json.hpp>

#include "diffem/gmm.hpp"

namespace diffem {

enum class GradMethod { AD, AI, OS, FD, WARM };

std::string to_string(GradMethod m);
GradMethod parse_grad_method(const std::string& s);

// Partial derivatives of the responsibilities. Row i*K + k holds d gamma_ik.
// d_w: (nK) x K, d_m: (nK) x (K d), d_sigma: (nK) x (K d^2) with full d x d coordinates.
// d_x: (nK) x d holds d gamma_ik / d x_i; derivatives w.r.t. x_j, j != i, vanish.
struct GammaJacobian {
    Matrix d_w;
    Matrix d_m;
    Matrix d_sigma;
    Matrix d_x;
};

GammaJacobian d_gamma(const GmmParams& theta, const Matrix& x);

// dF/dtheta (p x p). Frozen blocks (weights under fix_weights, covariances when they are
// not updated) are constants: their rows and columns are zero.
Matrix dF_dtheta(const GmmParams& theta, const Matrix& x, const EmConfig& cfg);
// dF/dX (p x nd); column i*d + a is the derivative w.r.t. X(i, a).
Matrix dF_dx(const GmmParams& theta, const Matrix& x, const EmConfig& cfg);

struct EmJacobians {
    Matrix d_theta;
    Matrix d_x;
};

EmJacobians em_jacobians(const GmmParams& theta, const Matrix& x, const EmConfig& cfg);

// Vector-Jacobian product of one EM step: given the cotangent of F(theta, X) in flat
// coordinates, returns the cotangents of theta (flat) and X (n x d).
struct EmVjp {
    Vector theta_bar;
    Matrix x_bar;
};

EmVjp em_step_vjp(const GmmParams& theta, const Matrix& x, const EmConfig& cfg, const Vector& out_bar);

struct GradientReport {
    Matrix jacobian;  // p x nd
    GradMethod method = GradMethod::AD;
    double fixed_point_residual = 0.0;
    double spectral_norm_dF_dtheta = 0.0;
};

GradientReport jacobian_ad(const GmmParams& theta0, const Matrix& x, const EmConfig& cfg);
GradientReport jacobian_ai(const GmmParams& theta_T, const Matrix& x, const EmConfig& cfg);
GradientReport jacobian_os(const GmmParams& theta_T_minus_1, const Matrix& x, const EmConfig& cfg);
GradientReport jacobian_fd(const GmmParams& theta0, const Matrix& x, const EmConfig& cfg, double eps);

inline GradientReport jacobian_ad(const GmmParams& t, const Dataset& x, const EmConfig& c) { return jacobian_ad(t, x.points(), c); }
inline GradientReport jacobian_ai(const GmmParams& t, const Dataset& x, const EmConfig& c) { return jacobian_ai(t, x.points(), c); }
inline GradientReport jacobian_os(const GmmParams& t, const Dataset& x, const EmConfig& c) { return jacobian_os(t, x.points(), c); }

// Largest singular value by power iteration on A^T A.
double spectral_norm(const Matrix& a, int max_iter = 100, double tol = 1e-10);

// ||J - ref||_F^2 / ||ref||_F^2 (0 when both vanish).
double relative_mse(const Matrix& j, const Matrix& ref);

// theta_{t+1} = F(theta_t, X_t); X_{t+1} = X_t - lr * loss_grad^T dF/dX(theta_t, X_t).
std::pair<GmmParams, Matrix> warm_start_step(const GmmParams& theta_t, const Matrix& x_t,
                                             const Vector& loss_grad, double lr, const EmConfig& cfg);

// Condition estimate above which the implicit solve is rejected.
inline constexpr double kMaxCondition = 1e14;

nlohmann::json gradient_report_to_json(const GradientReport& report,
                                       const std::optional<std::string>& payload_path = std::nullopt);

}  // namespace diffem

#include "diffem/em_diff.hpp"

#include <cmath>
#include <limits>

#include "diffem/errors.hpp"
#include "diffem/gmm_io.hpp"

namespace diffem {

namespace {

// Quantities shared by the differentials of one EM step at (theta, X).
struct StepCache {
    int n = 0, kc = 0, d = 0;
    Matrix gamma;                // n x K
    std::vector<Matrix> prec;    // Sigma_k^{-1}
    std::vector<Matrix> u;       // n x d, rows Sigma_k^{-1}(x_i - m_k)
    Vector mass;                 // Gamma_k
    Matrix new_means;            // F_m, K x d
    std::vector<Matrix> centred; // n x d, rows x_i - F_m_k
    std::vector<Matrix> scatter; // sum_i gamma_ik D_i D_i^T
    std::vector<Vector> first;   // sum_i gamma_ik D_i
};

StepCache make_cache(const GmmParams& theta, const Matrix& x) {
    StepCache c;
    c.n = static_cast<int>(x.rows());
    c.kc = theta.components();
    c.d = theta.dim();
    if (x.cols() != c.d) throw ArgumentError("EM differentials: dimension mismatch");
    c.gamma = e_step(theta, x).gamma;
    c.mass = c.gamma.colwise().sum().transpose();
    c.new_means.resize(c.kc, c.d);
    for (int k = 0; k < c.kc; ++k) {
        c.prec.push_back(cholesky(theta.covariance(k)).inverse());
        c.u.push_back((x.rowwise() - theta.means().row(k)) * c.prec[k]);
        c.new_means.row(k) = (c.gamma.col(k).transpose() * x) / c.mass(k);
        Matrix dk = x.rowwise() - c.new_means.row(k);
        const Matrix weighted = dk.array().colwise() * c.gamma.col(k).array();
        c.scatter.push_back(weighted.transpose() * dk);
        c.first.push_back(weighted.colwise().sum().transpose());
        c.centred.push_back(std::move(dk));
    }
    return c;
}

struct Layout {
    int kc, d;
    int w(int k) const { return k; }
    int m(int k, int a) const { return kc + k * d + a; }
    int s(int k, int a, int b) const { return kc + kc * d + k * d * d + a * d + b; }
    int size() const { return kc * (1 + d + d * d); }
};

// d gamma_{i.} / d x_i as a K x d matrix.
Matrix gamma_dx_row(const StepCache& c, int i) {
    Vector avg = Vector::Zero(c.d);
    for (int l = 0; l < c.kc; ++l) avg += c.gamma(i, l) * c.u[l].row(i).transpose();
    Matrix out(c.kc, c.d);
    for (int k = 0; k < c.kc; ++k)
        out.row(k) = c.gamma(i, k) * (avg - c.u[k].row(i).transpose()).transpose();
    return out;
}

GammaJacobian gamma_jacobian(const GmmParams& theta, const StepCache& c) {
    const int n = c.n, kc = c.kc, d = c.d;
    GammaJacobian g;
    g.d_w = Matrix::Zero(n * kc, kc);
    g.d_m = Matrix::Zero(n * kc, kc * d);
    g.d_sigma = Matrix::Zero(n * kc, kc * d * d);
    g.d_x = Matrix::Zero(n * kc, d);
    for (int i = 0; i < n; ++i) {
        const Matrix dx = gamma_dx_row(c, i);
        for (int k = 0; k < kc; ++k) {
            const int row = i * kc + k;
            const double gik = c.gamma(i, k);
            g.d_x.row(row) = dx.row(k);
            for (int l = 0; l < kc; ++l) {
                const double delta = (k == l) ? 1.0 : 0.0;
                const double coef = gik * (delta - c.gamma(i, l));
                g.d_w(row, l) = coef / theta.weights()(l);
                g.d_m.block(row, l * d, 1, d) = coef * c.u[l].row(i);
                const Vector ul = c.u[l].row(i).transpose();
                const Matrix h = 0.5 * coef * (ul * ul.transpose() - c.prec[l]);
                for (int a = 0; a < d; ++a)
                    for (int b = 0; b < d; ++b) g.d_sigma(row, l * d * d + a * d + b) = h(a, b);
            }
        }
    }
    return g;
}

// Pushes a perturbation of gamma (columns of G_k, one n x q block per component) through
// the M-step formulas. Rows follow the flat layout; columns follow the perturbations.
Matrix push_gamma(const StepCache& c, const std::vector<Matrix>& gk, const EmConfig& cfg) {
    const int n = c.n, kc = c.kc, d = c.d;
    const int q = static_cast<int>(gk[0].cols());
    const Layout lay{kc, d};
    Matrix out = Matrix::Zero(lay.size(), q);
    for (int k = 0; k < kc; ++k) {
        const Matrix& g = gk[k];
        const double mass = c.mass(k);
        const Eigen::RowVectorXd dmass = g.colwise().sum();
        if (!cfg.fix_weights) out.row(lay.w(k)) = dmass / static_cast<double>(n);
        const Matrix dm = c.centred[k].transpose() * g / mass;  // d x q
        out.block(lay.m(k, 0), 0, d, q) = dm;
        if (!cfg.update_covariances) continue;
        for (int a = 0; a < d; ++a) {
            for (int b = 0; b < d; ++b) {
                const Vector outer = c.centred[k].col(a).cwiseProduct(c.centred[k].col(b));
                Eigen::RowVectorXd row = (outer.transpose() * g - c.scatter[k](a, b) / mass * dmass) / mass;
                row -= (c.first[k](a) * dm.row(b) + dm.row(a) * c.first[k](b)) / mass;
                out.row(lay.s(k, a, b)) = row;
            }
        }
    }
    return out;
}

Matrix dtheta_from_cache(const GmmParams& theta, const StepCache& c, const EmConfig& cfg) {
    const int n = c.n, kc = c.kc, d = c.d;
    const Layout lay{kc, d};
    const GammaJacobian gj = gamma_jacobian(theta, c);
    Matrix full(n * kc, lay.size());
    full << gj.d_w, gj.d_m, gj.d_sigma;
    if (cfg.fix_weights) full.leftCols(kc).setZero();
    if (!cfg.update_covariances) full.rightCols(kc * d * d).setZero();
    std::vector<Matrix> gk(kc, Matrix(n, lay.size()));
    for (int i = 0; i < n; ++i)
        for (int k = 0; k < kc; ++k) gk[k].row(i) = full.row(i * kc + k);
    return push_gamma(c, gk, cfg);
}

Matrix dx_from_cache(const StepCache& c, const EmConfig& cfg) {
    const int n = c.n, kc = c.kc, d = c.d;
    const Layout lay{kc, d};
    Matrix out = Matrix::Zero(lay.size(), n * d);
    for (int i = 0; i < n; ++i) {
        const Matrix dg = gamma_dx_row(c, i);  // K x d
        for (int k = 0; k < kc; ++k) {
            const double mass = c.mass(k);
            const double gik = c.gamma(i, k);
            const Vector di = c.centred[k].row(i).transpose();
            for (int a = 0; a < d; ++a) {
                const int col = i * d + a;
                const double dgam = dg(k, a);
                if (!cfg.fix_weights) out(lay.w(k), col) = dgam / static_cast<double>(n);
                Vector dm = dgam * di / mass;
                dm(a) += gik / mass;
                out.block(lay.m(k, 0), col, d, 1) = dm;
                if (!cfg.update_covariances) continue;
                Matrix ds = dgam * (di * di.transpose() - c.scatter[k] / mass) / mass;
                ds.row(a) += gik / mass * di.transpose();
                ds.col(a) += gik / mass * di;
                ds -= (c.first[k] * dm.transpose() + dm * c.first[k].transpose()) / mass;
                for (int r = 0; r < d; ++r)
                    for (int s = 0; s < d; ++s) out(lay.s(k, r, s), col) = ds(r, s);
            }
        }
    }
    return out;
}

}  // namespace

std::string to_string(GradMethod m) {
    switch (m) {
        case GradMethod::AD: return "AD";
        case GradMethod::AI: return "AI";
        case GradMethod::OS: return "OS";
        case GradMethod::FD: return "FD";
        case GradMethod::WARM: return "WARM";
    }
    return "?";
}

GradMethod parse_grad_method(const std::string& s) {
    if (s == "AD") return GradMethod::AD;
    if (s == "AI") return GradMethod::AI;
    if (s == "OS") return GradMethod::OS;
    if (s == "FD") return GradMethod::FD;
    if (s == "WARM") return GradMethod::WARM;
    throw ArgumentError("unknown gradient method '" + s + "' (expected AD, AI, OS, FD or WARM)");
}

GammaJacobian d_gamma(const GmmParams& theta, const Matrix& x) {
    return gamma_jacobian(theta, make_cache(theta, x));
}

Matrix dF_dtheta(const GmmParams& theta, const Matrix& x, const EmConfig& cfg) {
    return dtheta_from_cache(theta, make_cache(theta, x), cfg);
}

Matrix dF_dx(const GmmParams& theta, const Matrix& x, const EmConfig& cfg) {
    return dx_from_cache(make_cache(theta, x), cfg);
}

EmJacobians em_jacobians(const GmmParams& theta, const Matrix& x, const EmConfig& cfg) {
    const StepCache c = make_cache(theta, x);
    return EmJacobians{dtheta_from_cache(theta, c, cfg), dx_from_cache(c, cfg)};
}

EmVjp em_step_vjp(const GmmParams& theta, const Matrix& x, const EmConfig& cfg, const Vector& out_bar) {
    const StepCache c = make_cache(theta, x);
    const int n = c.n, kc = c.kc, d = c.d;
    const Layout lay{kc, d};
    if (out_bar.size() != lay.size()) throw ArgumentError("em_step_vjp: cotangent has wrong length");
    Matrix gamma_bar = Matrix::Zero(n, kc);
    EmVjp out{Vector::Zero(lay.size()), Matrix::Zero(n, d)};
    for (int k = 0; k < kc; ++k) {
        const double mass = c.mass(k);
        Vector mbar(d);
        for (int a = 0; a < d; ++a) mbar(a) = out_bar(lay.m(k, a));
        Matrix sbar2 = Matrix::Zero(d, d);  // Sigma_bar + Sigma_bar^T
        if (cfg.update_covariances) {
            Matrix sbar(d, d);
            for (int a = 0; a < d; ++a)
                for (int b = 0; b < d; ++b) sbar(a, b) = out_bar(lay.s(k, a, b));
            sbar2 = sbar + sbar.transpose();
            mbar -= sbar2 * c.first[k] / mass;
            const Matrix proj = c.centred[k] * sbar2;
            const Vector quad = 0.5 * proj.cwiseProduct(c.centred[k]).rowwise().sum();
            const double base = (0.5 * sbar2).cwiseProduct(c.scatter[k]).sum() / mass;
            gamma_bar.col(k).array() += (quad.array() - base) / mass;
            out.x_bar += (proj.array().colwise() * (c.gamma.col(k).array() / mass)).matrix();
        }
        gamma_bar.col(k) += c.centred[k] * mbar / mass;
        out.x_bar += c.gamma.col(k) * (mbar.transpose() / mass);
        if (!cfg.fix_weights) gamma_bar.col(k).array() += out_bar(lay.w(k)) / static_cast<double>(n);
    }
    // Softmax backward: s_bar_ik = gamma_ik (gamma_bar_ik - sum_l gamma_il gamma_bar_il).
    const Vector avg = c.gamma.cwiseProduct(gamma_bar).rowwise().sum();
    const Matrix sbar = c.gamma.cwiseProduct(gamma_bar.colwise() - avg);
    for (int k = 0; k < kc; ++k) {
        const Vector sk = sbar.col(k);
        if (!cfg.fix_weights) out.theta_bar(lay.w(k)) = sk.sum() / theta.weights()(k);
        const Vector mgrad = c.u[k].transpose() * sk;
        for (int a = 0; a < d; ++a) out.theta_bar(lay.m(k, a)) = mgrad(a);
        if (cfg.update_covariances) {
            const Matrix weighted = c.u[k].array().colwise() * sk.array();
            const Matrix sg = 0.5 * (weighted.transpose() * c.u[k] - sk.sum() * c.prec[k]);
            for (int a = 0; a < d; ++a)
                for (int b = 0; b < d; ++b) out.theta_bar(lay.s(k, a, b)) = sg(a, b);
        }
        out.x_bar -= (c.u[k].array().colwise() * sk.array()).matrix();
    }
    return out;
}

double spectral_norm(const Matrix& a, int max_iter, double tol) {
    if (a.size() == 0) return 0.0;
    Vector v(a.cols());
    for (int i = 0; i < v.size(); ++i) v(i) = 1.0 + 0.1 * (i % 7);
    v.normalize();
    double prev = 0.0;
    double sigma = 0.0;
    for (int it = 0; it < max_iter; ++it) {
        Vector w = a.transpose() * (a * v);
        const double norm = w.norm();
        if (norm == 0.0) return 0.0;
        v = w / norm;
        sigma = std::sqrt(norm);
        if (it > 0 && std::abs(sigma - prev) <= tol * sigma) break;
        prev = sigma;
    }
    return sigma;
}

double relative_mse(const Matrix& j, const Matrix& ref) {
    const double den = ref.squaredNorm();
    const double num = (j - ref).squaredNorm();
    if (den == 0.0) return num == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
    return num / den;
}

GradientReport jacobian_ad(const GmmParams& theta0, const Matrix& x, const EmConfig& cfg) {
    if (cfg.iterations < 1) throw ArgumentError("jacobian_ad: T must be >= 1");
    const int p = theta0.flat_size();
    Matrix j = Matrix::Zero(p, x.rows() * x.cols());
    GmmParams theta = theta0;
    for (int t = 0; t < cfg.iterations; ++t) {
        const StepCache c = make_cache(theta, x);
        j = dtheta_from_cache(theta, c, cfg) * j + dx_from_cache(c, cfg);
        theta = m_step_from_gamma(theta, x, c.gamma, cfg);
    }
    GradientReport r;
    r.jacobian = std::move(j);
    r.method = GradMethod::AD;
    r.fixed_point_residual = fixed_point_residual(theta, x, cfg);
    r.spectral_norm_dF_dtheta = spectral_norm(dF_dtheta(theta, x, cfg));
    return r;
}

GradientReport jacobian_ai(const GmmParams& theta_T, const Matrix& x, const EmConfig& cfg) {
    const EmJacobians jac = em_jacobians(theta_T, x, cfg);
    const int p = static_cast<int>(jac.d_theta.rows());
    const Matrix system = Matrix::Identity(p, p) - jac.d_theta;
    Eigen::PartialPivLU<Matrix> lu(system);
    const double rcond = lu.rcond();
    if (!(rcond > 1.0 / kMaxCondition))
        throw SingularSystem("jacobian_ai: I - dF/dtheta is numerically singular", 1.0 / rcond);
    GradientReport r;
    r.jacobian = lu.solve(jac.d_x);
    r.method = GradMethod::AI;
    r.fixed_point_residual = fixed_point_residual(theta_T, x, cfg);
    r.spectral_norm_dF_dtheta = spectral_norm(jac.d_theta);
    return r;
}

GradientReport jacobian_os(const GmmParams& theta_T_minus_1, const Matrix& x, const EmConfig& cfg) {
    const StepCache c = make_cache(theta_T_minus_1, x);
    GradientReport r;
    r.jacobian = dx_from_cache(c, cfg);
    r.method = GradMethod::OS;
    r.fixed_point_residual = fixed_point_residual(m_step_from_gamma(theta_T_minus_1, x, c.gamma, cfg), x, cfg);
    r.spectral_norm_dF_dtheta = spectral_norm(dtheta_from_cache(theta_T_minus_1, c, cfg));
    return r;
}

GradientReport jacobian_fd(const GmmParams& theta0, const Matrix& x, const EmConfig& cfg, double eps) {
    if (!(eps > 0.0)) throw ArgumentError("jacobian_fd: eps must be positive");
    const int n = static_cast<int>(x.rows());
    const int d = static_cast<int>(x.cols());
    const int p = theta0.flat_size();
    GradientReport r;
    r.jacobian.resize(p, n * d);
    for (int i = 0; i < n; ++i) {
        for (int a = 0; a < d; ++a) {
            Matrix xp = x, xm = x;
            xp(i, a) += eps;
            xm(i, a) -= eps;
            const Vector fp = to_flat(em_trajectory(theta0, xp, cfg).back());
            const Vector fm = to_flat(em_trajectory(theta0, xm, cfg).back());
            r.jacobian.col(i * d + a) = (fp - fm) / (2.0 * eps);
        }
    }
    const GmmParams theta_T = em_trajectory(theta0, x, cfg).back();
    r.method = GradMethod::FD;
    r.fixed_point_residual = fixed_point_residual(theta_T, x, cfg);
    r.spectral_norm_dF_dtheta = spectral_norm(dF_dtheta(theta_T, x, cfg));
    return r;
}

std::pair<GmmParams, Matrix> warm_start_step(const GmmParams& theta_t, const Matrix& x_t,
                                             const Vector& loss_grad, double lr, const EmConfig& cfg) {
    GmmParams next = m_step(theta_t, x_t, cfg);
    if (lr == 0.0 || loss_grad.isZero(0.0)) return {std::move(next), x_t};
    const EmVjp v = em_step_vjp(theta_t, x_t, cfg, loss_grad);
    return {std::move(next), x_t - lr * v.x_bar};
}

nlohmann::json gradient_report_to_json(const GradientReport& report,
                                       const std::optional<std::string>& payload_path) {
    nlohmann::json doc;
    doc["method"] = to_string(report.method);
    doc["fixed_point_residual"] = report.fixed_point_residual;
    doc["spectral_norm_dF_dtheta"] = report.spectral_norm_dF_dtheta;
    doc["rows"] = report.jacobian.rows();
    doc["cols"] = report.jacobian.cols();
    if (payload_path) {
        write_binary_matrix(report.jacobian, *payload_path);
        doc["payload"] = *payload_path;
    }
    return doc;
}

}  // namespace diffem

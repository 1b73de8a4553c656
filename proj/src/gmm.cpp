#include "diffem/gmm.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "diffem/errors.hpp"
#include "diffem/rng.hpp"

namespace diffem {

namespace {

constexpr double kWeightSumTol = 1e-12;

void check_dims(const GmmParams& theta, const Matrix& x) {
    if (theta.dim() != x.cols())
        throw ArgumentError("dimension mismatch between GMM (d=" + std::to_string(theta.dim()) +
                            ") and data (d=" + std::to_string(x.cols()) + ")");
}

}  // namespace

GmmParams::GmmParams(Vector weights, Matrix means, std::vector<Matrix> covariances)
    : weights_(std::move(weights)), means_(std::move(means)) {
    const int k = static_cast<int>(weights_.size());
    if (k == 0) throw ArgumentError("GmmParams: at least one component required");
    if (means_.rows() != k || static_cast<int>(covariances.size()) != k)
        throw ArgumentError("GmmParams: component counts disagree");
    if (means_.cols() == 0) throw ArgumentError("GmmParams: dimension must be positive");
    if (!weights_.allFinite() || !means_.allFinite())
        throw ArgumentError("GmmParams: non-finite parameters");
    for (int i = 0; i < k; ++i)
        if (!(weights_(i) > 0.0 && weights_(i) <= 1.0))
            throw ArgumentError("GmmParams: weight " + std::to_string(i) + " outside (0,1]");
    if (std::abs(weights_.sum() - 1.0) > kWeightSumTol)
        throw ArgumentError("GmmParams: weights do not sum to 1");
    covariances_.reserve(k);
    for (int i = 0; i < k; ++i) {
        if (covariances[i].rows() != means_.cols() || covariances[i].cols() != means_.cols())
            throw ArgumentError("GmmParams: covariance " + std::to_string(i) + " has wrong shape");
        try {
            covariances_.emplace_back(covariances[i]);
        } catch (const DegenerateCovariance& e) {
            throw DegenerateCovariance("GmmParams: covariance " + std::to_string(i) +
                                           " is not positive definite",
                                       e.pivot());
        }
    }
}

int GmmParams::flat_size() const { return diffem::flat_size(components(), dim()); }

GmmParams GmmParams::permuted(const std::vector<int>& order) const {
    const int k = components();
    if (static_cast<int>(order.size()) != k) throw ArgumentError("permuted: wrong permutation size");
    Vector w(k);
    Matrix m(k, dim());
    std::vector<Matrix> s(k);
    for (int i = 0; i < k; ++i) {
        w(i) = weights_(order[i]);
        m.row(i) = means_.row(order[i]);
        s[i] = covariance(order[i]);
    }
    return GmmParams(std::move(w), std::move(m), std::move(s));
}

bool in_general_position(const Matrix& points) {
    const int n = static_cast<int>(points.rows());
    const int d = static_cast<int>(points.cols());
    if (n < d + 1) return false;
    const Matrix centred = points.rowwise() - points.colwise().mean();
    Eigen::ColPivHouseholderQR<Matrix> qr(centred);
    qr.setThreshold(1e-12);
    return qr.rank() == d;
}

Dataset::Dataset(Matrix points) : points_(std::move(points)) {
    if (points_.rows() == 0 || points_.cols() == 0) throw ArgumentError("Dataset: empty");
    if (!points_.allFinite()) throw ArgumentError("Dataset: non-finite points");
    if (points_.rows() < points_.cols() + 1)
        throw ArgumentError("Dataset: need n >= d+1 points");
    if (!in_general_position(points_))
        throw ArgumentError("Dataset: centred points do not span R^d");
}

Dataset Dataset::unchecked(Matrix points) {
    if (points.rows() == 0 || points.cols() == 0) throw ArgumentError("Dataset: empty");
    if (!points.allFinite()) throw ArgumentError("Dataset: non-finite points");
    Dataset out;
    out.points_ = std::move(points);
    return out;
}

double log_density(const Vector& mean, const CholeskyFactor& cov_chol, const Vector& x) {
    const int d = static_cast<int>(mean.size());
    const Vector z = cov_chol.solve_lower(x - mean);
    return -0.5 * d * std::log(2.0 * std::numbers::pi) -
           cov_chol.lower.diagonal().array().log().sum() - 0.5 * z.squaredNorm();
}

Matrix weighted_log_densities(const GmmParams& theta, const Matrix& x) {
    check_dims(theta, x);
    const int n = static_cast<int>(x.rows());
    const int d = theta.dim();
    const int kc = theta.components();
    const double c0 = -0.5 * d * std::log(2.0 * std::numbers::pi);
    Matrix out(n, kc);
    for (int k = 0; k < kc; ++k) {
        const CholeskyFactor chol = cholesky(theta.covariance(k));
        Matrix centred = (x.rowwise() - theta.means().row(k)).transpose();
        chol.lower.triangularView<Eigen::Lower>().solveInPlace(centred);
        const double base = c0 - chol.lower.diagonal().array().log().sum() +
                            std::log(theta.weights()(k));
        out.col(k) = (base - 0.5 * centred.colwise().squaredNorm().array()).matrix().transpose();
    }
    return out;
}

Responsibilities e_step(const GmmParams& theta, const Matrix& x) {
    Responsibilities r;
    r.log_gamma = weighted_log_densities(theta, x);
    const int n = static_cast<int>(x.rows());
    for (int i = 0; i < n; ++i) {
        const double lse = logsumexp(r.log_gamma.row(i).transpose());
        r.log_gamma.row(i).array() -= lse;
    }
    // Flushing below exp(-700) keeps subnormals out of the downstream products.
    r.gamma = (r.log_gamma.array() < -700.0).select(0.0, r.log_gamma.array().exp()).matrix();
    return r;
}

Responsibilities e_step(const GmmParams& theta, const Dataset& x) { return e_step(theta, x.points()); }

GmmParams m_step_from_gamma(const GmmParams& theta, const Matrix& x, const Matrix& gamma,
                            const EmConfig& cfg) {
    if (cfg.cov_regulariser < 0.0) throw ArgumentError("m_step: cov_regulariser must be >= 0");
    const int n = static_cast<int>(x.rows());
    const int d = static_cast<int>(x.cols());
    const int kc = theta.components();
    const Vector mass = gamma.colwise().sum().transpose();
    Vector w = cfg.fix_weights ? theta.weights() : Vector(mass / static_cast<double>(n));
    Matrix m(kc, d);
    std::vector<Matrix> s(kc);
    for (int k = 0; k < kc; ++k) {
        if (!(mass(k) > 0.0))
            throw DegenerateCovariance("m_step: component " + std::to_string(k) + " has no mass", -1);
        m.row(k) = (gamma.col(k).transpose() * x) / mass(k);
        if (cfg.update_covariances) {
            const Matrix centred = x.rowwise() - m.row(k);
            const Matrix weighted = centred.array().colwise() * gamma.col(k).array();
            s[k] = symmetrise(weighted.transpose() * centred / mass(k));
            s[k].diagonal().array() += cfg.cov_regulariser;
        } else {
            s[k] = theta.covariance(k);
        }
    }
    try {
        return GmmParams(std::move(w), std::move(m), std::move(s));
    } catch (const ArgumentError& e) {
        throw DegenerateCovariance(std::string("m_step produced invalid parameters: ") + e.what(), -1);
    }
}

GmmParams m_step(const GmmParams& theta, const Matrix& x, const EmConfig& cfg) {
    return m_step_from_gamma(theta, x, e_step(theta, x).gamma, cfg);
}

GmmParams m_step(const GmmParams& theta, const Dataset& x, const EmConfig& cfg) {
    return m_step(theta, x.points(), cfg);
}

std::vector<GmmParams> em_trajectory(const GmmParams& theta0, const Matrix& x, const EmConfig& cfg) {
    if (cfg.iterations < 0) throw ArgumentError("em: iterations must be >= 0");
    check_dims(theta0, x);
    std::vector<GmmParams> traj;
    traj.reserve(cfg.iterations + 1);
    traj.push_back(theta0);
    for (int t = 0; t < cfg.iterations; ++t) traj.push_back(m_step(traj.back(), x, cfg));
    return traj;
}

double fixed_point_residual(const GmmParams& theta, const Matrix& x, const EmConfig& cfg) {
    const Vector diff = to_flat(theta) - to_flat(m_step(theta, x, cfg));
    return diff.squaredNorm() / static_cast<double>(diff.size());
}

EmResult em_fit(const GmmParams& theta0, const Dataset& x, const EmConfig& cfg) {
    if (cfg.iterations < 0) throw ArgumentError("em_fit: iterations must be >= 0");
    check_dims(theta0, x.points());
    EmResult out{theta0, {}};
    out.diagnostics.log_likelihood.reserve(cfg.iterations + 1);
    for (int t = 0; t < cfg.iterations; ++t) {
        const Responsibilities r = e_step(out.theta, x.points());
        double ll = 0.0;
        const Matrix lw = weighted_log_densities(out.theta, x.points());
        for (int i = 0; i < lw.rows(); ++i) ll += logsumexp(lw.row(i).transpose());
        out.diagnostics.log_likelihood.push_back(ll);
        out.theta = m_step_from_gamma(out.theta, x.points(), r.gamma, cfg);
    }
    out.diagnostics.log_likelihood.push_back(log_likelihood(out.theta, x));
    out.diagnostics.fixed_point_residual = fixed_point_residual(out.theta, x.points(), cfg);
    return out;
}

GmmParams kmeanspp_init(const Dataset& x, int components, std::uint64_t seed, double cov_regulariser) {
    const Matrix& pts = x.points();
    const int n = x.size();
    const int d = x.dim();
    if (components < 1) throw ArgumentError("kmeanspp_init: K must be >= 1");
    if (components > n) throw ArgumentError("kmeanspp_init: K exceeds the number of points");
    if (cov_regulariser < 0.0) throw ArgumentError("kmeanspp_init: cov_regulariser must be >= 0");
    Rng rng(seed);
    std::vector<int> chosen;
    chosen.push_back(static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(n))));
    Vector dist2 = (pts.rowwise() - pts.row(chosen[0])).rowwise().squaredNorm();
    while (static_cast<int>(chosen.size()) < components) {
        int next = -1;
        if (dist2.sum() > 0.0) {
            next = rng.categorical(dist2);
        } else {
            for (int i = 0; i < n && next < 0; ++i)
                if (std::find(chosen.begin(), chosen.end(), i) == chosen.end()) next = i;
        }
        chosen.push_back(next);
        dist2 = dist2.cwiseMin((pts.rowwise() - pts.row(next)).rowwise().squaredNorm());
    }
    Matrix means(components, d);
    for (int k = 0; k < components; ++k) means.row(k) = pts.row(chosen[k]);
    const Matrix centred = pts.rowwise() - pts.colwise().mean();
    Matrix cov = symmetrise(centred.transpose() * centred / static_cast<double>(n));
    cov.diagonal().array() += cov_regulariser;
    return GmmParams(Vector::Constant(components, 1.0 / components), std::move(means),
                     std::vector<Matrix>(components, cov));
}

Dataset sample_gmm(const GmmParams& theta, int n, std::uint64_t seed) {
    if (n < 1) throw ArgumentError("sample_gmm: n must be >= 1");
    const int d = theta.dim();
    const int kc = theta.components();
    std::vector<Matrix> chol(kc);
    for (int k = 0; k < kc; ++k) chol[k] = cholesky(theta.covariance(k)).lower;
    Rng rng(seed);
    Matrix pts(n, d);
    Vector z(d);
    for (int i = 0; i < n; ++i) {
        const int k = rng.categorical(theta.weights());
        for (int a = 0; a < d; ++a) z(a) = rng.normal();
        pts.row(i) = theta.means().row(k) + (chol[k] * z).transpose();
    }
    return Dataset::unchecked(std::move(pts));
}

double log_likelihood(const GmmParams& theta, const Matrix& x) {
    const Matrix lw = weighted_log_densities(theta, x);
    double ll = 0.0;
    for (int i = 0; i < lw.rows(); ++i) ll += logsumexp(lw.row(i).transpose());
    return ll;
}

double log_likelihood(const GmmParams& theta, const Dataset& x) { return log_likelihood(theta, x.points()); }

int flat_size(int components, int dim) { return components * (1 + dim + dim * dim); }

Vector to_flat(const GmmParams& theta) {
    const int kc = theta.components();
    const int d = theta.dim();
    Vector out(flat_size(kc, d));
    out.head(kc) = theta.weights();
    for (int k = 0; k < kc; ++k) {
        for (int a = 0; a < d; ++a) out(kc + k * d + a) = theta.means()(k, a);
        const Matrix& s = theta.covariance(k);
        for (int a = 0; a < d; ++a)
            for (int b = 0; b < d; ++b) out(kc + kc * d + k * d * d + a * d + b) = s(a, b);
    }
    return out;
}

GmmParams from_flat(const Vector& flat, int components, int dim) {
    if (flat.size() != flat_size(components, dim)) throw ArgumentError("from_flat: wrong length");
    Vector w = flat.head(components);
    Matrix m(components, dim);
    std::vector<Matrix> s(components, Matrix(dim, dim));
    for (int k = 0; k < components; ++k) {
        for (int a = 0; a < dim; ++a) m(k, a) = flat(components + k * dim + a);
        for (int a = 0; a < dim; ++a)
            for (int b = 0; b < dim; ++b)
                s[k](a, b) = flat(components + components * dim + k * dim * dim + a * dim + b);
    }
    return GmmParams(std::move(w), std::move(m), std::move(s));
}

}  // namespace diffem

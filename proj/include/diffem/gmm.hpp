#pragma once

#include <cstdint>
#include <vector>

#include "diffem/spd_linalg.hpp"

namespace diffem {

// theta = (w, m, Sigma). Validated on construction.
class GmmParams {
public:
    GmmParams() = default;
    GmmParams(Vector weights, Matrix means, std::vector<Matrix> covariances);

    int components() const { return static_cast<int>(weights_.size()); }
    int dim() const { return static_cast<int>(means_.cols()); }
    // Number of flat coordinates K + K d + K d^2.
    int flat_size() const;

    const Vector& weights() const { return weights_; }
    const Matrix& means() const { return means_; }
    const std::vector<SpdMatrix>& covariances() const { return covariances_; }
    const Matrix& covariance(int k) const { return covariances_[k].matrix(); }

    // Same parameters with components listed in `order`.
    GmmParams permuted(const std::vector<int>& order) const;

private:
    Vector weights_;
    Matrix means_;
    std::vector<SpdMatrix> covariances_;
};

// n points in R^d stored as rows.
class Dataset {
public:
    Dataset() = default;
    // Requires n >= d+1 and centred points spanning R^d.
    explicit Dataset(Matrix points);
    // Skips the general-position screen; used when covariances are regularised.
    static Dataset unchecked(Matrix points);

    int size() const { return static_cast<int>(points_.rows()); }
    int dim() const { return static_cast<int>(points_.cols()); }
    const Matrix& points() const { return points_; }

private:
    Matrix points_;
};

bool in_general_position(const Matrix& points);

struct Responsibilities {
    Matrix gamma;      // n x K
    Matrix log_gamma;  // n x K
};

struct EmConfig {
    int iterations = 0;
    bool fix_weights = false;
    bool update_covariances = true;
    double cov_regulariser = 0.0;
    std::uint64_t seed = 0;
};

struct EmDiagnostics {
    std::vector<double> log_likelihood;  // l(theta_t) for t = 0..T
    double fixed_point_residual = 0.0;
};

double log_density(const Vector& mean, const CholeskyFactor& cov_chol, const Vector& x);

// n x K matrix of log w_k + log g_k(x_i).
Matrix weighted_log_densities(const GmmParams& theta, const Matrix& x);

Responsibilities e_step(const GmmParams& theta, const Dataset& x);
Responsibilities e_step(const GmmParams& theta, const Matrix& x);

// One EM iteration F(theta, X).
GmmParams m_step(const GmmParams& theta, const Dataset& x, const EmConfig& cfg);
GmmParams m_step(const GmmParams& theta, const Matrix& x, const EmConfig& cfg);
GmmParams m_step_from_gamma(const GmmParams& theta, const Matrix& x, const Matrix& gamma,
                            const EmConfig& cfg);

// theta_0, ..., theta_T.
std::vector<GmmParams> em_trajectory(const GmmParams& theta0, const Matrix& x, const EmConfig& cfg);

struct EmResult {
    GmmParams theta;
    EmDiagnostics diagnostics;
};

EmResult em_fit(const GmmParams& theta0, const Dataset& x, const EmConfig& cfg);

// (1/p) ||theta - F(theta, X)||^2 in flat coordinates.
double fixed_point_residual(const GmmParams& theta, const Matrix& x, const EmConfig& cfg);

GmmParams kmeanspp_init(const Dataset& x, int components, std::uint64_t seed,
                        double cov_regulariser = 0.0);

Dataset sample_gmm(const GmmParams& theta, int n, std::uint64_t seed);

double log_likelihood(const GmmParams& theta, const Dataset& x);
double log_likelihood(const GmmParams& theta, const Matrix& x);

// Flat layout [w (K) | m row-major (K d) | Sigma row-major (K d^2)].
int flat_size(int components, int dim);
Vector to_flat(const GmmParams& theta);
GmmParams from_flat(const Vector& flat, int components, int dim);

}  // namespace diffem

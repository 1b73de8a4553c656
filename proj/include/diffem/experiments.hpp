#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "diffem/gmm.hpp"

namespace diffem {

// Runs task(i) for i in [0, count) on up to `workers` threads (0 means all cores).
// The first exception thrown by a task is rethrown after all threads join.
void parallel_for(int count, int workers, const std::function<void(int)>& task);

// Worker count from DIFFEM_WORKERS, or the number of logical cores.
int default_workers();

// Random GMM in dimension d: means ~ separation * N(0, I), covariances Q diag(l) Q^T with
// eigenvalues l in [0.5, 1.5] * cov_scale and a random rotation, weights from a jittered
// simplex with every weight at least 1 / (3K).
GmmParams random_gmm(int components, int dim, double separation, double cov_scale, std::uint64_t seed);

double median(std::vector<double> v);
// Q3 - Q1 with linear interpolation. NaNs are ignored by both.
double interquartile_range(std::vector<double> v);
// Spearman rank correlation with average ranks for ties.
double spearman(const std::vector<double>& a, const std::vector<double>& b);

struct GradCompareConfig {
    std::vector<int> n_grid{200};
    std::vector<int> k_grid{3};
    std::vector<int> t_grid{5, 40};
    int dim = 3;
    int bank_size = 3;  // random GMMs per K
    int repeats = 20;
    double separation = 3.0;
    double cov_scale = 1.0;
    double cov_regulariser = 1e-14;
    std::vector<GmmParams> gmm_bank;  // overrides the random bank (and k_grid) when non-empty
    std::uint64_t seed = 0;
    int workers = 0;
};

struct GradCompareRow {
    int gmm = 0, n = 0, k = 0, t = 0, repeat = 0;
    double fixed_point_mse = 0.0;
    double spectral_norm = 0.0;
    double rel_mse_os = 0.0;
    double rel_mse_ai = 0.0;  // NaN when the implicit system is singular
    std::string status = "ok";
};

struct GradCompareCell {
    int gmm = 0, n = 0, k = 0, t = 0;
    int failures = 0;
    double fixed_point_mse_median = 0.0, fixed_point_mse_iqr = 0.0;
    double spectral_norm_median = 0.0, spectral_norm_iqr = 0.0;
    double rel_mse_os_median = 0.0, rel_mse_os_iqr = 0.0;
    double rel_mse_ai_median = 0.0, rel_mse_ai_iqr = 0.0;
};

struct GradCompareReport {
    std::vector<GradCompareRow> rows;
    std::vector<GradCompareCell> cells;
};

GradCompareReport run_gradient_comparison(const GradCompareConfig& cfg);
void write_grad_compare_csv(const GradCompareReport& report, const std::string& rows_path,
                            const std::string& summary_path);

struct SampleComplexityConfig {
    std::vector<int> n_grid{500, 1000, 2000, 5000};
    int repeats = 10;
    std::vector<double> cov_scales{10.0, 0.5, 0.1};
    int components = 3;
    int dim = 2;
    int em_iterations = 200;
    double cov_regulariser = 1e-6;
    std::uint64_t seed = 0;
    int workers = 0;
};

struct SampleComplexityRow {
    double cov_scale = 0.0;
    int n = 0, repeat = 0;
    double one_sample = 0.0;  // MW2^2(mu_hat, mu)
    double two_sample = 0.0;  // |MW2^2(mu_hat, nu_hat) - MW2^2(mu, nu)| / MW2^2(mu, nu)
};

struct SampleComplexityCell {
    double cov_scale = 0.0;
    int n = 0;
    double one_sample_median = 0.0, one_sample_iqr = 0.0;
    double two_sample_median = 0.0, two_sample_iqr = 0.0;
};

struct SampleComplexityReport {
    std::vector<SampleComplexityRow> rows;
    std::vector<SampleComplexityCell> cells;
    std::vector<double> spearman_one_sample;  // per cov scale, median error vs n
    std::vector<double> spearman_two_sample;
};

// Fixed mixtures for a covariance scale: mu has means on a triangle of side 2, nu is mu
// rotated and shifted. Both have covariances cov_scale times a fixed SPD shape.
std::pair<GmmParams, GmmParams> sample_complexity_mixtures(int components, int dim, double cov_scale);

// One-sample and two-sample errors of EM estimates fitted from n samples.
SampleComplexityRow sample_complexity_trial(const GmmParams& mu, const GmmParams& nu, int n, int em_iterations,
                                            double cov_regulariser, std::uint64_t seed);

SampleComplexityReport run_sample_complexity(const SampleComplexityConfig& cfg);
void write_sample_complexity_csv(const SampleComplexityReport& report, const std::string& rows_path,
                                 const std::string& summary_path);

struct TimingConfig {
    int n = 200, dim = 3, k = 3;
    std::vector<int> t_grid{10, 40};
    int repeats = 5;
    std::uint64_t seed = 0;
};

struct TimingRow {
    int t = 0;
    double ad_seconds = 0.0;  // medians over repeats
    double ai_seconds = 0.0;
    double os_seconds = 0.0;
};

// Wall time of each Jacobian computation. AD includes its unrolled pass; AI and OS start
// from the already computed iterates.
std::vector<TimingRow> run_timing(const TimingConfig& cfg);

}  // namespace diffem

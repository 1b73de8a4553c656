#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "diffem/gmm.hpp"

namespace diffem {

struct BlockError {
    std::string name;  // e.g. "dgamma/dSigma", "dF_m/dX"
    double rel_error = 0.0;
};

struct OracleInstanceReport {
    int n = 0, d = 0, k = 0;
    bool fix_weights = false;
    bool update_covariances = true;
    std::vector<BlockError> blocks;
    bool frozen_blocks_zero = true;
};

struct OracleSuiteReport {
    std::vector<OracleInstanceReport> instances;
    double max_rel_error = 0.0;
    std::string worst_block;
    bool frozen_blocks_zero = true;
};

// Compares every analytic differential block against central finite differences of a
// direct (non-log-space) implementation of the E- and M-steps on random instances with
// n <= 6, d <= 3, K <= 3. Every third instance uses fixed weights and every third frozen
// covariances; frozen rows and columns must then vanish exactly.
OracleSuiteReport run_jacobian_oracle_suite(int instances, std::uint64_t seed, double step = 1e-6);

// Responsibilities for arbitrary positive weights, from explicit densities.
Matrix direct_responsibilities(const Vector& w, const Matrix& means, const std::vector<Matrix>& covs,
                               const Matrix& x);

// One EM step on flat coordinates, from explicit densities; weights need not be normalised.
Vector direct_em_step(const Vector& flat, int k, int d, const Matrix& x, bool fix_weights,
                      bool update_covariances, double cov_regulariser);

}  // namespace diffem

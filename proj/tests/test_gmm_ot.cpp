#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "diffem/errors.hpp"
#include "diffem/gmm_ot.hpp"
#include "diffem/rng.hpp"
#include "diffem/spd_linalg.hpp"
#include "test_support.hpp"

using namespace diffem;
using diffem::testing::random_gmm;
using diffem::testing::random_matrix;
using diffem::testing::random_orthogonal;
using diffem::testing::random_simplex;
using diffem::testing::random_spd;
using diffem::testing::random_symmetric;
using diffem::testing::with_weights;

namespace {

Matrix m11(double v) { return Matrix::Constant(1, 1, v); }

GmmParams gmm_1d(std::vector<double> w, std::vector<double> m, std::vector<double> s) {
    Vector wv = Eigen::Map<Vector>(w.data(), w.size());
    Matrix mm(m.size(), 1);
    std::vector<Matrix> cov;
    for (size_t k = 0; k < m.size(); ++k) {
        mm(k, 0) = m[k];
        cov.push_back(m11(s[k]));
    }
    return GmmParams(wv, mm, cov);
}

// Minimum over the vertices of the transportation polytope. Every vertex has a support of
// at most K0 + K1 - 1 cells on which the marginal equations have a unique solution.
double brute_force_ot(const Matrix& c, const Vector& w0, const Vector& w1) {
    const int k0 = c.rows(), k1 = c.cols(), cells = k0 * k1;
    double best = std::numeric_limits<double>::infinity();
    for (int mask = 1; mask < (1 << cells); ++mask) {
        std::vector<int> support;
        for (int s = 0; s < cells; ++s)
            if (mask & (1 << s)) support.push_back(s);
        if (static_cast<int>(support.size()) > k0 + k1 - 1) continue;
        Matrix a = Matrix::Zero(k0 + k1, support.size());
        Vector b(k0 + k1);
        b << w0, w1;
        for (size_t j = 0; j < support.size(); ++j) {
            a(support[j] / k1, j) = 1.0;
            a(k0 + support[j] % k1, j) = 1.0;
        }
        Eigen::ColPivHouseholderQR<Matrix> qr(a);
        if (qr.rank() < static_cast<int>(support.size())) continue;
        const Vector p = qr.solve(b);
        if ((a * p - b).cwiseAbs().maxCoeff() > 1e-12 || p.minCoeff() < -1e-12) continue;
        double cost = 0.0;
        for (size_t j = 0; j < support.size(); ++j) cost += p(j) * c(support[j] / k1, support[j] % k1);
        best = std::min(best, cost);
    }
    return best;
}

GmmParams shifted(const GmmParams& g, const Matrix& dm, const std::vector<Matrix>& ds, double t) {
    std::vector<Matrix> s;
    for (int k = 0; k < g.components(); ++k) s.push_back(g.covariance(k) + t * ds[k]);
    return GmmParams(g.weights(), g.means() + t * dm, s);
}

}  // namespace

TEST(GaussianW2, ClosedForms) {
    const Matrix i2 = Matrix::Identity(2, 2);
    EXPECT_EQ(gaussian_w2(Vector::Zero(2), i2, Vector::Zero(2), i2), 0.0);
    EXPECT_NEAR(gaussian_w2(Vector::Zero(1), m11(1), Vector::Ones(1), m11(1)), 1.0, 1e-14);
    EXPECT_NEAR(gaussian_w2(Vector::Zero(2), i2, Vector::Zero(2), 4 * i2), 2.0, 1e-13);
}

TEST(GaussianW2, BoundedBelowByMeanDistance) {
    Rng rng(1);
    for (int trial = 0; trial < 200; ++trial) {
        const int d = 1 + trial % 4;
        const Vector m0 = random_matrix(rng, d, 1), m1 = random_matrix(rng, d, 1);
        const double w2 = gaussian_w2(m0, random_spd(rng, d, 1e-3, 10), m1, random_spd(rng, d, 1e-3, 10));
        EXPECT_GE(w2, (m0 - m1).squaredNorm() - 1e-12);
    }
}

TEST(GaussianW2, CommutingCovariancesMatchSqrtFormula) {
    Rng rng(2);
    const Matrix q = random_orthogonal(rng, 3);
    const Vector a(Eigen::Vector3d(0.5, 1.0, 3.0)), b(Eigen::Vector3d(2.0, 0.1, 1.0));
    const Matrix s0 = q * a.asDiagonal() * q.transpose(), s1 = q * b.asDiagonal() * q.transpose();
    const double expected = (a.array().sqrt() - b.array().sqrt()).square().sum();
    EXPECT_NEAR(bures_distance(s0, s1), std::sqrt(expected), 1e-12);
}

TEST(Bures, Examples) {
    const Matrix i2 = Matrix::Identity(2, 2);
    EXPECT_EQ(bures_distance(i2, i2), 0.0);
    EXPECT_NEAR(bures_distance(i2, 4 * i2), std::sqrt(2.0), 1e-13);
    Rng rng(3);
    const Matrix s = random_spd(rng, 3);
    EXPECT_NEAR(bures_distance(1e-12 * s, s), std::sqrt(s.trace()), 1e-5);
}

TEST(DiscreteOt, SingleCell) {
    const OtSolution s = solve_discrete_ot(m11(3.5), Vector::Ones(1), Vector::Ones(1));
    EXPECT_EQ(s.plan(0, 0), 1.0);
    EXPECT_EQ(s.cost, 3.5);
}

TEST(DiscreteOt, TwoByTwoFixture) {
    Matrix c(2, 2);
    c << 0, 4, 1, 1;
    const Vector h = Vector::Constant(2, 0.5);
    const OtSolution s = solve_discrete_ot(c, h, h);
    EXPECT_NEAR(s.cost, 0.5, 1e-15);
    EXPECT_EQ(s.plan(0, 1), 0.0);
    EXPECT_EQ(s.plan(1, 0), 0.0);
    EXPECT_EQ(s.plan(0, 0), 0.5);
}

TEST(DiscreteOt, RejectsInfeasibleMarginals) {
    EXPECT_THROW(solve_discrete_ot(Matrix::Zero(2, 2), Vector::Constant(2, 0.5), Vector::Constant(2, 0.6)),
                 ArgumentError);
    EXPECT_THROW(solve_discrete_ot(Matrix::Zero(2, 1), Eigen::Vector2d(1.5, -0.5), Vector::Ones(1)), ArgumentError);
}

TEST(DiscreteOt, MatchesVertexEnumeration) {
    Rng rng(4);
    for (int trial = 0; trial < 100; ++trial) {
        const int k0 = 1 + rng.uniform_int(3), k1 = 1 + rng.uniform_int(3);
        Matrix c(k0, k1);
        for (int i = 0; i < k0; ++i)
            for (int j = 0; j < k1; ++j) c(i, j) = trial % 5 == 0 ? rng.uniform_int(3) : 10 * rng.uniform();
        const Vector w0 = random_simplex(rng, k0), w1 = random_simplex(rng, k1);
        const OtSolution s = solve_discrete_ot(c, w0, w1);
        EXPECT_NEAR(s.cost, brute_force_ot(c, w0, w1), 1e-9) << "trial " << trial;
        EXPECT_LE((s.plan.rowwise().sum() - w0).cwiseAbs().maxCoeff(), 1e-9);
        EXPECT_LE((s.plan.colwise().sum().transpose() - w1).cwiseAbs().maxCoeff(), 1e-9);
        EXPECT_GE(s.plan.minCoeff(), 0.0);
        // Complementary slackness and dual feasibility.
        for (int i = 0; i < k0; ++i)
            for (int j = 0; j < k1; ++j) {
                EXPECT_GE(c(i, j) - s.u(i) - s.v(j), -1e-9);
                if (s.plan(i, j) > 1e-12) EXPECT_NEAR(c(i, j), s.u(i) + s.v(j), 1e-9);
            }
    }
}

TEST(DiscreteOt, Deterministic) {
    Matrix c = Matrix::Ones(3, 3);
    const Vector h = Vector::Constant(3, 1.0 / 3.0);
    const OtSolution a = solve_discrete_ot(c, h, h), b = solve_discrete_ot(c, h, h);
    EXPECT_EQ(a.plan, b.plan);
    EXPECT_EQ(a.pivots, b.pivots);
}

TEST(Mw2, Examples) {
    Rng rng(5);
    const GmmParams g = random_gmm(rng, 3, 2);
    const Mw2Result self = mw2_squared(g, g);
    EXPECT_NEAR(self.value, 0.0, 1e-12);
    EXPECT_LE((self.plan - Matrix(g.weights().asDiagonal())).cwiseAbs().maxCoeff(), 1e-15);

    const GmmParams a = random_gmm(rng, 1, 2), b = random_gmm(rng, 1, 2);
    EXPECT_NEAR(mw2_squared(a, b).value,
                gaussian_w2(a.means().row(0).transpose(), a.covariance(0), b.means().row(0).transpose(),
                            b.covariance(0)),
                1e-14);

    const GmmParams p = gmm_1d({0.5, 0.5}, {0, 1}, {1, 1}), q = gmm_1d({0.5, 0.5}, {0, 2}, {1, 1});
    EXPECT_NEAR(mw2_squared(p, q).value, 0.5, 1e-13);
}

TEST(Mw2, MetricAxioms) {
    Rng rng(6);
    for (int trial = 0; trial < 50; ++trial) {
        const int d = 1 + trial % 3;
        const GmmParams a = random_gmm(rng, 1 + rng.uniform_int(3), d);
        const GmmParams b = random_gmm(rng, 1 + rng.uniform_int(3), d);
        const GmmParams c = random_gmm(rng, 1 + rng.uniform_int(3), d);
        EXPECT_NEAR(mw2_squared(a, a).value, 0.0, 1e-10);
        const double ab = mw2_squared(a, b).value, ba = mw2_squared(b, a).value;
        EXPECT_NEAR(ab, ba, 1e-10 * std::max(1.0, ab));
        const double ac = mw2_squared(a, c).value, bc = mw2_squared(b, c).value;
        EXPECT_LE(std::sqrt(ac), std::sqrt(ab) + std::sqrt(bc) + 1e-8);
    }
}

TEST(Mw2Grad, AlignedMixturesHaveZeroMeanGradient) {
    Rng rng(7);
    const GmmParams g = random_gmm(rng, 3, 2);
    EXPECT_LE(mw2_grad_params(g, g).means.cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Mw2Grad, OneDimensionalMeans) {
    const GmmParams p = gmm_1d({0.5, 0.5}, {0, 1}, {1, 1}), q = gmm_1d({0.5, 0.5}, {0, 2}, {1, 1});
    const GmmGradient g = mw2_grad_params(p, q);
    // Plan is diagonal: 2 * 0.5 * (0 - 0) and 2 * 0.5 * (1 - 2).
    EXPECT_NEAR(g.means(0, 0), 0.0, 1e-14);
    EXPECT_NEAR(g.means(1, 0), -1.0, 1e-14);
    EXPECT_LE(g.covariances[0].cwiseAbs().maxCoeff(), 1e-10);
    EXPECT_TRUE(g.weights.isZero(0.0));
}

TEST(Mw2Grad, MatchesFiniteDifferences) {
    Rng rng(8);
    const double h = 1e-6;
    for (int trial = 0; trial < 30; ++trial) {
        const GmmParams mu0 = random_gmm(rng, 3, 2), mu1 = random_gmm(rng, 3, 2);
        const Matrix dm = random_matrix(rng, 3, 2);
        std::vector<Matrix> ds;
        for (int k = 0; k < 3; ++k) ds.push_back(random_symmetric(rng, 2));
        const double fd = (mw2_squared(shifted(mu0, dm, ds, h), mu1).value -
                           mw2_squared(shifted(mu0, dm, ds, -h), mu1).value) /
                          (2 * h);
        const GmmGradient g = mw2_grad_params(mu0, mu1);
        double analytic = (g.means.array() * dm.array()).sum();
        for (int k = 0; k < 3; ++k) analytic += (g.covariances[k].array() * ds[k].array()).sum();
        EXPECT_NEAR(analytic, fd, 1e-5 * std::max(1.0, std::abs(fd))) << "trial " << trial;
        EXPECT_FALSE(g.near_singular);

        const Mw2ValueGrad vg = mw2_value_and_grad(mu0, mu1);
        EXPECT_EQ(vg.value, mw2_squared(mu0, mu1).value);
        EXPECT_LE((vg.grad.flat() - g.flat()).cwiseAbs().maxCoeff(), 1e-13);
    }
}

TEST(Mw2Grad, WeightGradientAlongTangentDirections) {
    Rng rng(9);
    const double h = 1e-7;
    for (int trial = 0; trial < 30; ++trial) {
        const GmmParams mu0 = random_gmm(rng, 3, 2), mu1 = random_gmm(rng, 2, 2);
        Vector dw = random_matrix(rng, 3, 1);
        dw.array() -= dw.mean();
        const double fd = (mw2_squared(with_weights(mu0, mu0.weights() + h * dw), mu1).value -
                           mw2_squared(with_weights(mu0, mu0.weights() - h * dw), mu1).value) /
                          (2 * h);
        const GmmGradient g = mw2_grad_params(mu0, mu1, true);
        EXPECT_NEAR(g.weights.sum(), 0.0, 1e-12);
        EXPECT_NEAR(g.weights.dot(dw), fd, 1e-5 * std::max(1.0, std::abs(fd))) << "trial " << trial;
    }
}

TEST(Mw2Grad, PlanCostGradMatchesEnvelopeGradient) {
    Rng rng(10);
    const GmmParams mu0 = random_gmm(rng, 2, 3), mu1 = random_gmm(rng, 3, 3);
    const GmmGradient a = plan_cost_grad(mu0, mu1, mw2_squared(mu0, mu1).plan);
    EXPECT_LE((a.flat() - mw2_grad_params(mu0, mu1).flat()).cwiseAbs().maxCoeff(), 1e-13);
}

TEST(Unbalanced, GeneralisedKl) {
    EXPECT_EQ(generalised_kl(Eigen::Vector2d(0.3, 0.7), Eigen::Vector2d(0.3, 0.7)), 0.0);
    EXPECT_NEAR(generalised_kl(Eigen::Vector2d(0, 0), Eigen::Vector2d(0.3, 0.7)), 1.0, 1e-15);
    EXPECT_NEAR(generalised_kl(Vector::Constant(1, 2.0), Vector::Ones(1)), 2 * std::log(2.0) - 1, 1e-15);
}

TEST(Unbalanced, IdenticalMarginalsZeroDiagonal) {
    Matrix c(2, 2);
    c << 0, 1, 1, 0;
    UnbalancedConfig cfg;
    cfg.lambda0 = cfg.lambda1 = 100.0;
    const Vector h = Vector::Constant(2, 0.5);
    const Umw2Result r = unbalanced_ot(c, h, h, cfg);
    EXPECT_NEAR(r.value, 0.0, 1e-6);
    EXPECT_LE(r.plan(0, 1) + r.plan(1, 0), 1e-6);
    EXPECT_NEAR(r.plan(0, 0), 0.5, 1e-6);
}

TEST(Unbalanced, LargeLambdaRecoversBalanced) {
    const GmmParams p = gmm_1d({0.5, 0.5}, {0, 1}, {1, 1}), q = gmm_1d({0.5, 0.5}, {0, 2}, {1, 1});
    UnbalancedConfig cfg;
    cfg.lambda0 = cfg.lambda1 = 1e4;
    const double balanced = mw2_squared(p, q).value;
    EXPECT_NEAR(umw2_squared(p, q, cfg).value, balanced, 1e-3 * balanced);
}

TEST(Unbalanced, MonotoneInLambda) {
    Rng rng(11);
    for (int trial = 0; trial < 5; ++trial) {
        const GmmParams p = random_gmm(rng, 3, 2), q = random_gmm(rng, 2, 2);
        double prev = -1.0;
        for (double lam : {0.01, 0.1, 1.0, 10.0, 100.0}) {
            UnbalancedConfig cfg;
            cfg.lambda0 = cfg.lambda1 = lam;
            const double v = umw2_squared(p, q, cfg).value;
            EXPECT_GE(v, prev - 1e-7) << "lambda " << lam;
            prev = v;
        }
    }
}

TEST(Unbalanced, OutlierIsDropped) {
    // Target: a unit-mass component near the source plus a unit-mass outlier at distance 1e3.
    Matrix c(2, 2);
    c << 0.25, 1e6, 0.25, 1e6;
    const Vector a = Vector::Constant(2, 0.5), b = Vector::Ones(2);
    UnbalancedConfig cfg;
    cfg.lambda0 = 10.0;
    cfg.lambda1 = 0.1;
    const Umw2Result r = unbalanced_ot(c, a, b, cfg);
    EXPECT_LE(r.plan.col(1).sum(), 0.01 * b(1));
    auto objective = [&](const Matrix& p) {
        return (p.array() * c.array()).sum() + cfg.lambda0 * generalised_kl(p.rowwise().sum(), a) +
               cfg.lambda1 * generalised_kl(p.colwise().sum().transpose(), b);
    };
    EXPECT_NEAR(r.value, objective(r.plan), 1e-9);
    double grid_best = std::numeric_limits<double>::infinity();
    const int steps = 40;
    for (int i = 0; i <= steps; ++i)
        for (int j = 0; j <= steps; ++j) {
            Matrix p = Matrix::Zero(2, 2);
            p(0, 0) = 1.0 * i / steps;
            p(1, 0) = 1.0 * j / steps;
            grid_best = std::min(grid_best, objective(p));
        }
    EXPECT_LE(r.value, grid_best + 1e-9);
}

TEST(Unbalanced, RejectsBadConfig) {
    UnbalancedConfig cfg;
    cfg.lambda0 = 0.0;
    EXPECT_THROW(unbalanced_ot(Matrix::Zero(1, 1), Vector::Ones(1), Vector::Ones(1), cfg), ArgumentError);
    cfg = UnbalancedConfig{};
    cfg.max_iter = 1;
    Matrix c(2, 2);
    c << 0, 3, 2, 1;
    EXPECT_THROW(unbalanced_ot(c, Eigen::Vector2d(0.3, 0.7), Eigen::Vector2d(0.6, 0.4), cfg), NotConverged);
}

TEST(Projection, Examples) {
    Rng rng(12);
    const GmmParams g = random_gmm(rng, 2, 3);
    const GmmParams same = project_gmm(g, Matrix::Identity(3, 3));
    EXPECT_LE((to_flat(same) - to_flat(g)).cwiseAbs().maxCoeff(), 1e-15);

    Matrix drop = Matrix::Zero(2, 3);
    drop(0, 0) = drop(1, 2) = 1.0;
    const GmmParams p = project_gmm(g, drop);
    EXPECT_EQ(p.dim(), 2);
    for (int k = 0; k < 2; ++k) {
        EXPECT_EQ(p.covariance(k)(0, 1), g.covariance(k)(0, 2));
        EXPECT_EQ(p.covariance(k)(1, 1), g.covariance(k)(2, 2));
        EXPECT_EQ(p.means()(k, 1), g.means()(k, 2));
    }
    EXPECT_EQ(p.weights(), g.weights());
    EXPECT_THROW(project_gmm(g, 2 * drop), ArgumentError);
}

TEST(Projection, RandomAxesStaySpd) {
    Rng rng(13);
    for (int trial = 0; trial < 20; ++trial) {
        const GmmParams g = random_gmm(rng, 3, 4, 1.0, 1e-3, 10.0);
        const Matrix axes = random_orthogonal(rng, 4).topRows(2);
        const GmmParams p = project_gmm(g, axes);
        for (int k = 0; k < 3; ++k) EXPECT_GT(symmetric_eigen(p.covariance(k)).eigenvalues.minCoeff(), 0.0);
    }
}

TEST(Projection, CommutesWithSampling) {
    Rng rng(14);
    const GmmParams g = random_gmm(rng, 3, 3);
    const Matrix axes = random_orthogonal(rng, 3).topRows(2);
    const GmmParams p = project_gmm(g, axes);
    const int n = 100000;
    const Matrix y = sample_gmm(g, n, 15).points() * axes.transpose();
    Vector mean = Vector::Zero(2);
    Matrix second = Matrix::Zero(2, 2);
    for (int k = 0; k < 3; ++k) {
        const Vector mk = p.means().row(k).transpose();
        mean += p.weights()(k) * mk;
        second += p.weights()(k) * (p.covariance(k) + mk * mk.transpose());
    }
    const Matrix cov = second - mean * mean.transpose();
    const Vector emp_mean = y.colwise().mean().transpose();
    const Matrix centred = y.rowwise() - emp_mean.transpose();
    const Matrix emp_cov = centred.transpose() * centred / n;
    for (int a = 0; a < 2; ++a) {
        EXPECT_LE(std::abs(emp_mean(a) - mean(a)), 3 * std::sqrt(cov(a, a) / n));
        // Var of a sample second moment, bounded by a Gaussian-like fourth moment with slack.
        for (int b = 0; b < 2; ++b)
            EXPECT_LE(std::abs(emp_cov(a, b) - cov(a, b)), 3 * std::sqrt(3 * cov(a, a) * cov(b, b) / n) * 2);
    }
}

TEST(Projection, PullbackMatchesChainRule) {
    Rng rng(16);
    const GmmParams mu0 = random_gmm(rng, 2, 3), mu1 = random_gmm(rng, 2, 2);
    const Matrix axes = random_orthogonal(rng, 3).topRows(2);
    const GmmGradient g = pullback_projection_grad(mw2_grad_params(project_gmm(mu0, axes), mu1), axes);
    const Matrix dm = random_matrix(rng, 2, 3);
    std::vector<Matrix> ds = {random_symmetric(rng, 3), random_symmetric(rng, 3)};
    const double h = 1e-6;
    const double fd = (mw2_squared(project_gmm(shifted(mu0, dm, ds, h), axes), mu1).value -
                       mw2_squared(project_gmm(shifted(mu0, dm, ds, -h), axes), mu1).value) /
                      (2 * h);
    double analytic = (g.means.array() * dm.array()).sum();
    for (int k = 0; k < 2; ++k) analytic += (g.covariances[k].array() * ds[k].array()).sum();
    EXPECT_NEAR(analytic, fd, 1e-5 * std::max(1.0, std::abs(fd)));
}

TEST(Stability, ZeroPerturbation) {
    Rng rng(17);
    const GmmParams a = random_gmm(rng, 3, 2), b = random_gmm(rng, 3, 2);
    const StabilityReport r = check_stability_bounds({{a, b, a, b}});
    ASSERT_EQ(r.records.size(), 1u);
    EXPECT_NEAR(r.records[0].one_sample_lhs, 0.0, 1e-12);
    EXPECT_NEAR(r.records[0].one_sample_rhs, 0.0, 1e-12);
    EXPECT_NEAR(r.records[0].two_sample_lhs, 0.0, 1e-12);
    EXPECT_EQ(r.one_sample_violations + r.two_sample_violations, 0);
}

TEST(Stability, RandomPerturbationsRespectBounds) {
    Rng rng(18);
    auto perturb = [&](const GmmParams& g, double scale) {
        Vector w = g.weights();
        for (int k = 0; k < w.size(); ++k) w(k) *= std::exp(scale * rng.normal());
        w /= w.sum();
        std::vector<Matrix> s;
        for (int k = 0; k < g.components(); ++k) {
            const Matrix e = Matrix::Identity(2, 2) + scale * random_symmetric(rng, 2);
            s.push_back(e * g.covariance(k) * e.transpose());
        }
        return GmmParams(w, g.means() + scale * random_matrix(rng, g.components(), 2), s);
    };
    std::vector<StabilityInstance> instances;
    for (int i = 0; i < 100; ++i) {
        const GmmParams a = random_gmm(rng, 3, 2), b = random_gmm(rng, 3, 2);
        instances.push_back({a, b, perturb(a, 0.01), perturb(b, 0.01)});
    }
    const StabilityReport r = check_stability_bounds(instances);
    EXPECT_EQ(r.one_sample_violations, 0);
    EXPECT_EQ(r.two_sample_violations, 0);
}

TEST(Stability, OneSampleBoundIsLinearInRho) {
    EXPECT_DOUBLE_EQ(one_sample_bound(0.2, 0.4, 3.0), 2 * one_sample_bound(0.1, 0.2, 3.0));
    EXPECT_DOUBLE_EQ(two_sample_bound(1.0, 2.0, 0.2, 0.4, 0.6), 2 * two_sample_bound(1.0, 2.0, 0.1, 0.2, 0.3));
}

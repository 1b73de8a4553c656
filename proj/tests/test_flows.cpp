#include <gtest/gtest.h>

#include <cmath>

#include "diffem/errors.hpp"
#include "diffem/flows.hpp"
#include "test_support.hpp"

using namespace diffem;
using diffem::testing::random_gmm;

namespace {

GmmParams iso(const Matrix& means, double var) {
    const int k = static_cast<int>(means.rows()), d = static_cast<int>(means.cols());
    return GmmParams(Vector::Constant(k, 1.0 / k), means, std::vector<Matrix>(k, var * Matrix::Identity(d, d)));
}

struct Toy {
    Dataset x0;
    GmmParams theta0;
    GmmParams target;
};

Toy toy(std::uint64_t seed, int n = 60) {
    Matrix src(3, 2), dst(3, 2);
    src << 0, 0, 3, 0, 0, 3;
    dst << 4, 4, 7, 4, 4, 7;
    const Dataset x0 = sample_gmm(iso(src, 0.3), n, seed);
    return {x0, kmeanspp_init(x0, 3, seed + 1, 1e-3), iso(dst, 0.3)};
}

FlowConfig base_cfg(GradMethod method) {
    FlowConfig cfg;
    cfg.grad_method = method;
    cfg.gd_steps = 20;
    cfg.learning_rate = 0.01;
    cfg.em.iterations = 5;
    cfg.em.fix_weights = true;
    cfg.em.cov_regulariser = 1e-3;
    return cfg;
}

double fd_energy(const GmmParams& theta0, const Matrix& x, const EmConfig& em, const GmmLoss& loss) {
    return flow_energy_grad(theta0, x, em, GradMethod::AD, loss, false).energy;
}

}  // namespace

TEST(Flow, ZeroLearningRateFreezesEverything) {
    const Toy t = toy(1);
    for (GradMethod m : {GradMethod::AD, GradMethod::OS, GradMethod::WARM}) {
        FlowConfig cfg = base_cfg(m);
        cfg.learning_rate = 0.0;
        cfg.gd_steps = 5;
        const FlowTrace tr = run_flow(t.x0, t.theta0, t.target, cfg);
        ASSERT_EQ(tr.energies.size(), 6u);
        EXPECT_TRUE(tr.final_points.isApprox(t.x0.points(), 0.0));
        // WARM keeps iterating EM on the frozen cloud, so only the other methods have a constant energy.
        if (m == GradMethod::WARM) continue;
        for (double e : tr.energies) EXPECT_EQ(e, tr.energies.front());
    }
}

TEST(Flow, AdDescendsOnToyProblem) {
    const Toy t = toy(2);
    FlowConfig cfg = base_cfg(GradMethod::AD);
    cfg.gd_steps = 100;
    const FlowTrace tr = run_flow(t.x0, t.theta0, t.target, cfg);
    EXPECT_LT(tr.energies.back(), 0.05 * tr.energies.front());
}

TEST(Flow, EnergyGradientMatchesFiniteDifferences) {
    const Toy t = toy(3, 20);
    const GmmLoss loss = mw2_loss(t.target);
    EmConfig em = base_cfg(GradMethod::AD).em;
    const Matrix x = t.x0.points();
    const EnergyGrad eg = flow_energy_grad(t.theta0, x, em, GradMethod::AD, loss);
    const double h = 1e-6;
    double worst = 0.0;
    for (int i = 0; i < x.rows(); ++i)
        for (int a = 0; a < 2; ++a) {
            Matrix xp = x, xm = x;
            xp(i, a) += h;
            xm(i, a) -= h;
            const double fd = (fd_energy(t.theta0, xp, em, loss) - fd_energy(t.theta0, xm, em, loss)) / (2 * h);
            worst = std::max(worst, std::abs(fd - eg.x_grad(i, a)));
        }
    EXPECT_LT(worst, 1e-6 * std::max(1.0, eg.x_grad.cwiseAbs().maxCoeff()));
}

TEST(Flow, OneStepMethodsAgreeWhenTIsOne) {
    const Toy t = toy(4);
    EmConfig em = base_cfg(GradMethod::AD).em;
    em.iterations = 1;
    const GmmLoss loss = mw2_loss(t.target);
    const Matrix ad = flow_energy_grad(t.theta0, t.x0.points(), em, GradMethod::AD, loss).x_grad;
    const Matrix os = flow_energy_grad(t.theta0, t.x0.points(), em, GradMethod::OS, loss).x_grad;
    EXPECT_LT((ad - os).norm(), 1e-12 * ad.norm());
}

TEST(Flow, FixedWeightsAreConserved) {
    const Toy t = toy(5);
    for (GradMethod m : {GradMethod::AD, GradMethod::WARM}) {
        const FlowTrace tr = run_flow(t.x0, t.theta0, t.target, base_cfg(m));
        for (const Vector& w : tr.weight_snapshots) EXPECT_TRUE(w.isApprox(t.theta0.weights(), 1e-12));
    }
}

TEST(Flow, SubsamplingIsReproducible) {
    const Toy t = toy(6);
    FlowConfig cfg = base_cfg(GradMethod::AD);
    cfg.subsample_ratio = 0.5;
    cfg.seed = 9;
    const FlowTrace a = run_flow(t.x0, t.theta0, t.target, cfg);
    const FlowTrace b = run_flow(t.x0, t.theta0, t.target, cfg);
    EXPECT_EQ(a.energies, b.energies);
    EXPECT_TRUE(a.final_points.isApprox(b.final_points, 0.0));
    cfg.seed = 10;
    const FlowTrace c = run_flow(t.x0, t.theta0, t.target, cfg);
    EXPECT_NE(a.energies.back(), c.energies.back());
}

TEST(Flow, FullRatioIgnoresSeed) {
    const Toy t = toy(7);
    FlowConfig cfg = base_cfg(GradMethod::AD);
    cfg.seed = 1;
    const FlowTrace a = run_flow(t.x0, t.theta0, t.target, cfg);
    cfg.seed = 2;
    const FlowTrace b = run_flow(t.x0, t.theta0, t.target, cfg);
    EXPECT_EQ(a.energies, b.energies);
}

TEST(Flow, SubsampledTargetRefitRuns) {
    const Toy t = toy(8);
    const Matrix cloud = sample_gmm(t.target, 200, 3).points();
    FlowConfig cfg = base_cfg(GradMethod::AD);
    cfg.subsample_ratio = 0.5;
    cfg.gd_steps = 200;
    const FlowTrace tr = run_flow(t.x0, t.theta0, t.target, cfg, &cloud);
    EXPECT_LT(tr.energies.back(), 0.1 * tr.energies.front());
}

TEST(Flow, HalvingGivesMonotoneEnergy) {
    const Toy t = toy(9);
    FlowConfig cfg = base_cfg(GradMethod::AD);
    cfg.learning_rate = 1.0;
    cfg.halve_on_increase = true;
    const FlowTrace tr = run_flow(t.x0, t.theta0, t.target, cfg);
    for (size_t s = 1; s < tr.energies.size(); ++s) EXPECT_LE(tr.energies[s], tr.energies[s - 1] * (1 + 1e-12));
    EXPECT_LT(tr.final_learning_rate, 1.0);
}

TEST(Flow, SnapshotsFollowTheStride) {
    const Toy t = toy(10);
    FlowConfig cfg = base_cfg(GradMethod::WARM);
    cfg.snapshot_every = 5;
    const FlowTrace tr = run_flow(t.x0, t.theta0, t.target, cfg);
    EXPECT_EQ(tr.point_snapshots.size(), 5u);
    EXPECT_TRUE(tr.point_snapshots.front().isApprox(t.x0.points(), 0.0));
    EXPECT_TRUE(tr.point_snapshots.back().isApprox(tr.final_points, 0.0));
}

TEST(Flow, RejectsBadConfig) {
    const Toy t = toy(11);
    FlowConfig cfg = base_cfg(GradMethod::FD);
    EXPECT_THROW(run_flow(t.x0, t.theta0, t.target, cfg), ArgumentError);
    cfg = base_cfg(GradMethod::AD);
    cfg.subsample_ratio = 0.0;
    EXPECT_THROW(run_flow(t.x0, t.theta0, t.target, cfg), ArgumentError);
    cfg = base_cfg(GradMethod::AD);
    cfg.learning_rate = -1.0;
    EXPECT_THROW(run_flow(t.x0, t.theta0, t.target, cfg), ArgumentError);
    const GmmParams wrong = iso(Matrix::Zero(1, 3), 1.0);
    EXPECT_THROW(run_flow(t.x0, t.theta0, wrong, base_cfg(GradMethod::AD)), ArgumentError);
}

TEST(WeightPathology, FixedWeightsStayConstant) {
    WeightPathologyConfig cfg;
    cfg.target_weights = Eigen::Vector3d(0.5, 0.3, 0.2);
    cfg.points = 100;
    cfg.flow.gd_steps = 10;
    cfg.flow.learning_rate = 0.01;
    cfg.flow.em.iterations = 5;
    cfg.flow.em.fix_weights = true;
    cfg.flow.em.cov_regulariser = 1e-3;
    const WeightPathologyResult r = run_weight_pathology(cfg);
    for (const Vector& w : r.trace.weight_snapshots) EXPECT_TRUE(w.isApprox(Eigen::Vector3d(0.2, 0.2, 0.6), 1e-12));
}

TEST(WeightPathology, RejectsWrongWeightCount) {
    WeightPathologyConfig cfg;
    cfg.target_weights = Vector::Constant(2, 0.5);
    EXPECT_THROW(run_weight_pathology(cfg), ArgumentError);
}

TEST(Barycentre, IdenticalTargetsScaleTheEnergy) {
    const Toy t = toy(12);
    FlowConfig cfg = base_cfg(GradMethod::AD);
    cfg.gd_steps = 0;
    const FlowTrace single = run_flow(t.x0, t.theta0, t.target, cfg);
    const FlowTrace triple = run_barycentre_flow({t.target, t.target, t.target}, t.x0, t.theta0, cfg);
    EXPECT_NEAR(triple.energies[0], 3.0 * single.energies[0], 1e-9 * single.energies[0]);
    // Same descent direction, with three times the step.
    cfg.gd_steps = 1;
    FlowConfig scaled = cfg;
    scaled.learning_rate *= 3.0;
    const FlowTrace a = run_barycentre_flow({t.target, t.target, t.target}, t.x0, t.theta0, cfg);
    const FlowTrace b = run_flow(t.x0, t.theta0, t.target, scaled);
    EXPECT_TRUE(a.final_points.isApprox(b.final_points, 1e-10));
}

TEST(Barycentre, SymmetricTargetsCentreTheCloud) {
    const double a = 2.0;
    const GmmParams left(Vector::Ones(1), Matrix::Constant(1, 1, -a), {Matrix::Constant(1, 1, 0.25)});
    const GmmParams right(Vector::Ones(1), Matrix::Constant(1, 1, a), {Matrix::Constant(1, 1, 0.25)});
    const Dataset x0 = sample_gmm(GmmParams(Vector::Ones(1), Matrix::Constant(1, 1, 3.0), {Matrix::Identity(1, 1)}),
                                  100, 4);
    FlowConfig cfg = base_cfg(GradMethod::AD);
    cfg.gd_steps = 200;
    const GmmParams theta0(Vector::Ones(1), Matrix::Constant(1, 1, 3.0), {Matrix::Identity(1, 1)});
    const FlowTrace tr = run_barycentre_flow({left, right}, x0, theta0, cfg);
    EXPECT_LE(std::abs(tr.final_points.mean()), 0.02 * a);
}

TEST(Barycentre, ThreeTargetsReachAStationaryCloud) {
    Rng rng(5);
    std::vector<GmmParams> targets;
    for (int i = 0; i < 3; ++i) targets.push_back(random_gmm(rng, 2, 2, 3.0, 0.3, 1.0));
    const Dataset x0 = sample_gmm(random_gmm(rng, 2, 2, 3.0, 0.3, 1.0), 500, 6);
    FlowConfig cfg = base_cfg(GradMethod::AD);
    cfg.em.iterations = 10;
    cfg.gd_steps = 500;
    cfg.learning_rate = 0.01;
    const GmmParams theta0 = kmeanspp_init(x0, 2, 7, 1e-3);
    const FlowTrace tr = run_barycentre_flow(targets, x0, theta0, cfg);
    const GmmLoss loss = barycentre_loss(targets);
    const Matrix g0 = flow_energy_grad(theta0, x0.points(), cfg.em, GradMethod::AD, loss).x_grad;
    const Matrix g1 = flow_energy_grad(theta0, tr.final_points, cfg.em, GradMethod::AD, loss).x_grad;
    EXPECT_LE(g1.norm(), 1e-3 * g0.norm());
}

TEST(Barycentre, NeedsTwoTargets) {
    const Toy t = toy(13);
    EXPECT_THROW(run_barycentre_flow({t.target}, t.x0, t.theta0, base_cfg(GradMethod::AD)), ArgumentError);
}

TEST(ProjectedBarycentre, ConsistentTargetsGiveNearZeroEnergy) {
    Rng rng(14);
    const GmmParams truth = random_gmm(rng, 2, 3, 3.0, 0.5, 1.0);
    std::vector<GmmParams> targets;
    for (const Matrix& p : coordinate_drop_axes()) targets.push_back(project_gmm(truth, p));
    const Dataset x0 = sample_gmm(truth, 4000, 15);
    FlowConfig cfg = base_cfg(GradMethod::AD);
    cfg.gd_steps = 0;
    cfg.em.iterations = 30;
    const FlowTrace tr = run_projected_barycentre(targets, x0, truth, cfg);
    EXPECT_LT(tr.energies[0], 0.05);
    EXPECT_LT(projected_barycentre_loss(targets, coordinate_drop_axes())(truth, nullptr), 1e-12);
}

TEST(ProjectedBarycentre, DescendsOverFirstSteps) {
    for (std::uint64_t seed = 20; seed < 25; ++seed) {
        Rng rng(seed);
        std::vector<GmmParams> targets;
        for (int i = 0; i < 3; ++i) targets.push_back(random_gmm(rng, 2, 2, 2.0, 0.3, 1.0));
        const Dataset x0 = sample_gmm(random_gmm(rng, 2, 3, 2.0, 0.5, 1.0), 100, seed);
        FlowConfig cfg = base_cfg(GradMethod::AD);
        cfg.gd_steps = 10;
        cfg.learning_rate = 1e-3;
        const FlowTrace tr = run_projected_barycentre(targets, x0, kmeanspp_init(x0, 2, seed, 1e-3), cfg);
        for (size_t s = 1; s < tr.energies.size(); ++s) EXPECT_LT(tr.energies[s], tr.energies[s - 1]) << seed;
    }
}

TEST(ProjectedBarycentre, RejectsWrongShapes) {
    const Toy t = toy(16);
    EXPECT_THROW(run_projected_barycentre({t.target, t.target, t.target}, t.x0, t.theta0, base_cfg(GradMethod::AD)),
                 ArgumentError);
}

TEST(Losses, UnbalancedLossGradientMatchesPlanCost) {
    Rng rng(17);
    const GmmParams a = random_gmm(rng, 2, 2), b = random_gmm(rng, 3, 2);
    UnbalancedConfig ucfg;
    const GmmLoss loss = umw2_loss(b, ucfg);
    Vector g;
    const double v = loss(a, &g);
    EXPECT_NEAR(v, umw2_squared(a, b, ucfg).value, 1e-12 * std::abs(v));
    EXPECT_EQ(g.size(), a.flat_size());
}

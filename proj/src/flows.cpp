#include "diffem/flows.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

#include "diffem/errors.hpp"
#include "diffem/rng.hpp"

namespace diffem {

GmmLoss mw2_loss(const GmmParams& target, bool weight_gradient) {
    return [target, weight_gradient](const GmmParams& theta, Vector* grad) {
        if (!grad) return mw2_squared(theta, target).value;
        const Mw2ValueGrad vg = mw2_value_and_grad(theta, target, weight_gradient);
        *grad = vg.grad.flat();
        return vg.value;
    };
}

GmmLoss umw2_loss(const GmmParams& target, const UnbalancedConfig& cfg) {
    return [target, cfg](const GmmParams& theta, Vector* grad) {
        const Umw2Result r = umw2_squared(theta, target, cfg);
        // The marginal penalties do not depend on means or covariances.
        if (grad) *grad = plan_cost_grad(theta, target, r.plan).flat();
        return r.value;
    };
}

GmmLoss barycentre_loss(const std::vector<GmmParams>& targets, bool weight_gradient) {
    if (targets.empty()) throw ArgumentError("barycentre_loss: no targets");
    std::vector<GmmLoss> parts;
    for (const GmmParams& t : targets) parts.push_back(mw2_loss(t, weight_gradient));
    return [parts](const GmmParams& theta, Vector* grad) {
        double total = 0.0;
        if (grad) *grad = Vector::Zero(theta.flat_size());
        Vector g;
        for (const GmmLoss& part : parts) {
            total += part(theta, grad ? &g : nullptr);
            if (grad) *grad += g;
        }
        return total;
    };
}

GmmLoss projected_barycentre_loss(const std::vector<GmmParams>& targets, const std::vector<Matrix>& axes) {
    if (targets.empty() || targets.size() != axes.size())
        throw ArgumentError("projected_barycentre_loss: need one axes matrix per target");
    for (size_t i = 0; i < targets.size(); ++i)
        if (targets[i].dim() != axes[i].rows())
            throw ArgumentError("projected_barycentre_loss: target dimension does not match its projection");
    return [targets, axes](const GmmParams& theta, Vector* grad) {
        double total = 0.0;
        if (grad) *grad = Vector::Zero(theta.flat_size());
        for (size_t i = 0; i < targets.size(); ++i) {
            const GmmParams proj = project_gmm(theta, axes[i]);
            if (!grad) {
                total += mw2_squared(proj, targets[i]).value;
                continue;
            }
            const Mw2ValueGrad vg = mw2_value_and_grad(proj, targets[i]);
            total += vg.value;
            *grad += pullback_projection_grad(vg.grad, axes[i]).flat();
        }
        return total;
    };
}

EnergyGrad flow_energy_grad(const GmmParams& theta0, const Matrix& x, const EmConfig& em, GradMethod method,
                            const GmmLoss& loss, bool need_grad) {
    const std::vector<GmmParams> traj = em_trajectory(theta0, x, em);
    EnergyGrad out;
    out.theta = traj.back();
    Vector g;
    out.energy = loss(traj.back(), need_grad ? &g : nullptr);
    if (!need_grad) return out;
    out.x_grad = Matrix::Zero(x.rows(), x.cols());
    const int t_final = static_cast<int>(traj.size()) - 1;
    if (t_final == 0) return out;
    switch (method) {
        case GradMethod::AD: {
            Vector bar = g;
            for (int t = t_final - 1; t >= 0; --t) {
                EmVjp v = em_step_vjp(traj[t], x, em, bar);
                out.x_grad += v.x_bar;
                bar = std::move(v.theta_bar);
            }
            break;
        }
        case GradMethod::AI: {
            const Matrix a = dF_dtheta(traj.back(), x, em);
            const Matrix m = Matrix::Identity(a.rows(), a.cols()) - a.transpose();
            Eigen::PartialPivLU<Matrix> lu(m);
            const double rcond = lu.rcond();
            if (!(rcond > 1.0 / kMaxCondition))
                throw SingularSystem("flow_energy_grad: I - dF/dtheta is numerically singular",
                                     rcond > 0.0 ? 1.0 / rcond : std::numeric_limits<double>::infinity());
            out.x_grad = em_step_vjp(traj.back(), x, em, lu.solve(g)).x_bar;
            break;
        }
        case GradMethod::OS:
            out.x_grad = em_step_vjp(traj[t_final - 1], x, em, g).x_bar;
            break;
        default:
            throw ArgumentError("flow_energy_grad: method must be AD, AI or OS");
    }
    return out;
}

namespace {

// Uniform subsample of ceil(r n) distinct indices, sorted.
std::vector<int> draw_subsample(int n, double r, Rng& rng) {
    const int m = std::max(1, static_cast<int>(std::ceil(r * n - 1e-12)));
    std::vector<int> idx(n);
    for (int i = 0; i < n; ++i) idx[i] = i;
    for (int i = 0; i < m; ++i) {
        const int j = i + static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(n - i)));
        std::swap(idx[i], idx[j]);
    }
    idx.resize(m);
    std::sort(idx.begin(), idx.end());
    return idx;
}

Matrix gather_rows(const Matrix& x, const std::vector<int>& idx) {
    Matrix out(idx.size(), x.cols());
    for (size_t i = 0; i < idx.size(); ++i) out.row(i) = x.row(idx[i]);
    return out;
}

void validate(const Dataset& x0, const GmmParams& theta0, const FlowConfig& cfg) {
    if (x0.dim() != theta0.dim()) throw ArgumentError("flow: data and GMM dimensions differ");
    if (cfg.gd_steps < 0) throw ArgumentError("flow: gd_steps must be >= 0");
    if (!(cfg.learning_rate >= 0.0) || !std::isfinite(cfg.learning_rate))
        throw ArgumentError("flow: learning_rate must be finite and >= 0");
    if (!(cfg.subsample_ratio > 0.0 && cfg.subsample_ratio <= 1.0))
        throw ArgumentError("flow: subsample_ratio must lie in (0, 1]");
    if (cfg.snapshot_every < 0) throw ArgumentError("flow: snapshot_every must be >= 0");
    if (cfg.grad_method == GradMethod::FD) throw ArgumentError("flow: FD is not a flow gradient method");
}

// Per-step loss; the target may be refitted from the step's RNG stream.
using LossSource = std::function<GmmLoss(Rng&)>;

FlowTrace flow_impl(const Dataset& x0, const GmmParams& theta0, const LossSource& source, bool stochastic_loss,
                    const FlowConfig& cfg) {
    validate(x0, theta0, cfg);
    const auto start = std::chrono::steady_clock::now();
    const bool subsample = cfg.subsample_ratio < 1.0;
    const int n = x0.size();
    Rng rng(cfg.seed);
    FlowTrace trace;
    Matrix x = x0.points();
    double lr = cfg.learning_rate;
    auto snapshot = [&](int step) {
        if (cfg.snapshot_every > 0 && step % cfg.snapshot_every == 0) trace.point_snapshots.push_back(x);
    };
    snapshot(0);
    GmmLoss fixed_loss;
    if (!stochastic_loss) fixed_loss = source(rng);

    if (cfg.grad_method == GradMethod::WARM) {
        // Initial fit, then one EM step per gradient step.
        GmmParams theta = em_trajectory(theta0, x, cfg.em).back();
        EmConfig one = cfg.em;
        one.iterations = 1;
        for (int step = 0; step <= cfg.gd_steps; ++step) {
            const GmmLoss loss = stochastic_loss ? source(rng) : fixed_loss;
            std::vector<int> idx;
            Matrix xs = x;
            if (subsample) {
                idx = draw_subsample(n, cfg.subsample_ratio, rng);
                xs = gather_rows(x, idx);
            }
            const GmmParams next = m_step(theta, xs, one);
            const bool last = step == cfg.gd_steps;
            Vector g;
            trace.energies.push_back(loss(next, last ? nullptr : &g));
            trace.weight_snapshots.push_back(next.weights());
            if (last) {
                trace.final_theta = next;
                break;
            }
            const Matrix xbar = em_step_vjp(theta, xs, one, g).x_bar;
            const double scale = lr * static_cast<double>(xs.rows());
            if (subsample) {
                for (size_t i = 0; i < idx.size(); ++i) x.row(idx[i]) -= scale * xbar.row(i);
            } else {
                x -= scale * xbar;
            }
            theta = next;
            snapshot(step + 1);
        }
    } else {
        for (int step = 0; step <= cfg.gd_steps; ++step) {
            const GmmLoss loss = stochastic_loss ? source(rng) : fixed_loss;
            const bool last = step == cfg.gd_steps;
            if (!subsample) {
                EnergyGrad eg = flow_energy_grad(theta0, x, cfg.em, cfg.grad_method, loss, !last);
                trace.energies.push_back(eg.energy);
                trace.weight_snapshots.push_back(eg.theta->weights());
                if (last) {
                    trace.final_theta = eg.theta;
                    break;
                }
                double step_lr = lr;
                Matrix proposal = x - step_lr * n * eg.x_grad;
                if (cfg.halve_on_increase) {
                    for (int tries = 0; tries < 60; ++tries) {
                        const double e = flow_energy_grad(theta0, proposal, cfg.em, cfg.grad_method, loss, false).energy;
                        if (e <= eg.energy) break;
                        step_lr *= 0.5;
                        proposal = x - step_lr * n * eg.x_grad;
                    }
                    lr = step_lr;
                }
                x = std::move(proposal);
            } else {
                const std::vector<int> idx = draw_subsample(n, cfg.subsample_ratio, rng);
                const Matrix xs = gather_rows(x, idx);
                EnergyGrad eg = flow_energy_grad(theta0, xs, cfg.em, cfg.grad_method, loss, !last);
                trace.energies.push_back(eg.energy);
                trace.weight_snapshots.push_back(eg.theta->weights());
                if (last) {
                    trace.final_theta = eg.theta;
                    break;
                }
                const double scale = lr * static_cast<double>(xs.rows());
                for (size_t i = 0; i < idx.size(); ++i) x.row(idx[i]) -= scale * eg.x_grad.row(i);
            }
            snapshot(step + 1);
        }
    }
    trace.final_points = x;
    trace.final_learning_rate = lr;
    trace.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return trace;
}

}  // namespace

FlowTrace run_loss_flow(const Dataset& x0, const GmmParams& theta0, const GmmLoss& loss, const FlowConfig& cfg) {
    return flow_impl(x0, theta0, [&loss](Rng&) { return loss; }, false, cfg);
}

FlowTrace run_flow(const Dataset& x0, const GmmParams& theta0, const GmmParams& target, const FlowConfig& cfg,
                   const Matrix* target_cloud) {
    if (target.dim() != theta0.dim()) throw ArgumentError("run_flow: target dimension differs");
    if (cfg.subsample_ratio < 1.0 && target_cloud) {
        if (target_cloud->cols() != target.dim()) throw ArgumentError("run_flow: target cloud dimension differs");
        const Matrix cloud = *target_cloud;
        const LossSource refit = [cloud, target, cfg](Rng& rng) {
            const std::vector<int> idx = draw_subsample(static_cast<int>(cloud.rows()), cfg.subsample_ratio, rng);
            const GmmParams fitted = em_trajectory(target, gather_rows(cloud, idx), cfg.em).back();
            return mw2_loss(fitted, cfg.weight_gradient);
        };
        return flow_impl(x0, theta0, refit, true, cfg);
    }
    return run_loss_flow(x0, theta0, mw2_loss(target, cfg.weight_gradient), cfg);
}

WeightPathologyResult run_weight_pathology(const WeightPathologyConfig& cfg) {
    if (cfg.target_weights.size() != 3) throw ArgumentError("run_weight_pathology: need 3 target weights");
    const double s = cfg.separation, v = cfg.target_std * cfg.target_std;
    const Matrix cov = v * Matrix::Identity(2, 2);
    Matrix target_means(3, 2), source_means(3, 2);
    target_means << 0, 0, s, 0, 0.5 * s, s;
    // Translated copy, so that cluster paths do not cross.
    source_means = target_means.rowwise() - Eigen::RowVector2d(cfg.offset * s, cfg.offset * s);
    const GmmParams target(cfg.target_weights, target_means, {cov, cov, cov});
    // The source cloud carries the first-component weights (1/5, 1/5, 3/5) unless the target is uniform.
    const bool uniform = (cfg.target_weights.array() - 1.0 / 3.0).abs().maxCoeff() < 1e-12;
    const Vector w0 = uniform ? Vector::Constant(3, 1.0 / 3.0) : Vector(Eigen::Vector3d(0.2, 0.2, 0.6));
    const GmmParams source(w0, source_means, {cov, cov, cov});
    // Stratified: exactly round(w_k * n) points per cluster, so the cloud carries w0 itself.
    Matrix pts(cfg.points, 2);
    int row = 0;
    for (int k = 0; k < 3; ++k) {
        const int count = k == 2 ? cfg.points - row : static_cast<int>(std::lround(w0(k) * cfg.points));
        if (count < 1) throw ArgumentError("run_weight_pathology: too few points");
        const GmmParams single(Vector::Ones(1), source_means.row(k), {cov});
        pts.middleRows(row, count) = sample_gmm(single, count, cfg.flow.seed * 3 + k).points();
        row += count;
    }
    const Dataset x0(std::move(pts));
    WeightPathologyResult out{run_flow(x0, source, target, cfg.flow), target, 0.0, 0.0};
    out.weight_l1 = (out.trace.final_theta->weights() - cfg.target_weights).lpNorm<1>();
    out.final_energy = out.trace.energies.back();
    return out;
}

FlowTrace run_barycentre_flow(const std::vector<GmmParams>& targets, const Dataset& x0, const GmmParams& theta0,
                              const FlowConfig& cfg) {
    if (targets.size() < 2) throw ArgumentError("run_barycentre_flow: need at least two targets");
    return run_loss_flow(x0, theta0, barycentre_loss(targets, cfg.weight_gradient), cfg);
}

std::vector<Matrix> coordinate_drop_axes() {
    std::vector<Matrix> axes;
    for (int drop = 0; drop < 3; ++drop) {
        Matrix a = Matrix::Zero(2, 3);
        int r = 0;
        for (int c = 0; c < 3; ++c)
            if (c != drop) a(r++, c) = 1.0;
        axes.push_back(a);
    }
    return axes;
}

FlowTrace run_projected_barycentre(const std::vector<GmmParams>& targets_2d, const Dataset& x0,
                                   const GmmParams& theta0, const FlowConfig& cfg) {
    if (targets_2d.size() != 3) throw ArgumentError("run_projected_barycentre: need exactly three 2D targets");
    if (x0.dim() != 3) throw ArgumentError("run_projected_barycentre: the point cloud must be 3D");
    return run_loss_flow(x0, theta0, projected_barycentre_loss(targets_2d, coordinate_drop_axes()), cfg);
}

}  // namespace diffem

#include "diffem/gmm_ot.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <limits>
#include <string>

#include "diffem/errors.hpp"

namespace diffem {

namespace {

constexpr double kMarginalTol = 1e-9;

// Trace of (S B S)^{1/2} with S = A^{1/2}; keeps the decomposition for the gradient.
struct CrossTerm {
    double trace_root = 0.0;
    EigenDecomposition eig;
};

CrossTerm cross_term(const Matrix& sqrt_a, const Matrix& b) {
    CrossTerm t;
    t.eig = symmetric_eigen(symmetrise(sqrt_a * b * sqrt_a));
    t.trace_root = t.eig.eigenvalues.cwiseMax(0.0).cwiseSqrt().sum();
    return t;
}

double bures_squared_from(const Matrix& a, const Matrix& b, double trace_root) {
    return std::max(0.0, a.trace() + b.trace() - 2.0 * trace_root);
}

void check_pair(const GmmParams& mu0, const GmmParams& mu1) {
    if (mu0.dim() != mu1.dim()) throw ArgumentError("MW2: mixtures live in different dimensions");
}

struct PairTerms {
    Matrix cost;
    std::vector<EigenDecomposition> eig_a;
    std::vector<Matrix> sqrt_a;
    std::vector<EigenDecomposition> eig_m;  // index k * K1 + l
};

PairTerms pair_terms(const GmmParams& mu0, const GmmParams& mu1) {
    check_pair(mu0, mu1);
    const int k0 = mu0.components(), k1 = mu1.components();
    PairTerms t;
    t.cost.resize(k0, k1);
    for (int k = 0; k < k0; ++k) {
        t.eig_a.push_back(symmetric_eigen(mu0.covariance(k)));
        const Vector root = t.eig_a[k].eigenvalues.cwiseMax(0.0).cwiseSqrt();
        t.sqrt_a.push_back(symmetrise(t.eig_a[k].eigenvectors * root.asDiagonal() *
                                      t.eig_a[k].eigenvectors.transpose()));
    }
    for (int k = 0; k < k0; ++k) {
        for (int l = 0; l < k1; ++l) {
            CrossTerm ct = cross_term(t.sqrt_a[k], mu1.covariance(l));
            const double mean_part = (mu0.means().row(k) - mu1.means().row(l)).squaredNorm();
            t.cost(k, l) = mean_part + bures_squared_from(mu0.covariance(k), mu1.covariance(l), ct.trace_root);
            t.eig_m.push_back(std::move(ct.eig));
        }
    }
    return t;
}

GmmGradient plan_grad_from_terms(const GmmParams& mu0, const GmmParams& mu1, const Matrix& plan,
                                 const PairTerms& t) {
    const int k0 = mu0.components(), k1 = mu1.components(), d = mu0.dim();
    GmmGradient g;
    g.weights = Vector::Zero(k0);
    g.means = Matrix::Zero(k0, d);
    g.covariances.assign(k0, Matrix::Zero(d, d));
    for (int k = 0; k < k0; ++k) {
        Matrix sbar = Matrix::Zero(d, d);
        double mass = 0.0;
        for (int l = 0; l < k1; ++l) {
            const double p = plan(k, l);
            if (p == 0.0) continue;
            mass += p;
            g.means.row(k) += 2.0 * p * (mu0.means().row(k) - mu1.means().row(l));
            // d/dM of -2 tr(M^{1/2}) is -M^{-1/2}, through the sqrt differential.
            const EigenDecomposition& em = t.eig_m[k * k1 + l];
            const SqrtDifferential gm = spd_sqrt_differential(em, -2.0 * Matrix::Identity(d, d));
            g.near_singular = g.near_singular || gm.near_singular;
            const Matrix x = gm.value * t.sqrt_a[k] * mu1.covariance(l);
            sbar += p * (x + x.transpose());
        }
        if (mass == 0.0) continue;
        const SqrtDifferential ga = spd_sqrt_differential(t.eig_a[k], sbar);
        g.near_singular = g.near_singular || ga.near_singular;
        g.covariances[k] = symmetrise(mass * Matrix::Identity(d, d) + ga.value);
    }
    return g;
}

void validate_marginals(const Matrix& c, const Vector& w0, const Vector& w1) {
    if (c.rows() != w0.size() || c.cols() != w1.size() || c.size() == 0)
        throw ArgumentError("solve_discrete_ot: shape mismatch");
    if (!c.allFinite()) throw ArgumentError("solve_discrete_ot: non-finite costs");
    if ((w0.array() < 0.0).any() || (w1.array() < 0.0).any())
        throw ArgumentError("solve_discrete_ot: negative marginal");
    if (std::abs(w0.sum() - w1.sum()) > kMarginalTol)
        throw ArgumentError("solve_discrete_ot: marginals have different total mass");
}

}  // namespace

double gaussian_w2(const Vector& m0, const Matrix& s0, const Vector& m1, const Matrix& s1) {
    if (m0.size() != m1.size() || s0.rows() != m0.size() || s1.rows() != m1.size())
        throw ArgumentError("gaussian_w2: dimension mismatch");
    const CrossTerm ct = cross_term(spd_sqrt(s0), s1);
    return (m0 - m1).squaredNorm() + bures_squared_from(s0, s1, ct.trace_root);
}

double bures_distance(const Matrix& s0, const Matrix& s1) {
    if (s0.rows() != s1.rows()) throw ArgumentError("bures_distance: dimension mismatch");
    const CrossTerm ct = cross_term(spd_sqrt(s0), s1);
    return std::sqrt(bures_squared_from(s0, s1, ct.trace_root));
}

Matrix cost_matrix(const GmmParams& mu0, const GmmParams& mu1) { return pair_terms(mu0, mu1).cost; }

OtSolution solve_discrete_ot(const Matrix& c, const Vector& w0, const Vector& w1) {
    validate_marginals(c, w0, w1);
    const int k0 = static_cast<int>(c.rows()), k1 = static_cast<int>(c.cols());
    const int nodes = k0 + k1;
    const double tol = 1e-12 * std::max(1.0, c.cwiseAbs().maxCoeff());

    // Spanning-tree basis of k0 + k1 - 1 cells, from the north-west corner rule.
    struct Cell {
        int k, l;
        double flow;
    };
    std::vector<Cell> basis;
    {
        Vector a = w0, b = w1;
        int k = 0, l = 0;
        while (true) {
            const double f = std::max(0.0, std::min(a(k), b(l)));
            basis.push_back({k, l, f});
            a(k) -= f;
            b(l) -= f;
            if (k == k0 - 1 && l == k1 - 1) break;
            if (k == k0 - 1) ++l;
            else if (l == k1 - 1) ++k;
            else if (a(k) <= b(l)) ++k;
            else ++l;
        }
    }

    Vector u(k0), v(k1);
    std::vector<int> parent(nodes), parent_cell(nodes);
    Matrix is_basic = Matrix::Zero(k0, k1);
    int pivots = 0;
    const int max_pivots = 100 * nodes * nodes + 1000;
    while (true) {
        std::vector<std::vector<std::pair<int, int>>> adj(nodes);  // (neighbour, cell index)
        is_basic.setZero();
        for (int e = 0; e < static_cast<int>(basis.size()); ++e) {
            adj[basis[e].k].push_back({k0 + basis[e].l, e});
            adj[k0 + basis[e].l].push_back({basis[e].k, e});
            is_basic(basis[e].k, basis[e].l) = 1.0;
        }
        // Potentials and parent pointers from a traversal rooted at row node 0.
        std::fill(parent.begin(), parent.end(), -2);
        parent[0] = -1;
        parent_cell[0] = -1;
        u(0) = 0.0;
        std::deque<int> queue{0};
        while (!queue.empty()) {
            const int node = queue.front();
            queue.pop_front();
            for (const auto& [next, e] : adj[node]) {
                if (parent[next] != -2) continue;
                parent[next] = node;
                parent_cell[next] = e;
                const double ce = c(basis[e].k, basis[e].l);
                if (next >= k0) v(next - k0) = ce - u(node);
                else u(next) = ce - v(node - k0);
                queue.push_back(next);
            }
        }
        int ek = -1, el = -1;
        for (int k = 0; k < k0 && ek < 0; ++k)
            for (int l = 0; l < k1; ++l)
                if (is_basic(k, l) == 0.0 && c(k, l) - u(k) - v(l) < -tol) {
                    ek = k;
                    el = l;
                    break;
                }
        if (ek < 0) break;
        if (++pivots > max_pivots) throw NotConverged("solve_discrete_ot: pivot limit reached", pivots);

        // Tree path between column node el and row node ek closes the cycle.
        auto path_to_root = [&](int node) {
            std::vector<int> path;
            while (node != -1) {
                path.push_back(node);
                node = parent[node];
            }
            return path;
        };
        const std::vector<int> from_col = path_to_root(k0 + el);
        const std::vector<int> from_row = path_to_root(ek);
        int ci = static_cast<int>(from_col.size()) - 1, ri = static_cast<int>(from_row.size()) - 1;
        while (ci > 0 && ri > 0 && from_col[ci - 1] == from_row[ri - 1]) {
            --ci;
            --ri;
        }
        // Cells along col -> lca -> row, alternating -, +, -, ...
        std::vector<int> cycle;
        for (int i = 0; i < ci; ++i) cycle.push_back(parent_cell[from_col[i]]);
        std::vector<int> tail;
        for (int i = 0; i < ri; ++i) tail.push_back(parent_cell[from_row[i]]);
        cycle.insert(cycle.end(), tail.rbegin(), tail.rend());

        int leave = -1;
        double theta = std::numeric_limits<double>::infinity();
        for (int i = 0; i < static_cast<int>(cycle.size()); i += 2) {
            const Cell& cell = basis[cycle[i]];
            const bool better = cell.flow < theta ||
                                (cell.flow == theta && leave >= 0 &&
                                 std::make_pair(cell.k, cell.l) <
                                     std::make_pair(basis[leave].k, basis[leave].l));
            if (better) {
                theta = cell.flow;
                leave = cycle[i];
            }
        }
        for (int i = 0; i < static_cast<int>(cycle.size()); ++i)
            basis[cycle[i]].flow += (i % 2 == 0) ? -theta : theta;
        basis[leave] = {ek, el, theta};
    }

    OtSolution out;
    out.plan = Matrix::Zero(k0, k1);
    for (const Cell& cell : basis) out.plan(cell.k, cell.l) = std::max(0.0, cell.flow);
    out.cost = out.plan.cwiseProduct(c).sum();
    out.u = u;
    out.v = v;
    out.pivots = pivots;
    return out;
}

Mw2Result mw2_squared(const GmmParams& mu0, const GmmParams& mu1) {
    const PairTerms t = pair_terms(mu0, mu1);
    OtSolution sol = solve_discrete_ot(t.cost, mu0.weights(), mu1.weights());
    return Mw2Result{sol.cost, std::move(sol.plan), t.cost};
}

Vector GmmGradient::flat() const {
    const int kc = static_cast<int>(weights.size());
    const int d = static_cast<int>(means.cols());
    Vector out(flat_size(kc, d));
    out.head(kc) = weights;
    for (int k = 0; k < kc; ++k) {
        for (int a = 0; a < d; ++a) out(kc + k * d + a) = means(k, a);
        for (int a = 0; a < d; ++a)
            for (int b = 0; b < d; ++b) out(kc + kc * d + k * d * d + a * d + b) = covariances[k](a, b);
    }
    return out;
}

Vector min_norm_row_potential(const Matrix& c, const Matrix& plan, const Vector& fallback) {
    const int k0 = static_cast<int>(c.rows()), k1 = static_cast<int>(c.cols());
    const double tiny = 1e-12 * std::max(1.0, plan.maxCoeff());
    std::vector<std::pair<int, int>> support, free_cells;
    for (int k = 0; k < k0; ++k)
        for (int l = 0; l < k1; ++l) (plan(k, l) > tiny ? support : free_cells).emplace_back(k, l);
    const int m = static_cast<int>(free_cells.size());
    auto centred = [](const Vector& u) -> Vector { return u.array() - u.mean(); };
    if (m > kMaxEnumeratedCells) return centred(fallback);
    const int nz = k0 + k1;
    const double slack = 1e-9 * std::max(1.0, c.cwiseAbs().maxCoeff());
    // Centring operator on the u block; v does not enter the objective.
    Matrix obj = Matrix::Zero(k0, nz);
    obj.leftCols(k0) = Matrix::Identity(k0, k0) - Matrix::Constant(k0, k0, 1.0 / k0);
    Vector best;
    double best_norm = std::numeric_limits<double>::infinity();
    // Enumerate which non-support cells are tight; each choice is an equality-constrained
    // least-norm problem. The convex optimum is attained for its own active set.
    for (long mask = 0; mask < (1L << m); ++mask) {
        std::vector<std::pair<int, int>> eq = support;
        for (int j = 0; j < m; ++j)
            if (mask & (1L << j)) eq.push_back(free_cells[j]);
        // Last row pins the shift (u + s, v - s), which changes neither feasibility nor the objective.
        Matrix e = Matrix::Zero(eq.size() + 1, nz);
        Vector rhs = Vector::Zero(eq.size() + 1);
        for (size_t r = 0; r < eq.size(); ++r) {
            e(r, eq[r].first) = 1.0;
            e(r, k0 + eq[r].second) = 1.0;
            rhs(r) = c(eq[r].first, eq[r].second);
        }
        e.row(eq.size()).head(k0).setOnes();
        Eigen::CompleteOrthogonalDecomposition<Matrix> cod;
        cod.setThreshold(1e-10);
        cod.compute(e);
        const Vector zp = cod.solve(rhs);
        if ((e * zp - rhs).cwiseAbs().maxCoeff() > slack) continue;
        // Null space of e from a full QR of e^T.
        Eigen::ColPivHouseholderQR<Matrix> qr;
        qr.setThreshold(1e-10);
        qr.compute(e.transpose());
        const int rank = static_cast<int>(qr.rank());
        const Matrix q = qr.householderQ() * Matrix::Identity(nz, nz);
        const Matrix null = q.rightCols(nz - rank);
        Vector z = zp;
        if (null.cols() > 0) {
            const Matrix a = obj * null;
            Eigen::CompleteOrthogonalDecomposition<Matrix> lsq;
            lsq.setThreshold(1e-10);
            lsq.compute(a);
            z += null * lsq.solve(-(obj * zp));
        }
        bool feasible = true;
        for (const auto& [k, l] : free_cells)
            if (z(k) + z(k0 + l) > c(k, l) + slack) feasible = false;
        if (!feasible) continue;
        const double norm = (obj * z).norm();
        if (norm < best_norm - 1e-15) {
            best_norm = norm;
            best = obj * z;
        }
    }
    return best.size() ? best : centred(fallback);
}

Mw2ValueGrad mw2_value_and_grad(const GmmParams& mu0, const GmmParams& mu1, bool weights) {
    const PairTerms t = pair_terms(mu0, mu1);
    const OtSolution sol = solve_discrete_ot(t.cost, mu0.weights(), mu1.weights());
    Mw2ValueGrad out;
    out.value = sol.cost;
    out.plan = sol.plan;
    out.grad = plan_grad_from_terms(mu0, mu1, sol.plan, t);
    if (weights) out.grad.weights = min_norm_row_potential(t.cost, sol.plan, sol.u);
    return out;
}

GmmGradient mw2_grad_params(const GmmParams& mu0, const GmmParams& mu1, bool weights) {
    return mw2_value_and_grad(mu0, mu1, weights).grad;
}

GmmGradient plan_cost_grad(const GmmParams& mu0, const GmmParams& mu1, const Matrix& plan) {
    if (plan.rows() != mu0.components() || plan.cols() != mu1.components())
        throw ArgumentError("plan_cost_grad: plan shape mismatch");
    return plan_grad_from_terms(mu0, mu1, plan, pair_terms(mu0, mu1));
}

double generalised_kl(const Vector& p, const Vector& q) {
    double s = 0.0;
    for (int i = 0; i < p.size(); ++i) {
        if (p(i) > 0.0) s += p(i) * std::log(p(i) / q(i));
        s += q(i) - p(i);
    }
    return s;
}

Umw2Result unbalanced_ot(const Matrix& c, const Vector& a, const Vector& b, const UnbalancedConfig& cfg) {
    if (!(cfg.lambda0 > 0.0) || !(cfg.lambda1 > 0.0) || !(cfg.entropic_eps > 0.0))
        throw ArgumentError("unbalanced_ot: lambda0, lambda1 and entropic_eps must be positive");
    if (cfg.max_iter < 1 || !(cfg.tol > 0.0)) throw ArgumentError("unbalanced_ot: invalid max_iter or tol");
    if (c.rows() != a.size() || c.cols() != b.size() || c.size() == 0)
        throw ArgumentError("unbalanced_ot: shape mismatch");
    if (!(a.array() > 0.0).all() || !(b.array() > 0.0).all())
        throw ArgumentError("unbalanced_ot: marginals must be positive");
    const int k0 = static_cast<int>(c.rows()), k1 = static_cast<int>(c.cols());
    const Vector log_a = a.array().log(), log_b = b.array().log();
    const double scale = std::max(1.0, c.cwiseAbs().maxCoeff());
    Vector f = Vector::Zero(k0), g = Vector::Zero(k1);
    std::vector<double> schedule;
    for (double eps = 0.1; eps > cfg.entropic_eps; eps *= 0.5) schedule.push_back(eps);
    schedule.push_back(cfg.entropic_eps);
    Vector tmp;
    auto plan_of = [&](const Vector& fv, const Vector& gv, double eps) {
        Matrix p(k0, k1);
        for (int i = 0; i < k0; ++i)
            for (int j = 0; j < k1; ++j) p(i, j) = std::exp((fv(i) + gv(j) - c(i, j)) / eps + log_a(i) + log_b(j));
        return p;
    };
    Matrix plan;
    for (size_t stage = 0; stage < schedule.size(); ++stage) {
        const double eps = schedule[stage];
        const double t0 = cfg.lambda0 / (cfg.lambda0 + eps);
        const double t1 = cfg.lambda1 / (cfg.lambda1 + eps);
        const bool last = stage + 1 == schedule.size();
        const double tol = cfg.tol;
        bool converged = false;
        for (int it = 0; it < cfg.max_iter; ++it) {
            double change = 0.0;
            for (int i = 0; i < k0; ++i) {
                tmp = (g.transpose() - c.row(i)).transpose() / eps + log_b;
                const double nf = -t0 * eps * logsumexp(tmp);
                change = std::max(change, std::abs(nf - f(i)));
                f(i) = nf;
            }
            for (int j = 0; j < k1; ++j) {
                tmp = (f - c.col(j)) / eps + log_a;
                const double ng = -t1 * eps * logsumexp(tmp);
                change = std::max(change, std::abs(ng - g(j)));
                g(j) = ng;
            }
            // Optimal shift along (f + s, g - s), which the scaling steps only contract at rate eps / lambda.
            const double la = logsumexp((log_a - f / cfg.lambda0).eval());
            const double lb = logsumexp((log_b - g / cfg.lambda1).eval());
            const double shift = (la - lb) / (1.0 / cfg.lambda0 + 1.0 / cfg.lambda1);
            f.array() += shift;
            g.array() -= shift;
            // Degenerate problems leave a flat dual direction along which the potentials drift
            // while the plan stays put, so a stationary plan also counts as converged.
            const Matrix next = plan_of(f, g, eps);
            const double plan_change = it == 0 ? 1.0 : (next - plan).cwiseAbs().maxCoeff();
            plan = next;
            if ((change <= tol * scale && std::abs(shift) <= tol * scale) ||
                plan_change <= tol * std::max(1.0, plan.sum())) {
                converged = true;
                break;
            }
        }
        if (!converged && last)
            throw NotConverged("unbalanced_ot: scaling iterations did not converge", cfg.max_iter);
    }
    Umw2Result out;
    out.plan = plan_of(f, g, schedule.back());
    out.value = out.plan.cwiseProduct(c).sum() +
                cfg.lambda0 * generalised_kl(out.plan.rowwise().sum(), a) +
                cfg.lambda1 * generalised_kl(out.plan.colwise().sum().transpose(), b);
    return out;
}

Umw2Result umw2_squared(const GmmParams& mu0, const GmmParams& mu1, const UnbalancedConfig& cfg) {
    return unbalanced_ot(cost_matrix(mu0, mu1), mu0.weights(), mu1.weights(), cfg);
}

GmmParams project_gmm(const GmmParams& mu, const Matrix& axes) {
    if (axes.cols() != mu.dim() || axes.rows() < 1 || axes.rows() > mu.dim())
        throw ArgumentError("project_gmm: axes must be d' x d with d' <= d");
    const Matrix gram = axes * axes.transpose();
    if ((gram - Matrix::Identity(axes.rows(), axes.rows())).cwiseAbs().maxCoeff() > 1e-8)
        throw ArgumentError("project_gmm: axes rows are not orthonormal");
    std::vector<Matrix> covs;
    for (int k = 0; k < mu.components(); ++k)
        covs.push_back(symmetrise(axes * mu.covariance(k) * axes.transpose()));
    return GmmParams(mu.weights(), mu.means() * axes.transpose(), std::move(covs));
}

GmmGradient pullback_projection_grad(const GmmGradient& g, const Matrix& axes) {
    GmmGradient out;
    out.weights = g.weights;
    out.means = g.means * axes;
    for (const Matrix& s : g.covariances) out.covariances.push_back(symmetrise(axes.transpose() * s * axes));
    out.near_singular = g.near_singular;
    return out;
}

double one_sample_bound(double rho_n, double weight_l1, double max_cross_cost) {
    return rho_n + 0.5 * weight_l1 * max_cross_cost;
}

double two_sample_bound(double r_m, double r_sigma, double rho_m, double rho_sigma, double rho_w) {
    return 8.0 * r_m * rho_m + 8.0 * r_sigma * rho_sigma + 8.0 * (r_m * r_m + r_sigma * r_sigma) * rho_w;
}

StabilityReport check_stability_bounds(const std::vector<StabilityInstance>& instances, double slack) {
    StabilityReport report;
    for (const StabilityInstance& inst : instances) {
        if (inst.mu0.components() != inst.mu0_hat.components() ||
            inst.mu1.components() != inst.mu1_hat.components())
            throw ArgumentError("check_stability_bounds: estimates must match the component count");
        StabilityRecord rec;
        // One-sample bound for (mu0_hat, mu0).
        const Matrix cross = cost_matrix(inst.mu0_hat, inst.mu0);
        rec.one_sample_lhs = mw2_squared(inst.mu0_hat, inst.mu0).value;
        rec.one_sample_rhs = one_sample_bound(cross.diagonal().maxCoeff(),
                                              (inst.mu0_hat.weights() - inst.mu0.weights()).lpNorm<1>(),
                                              cross.maxCoeff());
        // Two-sample bound.
        const GmmParams* truth[2] = {&inst.mu0, &inst.mu1};
        const GmmParams* est[2] = {&inst.mu0_hat, &inst.mu1_hat};
        for (int i = 0; i < 2; ++i) {
            rec.rho_w = std::max(rec.rho_w, (truth[i]->weights() - est[i]->weights()).lpNorm<1>());
            for (int k = 0; k < truth[i]->components(); ++k) {
                rec.rho_m = std::max(rec.rho_m, (truth[i]->means().row(k) - est[i]->means().row(k)).norm());
                rec.rho_sigma = std::max(rec.rho_sigma, bures_distance(truth[i]->covariance(k), est[i]->covariance(k)));
                for (const GmmParams* g : {truth[i], est[i]}) {
                    rec.r_m = std::max(rec.r_m, g->means().row(k).norm());
                    rec.r_sigma = std::max(rec.r_sigma, std::sqrt(g->covariance(k).trace()));
                }
            }
        }
        rec.two_sample_lhs = std::abs(mw2_squared(inst.mu0_hat, inst.mu1_hat).value -
                                      mw2_squared(inst.mu0, inst.mu1).value);
        rec.two_sample_rhs = two_sample_bound(rec.r_m, rec.r_sigma, rec.rho_m, rec.rho_sigma, rec.rho_w);
        if (rec.one_sample_lhs > rec.one_sample_rhs + slack) ++report.one_sample_violations;
        if (rec.two_sample_lhs > rec.two_sample_rhs + slack) ++report.two_sample_violations;
        report.records.push_back(rec);
    }
    return report;
}

}  // namespace diffem

#include "diffem/fixtures.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "diffem/em_diff.hpp"
#include "diffem/errors.hpp"
#include "diffem/flows.hpp"
#include "diffem/rng.hpp"

namespace diffem {

namespace {

struct TwoAtomPlan {
    double cost = 0.0;
    Eigen::Matrix2d plan;
};

// Every coupling of (alpha, 1 - alpha) and (gamma, 1 - gamma) is [[alpha - t, t], [gamma - alpha + t,
// 1 - gamma - t]] with t in [max(0, alpha - gamma), min(alpha, 1 - gamma)]; the cost is linear in t.
TwoAtomPlan two_atom_ot(const Vector& x1, const Vector& x2, double alpha, double gamma, const Vector& y1,
                        const Vector& y2) {
    const double c11 = (x1 - y1).squaredNorm(), c12 = (x1 - y2).squaredNorm();
    const double c21 = (x2 - y1).squaredNorm(), c22 = (x2 - y2).squaredNorm();
    auto at = [&](double t) {
        TwoAtomPlan p;
        p.plan << alpha - t, t, gamma - alpha + t, 1.0 - gamma - t;
        p.cost = p.plan(0, 0) * c11 + p.plan(0, 1) * c12 + p.plan(1, 0) * c21 + p.plan(1, 1) * c22;
        return p;
    };
    const TwoAtomPlan lo = at(std::max(0.0, alpha - gamma));
    const TwoAtomPlan hi = at(std::min(alpha, 1.0 - gamma));
    return lo.cost <= hi.cost ? lo : hi;
}

double n2_distance(double x1, double x2, double alpha, const N2Config& cfg) {
    const double direct = std::sqrt((x1 - cfg.y1) * (x1 - cfg.y1) + (x2 - cfg.y2) * (x2 - cfg.y2) +
                                    (alpha - cfg.gamma) * (alpha - cfg.gamma));
    const double swapped = std::sqrt((x1 - cfg.y2) * (x1 - cfg.y2) + (x2 - cfg.y1) * (x2 - cfg.y1) +
                                     (alpha - 1.0 + cfg.gamma) * (alpha - 1.0 + cfg.gamma));
    return std::min(direct, swapped);
}

Vector scalar(double v) { return Vector::Constant(1, v); }

}  // namespace

double w2_squared_1d(const Vector& x, const Vector& a, const Vector& y, const Vector& b) {
    if (x.size() != a.size() || y.size() != b.size() || x.size() == 0 || y.size() == 0)
        throw ArgumentError("w2_squared_1d: atoms and weights must match and be non-empty");
    if ((a.array() < 0.0).any() || (b.array() < 0.0).any() || std::abs(a.sum() - b.sum()) > 1e-12)
        throw ArgumentError("w2_squared_1d: weights must be non-negative with equal mass");
    std::vector<int> ix(x.size()), iy(y.size());
    std::iota(ix.begin(), ix.end(), 0);
    std::iota(iy.begin(), iy.end(), 0);
    std::sort(ix.begin(), ix.end(), [&](int i, int j) { return x(i) < x(j); });
    std::sort(iy.begin(), iy.end(), [&](int i, int j) { return y(i) < y(j); });
    double cost = 0.0, ra = a(ix[0]), rb = b(iy[0]);
    std::size_t i = 0, j = 0;
    // Walk both quantile functions, moving the smaller remaining mass at each step.
    while (i < ix.size() && j < iy.size()) {
        const double m = std::min(ra, rb);
        const double diff = x(ix[i]) - y(iy[j]);
        cost += m * diff * diff;
        ra -= m;
        rb -= m;
        if (ra <= 0.0 && ++i < ix.size()) ra = a(ix[i]);
        if (rb <= 0.0 && ++j < iy.size()) rb = b(iy[j]);
    }
    return cost;
}

double e3_energy(double epsilon, const Vector& alpha, const Vector& eta) {
    if (alpha.size() != 2 || eta.size() != 3) throw ArgumentError("e3_energy: alpha in R^2, eta in R^3");
    Vector x(3), a(3), y(3), b(3);
    x << eta(0), eta(1), 1.0 + eta(2);
    a << 1.0 / 6.0 + alpha(0), 1.0 / 6.0 + alpha(1), 2.0 / 3.0 - alpha(0) - alpha(1);
    y << 0.0, 1.0 - epsilon, 1.0 + epsilon;
    b.setConstant(1.0 / 3.0);
    return w2_squared_1d(x, a, y, b);
}

E3Report fixture_e3_landscape(double epsilon, double radius, int steps, double slack) {
    if (!(epsilon > 0.0 && epsilon < 0.5)) throw ArgumentError("e3: epsilon must lie in (0, 1/2)");
    if (steps < 2 || !(radius > 0.0)) throw ArgumentError("e3: need steps >= 2 and radius > 0");
    E3Report r;
    r.epsilon = epsilon;
    r.value_at_origin = e3_energy(epsilon, Vector::Zero(2), Vector::Zero(3));
    r.expected_value = 2.0 * epsilon * epsilon / 3.0;
    r.grid_min = std::numeric_limits<double>::infinity();
    std::vector<double> axis(steps);
    for (int i = 0; i < steps; ++i) axis[i] = radius * (2 * i - (steps - 1)) / (steps - 1);  // exactly symmetric
    std::vector<int> idx(5, 0);
    while (true) {
        Vector alpha(2), eta(3);
        alpha << axis[idx[0]], axis[idx[1]];
        eta << axis[idx[2]], axis[idx[3]], axis[idx[4]];
        const bool flat = alpha(0) == -alpha(1) && eta.isZero(0.0);
        if (!flat) {
            const double e = e3_energy(epsilon, alpha, eta);
            r.grid_min = std::min(r.grid_min, e);
            ++r.grid_points;
            if (e < r.value_at_origin - slack) ++r.lower_points;
        }
        int k = 0;
        while (k < 5 && ++idx[k] == steps) idx[k++] = 0;
        if (k == 5) break;
    }
    Vector alpha_t(2), eta_t(3);
    alpha_t << 1.0 / 6.0, 1.0 / 6.0;
    eta_t << 0.0, 1.0 - epsilon, epsilon;
    r.value_at_target = e3_energy(epsilon, alpha_t, eta_t);
    return r;
}

VanishingGradientReport fixture_vanishing_gradient(double epsilon, double m_star) {
    if (!(epsilon > 0.0)) throw ArgumentError("vanishing_gradient: epsilon must be positive");
    const double w = 2.0 / 3.0;
    const Matrix cov = Matrix::Constant(1, 1, epsilon * epsilon);
    Vector w_star(2), w_nu(2);
    w_star << 1.0 - w, w;
    w_nu << w, 1.0 - w;
    Matrix m_star_means(2, 1), m_nu(2, 1);
    m_star_means << 0.0, m_star;
    m_nu << 0.0, 1.0;
    const GmmParams theta_star(w_star, m_star_means, {cov, cov});
    const GmmParams nu(w_nu, m_nu, {cov, cov});
    Matrix x(6, 1);
    x << -epsilon, epsilon, m_star - epsilon, m_star + epsilon, m_star - epsilon, m_star + epsilon;

    const EmConfig em{1, false, false, 0.0, 0};
    const EnergyGrad eg = flow_energy_grad(theta_star, x, em, GradMethod::AD, mw2_loss(nu, true));
    VanishingGradientReport r;
    r.epsilon = epsilon;
    r.m_star = m_star;
    r.energy = eg.energy;
    r.gradient_norm = eg.x_grad.norm();
    r.parameter_drift = (to_flat(m_step(theta_star, x, em)) - to_flat(theta_star)).cwiseAbs().maxCoeff();
    return r;
}

double e2_energy(const Vector& x1, const Vector& x2, double alpha, double gamma, const Vector& y1,
                 const Vector& y2) {
    if (!(alpha >= 0.0 && alpha <= 1.0) || !(gamma > 0.0 && gamma < 1.0))
        throw ArgumentError("e2_energy: need alpha in [0, 1] and gamma in (0, 1)");
    return two_atom_ot(x1, x2, alpha, gamma, y1, y2).cost;
}

N2Report fixture_n2_landscape(const N2Config& cfg) {
    if (!(cfg.gamma > 0.0 && cfg.gamma < 1.0) || cfg.y1 == cfg.y2)
        throw ArgumentError("n2: need gamma in (0, 1) and y1 != y2");
    if (cfg.grid < 3 || cfg.starts < 1) throw ArgumentError("n2: need grid >= 3 and starts >= 1");
    const Vector y1 = scalar(cfg.y1), y2 = scalar(cfg.y2);
    auto energy = [&](double a, double b, double alpha) {
        return two_atom_ot(scalar(a), scalar(b), alpha, cfg.gamma, y1, y2).cost;
    };
    N2Report r;
    r.energy_at_target = energy(cfg.y1, cfg.y2, cfg.gamma);

    const int g = cfg.grid;
    std::vector<double> xs(g), as(g);
    for (int i = 0; i < g; ++i) {
        xs[i] = -1.5 + 4.0 * i / (g - 1);
        as[i] = (i + 1.0) / (g + 1.0);
    }
    std::vector<double> e(static_cast<std::size_t>(g) * g * g);
    auto at = [&](int i, int j, int k) -> double& { return e[(static_cast<std::size_t>(i) * g + j) * g + k]; };
    for (int i = 0; i < g; ++i)
        for (int j = 0; j < g; ++j)
            for (int k = 0; k < g; ++k) at(i, j, k) = energy(xs[i], xs[j], as[k]);
    for (int i = 0; i < g; ++i)
        for (int j = 0; j < g; ++j) {
            if (i == j) continue;  // merged atoms lie outside the domain
            for (int k = 0; k < g; ++k) {
                const double v = at(i, j, k);
                bool is_min = true;
                for (int di = -1; di <= 1 && is_min; ++di)
                    for (int dj = -1; dj <= 1 && is_min; ++dj)
                        for (int dk = -1; dk <= 1 && is_min; ++dk) {
                            const int a = i + di, b = j + dj, c = k + dk;
                            if ((di | dj | dk) == 0 || a < 0 || b < 0 || c < 0 || a >= g || b >= g || c >= g) continue;
                            if (at(a, b, c) < v) is_min = false;
                        }
                if (!is_min) continue;
                const bool edge = i == 0 || j == 0 || k == 0 || i == g - 1 || j == g - 1 || k == g - 1;
                r.grid_minima.push_back({xs[i], xs[j], as[k], v, edge});
            }
        }

    Rng rng(cfg.seed);
    for (int s = 0; s < cfg.starts; ++s) {
        double x1 = -1.5 + 4.0 * rng.uniform(), x2 = -1.5 + 4.0 * rng.uniform();
        double alpha = 0.05 + 0.9 * rng.uniform();
        double step = 0.5;
        for (int it = 0; it < cfg.max_iters; ++it) {
            // Atoms: barycentric projection of the optimal plan (exact minimiser for that plan).
            const TwoAtomPlan p = two_atom_ot(scalar(x1), scalar(x2), alpha, cfg.gamma, y1, y2);
            if (alpha > 0.0) x1 = (p.plan(0, 0) * cfg.y1 + p.plan(0, 1) * cfg.y2) / alpha;
            if (alpha < 1.0) x2 = (p.plan(1, 0) * cfg.y1 + p.plan(1, 1) * cfg.y2) / (1.0 - alpha);
            // Weight: envelope derivative of the cost along the plan's alpha parametrisation.
            const double base = energy(x1, x2, alpha);
            const double h = 1e-7;
            const double up = alpha + h <= 1.0 ? energy(x1, x2, alpha + h) : base;
            const double down = alpha - h >= 0.0 ? energy(x1, x2, alpha - h) : base;
            const double slope = (up - base) < (down - base) ? (up - base) / h : -(down - base) / h;
            if (std::min(up, down) >= base) {
                if (step < 1e-15) break;
                step *= 0.5;
                continue;
            }
            double moved = alpha;
            for (int bt = 0; bt < 60; ++bt, step *= 0.5) {
                const double cand = std::clamp(alpha - step * slope, 0.0, 1.0);
                if (energy(x1, x2, cand) < base) {
                    moved = cand;
                    break;
                }
            }
            if (moved == alpha) break;
            alpha = moved;
            step = std::min(1.0, 2.0 * step);
        }
        const double dist = n2_distance(x1, x2, alpha, cfg);
        r.descent_distances.push_back(dist);
        if (dist <= cfg.tol) ++r.descents_at_target;
    }

    // z* = (-1, 1 - gamma, 0) against y = (0, 1): one-sided derivatives along h with h3 > 0.
    const double zx1 = -1.0, zx2 = 1.0 - cfg.gamma;
    const Vector zy1 = scalar(0.0), zy2 = scalar(1.0);
    const double ez = two_atom_ot(scalar(zx1), scalar(zx2), 0.0, cfg.gamma, zy1, zy2).cost;
    r.z_star_min_directional = std::numeric_limits<double>::infinity();
    const double t = 1e-7;
    for (int s = 0; s < 200; ++s) {
        Eigen::Vector3d hvec(rng.normal(), rng.normal(), 0.01 + rng.uniform());
        hvec.normalize();
        const double ev = two_atom_ot(scalar(zx1 + t * hvec(0)), scalar(zx2 + t * hvec(1)), t * hvec(2), cfg.gamma,
                                      zy1, zy2).cost;
        r.z_star_min_directional = std::min(r.z_star_min_directional, (ev - ez) / t);
    }
    return r;
}

}  // namespace diffem

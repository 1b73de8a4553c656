#include "diffem/selfcheck.hpp"

#include <cmath>
#include <numbers>

#include "diffem/em_diff.hpp"
#include "diffem/errors.hpp"
#include "diffem/rng.hpp"

namespace diffem {

namespace {

struct Unpacked {
    Vector w;
    Matrix m;
    std::vector<Matrix> s;
};

Unpacked unpack(const Vector& flat, int k, int d) {
    Unpacked u{flat.head(k), Matrix(k, d), std::vector<Matrix>(k, Matrix(d, d))};
    for (int c = 0; c < k; ++c) {
        for (int a = 0; a < d; ++a) u.m(c, a) = flat(k + c * d + a);
        for (int a = 0; a < d; ++a)
            for (int b = 0; b < d; ++b) u.s[c](a, b) = flat(k + k * d + c * d * d + a * d + b);
    }
    return u;
}

double block_error(const Matrix& analytic, const Matrix& fd) {
    const double den = fd.norm();
    if (den < 1e-10) return (analytic - fd).norm();
    return (analytic - fd).norm() / den;
}

// Column directions of theta: all flat coordinates, with covariance coordinates replaced
// by symmetric perturbations over pairs a <= b.
struct Direction {
    std::vector<int> coords;  // flat coordinates perturbed together
    int group;                // 0 = w, 1 = m, 2 = Sigma
};

std::vector<Direction> theta_directions(int k, int d) {
    std::vector<Direction> dirs;
    for (int c = 0; c < k; ++c) dirs.push_back({{c}, 0});
    for (int c = 0; c < k * d; ++c) dirs.push_back({{k + c}, 1});
    for (int c = 0; c < k; ++c)
        for (int a = 0; a < d; ++a)
            for (int b = a; b < d; ++b) {
                const int base = k + k * d + c * d * d;
                if (a == b) dirs.push_back({{base + a * d + a}, 2});
                else dirs.push_back({{base + a * d + b, base + b * d + a}, 2});
            }
    return dirs;
}

GmmParams random_instance(Rng& rng, int k, int d) {
    Matrix m(k, d);
    for (int i = 0; i < k; ++i)
        for (int a = 0; a < d; ++a) m(i, a) = 0.8 * rng.normal();
    std::vector<Matrix> s;
    for (int i = 0; i < k; ++i) {
        Matrix g(d, d);
        for (int a = 0; a < d; ++a)
            for (int b = 0; b < d; ++b) g(a, b) = 0.5 * rng.normal();
        s.push_back(symmetrise(g * g.transpose() + 0.5 * Matrix::Identity(d, d)));
    }
    Vector w(k);
    for (int i = 0; i < k; ++i) w(i) = 0.3 + rng.uniform();
    return GmmParams(w / w.sum(), m, s);
}

}  // namespace

Matrix direct_responsibilities(const Vector& w, const Matrix& means, const std::vector<Matrix>& covs,
                               const Matrix& x) {
    const int n = static_cast<int>(x.rows()), k = static_cast<int>(w.size()), d = static_cast<int>(x.cols());
    Matrix g(n, k);
    for (int c = 0; c < k; ++c) {
        const Matrix inv = covs[c].inverse();
        const double norm = std::pow(2.0 * std::numbers::pi, -0.5 * d) / std::sqrt(covs[c].determinant());
        for (int i = 0; i < n; ++i) {
            const Vector e = x.row(i) - means.row(c);
            g(i, c) = w(c) * norm * std::exp(-0.5 * e.dot(inv * e));
        }
    }
    for (int i = 0; i < n; ++i) g.row(i) /= g.row(i).sum();
    return g;
}

Vector direct_em_step(const Vector& flat, int k, int d, const Matrix& x, bool fix_weights,
                      bool update_covariances, double cov_regulariser) {
    const Unpacked th = unpack(flat, k, d);
    const Matrix gamma = direct_responsibilities(th.w, th.m, th.s, x);
    const int n = static_cast<int>(x.rows());
    Vector out(flat.size());
    for (int c = 0; c < k; ++c) {
        double mass = 0.0;
        Vector mean = Vector::Zero(d);
        for (int i = 0; i < n; ++i) {
            mass += gamma(i, c);
            mean += gamma(i, c) * x.row(i).transpose();
        }
        mean /= mass;
        Matrix cov = Matrix::Zero(d, d);
        for (int i = 0; i < n; ++i) {
            const Vector e = x.row(i).transpose() - mean;
            cov += gamma(i, c) * e * e.transpose();
        }
        cov = cov / mass + cov_regulariser * Matrix::Identity(d, d);
        if (!update_covariances) cov = th.s[c];
        out(c) = fix_weights ? th.w(c) : mass / n;
        for (int a = 0; a < d; ++a) out(k + c * d + a) = mean(a);
        for (int a = 0; a < d; ++a)
            for (int b = 0; b < d; ++b) out(k + k * d + c * d * d + a * d + b) = cov(a, b);
    }
    return out;
}

OracleSuiteReport run_jacobian_oracle_suite(int instances, std::uint64_t seed, double step) {
    if (instances < 1 || !(step > 0.0)) throw ArgumentError("oracle suite: invalid arguments");
    OracleSuiteReport suite;
    Rng rng(seed);
    const char* group_names[3] = {"w", "m", "Sigma"};
    for (int inst = 0; inst < instances; ++inst) {
        const int k = 1 + static_cast<int>(rng.uniform_int(3));
        const int d = 1 + static_cast<int>(rng.uniform_int(3));
        const int n = d + 1 + static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(6 - d)));
        const GmmParams theta = random_instance(rng, k, d);
        Matrix x(n, d);
        for (int i = 0; i < n; ++i)
            for (int a = 0; a < d; ++a) x(i, a) = 1.2 * rng.normal();
        EmConfig cfg;
        cfg.fix_weights = (inst % 3 == 1);
        cfg.update_covariances = (inst % 3 != 2);
        const int p = flat_size(k, d);
        const Vector flat = to_flat(theta);

        OracleInstanceReport rep;
        rep.n = n;
        rep.d = d;
        rep.k = k;
        rep.fix_weights = cfg.fix_weights;
        rep.update_covariances = cfg.update_covariances;

        const GammaJacobian gj = d_gamma(theta, x);
        const EmJacobians jac = em_jacobians(theta, x, cfg);
        Matrix gamma_theta(n * k, p);
        gamma_theta << gj.d_w, gj.d_m, gj.d_sigma;

        auto gamma_at = [&](const Vector& f, const Matrix& xx) {
            const Unpacked u = unpack(f, k, d);
            const Matrix g = direct_responsibilities(u.w, u.m, u.s, xx);
            Vector v(n * k);
            for (int i = 0; i < n; ++i)
                for (int c = 0; c < k; ++c) v(i * k + c) = g(i, c);
            return v;
        };
        auto step_at = [&](const Vector& f, const Matrix& xx) {
            return direct_em_step(f, k, d, xx, cfg.fix_weights, cfg.update_covariances, cfg.cov_regulariser);
        };

        // Theta directions.
        const std::vector<Direction> dirs = theta_directions(k, d);
        for (int group = 0; group < 3; ++group) {
            std::vector<const Direction*> cols;
            for (const Direction& dir : dirs)
                if (dir.group == group) cols.push_back(&dir);
            Matrix an_g(n * k, cols.size()), fd_g(n * k, cols.size());
            Matrix an_f(p, cols.size()), fd_f(p, cols.size());
            for (size_t j = 0; j < cols.size(); ++j) {
                Vector delta = Vector::Zero(p);
                an_g.col(j).setZero();
                an_f.col(j).setZero();
                for (int c : cols[j]->coords) {
                    delta(c) = 1.0;
                    an_g.col(j) += gamma_theta.col(c);
                    an_f.col(j) += jac.d_theta.col(c);
                }
                fd_g.col(j) = (gamma_at(flat + step * delta, x) - gamma_at(flat - step * delta, x)) / (2.0 * step);
                fd_f.col(j) = (step_at(flat + step * delta, x) - step_at(flat - step * delta, x)) / (2.0 * step);
            }
            rep.blocks.push_back({std::string("dgamma/d") + group_names[group], block_error(an_g, fd_g)});
            const bool frozen_col = (group == 0 && cfg.fix_weights) || (group == 2 && !cfg.update_covariances);
            if (frozen_col) {
                if (!an_f.isZero(0.0)) rep.frozen_blocks_zero = false;
                continue;
            }
            const int row_off[3] = {0, k, k + k * d};
            const int row_len[3] = {k, k * d, k * d * d};
            for (int rg = 0; rg < 3; ++rg) {
                const bool frozen_row = (rg == 0 && cfg.fix_weights) || (rg == 2 && !cfg.update_covariances);
                const Matrix a = an_f.middleRows(row_off[rg], row_len[rg]);
                if (frozen_row) {
                    if (!a.isZero(0.0)) rep.frozen_blocks_zero = false;
                    continue;
                }
                rep.blocks.push_back({std::string("dF_") + group_names[rg] + "/d" + group_names[group],
                                      block_error(a, fd_f.middleRows(row_off[rg], row_len[rg]))});
            }
        }

        // X directions.
        Matrix an_gx = Matrix::Zero(n * k, n * d), fd_gx(n * k, n * d), fd_fx(p, n * d);
        for (int i = 0; i < n; ++i)
            for (int c = 0; c < k; ++c) an_gx.block(i * k + c, i * d, 1, d) = gj.d_x.row(i * k + c);
        for (int i = 0; i < n; ++i)
            for (int a = 0; a < d; ++a) {
                Matrix xp = x, xm = x;
                xp(i, a) += step;
                xm(i, a) -= step;
                fd_gx.col(i * d + a) = (gamma_at(flat, xp) - gamma_at(flat, xm)) / (2.0 * step);
                fd_fx.col(i * d + a) = (step_at(flat, xp) - step_at(flat, xm)) / (2.0 * step);
            }
        rep.blocks.push_back({"dgamma/dX", block_error(an_gx, fd_gx)});
        const int row_off[3] = {0, k, k + k * d};
        const int row_len[3] = {k, k * d, k * d * d};
        for (int rg = 0; rg < 3; ++rg) {
            const bool frozen_row = (rg == 0 && cfg.fix_weights) || (rg == 2 && !cfg.update_covariances);
            const Matrix a = jac.d_x.middleRows(row_off[rg], row_len[rg]);
            if (frozen_row) {
                if (!a.isZero(0.0)) rep.frozen_blocks_zero = false;
                continue;
            }
            rep.blocks.push_back({std::string("dF_") + group_names[rg] + "/dX",
                                  block_error(a, fd_fx.middleRows(row_off[rg], row_len[rg]))});
        }

        for (const BlockError& b : rep.blocks)
            if (b.rel_error > suite.max_rel_error || suite.worst_block.empty()) {
                if (b.rel_error >= suite.max_rel_error) {
                    suite.max_rel_error = b.rel_error;
                    suite.worst_block = b.name;
                }
            }
        suite.frozen_blocks_zero = suite.frozen_blocks_zero && rep.frozen_blocks_zero;
        suite.instances.push_back(std::move(rep));
    }
    return suite;
}

}  // namespace diffem

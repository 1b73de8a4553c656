#include "diffem/spd_linalg.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "diffem/errors.hpp"

namespace diffem {

namespace {

LinalgTolerances g_tolerances;

EigenDecomposition jacobi_eigen(const Matrix& input) {
    const int d = static_cast<int>(input.rows());
    const auto& tol = linalg_tolerances();
    Matrix a = input;
    Matrix v = Matrix::Identity(d, d);
    const double scale = a.squaredNorm();
    for (int sweep = 0; sweep < tol.jacobi_max_sweeps; ++sweep) {
        double off = 0.0;
        for (int p = 0; p < d; ++p)
            for (int q = p + 1; q < d; ++q) off += 2.0 * a(p, q) * a(p, q);
        if (off <= tol.jacobi_offdiag * tol.jacobi_offdiag * scale || off == 0.0) break;
        for (int p = 0; p < d; ++p) {
            for (int q = p + 1; q < d; ++q) {
                const double apq = a(p, q);
                if (apq == 0.0) continue;
                const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
                const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                                 (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (int k = 0; k < d; ++k) {
                    const double akp = a(k, p), akq = a(k, q);
                    a(k, p) = c * akp - s * akq;
                    a(k, q) = s * akp + c * akq;
                }
                for (int k = 0; k < d; ++k) {
                    const double apk = a(p, k), aqk = a(q, k);
                    a(p, k) = c * apk - s * aqk;
                    a(q, k) = s * apk + c * aqk;
                }
                a(p, q) = 0.0;
                a(q, p) = 0.0;
                for (int k = 0; k < d; ++k) {
                    const double vkp = v(k, p), vkq = v(k, q);
                    v(k, p) = c * vkp - s * vkq;
                    v(k, q) = s * vkp + c * vkq;
                }
            }
        }
    }
    std::vector<int> order(d);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int i, int j) { return a(i, i) < a(j, j); });
    EigenDecomposition out;
    out.eigenvalues.resize(d);
    out.eigenvectors.resize(d, d);
    for (int j = 0; j < d; ++j) {
        out.eigenvalues(j) = a(order[j], order[j]);
        out.eigenvectors.col(j) = v.col(order[j]);
    }
    return out;
}

}  // namespace

const LinalgTolerances& linalg_tolerances() { return g_tolerances; }
void set_linalg_tolerances(const LinalgTolerances& tol) { g_tolerances = tol; }

Matrix symmetrise(const Matrix& m) { return 0.5 * (m + m.transpose()); }

SpdMatrix::SpdMatrix(const Matrix& a) {
    if (a.rows() == 0 || a.rows() != a.cols())
        throw ArgumentError("SpdMatrix: matrix must be square and nonempty");
    if (!a.allFinite()) throw ArgumentError("SpdMatrix: non-finite entries");
    const double asym = (a - a.transpose()).norm();
    if (asym > linalg_tolerances().symmetry * std::max(a.norm(), 1e-300))
        throw ArgumentError("SpdMatrix: matrix is not symmetric");
    a_ = symmetrise(a);
    cholesky(a_);  // throws DegenerateCovariance when not positive definite
}

double CholeskyFactor::log_det() const {
    return 2.0 * lower.diagonal().array().log().sum();
}

Matrix CholeskyFactor::solve_lower(const Matrix& v) const {
    return lower.triangularView<Eigen::Lower>().solve(v);
}

Matrix CholeskyFactor::inverse() const {
    const int d = static_cast<int>(lower.rows());
    Matrix linv = solve_lower(Matrix::Identity(d, d));
    return symmetrise(linv.transpose() * linv);
}

CholeskyFactor cholesky(const Matrix& a) {
    const int d = static_cast<int>(a.rows());
    if (d == 0 || a.cols() != d) throw ArgumentError("cholesky: matrix must be square and nonempty");
    Matrix l = Matrix::Zero(d, d);
    for (int j = 0; j < d; ++j) {
        double s = a(j, j);
        for (int k = 0; k < j; ++k) s -= l(j, k) * l(j, k);
        if (!(s > 0.0) || !std::isfinite(s))
            throw DegenerateCovariance("cholesky: non-positive pivot at index " + std::to_string(j), j);
        const double ljj = std::sqrt(s);
        l(j, j) = ljj;
        for (int i = j + 1; i < d; ++i) {
            double t = a(i, j);
            for (int k = 0; k < j; ++k) t -= l(i, k) * l(j, k);
            l(i, j) = t / ljj;
        }
    }
    return CholeskyFactor{std::move(l)};
}

EigenDecomposition symmetric_eigen(const Matrix& a) {
    if (a.rows() != a.cols()) throw ArgumentError("symmetric_eigen: matrix must be square");
    const Matrix s = symmetrise(a);
    if (s.rows() <= linalg_tolerances().jacobi_max_dim) return jacobi_eigen(s);
    Eigen::SelfAdjointEigenSolver<Matrix> solver(s);
    return EigenDecomposition{solver.eigenvalues(), solver.eigenvectors()};
}

Matrix spd_sqrt(const Matrix& a) {
    const EigenDecomposition eig = symmetric_eigen(a);
    const Vector root = eig.eigenvalues.cwiseMax(0.0).cwiseSqrt();
    return symmetrise(eig.eigenvectors * root.asDiagonal() * eig.eigenvectors.transpose());
}

SqrtDifferential spd_sqrt_differential(const EigenDecomposition& eig, const Matrix& h) {
    const int d = static_cast<int>(eig.eigenvalues.size());
    if (h.rows() != d || h.cols() != d)
        throw ArgumentError("spd_sqrt_differential: dimension mismatch");
    const Matrix& p = eig.eigenvectors;
    const Vector root = eig.eigenvalues.cwiseMax(0.0).cwiseSqrt();
    const double floor = 1e-12 * std::max(root.maxCoeff(), 1e-300);
    Matrix g = p.transpose() * symmetrise(h) * p;
    SqrtDifferential out;
    for (int i = 0; i < d; ++i) {
        for (int j = 0; j < d; ++j) {
            const double divisor = root(i) + root(j);
            if (divisor <= floor) {
                g(i, j) = 0.0;
                out.near_singular = true;
            } else {
                g(i, j) /= divisor;
            }
        }
    }
    out.value = symmetrise(p * g * p.transpose());
    return out;
}

SqrtDifferential spd_sqrt_differential(const Matrix& a, const Matrix& h) {
    return spd_sqrt_differential(symmetric_eigen(a), h);
}

double logsumexp(const Vector& v) {
    if (v.size() == 0) throw ArgumentError("logsumexp: empty input");
    const double mx = v.maxCoeff();
    if (!std::isfinite(mx)) return mx;
    return mx + std::log((v.array() - mx).exp().sum());
}

}  // namespace diffem

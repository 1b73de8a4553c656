#pragma once

#include <Eigen/Dense>

namespace diffem {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

struct LinalgTolerances {
    double symmetry = 1e-12;        // relative asymmetry accepted by SpdMatrix
    double jacobi_offdiag = 1e-15;  // relative off-diagonal mass ending Jacobi sweeps
    int jacobi_max_sweeps = 100;
    int jacobi_max_dim = 64;        // larger inputs use Eigen's tridiagonal QR
};

const LinalgTolerances& linalg_tolerances();
void set_linalg_tolerances(const LinalgTolerances& tol);

// Symmetric positive definite matrix, validated on construction.
class SpdMatrix {
public:
    SpdMatrix() = default;
    explicit SpdMatrix(const Matrix& a);

    int dim() const { return static_cast<int>(a_.rows()); }
    const Matrix& matrix() const { return a_; }
    operator const Matrix&() const { return a_; }

private:
    Matrix a_;
};

struct CholeskyFactor {
    Matrix lower;

    double log_det() const;
    // L^{-1} v for each column of v.
    Matrix solve_lower(const Matrix& v) const;
    Matrix inverse() const;
};

struct EigenDecomposition {
    Vector eigenvalues;   // ascending
    Matrix eigenvectors;  // columns
};

Matrix symmetrise(const Matrix& m);

// Throws DegenerateCovariance carrying the failing pivot index.
CholeskyFactor cholesky(const Matrix& a);
inline CholeskyFactor cholesky(const SpdMatrix& a) { return cholesky(a.matrix()); }

// Symmetric eigendecomposition. Cyclic Jacobi rotations up to the configured size.
EigenDecomposition symmetric_eigen(const Matrix& a);

// Principal square root of a symmetric PSD matrix; negative eigenvalues are clamped to 0.
Matrix spd_sqrt(const Matrix& a);
inline Matrix spd_sqrt(const SpdMatrix& a) { return spd_sqrt(a.matrix()); }

struct SqrtDifferential {
    Matrix value;
    bool near_singular = false;
};

// Solves R X + X R = H for R = sqrt(A).
SqrtDifferential spd_sqrt_differential(const Matrix& a, const Matrix& h);
SqrtDifferential spd_sqrt_differential(const EigenDecomposition& eig, const Matrix& h);

double logsumexp(const Vector& v);

}  // namespace diffem

#include "diffem/colour_transfer.hpp"

#include "diffem/errors.hpp"

namespace diffem {

namespace {

void check_rgb(const Image& img, const char* what) {
    if (img.size() < 1 || img.pixels.rows() != img.size() || img.pixels.cols() != 3)
        throw ArgumentError(std::string("colour_transfer: malformed ") + what + " image");
}

std::pair<Vector, Matrix> moments(const Matrix& x) {
    const Vector m = x.colwise().mean().transpose();
    const Matrix c = x.rowwise() - m.transpose();
    return {m, c.transpose() * c / static_cast<double>(x.rows())};
}

// A = S0^{-1/2} (S0^{1/2} S1 S0^{1/2})^{1/2} S0^{-1/2}, pushing N(., S0) onto N(., S1).
Matrix gaussian_ot_map(const Matrix& s0, const Matrix& s1) {
    const EigenDecomposition eig = symmetric_eigen(s0);
    if (!(eig.eigenvalues.minCoeff() > 0.0))
        throw DegenerateCovariance("gaussian_affine_transfer: source covariance is singular", 0);
    const Matrix& q = eig.eigenvectors;
    const Matrix r = q * eig.eigenvalues.cwiseSqrt().asDiagonal() * q.transpose();
    const Matrix r_inv = q * eig.eigenvalues.cwiseSqrt().cwiseInverse().asDiagonal() * q.transpose();
    return symmetrise(r_inv * spd_sqrt(symmetrise(r * s1 * r)) * r_inv);
}

}  // namespace

UnbalancedConfig default_colour_unbalanced() {
    UnbalancedConfig u;
    u.lambda0 = 10.0;
    u.lambda1 = 0.1;
    u.entropic_eps = 1e-3;
    return u;
}

GmmParams fit_colour_gmm(const Matrix& pixels, int components, const EmConfig& em, int iterations,
                         std::uint64_t seed) {
    const Dataset x = Dataset::unchecked(pixels);
    const GmmParams init = kmeanspp_init(x, components, seed, em.cov_regulariser);
    EmConfig cfg = em;
    cfg.iterations = iterations;
    return em_trajectory(init, pixels, cfg).back();
}

ColourTransferResult colour_transfer(const Image& source, const Image& target, const ColourTransferConfig& cfg) {
    check_rgb(source, "source");
    check_rgb(target, "target");
    if (cfg.components < 1) throw ArgumentError("colour_transfer: components must be >= 1");
    if (cfg.target_iterations < 0) throw ArgumentError("colour_transfer: target_iterations must be >= 0");
    EmConfig em = cfg.em;
    em.fix_weights = true;
    const GmmParams nu = fit_colour_gmm(target.pixels, cfg.components, em, cfg.target_iterations, cfg.seed);
    const Dataset x0 = Dataset::unchecked(source.pixels);
    // Same seed as the target fit, so that identical images start at zero energy.
    const GmmParams theta0 = kmeanspp_init(x0, cfg.components, cfg.seed, em.cov_regulariser);

    FlowConfig flow;
    flow.grad_method = GradMethod::WARM;
    flow.gd_steps = cfg.gd_steps;
    flow.learning_rate = cfg.learning_rate;
    flow.em = em;
    flow.seed = cfg.seed;
    const GmmLoss loss = cfg.unbalanced ? umw2_loss(nu, *cfg.unbalanced) : mw2_loss(nu);
    FlowTrace trace = run_loss_flow(x0, theta0, loss, flow);
    Image out(source.height, source.width, trace.final_points.cwiseMax(0.0).cwiseMin(1.0));
    return {std::move(out), std::move(trace), nu};
}

Image gaussian_affine_transfer(const Image& source, const Image& target) {
    check_rgb(source, "source");
    check_rgb(target, "target");
    const auto [ms, cs] = moments(source.pixels);
    const auto [mt, ct] = moments(target.pixels);
    const Matrix a = gaussian_ot_map(cs, ct);
    Matrix px = (source.pixels.rowwise() - ms.transpose()) * a;  // A is symmetric
    px.rowwise() += mt.transpose();
    return Image(source.height, source.width, std::move(px));
}

}  // namespace diffem

#include "diffem/texture.hpp"

#include <cmath>
#include <limits>

#include "diffem/colour_transfer.hpp"
#include "diffem/em_diff.hpp"
#include "diffem/errors.hpp"
#include "diffem/gmm_ot.hpp"
#include "diffem/rng.hpp"

namespace diffem {

namespace {

void check_scales(const TextureConfig& cfg, int h, int w, const char* which) {
    if (cfg.scales.empty()) throw ArgumentError("texture: no scales");
    for (const TextureScale& sc : cfg.scales) {
        if (sc.patch_size < 1) throw ArgumentError("texture: patch size must be >= 1");
        if (sc.downscale < 0 || sc.downscale > 20) throw ArgumentError("texture: invalid downscale exponent");
        const int f = 1 << sc.downscale;
        if (h % f != 0 || w % f != 0)
            throw ArgumentError(std::string("texture: ") + which + " size is not divisible by 2^s");
        if (h / f < 16 || w / f < 16)
            throw ArgumentError(std::string("texture: ") + which + " image is below 16x16 at some scale");
        if (sc.patch_size > h / f || sc.patch_size > w / f)
            throw ArgumentError("texture: patch larger than the downscaled image");
    }
}

// Warm-start EM state of one scale.
struct ScaleState {
    TextureScale scale;
    GmmParams target;
    GmmParams theta;
};

}  // namespace

Matrix downscale(const Matrix& px, int h, int w, int s) {
    Matrix cur = px;
    for (int k = 0; k < s; ++k) {
        if (h % 2 != 0 || w % 2 != 0) throw ArgumentError("downscale: odd image size");
        const int nh = h / 2, nw = w / 2;
        Matrix next(nh * nw, cur.cols());
        for (int r = 0; r < nh; ++r)
            for (int c = 0; c < nw; ++c)
                next.row(r * nw + c) = 0.25 * (cur.row(2 * r * w + 2 * c) + cur.row(2 * r * w + 2 * c + 1) +
                                               cur.row((2 * r + 1) * w + 2 * c) + cur.row((2 * r + 1) * w + 2 * c + 1));
        cur = std::move(next);
        h = nh;
        w = nw;
    }
    return cur;
}

Matrix downscale_adjoint(const Matrix& g, int h, int w, int s) {
    if (s == 0) return g;
    const int f = 1 << s;
    const int nw = w / f;
    const double share = 1.0 / (f * f);
    Matrix out(h * w, g.cols());
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c) out.row(r * w + c) = share * g.row((r / f) * nw + c / f);
    return out;
}

Matrix extract_patches(const Matrix& px, int h, int w, int p) {
    const int ch = static_cast<int>(px.cols());
    Matrix out(h * w, p * p * ch);
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c)
            for (int dr = 0; dr < p; ++dr)
                for (int dc = 0; dc < p; ++dc)
                    out.row(r * w + c).segment((dr * p + dc) * ch, ch) = px.row(((r + dr) % h) * w + (c + dc) % w);
    return out;
}

Matrix patches_adjoint(const Matrix& g, int h, int w, int p, int channels) {
    Matrix out = Matrix::Zero(h * w, channels);
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c)
            for (int dr = 0; dr < p; ++dr)
                for (int dc = 0; dc < p; ++dc)
                    out.row(((r + dr) % h) * w + (c + dc) % w) += g.row(r * w + c).segment((dr * p + dc) * channels, channels);
    return out;
}

Image gaussian_field_init(const Image& target, int out_h, int out_w, std::uint64_t seed) {
    if (target.size() < 1) throw ArgumentError("gaussian_field_init: empty target");
    if (out_h < target.height || out_w < target.width)
        throw ArgumentError("gaussian_field_init: output must be at least as large as the target");
    const int h = target.height, w = target.width;
    const Eigen::RowVectorXd m = target.pixels.colwise().mean();
    const Matrix spot = (target.pixels.rowwise() - m) / std::sqrt(static_cast<double>(h * w));
    Rng rng(seed);
    Vector z(out_h * out_w);
    for (int i = 0; i < z.size(); ++i) z(i) = rng.normal();
    Matrix px(out_h * out_w, target.pixels.cols());
    px.rowwise() = m;
    for (int r = 0; r < out_h; ++r)
        for (int c = 0; c < out_w; ++c)
            for (int a = 0; a < h; ++a)
                for (int b = 0; b < w; ++b)
                    px.row(r * out_w + c) +=
                        z(((r - a + out_h) % out_h) * out_w + (c - b + out_w) % out_w) * spot.row(a * w + b);
    return Image(out_h, out_w, std::move(px));
}

TextureTrace optimise_texture(const Image& target, const Image& init, const TextureConfig& cfg) {
    check_scales(cfg, target.height, target.width, "target");
    check_scales(cfg, init.height, init.width, "output");
    if (cfg.components < 1) throw ArgumentError("texture: components must be >= 1");
    if (cfg.gd_steps < 0 || !(cfg.learning_rate >= 0.0)) throw ArgumentError("texture: invalid descent settings");
    const int h = init.height, w = init.width, ch = static_cast<int>(init.pixels.cols());
    Matrix x = init.pixels;

    std::vector<ScaleState> states;
    for (const TextureScale& sc : cfg.scales) {
        const int f = 1 << sc.downscale;
        const Matrix tp = extract_patches(downscale(target.pixels, target.height, target.width, sc.downscale),
                                          target.height / f, target.width / f, sc.patch_size);
        const GmmParams nu = fit_colour_gmm(tp, cfg.components, cfg.em, cfg.target_iterations, cfg.seed);
        const Matrix xp = extract_patches(downscale(x, h, w, sc.downscale), h / f, w / f, sc.patch_size);
        const GmmParams theta0 = kmeanspp_init(Dataset::unchecked(xp), cfg.components, cfg.seed, cfg.em.cov_regulariser);
        states.push_back({sc, nu, em_trajectory(theta0, xp, cfg.em).back()});
    }

    EmConfig one = cfg.em;
    one.iterations = 1;
    TextureTrace out;
    const double n = static_cast<double>(h * w);
    for (int step = 0; step <= cfg.gd_steps; ++step) {
        const bool last = step == cfg.gd_steps;
        double energy = 0.0;
        Matrix xbar = Matrix::Zero(x.rows(), ch);
        for (ScaleState& st : states) {
            const int s = st.scale.downscale, f = 1 << s, p = st.scale.patch_size;
            const double weight = std::ldexp(1.0, 2 * s);
            const Matrix xp = extract_patches(downscale(x, h, w, s), h / f, w / f, p);
            const GmmParams next = m_step(st.theta, xp, one);
            if (last) {
                energy += weight * mw2_squared(next, st.target).value;
                continue;
            }
            const Mw2ValueGrad vg = mw2_value_and_grad(next, st.target);
            energy += weight * vg.value;
            const Matrix pbar = weight * em_step_vjp(st.theta, xp, one, vg.grad.flat()).x_bar;
            xbar += downscale_adjoint(patches_adjoint(pbar, h / f, w / f, p, ch), h, w, s);
            st.theta = next;
        }
        out.energies.push_back(energy);
        if (!last) x -= cfg.learning_rate * n * xbar;
    }
    out.pixels = std::move(x);
    return out;
}

Matrix nearest_patch_projection(const Matrix& x, int h, int w, const Image& target, int p) {
    const int ch = static_cast<int>(x.cols());
    const Matrix xp = extract_patches(x, h, w, p);
    const Matrix tp = extract_patches(target.pixels, target.height, target.width, p);
    const Vector tn = tp.rowwise().squaredNorm();
    std::vector<int> best(xp.rows());
    constexpr int kBlock = 512;
    for (int start = 0; start < xp.rows(); start += kBlock) {
        const int len = std::min(kBlock, static_cast<int>(xp.rows()) - start);
        // ||y - t||^2 up to the constant ||y||^2.
        const Matrix d = (-2.0 * xp.middleRows(start, len) * tp.transpose()).rowwise() + tn.transpose();
        for (int i = 0; i < len; ++i) d.row(i).minCoeff(&best[start + i]);
    }
    Matrix acc = Matrix::Zero(h * w, ch);
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c)
            for (int dr = 0; dr < p; ++dr)
                for (int dc = 0; dc < p; ++dc)
                    acc.row(((r + dr) % h) * w + (c + dc) % w) += tp.row(best[r * w + c]).segment((dr * p + dc) * ch, ch);
    return acc / static_cast<double>(p * p);
}

TextureResult texture_synthesis(const Image& target, int out_h, int out_w, const TextureConfig& cfg) {
    check_scales(cfg, target.height, target.width, "target");
    check_scales(cfg, out_h, out_w, "output");
    const Image init = gaussian_field_init(target, out_h, out_w, cfg.seed);
    TextureTrace tr = optimise_texture(target, init, cfg);
    // Projection on the finest listed scale, at full resolution.
    int p = cfg.scales.front().patch_size, s_min = cfg.scales.front().downscale;
    for (const TextureScale& sc : cfg.scales)
        if (sc.downscale < s_min) {
            s_min = sc.downscale;
            p = sc.patch_size;
        }
    TextureResult out;
    out.synthesised = Image(out_h, out_w, tr.pixels.cwiseMax(0.0).cwiseMin(1.0));
    out.image = Image(out_h, out_w, nearest_patch_projection(tr.pixels, out_h, out_w, target, p).cwiseMax(0.0).cwiseMin(1.0));
    out.energies = std::move(tr.energies);
    return out;
}

}  // namespace diffem

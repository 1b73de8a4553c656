#include "diffem/experiments.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <limits>
#include <map>
#include <mutex>
#include <numbers>
#include <thread>
#include <tuple>

#include "diffem/em_diff.hpp"
#include "diffem/errors.hpp"
#include "diffem/gmm_io.hpp"
#include "diffem/gmm_ot.hpp"
#include "diffem/rng.hpp"

namespace diffem {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::vector<double> finite_only(std::vector<double> v) {
    v.erase(std::remove_if(v.begin(), v.end(), [](double x) { return !std::isfinite(x); }), v.end());
    return v;
}

double quantile(const std::vector<double>& sorted, double q) {
    const double pos = q * static_cast<double>(sorted.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
    return sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

std::vector<double> ranks(const std::vector<double>& v) {
    std::vector<int> idx(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) idx[i] = static_cast<int>(i);
    std::sort(idx.begin(), idx.end(), [&](int a, int b) { return v[a] < v[b]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < idx.size();) {
        std::size_t j = i;
        while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
        const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
        i = j + 1;
    }
    return r;
}

Matrix random_rotation(int d, Rng& rng) {
    Matrix a(d, d);
    for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j) a(i, j) = rng.normal();
    Eigen::HouseholderQR<Matrix> qr(a);
    return qr.householderQ();
}

std::ofstream open_csv(const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    return out;
}

}  // namespace

void parallel_for(int count, int workers, const std::function<void(int)>& task) {
    if (count <= 0) return;
    if (workers <= 0) workers = default_workers();
    workers = std::min(workers, count);
    if (workers == 1) {
        for (int i = 0; i < count; ++i) task(i);
        return;
    }
    std::atomic<int> next{0};
    std::exception_ptr error;
    std::mutex error_mutex;
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w)
        pool.emplace_back([&] {
            for (int i = next++; i < count; i = next++) {
                try {
                    task(i);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(error_mutex);
                    if (!error) error = std::current_exception();
                    next = count;
                }
            }
        });
    for (std::thread& t : pool) t.join();
    if (error) std::rethrow_exception(error);
}

int default_workers() {
    if (const char* env = std::getenv("DIFFEM_WORKERS")) {
        const int w = std::atoi(env);
        if (w > 0) return w;
    }
    return std::max(1u, std::thread::hardware_concurrency());
}

GmmParams random_gmm(int components, int dim, double separation, double cov_scale, std::uint64_t seed) {
    if (components < 1 || dim < 1) throw ArgumentError("random_gmm: need components >= 1 and dim >= 1");
    Rng rng(seed);
    Vector w(components);
    for (int k = 0; k < components; ++k) w(k) = 0.5 + rng.uniform();
    w /= w.sum();
    Matrix m(components, dim);
    for (int k = 0; k < components; ++k)
        for (int a = 0; a < dim; ++a) m(k, a) = separation * rng.normal();
    std::vector<Matrix> cov;
    for (int k = 0; k < components; ++k) {
        const Matrix q = random_rotation(dim, rng);
        Vector l(dim);
        for (int a = 0; a < dim; ++a) l(a) = cov_scale * (0.5 + rng.uniform());
        cov.push_back(symmetrise(q * l.asDiagonal() * q.transpose()));
    }
    return GmmParams(w, m, cov);
}

double median(std::vector<double> v) {
    v = finite_only(std::move(v));
    if (v.empty()) return kNaN;
    std::sort(v.begin(), v.end());
    return quantile(v, 0.5);
}

double interquartile_range(std::vector<double> v) {
    v = finite_only(std::move(v));
    if (v.empty()) return kNaN;
    std::sort(v.begin(), v.end());
    return quantile(v, 0.75) - quantile(v, 0.25);
}

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size() || a.size() < 2) throw ArgumentError("spearman: need two equal-length samples");
    const std::vector<double> ra = ranks(a), rb = ranks(b);
    const Eigen::Map<const Vector> x(ra.data(), ra.size()), y(rb.data(), rb.size());
    const Vector xc = x.array() - x.mean(), yc = y.array() - y.mean();
    const double den = xc.norm() * yc.norm();
    return den > 0.0 ? xc.dot(yc) / den : 0.0;
}

GradCompareReport run_gradient_comparison(const GradCompareConfig& cfg) {
    if (cfg.n_grid.empty() || cfg.t_grid.empty() || cfg.repeats < 1)
        throw ArgumentError("grad-compare: grids must be non-empty and repeats >= 1");
    for (int t : cfg.t_grid)
        if (t < 1) throw ArgumentError("grad-compare: T must be >= 1");
    std::vector<GmmParams> bank = cfg.gmm_bank;
    if (bank.empty()) {
        if (cfg.k_grid.empty() || cfg.bank_size < 1) throw ArgumentError("grad-compare: empty GMM bank");
        for (int k : cfg.k_grid)
            for (int b = 0; b < cfg.bank_size; ++b)
                bank.push_back(random_gmm(k, cfg.dim, cfg.separation, cfg.cov_scale,
                                          Rng::derive_seed(cfg.seed, 1000 * k + b)));
    }

    struct Task {
        int gmm, n, t, repeat;
    };
    std::vector<Task> tasks;
    for (int g = 0; g < static_cast<int>(bank.size()); ++g)
        for (int n : cfg.n_grid)
            for (int t : cfg.t_grid)
                for (int r = 0; r < cfg.repeats; ++r) tasks.push_back({g, n, t, r});

    GradCompareReport report;
    report.rows.resize(tasks.size());
    parallel_for(static_cast<int>(tasks.size()), cfg.workers, [&](int i) {
        const Task& task = tasks[i];
        const GmmParams& mu = bank[task.gmm];
        GradCompareRow row;
        row.gmm = task.gmm;
        row.n = task.n;
        row.k = mu.components();
        row.t = task.t;
        row.repeat = task.repeat;
        // The data and init depend on (gmm, n, repeat) only, so T cells share them.
        const std::uint64_t s = Rng::derive_seed(cfg.seed, (static_cast<std::uint64_t>(task.gmm) << 40) ^
                                                                (static_cast<std::uint64_t>(task.n) << 20) ^ task.repeat);
        try {
            const Dataset x = sample_gmm(mu, task.n, s);
            EmConfig em{task.t, false, true, cfg.cov_regulariser, s};
            const GmmParams theta0 = kmeanspp_init(x, mu.components(), s + 1, cfg.cov_regulariser);
            const std::vector<GmmParams> traj = em_trajectory(theta0, x.points(), em);
            const GradientReport ad = jacobian_ad(theta0, x, em);
            row.fixed_point_mse = ad.fixed_point_residual;
            row.spectral_norm = ad.spectral_norm_dF_dtheta;
            row.rel_mse_os = relative_mse(jacobian_os(traj[task.t - 1], x, em).jacobian, ad.jacobian);
            try {
                row.rel_mse_ai = relative_mse(jacobian_ai(traj.back(), x, em).jacobian, ad.jacobian);
            } catch (const SingularSystem&) {
                row.rel_mse_ai = kNaN;
                row.status = "singular";
            }
        } catch (const NumericalError& e) {
            row.fixed_point_mse = row.spectral_norm = row.rel_mse_os = row.rel_mse_ai = kNaN;
            row.status = dynamic_cast<const DegenerateCovariance*>(&e) ? "degenerate" : "numerical";
        }
        report.rows[i] = row;
    });

    std::map<std::tuple<int, int, int>, std::vector<const GradCompareRow*>> groups;
    for (const GradCompareRow& r : report.rows) groups[{r.gmm, r.n, r.t}].push_back(&r);
    for (const auto& [key, rows] : groups) {
        GradCompareCell c;
        std::tie(c.gmm, c.n, c.t) = key;
        c.k = rows.front()->k;
        std::vector<double> fp, sn, os, ai;
        for (const GradCompareRow* r : rows) {
            if (r->status != "ok") ++c.failures;
            fp.push_back(r->fixed_point_mse);
            sn.push_back(r->spectral_norm);
            os.push_back(r->rel_mse_os);
            ai.push_back(r->rel_mse_ai);
        }
        c.fixed_point_mse_median = median(fp);
        c.fixed_point_mse_iqr = interquartile_range(fp);
        c.spectral_norm_median = median(sn);
        c.spectral_norm_iqr = interquartile_range(sn);
        c.rel_mse_os_median = median(os);
        c.rel_mse_os_iqr = interquartile_range(os);
        c.rel_mse_ai_median = median(ai);
        c.rel_mse_ai_iqr = interquartile_range(ai);
        report.cells.push_back(c);
    }
    return report;
}

void write_grad_compare_csv(const GradCompareReport& report, const std::string& rows_path,
                            const std::string& summary_path) {
    std::ofstream rows = open_csv(rows_path);
    rows << "gmm,n,k,t,repeat,fixed_point_mse,spectral_norm,rel_mse_os,rel_mse_ai,status\n";
    for (const GradCompareRow& r : report.rows)
        rows << r.gmm << ',' << r.n << ',' << r.k << ',' << r.t << ',' << r.repeat << ','
             << format_double(r.fixed_point_mse) << ',' << format_double(r.spectral_norm) << ','
             << format_double(r.rel_mse_os) << ',' << format_double(r.rel_mse_ai) << ',' << r.status << '\n';
    std::ofstream sum = open_csv(summary_path);
    sum << "gmm,n,k,t,failures,fixed_point_mse_median,fixed_point_mse_iqr,spectral_norm_median,spectral_norm_iqr,"
           "rel_mse_os_median,rel_mse_os_iqr,rel_mse_ai_median,rel_mse_ai_iqr\n";
    for (const GradCompareCell& c : report.cells)
        sum << c.gmm << ',' << c.n << ',' << c.k << ',' << c.t << ',' << c.failures << ','
            << format_double(c.fixed_point_mse_median) << ',' << format_double(c.fixed_point_mse_iqr) << ','
            << format_double(c.spectral_norm_median) << ',' << format_double(c.spectral_norm_iqr) << ','
            << format_double(c.rel_mse_os_median) << ',' << format_double(c.rel_mse_os_iqr) << ','
            << format_double(c.rel_mse_ai_median) << ',' << format_double(c.rel_mse_ai_iqr) << '\n';
}

std::pair<GmmParams, GmmParams> sample_complexity_mixtures(int components, int dim, double cov_scale) {
    if (components < 1 || dim < 2) throw ArgumentError("sample_complexity: need components >= 1 and dim >= 2");
    if (!(cov_scale > 0.0)) throw ArgumentError("sample_complexity: cov_scale must be positive");
    Matrix m0 = Matrix::Zero(components, dim), m1 = Matrix::Zero(components, dim);
    std::vector<Matrix> c0, c1;
    const double radius = 2.0 / std::sqrt(3.0);  // side 2 for three components
    for (int k = 0; k < components; ++k) {
        const double a = 2.0 * std::numbers::pi * k / components;
        const double b = a + std::numbers::pi / 6.0;
        m0(k, 0) = radius * std::cos(a);
        m0(k, 1) = radius * std::sin(a);
        m1(k, 0) = radius * std::cos(b) + 1.5;
        m1(k, 1) = radius * std::sin(b) - 0.5;
        Matrix s0 = Matrix::Identity(dim, dim), s1 = Matrix::Identity(dim, dim);
        s0(0, 0) = 1.0 + 0.5 * k;
        s0(0, 1) = s0(1, 0) = 0.3;
        s1(1, 1) = 1.5 - 0.25 * k;
        s1(0, 1) = s1(1, 0) = -0.2;
        c0.push_back(cov_scale * s0);
        c1.push_back(cov_scale * s1);
    }
    Vector w0 = Vector::Constant(components, 1.0 / components);
    Vector w1(components);
    for (int k = 0; k < components; ++k) w1(k) = 1.0 + 0.25 * k;
    w1 /= w1.sum();
    return {GmmParams(w0, m0, c0), GmmParams(w1, m1, c1)};
}

SampleComplexityRow sample_complexity_trial(const GmmParams& mu, const GmmParams& nu, int n, int em_iterations,
                                            double cov_regulariser, std::uint64_t seed) {
    EmConfig em{em_iterations, false, true, cov_regulariser, seed};
    auto fit = [&](const GmmParams& truth, std::uint64_t s) {
        const Dataset x = sample_gmm(truth, n, s);
        return em_trajectory(kmeanspp_init(x, truth.components(), s + 1, cov_regulariser), x.points(), em).back();
    };
    const GmmParams mu_hat = fit(mu, Rng::derive_seed(seed, 0));
    const GmmParams nu_hat = fit(nu, Rng::derive_seed(seed, 1));
    SampleComplexityRow row;
    row.n = n;
    row.one_sample = mw2_squared(mu_hat, mu).value;
    const double ref = mw2_squared(mu, nu).value;
    row.two_sample = std::abs(mw2_squared(mu_hat, nu_hat).value - ref) / ref;
    return row;
}

SampleComplexityReport run_sample_complexity(const SampleComplexityConfig& cfg) {
    if (cfg.n_grid.empty() || cfg.cov_scales.empty() || cfg.repeats < 1)
        throw ArgumentError("sample-complexity: grids must be non-empty and repeats >= 1");
    for (int n : cfg.n_grid)
        if (n < cfg.components * (cfg.dim + 1)) throw ArgumentError("sample-complexity: n too small");
    struct Task {
        int scale, n, repeat;
    };
    std::vector<Task> tasks;
    for (int s = 0; s < static_cast<int>(cfg.cov_scales.size()); ++s)
        for (int n = 0; n < static_cast<int>(cfg.n_grid.size()); ++n)
            for (int r = 0; r < cfg.repeats; ++r) tasks.push_back({s, n, r});

    SampleComplexityReport report;
    report.rows.resize(tasks.size());
    parallel_for(static_cast<int>(tasks.size()), cfg.workers, [&](int i) {
        const Task& t = tasks[i];
        const double scale = cfg.cov_scales[t.scale];
        const auto [mu, nu] = sample_complexity_mixtures(cfg.components, cfg.dim, scale);
        const std::uint64_t seed = Rng::derive_seed(cfg.seed, (static_cast<std::uint64_t>(t.scale) << 40) ^
                                                                   (static_cast<std::uint64_t>(t.n) << 20) ^ t.repeat);
        SampleComplexityRow row =
            sample_complexity_trial(mu, nu, cfg.n_grid[t.n], cfg.em_iterations, cfg.cov_regulariser, seed);
        row.cov_scale = scale;
        row.repeat = t.repeat;
        report.rows[i] = row;
    });

    for (int s = 0; s < static_cast<int>(cfg.cov_scales.size()); ++s) {
        std::vector<double> ns, one_med, two_med;
        for (int n = 0; n < static_cast<int>(cfg.n_grid.size()); ++n) {
            std::vector<double> one, two;
            for (std::size_t i = 0; i < tasks.size(); ++i)
                if (tasks[i].scale == s && tasks[i].n == n) {
                    one.push_back(report.rows[i].one_sample);
                    two.push_back(report.rows[i].two_sample);
                }
            SampleComplexityCell c;
            c.cov_scale = cfg.cov_scales[s];
            c.n = cfg.n_grid[n];
            c.one_sample_median = median(one);
            c.one_sample_iqr = interquartile_range(one);
            c.two_sample_median = median(two);
            c.two_sample_iqr = interquartile_range(two);
            report.cells.push_back(c);
            ns.push_back(c.n);
            one_med.push_back(c.one_sample_median);
            two_med.push_back(c.two_sample_median);
        }
        const bool enough = ns.size() >= 2;
        report.spearman_one_sample.push_back(enough ? spearman(ns, one_med) : kNaN);
        report.spearman_two_sample.push_back(enough ? spearman(ns, two_med) : kNaN);
    }
    return report;
}

void write_sample_complexity_csv(const SampleComplexityReport& report, const std::string& rows_path,
                                 const std::string& summary_path) {
    std::ofstream rows = open_csv(rows_path);
    rows << "cov_scale,n,repeat,one_sample,two_sample\n";
    for (const SampleComplexityRow& r : report.rows)
        rows << format_double(r.cov_scale) << ',' << r.n << ',' << r.repeat << ',' << format_double(r.one_sample)
             << ',' << format_double(r.two_sample) << '\n';
    std::ofstream sum = open_csv(summary_path);
    sum << "cov_scale,n,one_sample_median,one_sample_iqr,two_sample_median,two_sample_iqr\n";
    for (const SampleComplexityCell& c : report.cells)
        sum << format_double(c.cov_scale) << ',' << c.n << ',' << format_double(c.one_sample_median) << ','
            << format_double(c.one_sample_iqr) << ',' << format_double(c.two_sample_median) << ','
            << format_double(c.two_sample_iqr) << '\n';
}

std::vector<TimingRow> run_timing(const TimingConfig& cfg) {
    if (cfg.t_grid.empty() || cfg.repeats < 1) throw ArgumentError("timing: empty grid");
    const GmmParams mu = random_gmm(cfg.k, cfg.dim, 3.0, 1.0, cfg.seed);
    const Dataset x = sample_gmm(mu, cfg.n, cfg.seed + 1);
    const GmmParams theta0 = kmeanspp_init(x, cfg.k, cfg.seed + 2, 1e-6);
    using clock = std::chrono::steady_clock;
    auto seconds = [](clock::time_point a, clock::time_point b) { return std::chrono::duration<double>(b - a).count(); };
    std::vector<TimingRow> out;
    for (int t : cfg.t_grid) {
        EmConfig em{t, false, true, 1e-6, 0};
        const std::vector<GmmParams> traj = em_trajectory(theta0, x.points(), em);
        std::vector<double> ad, ai, os;
        for (int r = 0; r < cfg.repeats; ++r) {
            auto t0 = clock::now();
            const GradientReport a = jacobian_ad(theta0, x, em);
            auto t1 = clock::now();
            const GradientReport b = jacobian_ai(traj.back(), x, em);
            auto t2 = clock::now();
            const GradientReport c = jacobian_os(traj[t - 1], x, em);
            auto t3 = clock::now();
            if (a.jacobian.size() == 0 || b.jacobian.size() == 0 || c.jacobian.size() == 0)
                throw std::logic_error("timing: empty Jacobian");
            ad.push_back(seconds(t0, t1));
            ai.push_back(seconds(t1, t2));
            os.push_back(seconds(t2, t3));
        }
        out.push_back({t, median(ad), median(ai), median(os)});
    }
    return out;
}

}  // namespace diffem

#include "cli.hpp"

#include <CLI11.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <unistd.h>

#include "diffem/colour_transfer.hpp"
#include "diffem/errors.hpp"
#include "diffem/experiments.hpp"
#include "diffem/fixtures.hpp"
#include "diffem/flows.hpp"
#include "diffem/gmm_io.hpp"
#include "diffem/gmm_ot.hpp"
#include "diffem/image.hpp"
#include "diffem/selfcheck.hpp"
#include "diffem/texture.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace diffem::cli {

ConfigReader::ConfigReader(const json& doc, std::string path) : doc_(doc), path_(std::move(path)) {
    if (!doc_.is_object()) throw ArgumentError("config: " + (path_.empty() ? std::string("document") : path_) + " must be an object");
}

bool ConfigReader::has(const std::string& key) const { return doc_.contains(key); }

template <class T>
T ConfigReader::convert(const std::string& key) {
    used_.insert(key);
    try {
        return doc_.at(key).get<T>();
    } catch (const json::exception&) {
        throw ArgumentError("config: key '" + path_ + key + "' has the wrong type");
    }
}

template <class T>
T ConfigReader::get(const std::string& key, const T& fallback) {
    if (!has(key)) return fallback;
    return convert<T>(key);
}

template <class T>
T ConfigReader::require(const std::string& key) {
    if (!has(key)) throw ArgumentError("config: missing key '" + path_ + key + "'");
    return convert<T>(key);
}

const json& ConfigReader::raw(const std::string& key) {
    if (!has(key)) throw ArgumentError("config: missing key '" + path_ + key + "'");
    used_.insert(key);
    return doc_.at(key);
}

ConfigReader ConfigReader::child(const std::string& key) {
    static const json empty = json::object();
    if (!has(key)) return ConfigReader(empty, path_ + key + ".");
    used_.insert(key);
    return ConfigReader(doc_.at(key), path_ + key + ".");
}

void ConfigReader::finish() const {
    for (const auto& [key, value] : doc_.items())
        if (!used_.count(key)) throw ArgumentError("config: unknown key '" + path_ + key + "'");
}

template int ConfigReader::get<int>(const std::string&, const int&);
template double ConfigReader::get<double>(const std::string&, const double&);
template bool ConfigReader::get<bool>(const std::string&, const bool&);
template std::string ConfigReader::get<std::string>(const std::string&, const std::string&);
template std::uint64_t ConfigReader::get<std::uint64_t>(const std::string&, const std::uint64_t&);
template std::vector<int> ConfigReader::get<std::vector<int>>(const std::string&, const std::vector<int>&);
template std::vector<double> ConfigReader::get<std::vector<double>>(const std::string&, const std::vector<double>&);
template int ConfigReader::require<int>(const std::string&);
template std::string ConfigReader::require<std::string>(const std::string&);

EmConfig read_em(ConfigReader& cfg, const EmConfig& defaults) {
    ConfigReader em = cfg.child("em");
    EmConfig out = defaults;
    out.iterations = em.get("T", defaults.iterations);
    out.fix_weights = em.get("fix_weights", defaults.fix_weights);
    out.update_covariances = em.get("update_covariances", defaults.update_covariances);
    out.cov_regulariser = em.get("eps_r", defaults.cov_regulariser);
    em.finish();
    if (out.iterations < 0) throw ArgumentError("config: em.T must be >= 0");
    if (!(out.cov_regulariser >= 0.0)) throw ArgumentError("config: em.eps_r must be >= 0");
    return out;
}

GmmParams read_gmm_value(const json& value, const std::string& what) {
    try {
        if (value.is_string()) return read_gmm_json(value.get<std::string>());
        return gmm_from_json(value);
    } catch (const json::exception& e) {
        throw ArgumentError(what + ": " + e.what());
    }
}

namespace {

struct Context {
    ConfigReader& cfg;
    fs::path out;
    std::uint64_t seed = 0;
    int workers = 0;
    bool quiet = false;

    std::string file(const std::string& name) const { return (out / name).string(); }
    void log(const std::string& msg) const {
        if (!quiet) std::cerr << msg << '\n';
    }
};

void write_energies(const std::vector<double>& e, const std::string& path) {
    Matrix m(static_cast<int>(e.size()), 2);
    for (std::size_t i = 0; i < e.size(); ++i) m.row(i) << static_cast<double>(i), e[i];
    write_csv_matrix(m, path, "step,energy");
}

void write_weights(const std::vector<Vector>& w, const std::string& path) {
    if (w.empty()) return;
    Matrix m(static_cast<int>(w.size()), w.front().size() + 1);
    std::string header = "step";
    for (int k = 0; k < w.front().size(); ++k) header += ",w" + std::to_string(k);
    for (std::size_t i = 0; i < w.size(); ++i) {
        m(i, 0) = static_cast<double>(i);
        m.row(i).tail(w[i].size()) = w[i].transpose();
    }
    write_csv_matrix(m, path, header);
}

void write_trace(const Context& ctx, const FlowTrace& trace, int snapshot_every) {
    write_energies(trace.energies, ctx.file("energies.csv"));
    write_weights(trace.weight_snapshots, ctx.file("weights.csv"));
    write_csv_matrix(trace.final_points, ctx.file("final_points.csv"));
    for (std::size_t i = 0; i < trace.point_snapshots.size(); ++i) {
        char name[64];
        std::snprintf(name, sizeof name, "points_%06zu.csv", i * static_cast<std::size_t>(snapshot_every));
        write_csv_matrix(trace.point_snapshots[i], ctx.file(name));
    }
    if (trace.final_theta) write_gmm_json(*trace.final_theta, ctx.file("final_gmm.json"));
}

json trace_summary(const FlowTrace& trace) {
    return {{"initial_energy", trace.energies.front()}, {"final_energy", trace.energies.back()},
            {"steps", static_cast<int>(trace.energies.size()) - 1}};
}

FlowConfig read_flow(Context& ctx, const EmConfig& em_defaults, GradMethod method_default) {
    FlowConfig f;
    ConfigReader& c = ctx.cfg;
    f.grad_method = parse_grad_method(c.get<std::string>("grad_method", to_string(method_default)));
    f.gd_steps = c.get("gd_steps", 500);
    f.learning_rate = c.get("learning_rate", 0.01);
    f.subsample_ratio = c.get("subsample_ratio", 1.0);
    f.snapshot_every = c.get("snapshot_every", 0);
    f.halve_on_increase = c.get("halve_on_increase", false);
    f.weight_gradient = c.get("weight_gradient", false);
    f.em = read_em(c, em_defaults);
    f.seed = ctx.seed;
    return f;
}

Matrix read_points(ConfigReader& c, const std::string& key) { return read_csv_matrix(c.require<std::string>(key)); }

GmmParams initial_gmm(const Dataset& x, int k, const Context& ctx, const EmConfig& em) {
    return kmeanspp_init(x, k, ctx.seed, em.cov_regulariser);
}

std::vector<GmmParams> read_gmm_list(ConfigReader& c, const std::string& key) {
    const json& list = c.raw(key);
    if (!list.is_array()) throw ArgumentError("config: '" + key + "' must be an array");
    std::vector<GmmParams> out;
    for (std::size_t i = 0; i < list.size(); ++i) out.push_back(read_gmm_value(list[i], key + "[" + std::to_string(i) + "]"));
    return out;
}

json cmd_fit(Context& ctx) {
    ConfigReader& c = ctx.cfg;
    const Dataset x(read_points(c, "data"));
    const int k = c.require<int>("components");
    const EmConfig em = read_em(c, EmConfig{30, false, true, 0.0, 0});
    c.finish();
    const EmResult r = em_fit(initial_gmm(x, k, ctx, em), x, em);
    write_gmm_json(r.theta, ctx.file("gmm.json"));
    write_energies(r.diagnostics.log_likelihood, ctx.file("log_likelihood.csv"));
    return {{"log_likelihood", r.diagnostics.log_likelihood.back()},
            {"residual", r.diagnostics.fixed_point_residual},
            {"components", k}};
}

json cmd_flow(Context& ctx) {
    ConfigReader& c = ctx.cfg;
    const Dataset x0 = Dataset::unchecked(read_points(c, "source"));
    const int k = c.require<int>("components");
    FlowConfig f = read_flow(ctx, EmConfig{10, true, true, 1e-3, 0}, GradMethod::AD);
    const int target_iterations = c.get("target_iterations", 100);
    std::optional<Matrix> cloud;
    GmmParams target;
    if (c.has("target_gmm")) {
        target = read_gmm_value(c.raw("target_gmm"), "target_gmm");
    } else {
        cloud = read_points(c, "target");
        EmConfig tem = f.em;
        tem.iterations = target_iterations;
        const Dataset y = Dataset::unchecked(*cloud);
        target = em_trajectory(kmeanspp_init(y, k, ctx.seed + 1, tem.cov_regulariser), *cloud, tem).back();
    }
    c.finish();
    const FlowTrace trace = run_flow(x0, initial_gmm(x0, k, ctx, f.em), target, f, cloud ? &*cloud : nullptr);
    write_trace(ctx, trace, f.snapshot_every);
    write_gmm_json(target, ctx.file("target_gmm.json"));
    return trace_summary(trace);
}

json cmd_weights_pathology(Context& ctx) {
    ConfigReader& c = ctx.cfg;
    WeightPathologyConfig p;
    const std::vector<double> w = c.get("target_weights", std::vector<double>{0.5, 0.3, 0.2});
    p.target_weights = Eigen::Map<const Vector>(w.data(), static_cast<Eigen::Index>(w.size()));
    p.points = c.get("points", p.points);
    p.separation = c.get("separation", p.separation);
    p.target_std = c.get("target_std", p.target_std);
    p.offset = c.get("offset", p.offset);
    p.flow = read_flow(ctx, EmConfig{10, false, true, 1e-3, 0}, GradMethod::AD);
    c.finish();
    const WeightPathologyResult r = run_weight_pathology(p);
    write_trace(ctx, r.trace, p.flow.snapshot_every);
    write_gmm_json(r.target, ctx.file("target_gmm.json"));
    return {{"weight_l1", r.weight_l1}, {"final_energy", r.final_energy}};
}

json cmd_barycentre(Context& ctx) {
    ConfigReader& c = ctx.cfg;
    const std::vector<GmmParams> targets = read_gmm_list(c, "targets");
    const Dataset x0 = Dataset::unchecked(read_points(c, "source"));
    const int k = c.require<int>("components");
    FlowConfig f = read_flow(ctx, EmConfig{10, true, true, 1e-3, 0}, GradMethod::AD);
    c.finish();
    const FlowTrace trace = run_barycentre_flow(targets, x0, initial_gmm(x0, k, ctx, f.em), f);
    write_trace(ctx, trace, f.snapshot_every);
    return trace_summary(trace);
}

json cmd_projected_barycentre(Context& ctx) {
    ConfigReader& c = ctx.cfg;
    const std::vector<GmmParams> targets = read_gmm_list(c, "targets");
    const Dataset x0 = Dataset::unchecked(read_points(c, "source"));
    const int k = c.require<int>("components");
    FlowConfig f = read_flow(ctx, EmConfig{10, true, true, 1e-3, 0}, GradMethod::AD);
    c.finish();
    const FlowTrace trace = run_projected_barycentre(targets, x0, initial_gmm(x0, k, ctx, f.em), f);
    write_trace(ctx, trace, f.snapshot_every);
    return trace_summary(trace);
}

std::optional<UnbalancedConfig> read_unbalanced(ConfigReader& c) {
    if (!c.has("unbalanced")) return std::nullopt;
    const json& v = c.raw("unbalanced");
    if (v.is_boolean()) return v.get<bool>() ? std::optional(default_colour_unbalanced()) : std::nullopt;
    ConfigReader u(v, "unbalanced.");
    UnbalancedConfig out = default_colour_unbalanced();
    out.lambda0 = u.get("lambda0", out.lambda0);
    out.lambda1 = u.get("lambda1", out.lambda1);
    out.entropic_eps = u.get("entropic_eps", out.entropic_eps);
    u.finish();
    return out;
}

json cmd_colour_transfer(Context& ctx) {
    ConfigReader& c = ctx.cfg;
    ColourTransferConfig t;
    const std::string source = c.require<std::string>("source");
    const std::string target = c.require<std::string>("target");
    t.components = c.get("components", t.components);
    t.gd_steps = c.get("gd_steps", t.gd_steps);
    t.learning_rate = c.get("learning_rate", t.learning_rate);
    t.target_iterations = c.get("target_iterations", t.target_iterations);
    t.em = read_em(c, t.em);
    t.unbalanced = read_unbalanced(c);
    t.seed = ctx.seed;
    c.finish();
    const ColourTransferResult r = colour_transfer(read_png(source), read_png(target), t);
    write_png(r.image, ctx.file("output.png"));
    write_energies(r.trace.energies, ctx.file("energies.csv"));
    write_gmm_json(r.target, ctx.file("target_gmm.json"));
    return trace_summary(r.trace);
}

json cmd_texture(Context& ctx) {
    ConfigReader& c = ctx.cfg;
    TextureConfig t;
    const Image target = read_png(c.require<std::string>("target"));
    const int h = c.get("height", target.height);
    const int w = c.get("width", target.width);
    if (c.has("scales")) {
        const json& s = c.raw("scales");
        if (!s.is_array() || s.empty()) throw ArgumentError("config: 'scales' must be a non-empty array");
        t.scales.clear();
        for (const json& e : s) {
            if (!e.is_array() || e.size() != 2 || !e[0].is_number_integer() || !e[1].is_number_integer())
                throw ArgumentError("config: each scale is [patch_size, downscale]");
            t.scales.push_back({e[0].get<int>(), e[1].get<int>()});
        }
    }
    t.components = c.get("components", t.components);
    t.gd_steps = c.get("gd_steps", t.gd_steps);
    t.learning_rate = c.get("learning_rate", 0.002);
    t.target_iterations = c.get("target_iterations", t.target_iterations);
    t.em = read_em(c, t.em);
    t.seed = ctx.seed;
    c.finish();
    const TextureResult r = texture_synthesis(target, h, w, t);
    write_png(r.image, ctx.file("output.png"));
    write_png(r.synthesised, ctx.file("synthesised.png"));
    write_energies(r.energies, ctx.file("energies.csv"));
    return {{"initial_energy", r.energies.front()}, {"final_energy", r.energies.back()}};
}

json cmd_grad_compare(Context& ctx) {
    ConfigReader& c = ctx.cfg;
    GradCompareConfig g;
    g.n_grid = c.get("n_grid", g.n_grid);
    g.k_grid = c.get("k_grid", g.k_grid);
    g.t_grid = c.get("t_grid", g.t_grid);
    g.dim = c.get("dim", g.dim);
    g.bank_size = c.get("bank_size", g.bank_size);
    g.repeats = c.get("repeats", g.repeats);
    g.separation = c.get("separation", g.separation);
    g.cov_scale = c.get("cov_scale", g.cov_scale);
    g.cov_regulariser = c.get("eps_r", g.cov_regulariser);
    if (c.has("gmm_bank")) g.gmm_bank = read_gmm_list(c, "gmm_bank");
    g.seed = ctx.seed;
    g.workers = ctx.workers;
    c.finish();
    const GradCompareReport r = run_gradient_comparison(g);
    write_grad_compare_csv(r, ctx.file("rows.csv"), ctx.file("summary.csv"));
    int failures = 0;
    for (const GradCompareCell& cell : r.cells) failures += cell.failures;
    const int t_max = *std::max_element(g.t_grid.begin(), g.t_grid.end());
    std::vector<double> os, ai;
    for (const GradCompareRow& row : r.rows)
        if (row.t == t_max) {
            os.push_back(row.rel_mse_os);
            ai.push_back(row.rel_mse_ai);
        }
    return {{"cells", r.cells.size()}, {"failures", failures}, {"t", t_max},
            {"median_rel_mse_os", median(os)}, {"median_rel_mse_ai", median(ai)}};
}

json cmd_sample_complexity(Context& ctx) {
    ConfigReader& c = ctx.cfg;
    SampleComplexityConfig s;
    s.n_grid = c.get("n_grid", s.n_grid);
    s.repeats = c.get("repeats", s.repeats);
    s.cov_scales = c.get("cov_scales", s.cov_scales);
    s.components = c.get("components", s.components);
    s.dim = c.get("dim", s.dim);
    s.em_iterations = c.get("em_iterations", s.em_iterations);
    s.cov_regulariser = c.get("eps_r", s.cov_regulariser);
    s.seed = ctx.seed;
    s.workers = ctx.workers;
    c.finish();
    const SampleComplexityReport r = run_sample_complexity(s);
    write_sample_complexity_csv(r, ctx.file("rows.csv"), ctx.file("summary.csv"));
    Matrix sp(static_cast<int>(s.cov_scales.size()), 3);
    for (std::size_t i = 0; i < s.cov_scales.size(); ++i)
        sp.row(i) << s.cov_scales[i], r.spearman_one_sample[i], r.spearman_two_sample[i];
    write_csv_matrix(sp, ctx.file("spearman.csv"), "cov_scale,one_sample,two_sample");
    json out = json::array();
    for (std::size_t i = 0; i < s.cov_scales.size(); ++i)
        out.push_back({{"cov_scale", s.cov_scales[i]},
                       {"spearman_one_sample", r.spearman_one_sample[i]},
                       {"spearman_two_sample", r.spearman_two_sample[i]}});
    return {{"spearman", out}};
}

json cmd_fixtures(Context& ctx) {
    ConfigReader& c = ctx.cfg;
    const double eps = c.get("e3_epsilon", 0.1);
    const double radius = c.get("e3_radius", 0.01);
    const int steps = c.get("e3_steps", 5);
    const std::vector<double> vg_eps = c.get("vanishing_epsilons", std::vector<double>{0.05, 0.3});
    ConfigReader n2c = c.child("n2");
    N2Config n2;
    n2.gamma = n2c.get("gamma", n2.gamma);
    n2.y1 = n2c.get("y1", n2.y1);
    n2.y2 = n2c.get("y2", n2.y2);
    n2.grid = n2c.get("grid", n2.grid);
    n2.starts = n2c.get("starts", n2.starts);
    n2.tol = n2c.get("tol", n2.tol);
    n2.seed = ctx.seed;
    n2c.finish();
    c.finish();

    json doc;
    const E3Report e3 = fixture_e3_landscape(eps, radius, steps);
    doc["e3"] = {{"epsilon", e3.epsilon}, {"value_at_origin", e3.value_at_origin},
                 {"expected_value", e3.expected_value}, {"grid_min", e3.grid_min},
                 {"grid_points", e3.grid_points}, {"lower_points", e3.lower_points},
                 {"value_at_target", e3.value_at_target}};
    doc["vanishing_gradient"] = json::array();
    for (double e : vg_eps) {
        const VanishingGradientReport v = fixture_vanishing_gradient(e);
        doc["vanishing_gradient"].push_back({{"epsilon", v.epsilon}, {"gradient_norm", v.gradient_norm},
                                             {"parameter_drift", v.parameter_drift}, {"energy", v.energy}});
    }
    const N2Report r = fixture_n2_landscape(n2);
    doc["n2"] = {{"starts", n2.starts}, {"descents_at_target", r.descents_at_target},
                 {"energy_at_target", r.energy_at_target}, {"z_star_min_directional", r.z_star_min_directional},
                 {"grid_minima", r.grid_minima.size()}};
    std::ofstream(ctx.file("fixtures.json")) << doc.dump(2) << '\n';
    Matrix minima(static_cast<int>(r.grid_minima.size()), 5);
    for (std::size_t i = 0; i < r.grid_minima.size(); ++i) {
        const N2Minimum& m = r.grid_minima[i];
        minima.row(i) << m.x1, m.x2, m.alpha, m.energy, m.boundary ? 1.0 : 0.0;
    }
    write_csv_matrix(minima, ctx.file("n2_grid_minima.csv"), "x1,x2,alpha,energy,boundary");
    const Eigen::Map<const Vector> dist(r.descent_distances.data(), static_cast<Eigen::Index>(r.descent_distances.size()));
    write_csv_matrix(Matrix(dist), ctx.file("n2_descent_distances.csv"), "distance");
    return doc;
}

json cmd_selfcheck(Context& ctx) {
    ConfigReader& c = ctx.cfg;
    const int instances = c.get("instances", 50);
    const double step = c.get("step", 1e-6);
    const double tol = c.get("tolerance", 1e-5);
    c.finish();
    const OracleSuiteReport r = run_jacobian_oracle_suite(instances, ctx.seed, step);
    json doc = {{"instances", instances}, {"max_rel_error", r.max_rel_error}, {"worst_block", r.worst_block},
                {"frozen_blocks_zero", r.frozen_blocks_zero}, {"tolerance", tol}};
    std::ofstream(ctx.file("selfcheck.json")) << doc.dump(2) << '\n';
    if (!(r.max_rel_error <= tol) || !r.frozen_blocks_zero)
        throw NumericalError("selfcheck: analytic Jacobian disagrees with finite differences (max rel error " +
                             format_double(r.max_rel_error) + " in " + r.worst_block + ")");
    return doc;
}

struct Command {
    std::function<json(Context&)> run;
    const char* help;
};

const std::map<std::string, Command>& commands() {
    static const std::map<std::string, Command> table = {
        {"fit", {cmd_fit, "Fit a GMM to a CSV point cloud with EM"}},
        {"flow", {cmd_flow, "MW2 flow of a point cloud towards a target GMM"}},
        {"weights-pathology", {cmd_weights_pathology, "Flow with standard EM and unfixed weights"}},
        {"barycentre", {cmd_barycentre, "Flow towards the MW2 barycentre of several GMMs"}},
        {"projected-barycentre", {cmd_projected_barycentre, "3D cloud matching three 2D projections"}},
        {"colour-transfer", {cmd_colour_transfer, "Colour transfer between two PNG images"}},
        {"texture", {cmd_texture, "Multi-scale patch texture synthesis"}},
        {"grad-compare", {cmd_grad_compare, "Compare AD, AI and OS Jacobians over a sweep"}},
        {"sample-complexity", {cmd_sample_complexity, "MW2 estimation error of EM fits against n"}},
        {"fixtures", {cmd_fixtures, "Landscape fixtures: E3 minimum, vanishing gradient, n = 2"}},
        {"selfcheck", {cmd_selfcheck, "Analytic Jacobians against finite differences"}},
    };
    return table;
}

json load_config(const std::string& path) {
    if (path.empty()) return json::object();
    std::ifstream in(path);
    if (!in) throw ArgumentError("config: cannot read " + path);
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw ArgumentError("config: " + path + " is not valid JSON: " + e.what());
    }
}

int exit_code_for(const std::exception_ptr& e, std::string& message, std::string& kind) {
    try {
        std::rethrow_exception(e);
    } catch (const NumericalError& ex) {
        message = ex.what();
        kind = "numerical";
        return 2;
    } catch (const std::exception& ex) {
        message = ex.what();
        kind = "invalid_input";
        return 1;
    }
}

void move_into(const fs::path& staging, const fs::path& dest) {
    fs::create_directories(dest);
    for (const fs::directory_entry& entry : fs::directory_iterator(staging)) {
        const fs::path target = dest / entry.path().filename();
        if (fs::exists(target)) fs::remove_all(target);
        fs::rename(entry.path(), target);
    }
    fs::remove(dest / "failure.json");
    fs::remove_all(staging);
}

}  // namespace

int cli_main(int argc, char** argv) {
    CLI::App app{"Differentiable EM and mixture-Wasserstein experiments"};
    app.require_subcommand(1, 1);
    std::string config_path, output_dir;
    std::uint64_t seed = 0;
    int workers = 0;
    bool quiet = false;
    auto* seed_opt = app.add_option("--seed", seed, "Seed (overrides the config)");
    app.add_option("--config", config_path, "JSON experiment config");
    app.add_option("--output", output_dir, "Output directory (overrides output_dir)");
    app.add_option("--workers", workers, "Worker threads for sweeps (default DIFFEM_WORKERS or all cores)")
        ->check(CLI::PositiveNumber);
    app.add_flag("--quiet", quiet, "Suppress diagnostics on standard error");
    for (const auto& [name, cmd] : commands()) app.add_subcommand(name, cmd.help)->fallthrough();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    }
    const std::string command = app.get_subcommands().front()->get_name();

    json doc;
    try {
        doc = load_config(config_path);
        if (!doc.is_object()) throw ArgumentError("config: top level must be an object");
    } catch (const std::exception& e) {
        std::cerr << "diffem " << command << ": " << e.what() << '\n';
        return 1;
    }

    ConfigReader reader(doc, "");
    Context ctx{reader, {}, 0, workers, quiet};
    fs::path dest;
    fs::path staging;
    try {
        ctx.seed = reader.get<std::uint64_t>("seed", 0);
        if (seed_opt->count() > 0) ctx.seed = seed;
        const std::string from_config = reader.get<std::string>("output_dir", "");
        dest = output_dir.empty() ? (from_config.empty() ? fs::path("diffem-" + command) : fs::path(from_config))
                                  : fs::path(output_dir);
        if (fs::exists(dest) && !fs::is_directory(dest))
            throw ArgumentError("output: " + dest.string() + " exists and is not a directory");
        const fs::path parent = fs::absolute(dest).parent_path();
        fs::create_directories(parent);
        staging = parent / ("." + dest.filename().string() + ".staging-" + std::to_string(::getpid()));
        fs::remove_all(staging);
        fs::create_directories(staging);
        ctx.out = staging;
        ctx.log("diffem " + command + ": writing to " + dest.string());
        json summary = commands().at(command).run(ctx);
        move_into(staging, dest);
        json line = {{"command", command}, {"status", "ok"}, {"seed", ctx.seed}, {"output_dir", dest.string()}};
        for (auto it = summary.begin(); it != summary.end(); ++it) line[it.key()] = it.value();
        std::cout << line.dump() << std::endl;
        return 0;
    } catch (...) {
        std::string message, kind;
        const int code = exit_code_for(std::current_exception(), message, kind);
        std::cerr << "diffem " << command << ": " << message << '\n';
        std::error_code ec;
        if (!staging.empty()) fs::remove_all(staging, ec);
        if (!dest.empty()) {
            fs::create_directories(dest, ec);
            json manifest = {{"command", command}, {"status", "failed"}, {"exit_code", code},
                             {"error_kind", kind}, {"message", message}};
            std::ofstream(dest / "failure.json") << manifest.dump(2) << '\n';
        }
        return code;
    }
}

}  // namespace diffem::cli

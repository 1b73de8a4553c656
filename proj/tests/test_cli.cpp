#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

#include "cli.hpp"
#include "diffem/errors.hpp"
#include "diffem/gmm_io.hpp"
#include "diffem/image.hpp"
#include "diffem/rng.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace diffem {
namespace {

class CliTest : public ::testing::Test {
protected:
    void SetUp() override {
        const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
        dir_ = fs::temp_directory_path() / ("diffem_cli_" + std::string(info->name()) + "_" + std::to_string(::getpid()));
        fs::remove_all(dir_);
        fs::create_directories(dir_);
    }
    void TearDown() override { fs::remove_all(dir_); }

    fs::path path(const std::string& name) const { return dir_ / name; }

    void write(const std::string& name, const std::string& text) const { std::ofstream(path(name)) << text; }

    std::string read(const fs::path& p) const {
        std::ifstream in(p);
        std::stringstream ss;
        ss << in.rdbuf();
        return ss.str();
    }

    // Runs the CLI in the test directory; returns the exit code and keeps stdout.
    int run(const std::string& args, const std::string& env = "") {
        const std::string cmd = "cd '" + dir_.string() + "' && " + env + " '" + DIFFEM_BIN + "' " + args +
                                " > stdout.txt 2> stderr.txt";
        const int status = std::system(cmd.c_str());
        out_ = read(path("stdout.txt"));
        return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    }

    json summary() const { return json::parse(out_); }

    std::vector<std::string> listing(const std::string& name) const {
        std::vector<std::string> files;
        for (const auto& e : fs::directory_iterator(path(name))) files.push_back(e.path().filename().string());
        std::sort(files.begin(), files.end());
        return files;
    }

    void two_clusters(const std::string& name, int n, std::uint64_t seed) const {
        Rng rng(seed);
        std::ofstream out(path(name));
        out << "x,y\n";
        for (int i = 0; i < n; ++i) {
            const double c = i < n / 2 ? 0.0 : 6.0;
            out << format_double(c + 0.3 * rng.normal()) << ',' << format_double(c + 0.3 * rng.normal()) << '\n';
        }
    }

    fs::path dir_;
    std::string out_;
};

TEST_F(CliTest, FitReportsConvergedResidual) {
    two_clusters("pts.csv", 200, 1);
    write("fit.json", R"({"data": "pts.csv", "components": 2, "em": {"T": 30}})");
    ASSERT_EQ(run("fit --config fit.json --output out --quiet"), 0);
    const json s = summary();
    EXPECT_EQ(s["status"], "ok");
    EXPECT_LE(s["residual"].get<double>(), 1e-10);
    const GmmParams g = read_gmm_json(path("out/gmm.json").string());
    EXPECT_EQ(g.components(), 2);
    EXPECT_EQ(listing("out"), (std::vector<std::string>{"gmm.json", "log_likelihood.csv"}));
}

TEST_F(CliTest, MissingConfigWritesNothing) {
    EXPECT_EQ(run("fit --config nope.json --output out"), 1);
    EXPECT_FALSE(fs::exists(path("out")));
    EXPECT_TRUE(out_.empty());
}

TEST_F(CliTest, MalformedConfigIsRejected) {
    write("bad.json", "{not json");
    EXPECT_EQ(run("fit --config bad.json --output out"), 1);
    EXPECT_FALSE(fs::exists(path("out")));
}

TEST_F(CliTest, UnknownKeyLeavesOnlyFailureManifest) {
    two_clusters("pts.csv", 40, 2);
    write("fit.json", R"({"data": "pts.csv", "components": 2, "em": {"T": 5, "typo": 1}})");
    EXPECT_EQ(run("fit --config fit.json --output out"), 1);
    EXPECT_EQ(listing("out"), std::vector<std::string>{"failure.json"});
    const json m = json::parse(read(path("out/failure.json")));
    EXPECT_EQ(m["exit_code"], 1);
    EXPECT_NE(m["message"].get<std::string>().find("em.typo"), std::string::npos);
}

TEST_F(CliTest, NumericalFailureExitsTwo) {
    write("tiny.csv", "0,0\n1,0\n0,1\n1,1\n");
    write("fit.json", R"({"data": "tiny.csv", "components": 3})");
    EXPECT_EQ(run("fit --config fit.json --output out"), 2);
    EXPECT_EQ(listing("out"), std::vector<std::string>{"failure.json"});
    EXPECT_EQ(json::parse(read(path("out/failure.json")))["error_kind"], "numerical");
}

TEST_F(CliTest, UnknownSubcommandAndFlagExitOne) {
    EXPECT_EQ(run("frobnicate"), 1);
    EXPECT_EQ(run("fit --no-such-flag"), 1);
    EXPECT_EQ(run(""), 1);
}

TEST_F(CliTest, SelfcheckPasses) {
    write("sc.json", R"({"instances": 20})");
    ASSERT_EQ(run("selfcheck --config sc.json --output sc --quiet"), 0);
    EXPECT_LE(summary()["max_rel_error"].get<double>(), 1e-5);
}

TEST_F(CliTest, SweepCsvIsDeterministicAcrossRunsAndWorkers) {
    write("gc.json", R"({"t_grid": [2, 6], "repeats": 3, "bank_size": 2, "seed": 4})");
    ASSERT_EQ(run("grad-compare --config gc.json --output a --quiet --workers 1"), 0);
    ASSERT_EQ(run("grad-compare --config gc.json --output b --quiet", "DIFFEM_WORKERS=3"), 0);
    EXPECT_EQ(read(path("a/rows.csv")), read(path("b/rows.csv")));
    EXPECT_EQ(read(path("a/summary.csv")), read(path("b/summary.csv")));
    ASSERT_EQ(run("grad-compare --config gc.json --output c --quiet --seed 5"), 0);
    EXPECT_NE(read(path("a/rows.csv")), read(path("c/rows.csv")));
    EXPECT_EQ(summary()["seed"], 5);
}

TEST_F(CliTest, FlowWritesTraceAndIsDeterministic) {
    two_clusters("src.csv", 60, 3);
    Rng rng(9);
    std::ofstream t(path("dst.csv"));
    for (int i = 0; i < 60; ++i)
        t << format_double((i % 2 ? 3.0 : -3.0) + 0.3 * rng.normal()) << ',' << format_double(0.3 * rng.normal()) << '\n';
    t.close();
    write("flow.json", R"({"source": "src.csv", "target": "dst.csv", "components": 2, "gd_steps": 20,
                          "learning_rate": 0.01, "snapshot_every": 10, "em": {"T": 5}})");
    ASSERT_EQ(run("flow --config flow.json --output a --quiet"), 0);
    const json s = summary();
    EXPECT_LT(s["final_energy"].get<double>(), s["initial_energy"].get<double>());
    ASSERT_EQ(run("flow --config flow.json --output b --quiet"), 0);
    for (const char* f : {"energies.csv", "weights.csv", "final_points.csv", "points_000010.csv"})
        EXPECT_EQ(read(path("a") / f), read(path("b") / f)) << f;
    EXPECT_TRUE(fs::exists(path("a/points_000020.csv")));
}

TEST_F(CliTest, WeightsPathologyRuns) {
    write("wp.json", R"({"gd_steps": 5, "points": 90})");
    ASSERT_EQ(run("weights-pathology --config wp.json --output out --quiet"), 0);
    EXPECT_TRUE(summary().contains("weight_l1"));
    EXPECT_TRUE(fs::exists(path("out/weights.csv")));
}

TEST_F(CliTest, BarycentreCommandsRun) {
    two_clusters("src.csv", 40, 5);
    write("bary.json", R"({"source": "src.csv", "components": 2, "gd_steps": 3, "em": {"T": 3},
        "targets": [
          {"weights": [0.5, 0.5], "means": [[0, 0], [4, 0]], "covariances": [[[0.2, 0], [0, 0.2]], [[0.2, 0], [0, 0.2]]]},
          {"weights": [0.5, 0.5], "means": [[0, 4], [4, 4]], "covariances": [[[0.2, 0], [0, 0.2]], [[0.2, 0], [0, 0.2]]]}]})");
    ASSERT_EQ(run("barycentre --config bary.json --output b --quiet"), 0);

    Rng rng(6);
    std::ofstream s3(path("src3.csv"));
    for (int i = 0; i < 40; ++i)
        s3 << format_double(rng.normal()) << ',' << format_double(rng.normal()) << ',' << format_double(rng.normal()) << '\n';
    s3.close();
    const std::string g2 =
        R"({"weights": [1.0], "means": [[0, 0]], "covariances": [[[1, 0], [0, 1]]]})";
    write("proj.json", R"({"source": "src3.csv", "components": 1, "gd_steps": 3, "em": {"T": 3}, "targets": [)" + g2 +
                           "," + g2 + "," + g2 + "]}");
    ASSERT_EQ(run("projected-barycentre --config proj.json --output p --quiet"), 0);
    write("bad.json", R"({"source": "src3.csv", "components": 1, "targets": [)" + g2 + "]}");
    EXPECT_EQ(run("projected-barycentre --config bad.json --output q --quiet"), 1);
}

Image gradient_image(int h, int w, double tint) {
    Image img(h, w);
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c)
            img.pixels.row(r * w + c) << (r + 0.5) / h, tint, (c + 0.5) / w;
    return quantise(img);
}

TEST_F(CliTest, ColourTransferAndTextureWritePngs) {
    write_png(gradient_image(16, 16, 0.2), path("a.png").string());
    write_png(gradient_image(16, 16, 0.8), path("b.png").string());
    write("ct.json", R"({"source": "a.png", "target": "b.png", "components": 2, "gd_steps": 5,
                        "target_iterations": 10, "unbalanced": true})");
    ASSERT_EQ(run("colour-transfer --config ct.json --output ct --quiet"), 0);
    const Image out = read_png(path("ct/output.png").string());
    EXPECT_EQ(out.height, 16);
    EXPECT_EQ(out.width, 16);

    write("tx.json", R"({"target": "a.png", "scales": [[2, 0]], "components": 2, "gd_steps": 3,
                        "target_iterations": 10})");
    ASSERT_EQ(run("texture --config tx.json --output tx --quiet"), 0);
    EXPECT_EQ(read_png(path("tx/output.png").string()).size(), 256);
    EXPECT_TRUE(fs::exists(path("tx/synthesised.png")));

    write("small.json", R"({"target": "a.png", "height": 8, "width": 8, "gd_steps": 1})");
    EXPECT_EQ(run("texture --config small.json --output small --quiet"), 1);
    write("notpng.txt", "hello");
    write("ct2.json", R"({"source": "notpng.txt", "target": "b.png"})");
    EXPECT_EQ(run("colour-transfer --config ct2.json --output bad --quiet"), 1);
}

TEST_F(CliTest, FixturesSummary) {
    write("fx.json", R"({"n2": {"starts": 10, "grid": 11}})");
    ASSERT_EQ(run("fixtures --config fx.json --output fx --quiet"), 0);
    const json s = summary();
    EXPECT_EQ(s["e3"]["lower_points"], 0);
    EXPECT_EQ(s["n2"]["descents_at_target"], 10);
}

TEST_F(CliTest, SampleComplexityRuns) {
    write("sc.json", R"({"n_grid": [100, 200], "repeats": 2, "cov_scales": [0.5], "em_iterations": 10})");
    ASSERT_EQ(run("sample-complexity --config sc.json --output sc --quiet"), 0);
    EXPECT_EQ(summary()["spearman"].size(), 1u);
    EXPECT_TRUE(fs::exists(path("sc/spearman.csv")));
}

TEST_F(CliTest, PngRoundTripIsLossless) {
    Image black(1, 1);
    black.pixels.setZero();
    write_png(black, path("black.png").string());
    EXPECT_EQ(read_png(path("black.png").string()).pixels, black.pixels);

    Rng rng(11);
    Image img(64, 64);
    for (int i = 0; i < img.pixels.rows(); ++i)
        for (int c = 0; c < 3; ++c) img.pixels(i, c) = static_cast<double>(rng.uniform_int(256)) / 255.0;
    write_png(img, path("rand.png").string());
    const Image back = read_png(path("rand.png").string());
    ASSERT_EQ(back.height, 64);
    ASSERT_EQ(back.width, 64);
    EXPECT_EQ(back.pixels, img.pixels);
}

TEST_F(CliTest, NonPngBytesAreMalformed) {
    write("junk.png", "definitely not a png file");
    EXPECT_THROW(read_png(path("junk.png").string()), MalformedImage);
    EXPECT_THROW(read_png(path("missing.png").string()), MalformedImage);
}

TEST(ConfigReader, TypesAndUnknownKeys) {
    const json doc = json::parse(R"({"a": 1, "b": "x", "em": {"T": 3, "extra": true}})");
    cli::ConfigReader r(doc, "");
    EXPECT_EQ(r.get("a", 0), 1);
    EXPECT_THROW(r.get("b", 0), ArgumentError);
    EXPECT_EQ(r.get("missing", 7), 7);
    EXPECT_THROW(cli::read_em(r, EmConfig{}), ArgumentError);  // em.extra
    r.finish();

    cli::ConfigReader partial(doc, "");
    partial.get("a", 0);
    EXPECT_THROW(partial.finish(), ArgumentError);
}

TEST(ConfigReader, InlineGmm) {
    const json g = json::parse(R"({"weights": [1.0], "means": [[1, 2]], "covariances": [[[1, 0], [0, 1]]]})");
    EXPECT_EQ(cli::read_gmm_value(g, "g").dim(), 2);
    EXPECT_THROW(cli::read_gmm_value(json::parse(R"({"weights": [1.0]})"), "g"), ArgumentError);
}

}  // namespace
}  // namespace diffem

// End-to-end tests of the command-line binary. The binary path arrives as
// argv[1]; every scenario shells out and checks exit codes plus artifacts.

#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "specdiff/checkpoint.hpp"
#include "specdiff/io.hpp"
#include "specdiff/spectral.hpp"

namespace fs = std::filesystem;
using namespace specdiff;

namespace {

std::string g_cli;

struct CmdResult {
    int code = -1;
    std::string out;  // stdout and stderr merged
};

CmdResult run_cli(const std::string& args) {
    const std::string capture = (fs::temp_directory_path() / "specdiff_cli_out.txt").string();
    const std::string cmd = g_cli + " " + args + " >" + capture + " 2>&1";
    int status = std::system(cmd.c_str());
    CmdResult r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    std::ifstream in(capture);
    std::stringstream ss;
    ss << in.rdbuf();
    r.out = ss.str();
    return r;
}

fs::path fresh_dir(const std::string& name) {
    fs::path d = fs::temp_directory_path() / "specdiff_cli" / name;
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
}

std::string file_bytes(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

/** Shared generation config: transforms small enough that content stays
    in frame at 32 pixels. */
fs::path gen_config_file() {
    static fs::path p;
    if (p.empty()) {
        p = fs::temp_directory_path() / "specdiff_cli" / "gen.cfg";
        fs::create_directories(p.parent_path());
        std::ofstream f(p);
        f << "# tiny, registration-friendly pairs\n"
             "image_size=32\n"
             "jitter_px=0,1\n"
             "translation=-3,3\n"
             "rotation=0,0.25\n"
             "scale=0.95,1.05\n";
    }
    return p;
}

/** Lazily generated dataset shared by the train/infer/eval scenarios. */
fs::path shared_dataset() {
    static fs::path d;
    if (d.empty()) {
        d = fresh_dir("dataset");
        CmdResult r = run_cli("gen-data --out " + d.string() + " --count 4 --seed 11 --config " +
                              gen_config_file().string());
        EXPECT_EQ(r.code, 0) << r.out;
    }
    return d;
}

/** Lazily trained checkpoint shared by the infer/eval scenarios. */
fs::path shared_checkpoint() {
    static fs::path ck;
    if (ck.empty()) {
        fs::path run = fresh_dir("train_run");
        fs::path cfg = run / "train.cfg";
        std::ofstream(cfg) << "dataset=" << shared_dataset().string()
                           << "\nepochs=1\nbatch_size=2\nalignment=ground_truth\n"
                              "irr_angular_bins=64\nirr_radial_bins=32\n"
                              "out_dir=" << run.string() << "\n";
        CmdResult r = run_cli("train --config " + cfg.string() + " --epochs 2 --seed 5");
        EXPECT_EQ(r.code, 0) << r.out;
        ck = run / "ckpt_final.bin";
        EXPECT_TRUE(fs::exists(ck));
    }
    return ck;
}

}  // namespace

TEST(Cli, MissingSubcommandIsUsageError) {
    EXPECT_EQ(run_cli("").code, 1);
}

TEST(Cli, UnknownFlagIsUsageError) {
    CmdResult r = run_cli("register --template a.png --source b.png --bogus");
    EXPECT_EQ(r.code, 1);
}

TEST(Cli, HelpExitsCleanly) {
    CmdResult r = run_cli("--help");
    EXPECT_EQ(r.code, 0);
    EXPECT_NE(r.out.find("gen-data"), std::string::npos);
}

TEST(GenData, DeterministicAcrossRuns) {
    fs::path a = fresh_dir("gen_a"), b = fresh_dir("gen_b");
    std::string tail = " --count 3 --seed 9 --config " + gen_config_file().string();
    ASSERT_EQ(run_cli("gen-data --out " + a.string() + tail).code, 0);
    ASSERT_EQ(run_cli("gen-data --out " + b.string() + tail).code, 0);
    for (const char* name : {"000000_source.png", "000002_mask.png", "manifest.json"})
        EXPECT_EQ(file_bytes(a / name), file_bytes(b / name)) << name;
    EXPECT_TRUE(fs::exists(a / "000002_template.png"));
    EXPECT_FALSE(fs::exists(a / "000003_template.png"));
}

TEST(GenData, EnvironmentSeedMatchesExplicitSeed) {
    fs::path a = fresh_dir("gen_env"), b = fresh_dir("gen_flag");
    std::string tail = " --count 1 --config " + gen_config_file().string();
    setenv("SPECDIFF_SEED", "42", 1);
    int env_code = run_cli("gen-data --out " + a.string() + tail).code;
    unsetenv("SPECDIFF_SEED");
    ASSERT_EQ(env_code, 0);
    ASSERT_EQ(run_cli("gen-data --out " + b.string() + tail + " --seed 42").code, 0);
    EXPECT_EQ(file_bytes(a / "000000_source.png"), file_bytes(b / "000000_source.png"));
}

TEST(Register, IdentityPairDecodesToNoMotion) {
    fs::path ds = shared_dataset();
    std::string tmpl = (ds / "000000_template.png").string();
    CmdResult r = run_cli("register --template " + tmpl + " --source " + tmpl);
    ASSERT_EQ(r.code, 0) << r.out;
    auto value = [&](const std::string& key) {
        size_t pos = r.out.find(key + "=");
        EXPECT_NE(pos, std::string::npos) << key;
        return std::strtod(r.out.c_str() + pos + key.size() + 1, nullptr);
    };
    double theta = value("theta_deg");
    if (theta > 180.0) theta -= 360.0;
    EXPECT_LT(std::abs(theta), 0.5);
    EXPECT_NEAR(value("scale"), 1.0, 0.02);
    EXPECT_LT(std::abs(value("tx")), 0.5);
    EXPECT_LT(std::abs(value("ty")), 0.5);
}

TEST(Register, SizeMismatchIsDataError) {
    fs::path big = fresh_dir("reg_big");
    ASSERT_EQ(run_cli("gen-data --out " + big.string() + " --count 1 --seed 3 --size 48 --config " +
                      gen_config_file().string())
                  .code,
              0);
    CmdResult r = run_cli("register --template " + (shared_dataset() / "000000_template.png").string() +
                          " --source " + (big / "000000_source.png").string());
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.out.find("sizes differ"), std::string::npos);
}

TEST(Train, WritesRunArtifactsAndHonorsOverrides) {
    fs::path ck = shared_checkpoint();
    fs::path run = ck.parent_path();
    EXPECT_TRUE(fs::exists(run / "train.log"));

    // 4 pairs, batch 2, 2 epochs: one log line per step
    std::ifstream log(run / "train.log");
    int lines = 0;
    for (std::string l; std::getline(log, l);)
        if (!l.empty()) ++lines;
    EXPECT_EQ(lines, 4);

    // the flag override beats the config file and survives in the echo
    net::Model m;
    m.init(0);
    net::CheckpointMeta meta = net::load_checkpoint(ck.string(), m);
    nlohmann::json echo = nlohmann::json::parse(meta.config_json);
    EXPECT_EQ(echo["epochs"].get<int>(), 2);
    EXPECT_EQ(echo["alignment"].get<std::string>(), "ground_truth");
    EXPECT_EQ(echo["image_size"].get<int>(), 32);
}

TEST(Train, PoisonedResumeIsNumericalError) {
    fs::path dir = fresh_dir("poison");
    net::Model m;
    m.init(5);
    m.diff.stem.w[0] = std::numeric_limits<double>::quiet_NaN();
    std::vector<double> zeros(m.n_params(), 0.0);
    net::CheckpointMeta meta;
    meta.seed = 5;
    meta.step = 1;
    meta.epoch = 0;
    meta.has_optimizer = true;
    fs::path bad = dir / "bad.ckpt";
    net::save_checkpoint(bad.string(), m, meta, &zeros, &zeros);

    fs::path cfg = dir / "train.cfg";
    std::ofstream(cfg) << "dataset=" << shared_dataset().string()
                       << "\nepochs=2\nbatch_size=2\nalignment=ground_truth\n"
                          "irr_angular_bins=64\nirr_radial_bins=32\nseed=5\n"
                          "out_dir=" << dir.string() << "\n";
    CmdResult r = run_cli("train --config " + cfg.string() + " --resume " + bad.string());
    EXPECT_EQ(r.code, 3);
    EXPECT_TRUE(fs::exists(dir / "diagnostic_step2.ckpt"));
}

TEST(Infer, WritesPredictionPoseAndOptionalExtras) {
    fs::path ds = shared_dataset();
    fs::path out = fresh_dir("infer_out");
    CmdResult r = run_cli("infer --checkpoint " + shared_checkpoint().string() + " --template " +
                          (ds / "000001_template.png").string() + " --source " +
                          (ds / "000001_source.png").string() + " --out-dir " + out.string() +
                          " --overlays --intermediates");
    ASSERT_EQ(r.code, 0) << r.out;
    EXPECT_NE(r.out.find("theta_deg="), std::string::npos);
    for (const char* name : {"output.png", "binary.png", "pose.txt", "ot.png", "os.png", "overlay.png"})
        EXPECT_TRUE(fs::exists(out / name)) << name;
    Plane o = spectral::to_grayscale(io::read_png((out / "output.png").string()));
    EXPECT_EQ(o.rows, 32);

    Plane bin = spectral::to_grayscale(io::read_png((out / "binary.png").string()));
    for (double v : bin.v) EXPECT_TRUE(v == 0.0 || v == 1.0);
}

TEST(Infer, ResamplesForeignSizesBackToInputDimensions) {
    fs::path big = fresh_dir("infer_big");
    ASSERT_EQ(run_cli("gen-data --out " + big.string() + " --count 1 --seed 8 --size 48 --config " +
                      gen_config_file().string())
                  .code,
              0);
    fs::path out = fresh_dir("infer_big_out");
    CmdResult r = run_cli("infer --checkpoint " + shared_checkpoint().string() + " --template " +
                          (big / "000000_template.png").string() + " --source " +
                          (big / "000000_source.png").string() + " --out-dir " + out.string());
    ASSERT_EQ(r.code, 0) << r.out;
    EXPECT_NE(r.out.find("resampling"), std::string::npos);
    Plane o = spectral::to_grayscale(io::read_png((out / "output.png").string()));
    EXPECT_EQ(o.rows, 48);
    EXPECT_EQ(o.cols, 48);
}

TEST(Infer, MissingCheckpointIsDataError) {
    fs::path ds = shared_dataset();
    CmdResult r = run_cli("infer --checkpoint /nonexistent.ckpt --template " +
                          (ds / "000000_template.png").string() + " --source " +
                          (ds / "000000_source.png").string());
    EXPECT_EQ(r.code, 2);
}

TEST(Eval, OracleSelfTestScoresPerfect) {
    fs::path out = fresh_dir("eval_out");
    fs::path report = out / "report.txt";
    CmdResult r = run_cli("eval --checkpoint " + shared_checkpoint().string() + " --dataset " +
                          shared_dataset().string() + " --report " + report.string() + " --oracle");
    ASSERT_EQ(r.code, 0) << r.out;
    std::string text = file_bytes(report);
    EXPECT_NE(text.find("aggregate ap"), std::string::npos);
    EXPECT_NE(text.find("1.0000"), std::string::npos);
}

TEST(Eval, RealCheckpointProducesFiniteScores) {
    fs::path out = fresh_dir("eval_real");
    fs::path report = out / "report.txt";
    CmdResult r = run_cli("eval --checkpoint " + shared_checkpoint().string() + " --dataset " +
                          shared_dataset().string() + " --report " + report.string());
    ASSERT_EQ(r.code, 0) << r.out;
    EXPECT_NE(file_bytes(report).find("aggregate max_f1"), std::string::npos);
}

int main(int argc, char** argv) {
    ::testing::InitGoogleTest(&argc, argv);
    g_cli = argc > 1 ? argv[1] : "./build/tools/specdiff";
    return RUN_ALL_TESTS();
}

// Command-line entry points: gen-data, train, infer, eval, register.
// Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "specdiff/evalkit.hpp"
#include "specdiff/train.hpp"

namespace fs = std::filesystem;
using namespace specdiff;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitNumeric = 3;

/** Bad flag or config values, as opposed to unreadable or inconsistent data. */
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/** SPECDIFF_SEED is the global fallback when no seed is given explicitly. */
bool env_seed(uint64_t& out) {
    const char* s = std::getenv("SPECDIFF_SEED");
    if (s == nullptr || *s == '\0') return false;
    out = std::stoull(s);
    return true;
}

std::string pose_text(const registration::PoseSim2& p) {
    char buf[160];
    std::snprintf(buf, sizeof(buf), "theta_deg=%.6f\nscale=%.6f\ntx=%.6f\nty=%.6f\n",
                  p.theta * 180.0 / kPi, p.scale, p.t_x, p.t_y);
    return buf;
}

struct GenDataArgs {
    std::string out, config;
    int count = 100;
    int size = 0;  // 0 keeps the config's size
    uint64_t seed = 0;
    bool seed_set = false;
};

int run_gen_data(const GenDataArgs& a) {
    simgen::GenConfig cfg;
    try {
        if (!a.config.empty()) simgen::apply_config_kv(cfg, io::parse_config_file(a.config));
        if (a.size > 0) cfg.image_size = a.size;
        if (a.seed_set)
            cfg.seed = a.seed;
        else
            env_seed(cfg.seed);
        simgen::validate_config(cfg);
    } catch (const std::exception& e) {
        throw UsageError(e.what());
    }
    simgen::write_dataset(simgen::gen_dataset(cfg, a.count), a.out, cfg);
    std::cout << "wrote " << a.count << " pairs to " << a.out << "\n";
    return 0;
}

struct TrainArgs {
    std::string config, resume;
    std::map<std::string, std::string> overrides;
};

int run_train(const TrainArgs& a) {
    train::TrainConfig cfg;
    try {
        if (!a.config.empty()) train::apply_config_kv(cfg, io::parse_config_file(a.config));
        train::apply_config_kv(cfg, a.overrides);
        const bool file_has_seed =
            !a.config.empty() && io::parse_config_file(a.config).count("seed") > 0;
        if (a.overrides.find("seed") == a.overrides.end() && !file_has_seed) env_seed(cfg.seed);
    } catch (const std::exception& e) {
        throw UsageError(e.what());
    }
    train::TrainResult res = train::train(cfg, a.resume, &std::cout);
    std::cout << "final checkpoint: " << res.final_checkpoint << "\n";
    return 0;
}

struct InferArgs {
    std::string checkpoint, template_path, source_path, out_dir = ".";
    double threshold = 0.5;
    bool overlays = false;
    bool intermediates = false;
};

int run_infer(const InferArgs& a) {
    net::Model model;
    model.init(0);
    net::CheckpointMeta meta = net::load_checkpoint(a.checkpoint, model);

    ImageBuf tmpl = io::read_png(a.template_path);
    ImageBuf source = io::read_png(a.source_path);
    if (tmpl.rows != source.rows || tmpl.cols != source.cols)
        throw std::runtime_error("infer: template and source sizes differ");
    const int in_rows = source.rows, in_cols = source.cols;

    int trained = 0;
    if (!meta.config_json.empty()) {
        nlohmann::json echo = nlohmann::json::parse(meta.config_json);
        trained = echo.value("image_size", 0);
    }
    if (trained > 0 && (in_rows != trained || in_cols != trained)) {
        std::cerr << "warning: resampling " << in_rows << "x" << in_cols
                  << " inputs to the trained size " << trained << "x" << trained << "\n";
        Plane tg = io::resize_bilinear(spectral::to_grayscale(tmpl), trained, trained);
        Plane sg = io::resize_bilinear(spectral::to_grayscale(source), trained, trained);
        tmpl = ImageBuf(trained, trained, 1);
        tmpl.v = tg.v;
        source = ImageBuf(trained, trained, 1);
        source.v = sg.v;
    }

    net::FullForward f = net::full_forward(model, tmpl, source);
    auto to_input_size = [&](const Plane& p) { return io::resize_bilinear(p, in_rows, in_cols); };
    Plane o = to_input_size(net::channel_plane(f.mask_out, 0));

    fs::create_directories(a.out_dir);
    io::write_png((fs::path(a.out_dir) / "output.png").string(), o);
    Plane bin(o.rows, o.cols);
    for (size_t i = 0; i < o.v.size(); ++i) bin.v[i] = o.v[i] >= a.threshold ? 1.0 : 0.0;
    io::write_png((fs::path(a.out_dir) / "binary.png").string(), bin);
    std::ofstream((fs::path(a.out_dir) / "pose.txt").string()) << pose_text(f.reg.pose);
    if (a.intermediates) {
        io::write_png((fs::path(a.out_dir) / "ot.png").string(),
                      to_input_size(net::channel_plane(f.diff_out, 0)));
        io::write_png((fs::path(a.out_dir) / "os.png").string(),
                      to_input_size(net::channel_plane(f.diff_out, 1)));
    }
    if (a.overlays) {
        ImageBuf src_orig = io::read_png(a.source_path);
        io::write_png((fs::path(a.out_dir) / "overlay.png").string(),
                      evalkit::overlay(src_orig, o, a.threshold));
    }
    std::cout << pose_text(f.reg.pose);
    return 0;
}

struct EvalArgs {
    std::string checkpoint, dataset, report = "eval_report.txt";
    int n_thresholds = 256;
    bool overlays = false;
    bool oracle = false;  // self-test: score ground truth against itself
};

int run_eval(const EvalArgs& a) {
    net::Model model;
    model.init(0);
    net::load_checkpoint(a.checkpoint, model);
    evalkit::EvalOptions opts;
    opts.n_thresholds = a.n_thresholds;
    if (a.oracle)
        opts.predictor = [](const net::FullForward&, const simgen::SamplePair& p) {
            return p.gt_mask;
        };
    evalkit::EvalReport rep = evalkit::evaluate_dataset(model, a.dataset, opts);
    std::string text = evalkit::format_report(rep);
    std::ofstream(a.report) << text;
    std::cout << text;
    if (a.overlays) {
        fs::path dir = fs::path(a.report).parent_path();
        for (const std::string& id : simgen::list_pair_ids(a.dataset)) {
            simgen::SamplePair p = simgen::read_pair(a.dataset, id);
            net::FullForward f = net::full_forward(model, p.tmpl, p.source);
            Plane pred =
                a.oracle ? p.gt_mask : net::channel_plane(f.mask_out, 0);
            io::write_png((dir / (id + "_overlay.png")).string(),
                          evalkit::overlay(p.source, pred));
        }
    }
    return 0;
}

int run_register(const std::string& template_path, const std::string& source_path,
                 const std::string& out) {
    ImageBuf tmpl = io::read_png(template_path);
    ImageBuf source = io::read_png(source_path);
    if (tmpl.rows != source.rows || tmpl.cols != source.cols)
        throw std::runtime_error("register: template and source sizes differ");
    registration::RegistrationResult r = registration::register_pair(tmpl, source);
    std::string text = pose_text(r.pose);
    if (!out.empty()) std::ofstream(out) << text;
    std::cout << text;
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"defect segmentation against a defect-free template"};
    app.require_subcommand(1);

    GenDataArgs gen;
    CLI::App* cmd_gen = app.add_subcommand("gen-data", "generate a paired shape dataset");
    cmd_gen->add_option("--out", gen.out, "output directory")->required();
    cmd_gen->add_option("--count", gen.count, "number of pairs");
    auto* gen_seed = cmd_gen->add_option("--seed", gen.seed, "dataset seed");
    cmd_gen->add_option("--size", gen.size, "image size override");
    cmd_gen->add_option("--config", gen.config, "key=value generation config file");

    TrainArgs tr;
    std::string tr_dataset, tr_out, tr_alignment;
    int tr_epochs = -1, tr_batch = -1, tr_ckpt_int = -1;
    double tr_lr = -1.0;
    uint64_t tr_seed = 0;
    CLI::App* cmd_train = app.add_subcommand("train", "train the difference and mask networks");
    cmd_train->add_option("--config", tr.config, "key=value training config file");
    cmd_train->add_option("--dataset", tr_dataset, "dataset directory");
    cmd_train->add_option("--epochs", tr_epochs, "training epochs");
    cmd_train->add_option("--batch-size", tr_batch, "batch size");
    cmd_train->add_option("--learning-rate", tr_lr, "learning rate");
    cmd_train->add_option("--alignment", tr_alignment, "estimated | ground_truth");
    auto* tr_seed_opt = cmd_train->add_option("--seed", tr_seed, "training seed");
    cmd_train->add_option("--out", tr_out, "run output directory");
    cmd_train->add_option("--checkpoint-interval", tr_ckpt_int, "steps between checkpoints");
    cmd_train->add_option("--resume", tr.resume, "checkpoint to resume from");

    InferArgs inf;
    CLI::App* cmd_infer = app.add_subcommand("infer", "segment defects in one pair");
    cmd_infer->add_option("--checkpoint", inf.checkpoint, "trained checkpoint")->required();
    cmd_infer->add_option("--template", inf.template_path, "defect-free template PNG")->required();
    cmd_infer->add_option("--source", inf.source_path, "inspected image PNG")->required();
    cmd_infer->add_option("--out-dir", inf.out_dir, "output directory");
    cmd_infer->add_option("--threshold", inf.threshold, "binarization threshold");
    cmd_infer->add_flag("--overlays", inf.overlays, "write prediction overlay");
    cmd_infer->add_flag("--intermediates", inf.intermediates, "write the two stream outputs");

    EvalArgs ev;
    CLI::App* cmd_eval = app.add_subcommand("eval", "score a checkpoint on a dataset");
    cmd_eval->add_option("--checkpoint", ev.checkpoint, "trained checkpoint")->required();
    cmd_eval->add_option("--dataset", ev.dataset, "dataset directory")->required();
    cmd_eval->add_option("--report", ev.report, "report file path");
    cmd_eval->add_option("--n-thresholds", ev.n_thresholds, "threshold count");
    cmd_eval->add_flag("--overlays", ev.overlays, "write per-pair overlays next to the report");
    cmd_eval->add_flag("--oracle", ev.oracle, "score ground truth against itself (self-test)");

    std::string reg_template, reg_source, reg_out;
    CLI::App* cmd_reg = app.add_subcommand("register", "estimate the template-to-source pose");
    cmd_reg->add_option("--template", reg_template, "template PNG")->required();
    cmd_reg->add_option("--source", reg_source, "source PNG")->required();
    cmd_reg->add_option("--out", reg_out, "also write the pose to this file");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitUsage;
    }

    gen.seed_set = gen_seed->count() > 0;
    if (cmd_train->parsed()) {
        if (!tr_dataset.empty()) tr.overrides["dataset"] = tr_dataset;
        if (tr_epochs >= 0) tr.overrides["epochs"] = std::to_string(tr_epochs);
        if (tr_batch >= 0) tr.overrides["batch_size"] = std::to_string(tr_batch);
        if (tr_lr >= 0.0) tr.overrides["learning_rate"] = std::to_string(tr_lr);
        if (!tr_alignment.empty()) tr.overrides["alignment"] = tr_alignment;
        if (tr_seed_opt->count() > 0) tr.overrides["seed"] = std::to_string(tr_seed);
        if (!tr_out.empty()) tr.overrides["out_dir"] = tr_out;
        if (tr_ckpt_int >= 0) tr.overrides["checkpoint_interval"] = std::to_string(tr_ckpt_int);
    }

    try {
        if (cmd_gen->parsed()) return run_gen_data(gen);
        if (cmd_train->parsed()) return run_train(tr);
        if (cmd_infer->parsed()) return run_infer(inf);
        if (cmd_eval->parsed()) return run_eval(ev);
        if (cmd_reg->parsed()) return run_register(reg_template, reg_source, reg_out);
    } catch (const train::NumericalError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitData;
    }
    return kExitUsage;
}

#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "specdiff/checkpoint.hpp"
#include "specdiff/losses.hpp"
#include "specdiff/simgen.hpp"

namespace specdiff::train {

/** Non-finite loss; the trainer has already written a diagnostic snapshot. */
struct NumericalError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

enum class AlignmentMode { Estimated, GroundTruth };

inline const char* alignment_name(AlignmentMode m) {
    return m == AlignmentMode::Estimated ? "estimated" : "ground_truth";
}

inline AlignmentMode alignment_from_name(const std::string& s) {
    if (s == "estimated") return AlignmentMode::Estimated;
    if (s == "ground_truth") return AlignmentMode::GroundTruth;
    throw std::invalid_argument("alignment mode must be estimated or ground_truth, got " + s);
}

struct TrainConfig {
    std::string dataset;  // directory; empty switches to the generated stream
    int epochs = 1;
    int batch_size = 8;
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    // loss options
    double sigma_bins = 2.0;
    double irr_temperature = 1.0;
    int irr_angular_bins = 128;
    int irr_radial_bins = 64;
    AlignmentMode alignment = AlignmentMode::Estimated;
    std::uint64_t seed = 1;
    int checkpoint_interval = 0;  // steps between snapshots; 0 keeps only the final one
    bool deterministic = true;
    std::string out_dir = "run";
    // on-the-fly generation (dataset empty): stream config and epoch length
    simgen::GenConfig stream;
    int stream_pairs = 256;
};

inline void validate(const TrainConfig& c) {
    require(c.epochs > 0, "train config: epochs must be positive");
    require(c.batch_size > 0, "train config: batch_size must be positive");
    require(c.learning_rate > 0.0, "train config: learning_rate must be positive");
    require(c.beta1 > 0.0 && c.beta1 < 1.0 && c.beta2 > 0.0 && c.beta2 < 1.0,
            "train config: moment decay rates must lie in (0,1)");
    require(c.adam_eps > 0.0, "train config: adam_eps must be positive");
    require(c.sigma_bins >= 0.0, "train config: sigma_bins must be nonnegative");
    require(c.irr_temperature > 0.0, "train config: irr_temperature must be positive");
    require(c.checkpoint_interval >= 0, "train config: checkpoint_interval must be nonnegative");
    require(c.stream_pairs > 0, "train config: stream_pairs must be positive");
    require(!c.out_dir.empty(), "train config: out_dir required");
}

inline nlohmann::json config_to_json(const TrainConfig& c) {
    return {
        {"dataset", c.dataset},
        {"epochs", c.epochs},
        {"batch_size", c.batch_size},
        {"learning_rate", c.learning_rate},
        {"beta1", c.beta1},
        {"beta2", c.beta2},
        {"adam_eps", c.adam_eps},
        {"sigma_bins", c.sigma_bins},
        {"irr_temperature", c.irr_temperature},
        {"irr_angular_bins", c.irr_angular_bins},
        {"irr_radial_bins", c.irr_radial_bins},
        {"alignment", alignment_name(c.alignment)},
        {"seed", c.seed},
        {"checkpoint_interval", c.checkpoint_interval},
        {"deterministic", c.deterministic},
        {"out_dir", c.out_dir},
        {"stream_pairs", c.stream_pairs},
    };
}

/** Applies flat key=value settings; `gen_`-prefixed keys configure the
    on-the-fly stream with the data-generation key set. */
inline void apply_config_kv(TrainConfig& c, const std::map<std::string, std::string>& kv) {
    std::map<std::string, std::string> gen_kv;
    for (const auto& [key, value] : kv) {
        if (key.rfind("gen_", 0) == 0) {
            gen_kv[key.substr(4)] = value;
        } else if (key == "dataset") {
            c.dataset = value;
        } else if (key == "epochs") {
            c.epochs = std::stoi(value);
        } else if (key == "batch_size") {
            c.batch_size = std::stoi(value);
        } else if (key == "learning_rate") {
            c.learning_rate = std::stod(value);
        } else if (key == "beta1") {
            c.beta1 = std::stod(value);
        } else if (key == "beta2") {
            c.beta2 = std::stod(value);
        } else if (key == "adam_eps") {
            c.adam_eps = std::stod(value);
        } else if (key == "sigma_bins") {
            c.sigma_bins = std::stod(value);
        } else if (key == "irr_temperature") {
            c.irr_temperature = std::stod(value);
        } else if (key == "irr_angular_bins") {
            c.irr_angular_bins = std::stoi(value);
        } else if (key == "irr_radial_bins") {
            c.irr_radial_bins = std::stoi(value);
        } else if (key == "alignment") {
            c.alignment = alignment_from_name(value);
        } else if (key == "seed") {
            c.seed = std::stoull(value);
        } else if (key == "checkpoint_interval") {
            c.checkpoint_interval = std::stoi(value);
        } else if (key == "deterministic") {
            c.deterministic = value == "1" || value == "true";
        } else if (key == "out_dir") {
            c.out_dir = value;
        } else if (key == "stream_pairs") {
            c.stream_pairs = std::stoi(value);
        } else {
            throw std::invalid_argument("train config: unknown key \"" + key + "\"");
        }
    }
    if (!gen_kv.empty()) simgen::apply_config_kv(c.stream, gen_kv);
    validate(c);
}

// ===========================================================================
// Optimizer
// ===========================================================================

struct AdamState {
    std::vector<double> m, v;
    std::int64_t t = 0;
};

inline void adam_step(std::vector<net::ParamView>& views, const std::vector<double>& grad,
                      AdamState& st, const TrainConfig& cfg) {
    size_t n = 0;
    for (const net::ParamView& p : views) n += p.size;
    require(grad.size() == n, "adam_step: gradient size mismatch");
    if (st.m.empty()) {
        st.m.assign(n, 0.0);
        st.v.assign(n, 0.0);
    }
    st.t += 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, double(st.t));
    const double bc2 = 1.0 - std::pow(cfg.beta2, double(st.t));
    size_t off = 0;
    for (net::ParamView& p : views) {
        for (size_t i = 0; i < p.size; ++i, ++off) {
            double g = grad[off];
            st.m[off] = cfg.beta1 * st.m[off] + (1.0 - cfg.beta1) * g;
            st.v[off] = cfg.beta2 * st.v[off] + (1.0 - cfg.beta2) * g * g;
            double mhat = st.m[off] / bc1;
            double vhat = st.v[off] / bc2;
            p.data[i] -= cfg.learning_rate * mhat / (std::sqrt(vhat) + cfg.adam_eps);
        }
    }
}

// ===========================================================================
// Training set access. Fixed datasets are registered once up front and the
// aligned pairs cached in single precision (the 8-bit sources carry far less
// precision than that); the generated stream aligns on the fly.
// ===========================================================================

namespace detail {

struct CachedSample {
    std::vector<float> aligned, source, mask;
    std::string id;
};

inline Plane align_template(const ImageBuf& tmpl, const ImageBuf& source,
                            const registration::PoseSim2& gt_pose, bool has_gt_pose,
                            AlignmentMode mode) {
    if (mode == AlignmentMode::GroundTruth) {
        if (!has_gt_pose)
            throw std::runtime_error(
                "train: alignment=ground_truth needs pose metadata, which this dataset lacks");
        return registration::warp_sim2(spectral::to_grayscale(tmpl), gt_pose);
    }
    return spectral::to_grayscale(registration::register_pair(tmpl, source).aligned_template);
}

inline CachedSample cache_sample(const simgen::SamplePair& p, AlignmentMode mode,
                                 const std::string& id) {
    Plane aligned = align_template(p.tmpl, p.source, p.gt_pose, p.has_gt_pose, mode);
    Plane src = spectral::to_grayscale(p.source);
    CachedSample s;
    s.id = id;
    s.aligned.assign(aligned.v.begin(), aligned.v.end());
    s.source.assign(src.v.begin(), src.v.end());
    s.mask.assign(p.gt_mask.v.begin(), p.gt_mask.v.end());
    return s;
}

inline Plane to_plane(const std::vector<float>& v, int rows, int cols) {
    Plane p(rows, cols);
    for (size_t i = 0; i < v.size(); ++i) p.v[i] = v[i];
    return p;
}

inline std::vector<int> epoch_permutation(std::uint64_t seed, std::int64_t epoch, int n) {
    std::vector<int> order;
    order.resize(size_t(n));
    for (int i = 0; i < n; ++i) order[size_t(i)] = i;
    Rng rng(seed, 0x7065726dULL + std::uint64_t(epoch));  // independent shuffle stream
    for (int i = n - 1; i > 0; --i)
        std::swap(order[size_t(i)], order[size_t(rng.uniform_int(0, i))]);
    return order;
}

}  // namespace detail

// ===========================================================================
// Training loop
// ===========================================================================

struct EpochStats {
    double irr = 0.0, def = 0.0, total = 0.0;
    int steps = 0;
};

struct TrainResult {
    net::Model model;
    AdamState opt;
    std::int64_t step = 0;
    std::vector<EpochStats> epochs;
    std::string final_checkpoint;
};

inline TrainResult train(const TrainConfig& cfg, const std::string& resume_path = "",
                         std::ostream* echo = nullptr) {
    validate(cfg);
#if defined(__GLIBC__)
    // large transient buffers must not bounce through mmap each step
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
    namespace fs = std::filesystem;
    fs::create_directories(cfg.out_dir);
    std::ofstream log((fs::path(cfg.out_dir) / "train.log").string(),
                      resume_path.empty() ? std::ios::trunc : std::ios::app);

    const bool streaming = cfg.dataset.empty();
    std::vector<detail::CachedSample> cache;
    int rows = 0, cols = 0;
    if (!streaming) {
        for (const std::string& id : simgen::list_pair_ids(cfg.dataset)) {
            simgen::SamplePair p = simgen::read_pair(cfg.dataset, id);
            if (rows == 0) {
                rows = p.source.rows;
                cols = p.source.cols;
            }
            require(p.source.rows == rows && p.source.cols == cols,
                    "train: dataset mixes image sizes");
            cache.push_back(detail::cache_sample(p, cfg.alignment, id));
        }
        require(!cache.empty(), "train: dataset has no pairs");
    } else {
        rows = cols = cfg.stream.image_size;
    }
    const int n_samples = streaming ? cfg.stream_pairs : int(cache.size());
    const int steps_per_epoch = n_samples / cfg.batch_size;
    require(steps_per_epoch > 0, "train: fewer samples than one batch");
    const std::int64_t total_steps = std::int64_t(cfg.epochs) * steps_per_epoch;

    TrainResult res;
    res.model.init(cfg.seed);
    std::int64_t start_step = 0;
    if (!resume_path.empty()) {
        net::CheckpointMeta meta =
            net::load_checkpoint(resume_path, res.model, &res.opt.m, &res.opt.v);
        res.opt.t = meta.step;
        start_step = meta.step;
        require(start_step <= total_steps, "train: checkpoint is past the configured steps");
    }
    res.epochs.assign(size_t(cfg.epochs), {});

    spectral::LogPolarParams lp;
    lp.angular_bins = cfg.irr_angular_bins;
    lp.radial_bins = cfg.irr_radial_bins;
    losses::IrrelevanceContext ictx = losses::make_irrelevance_context(rows, cols, lp);
    losses::TargetDistribution target =
        losses::target_one_peak(cfg.irr_angular_bins, cfg.sigma_bins);

    // inference wants the size the model trained at; carry it in the echo
    nlohmann::json echo_cfg = config_to_json(cfg);
    echo_cfg["image_size"] = rows;
    const std::string echo_json = echo_cfg.dump();

    std::vector<net::ParamView> views = res.model.param_views();
    net::DiffGrads dg;
    net::MaskGrads mg;
    net::Workspace ws;
    net::DiffTape dt;
    net::MaskTape mt;
    std::vector<double> flat_grad(res.model.n_params());
    net::Tensor gmask(1, rows, cols);

    auto fetch = [&](std::int64_t epoch, int slot,
                     const std::vector<int>& perm) -> detail::CachedSample {
        if (!streaming) return cache[size_t(perm[size_t(slot)])];
        std::uint64_t k = std::uint64_t(epoch) * std::uint64_t(n_samples) + std::uint64_t(slot);
        simgen::SamplePair p =
            simgen::gen_pair(simgen::pair_seed(cfg.stream.seed, k), cfg.stream);
        return detail::cache_sample(p, cfg.alignment, "stream:" + std::to_string(k));
    };

    std::vector<int> perm;
    std::int64_t perm_epoch = -1;
    for (std::int64_t step = start_step; step < total_steps; ++step) {
        std::int64_t epoch = step / steps_per_epoch;
        int slot0 = int(step % steps_per_epoch) * cfg.batch_size;
        if (!streaming && epoch != perm_epoch) {
            perm = detail::epoch_permutation(cfg.seed, epoch, n_samples);
            perm_epoch = epoch;
        }

        dg.reset(res.model.diff);
        mg.reset(res.model.mask);
        double irr_sum = 0.0, def_sum = 0.0;
        std::vector<std::string> batch_ids;
        for (int j = 0; j < cfg.batch_size; ++j) {
            detail::CachedSample s = fetch(epoch, slot0 + j, perm);
            batch_ids.push_back(s.id);
            Plane aligned = detail::to_plane(s.aligned, rows, cols);
            Plane source = detail::to_plane(s.source, rows, cols);
            Plane gt = detail::to_plane(s.mask, rows, cols);

            net::Tensor x = net::from_planes(aligned, source);
            const net::Tensor& o2 = net::diff_forward(res.model.diff, x, dt, ws);
            const net::Tensor& o = net::mask_forward(res.model.mask, o2, mt, ws);

            Plane o_t = net::channel_plane(o2, 0);
            Plane o_s = net::channel_plane(o2, 1);
            losses::IrrelevanceLoss irr =
                losses::irrelevance_loss(o_t, o_s, target, cfg.irr_temperature, ictx, true);
            losses::DefectLoss def = losses::defect_loss(net::channel_plane(o, 0), gt, true);
            if (!std::isfinite(irr.value) || !std::isfinite(def.value)) {
                std::string tag = "diagnostic_step" + std::to_string(step + 1);
                net::CheckpointMeta meta{cfg.seed, step, epoch, true,
                                         echo_json};
                net::save_checkpoint((fs::path(cfg.out_dir) / (tag + ".ckpt")).string(),
                                     res.model, meta, &res.opt.m, &res.opt.v);
                nlohmann::json diag = {{"step", step + 1},
                                       {"epoch", epoch + 1},
                                       {"irr", std::isfinite(irr.value) ? irr.value : -1.0},
                                       {"def", std::isfinite(def.value) ? def.value : -1.0},
                                       {"batch", batch_ids}};
                std::ofstream((fs::path(cfg.out_dir) / (tag + ".json")).string())
                    << diag.dump(2) << "\n";
                throw NumericalError("train: non-finite loss at step " +
                                     std::to_string(step + 1) + "; snapshot in " + cfg.out_dir);
            }
            irr_sum += irr.value;
            def_sum += def.value;

            // reverse pass: defect grad through the mask head, irrelevance
            // grads joining at the difference outputs
            std::copy(def.grad.v.begin(), def.grad.v.end(), gmask.v.begin());
            net::Tensor& gdiff = net::mask_backward(res.model.mask, mt, gmask, mg, ws);
            for (int r = 0; r < rows; ++r)
                for (int c = 0; c < cols; ++c) {
                    gdiff.at(0, r, c) += irr.grad_t.at(r, c);
                    gdiff.at(1, r, c) += irr.grad_s.at(r, c);
                }
            net::diff_backward(res.model.diff, dt, gdiff, dg, ws);
        }

        const double inv = 1.0 / cfg.batch_size;
        size_t off = 0;
        for (size_t l = 0; l < dg.gw.size(); ++l) {
            for (double g : dg.gw[l]) flat_grad[off++] = g * inv;
            for (double g : dg.gb[l]) flat_grad[off++] = g * inv;
        }
        for (size_t l = 0; l < mg.gw.size(); ++l) {
            for (double g : mg.gw[l]) flat_grad[off++] = g * inv;
            for (double g : mg.gb[l]) flat_grad[off++] = g * inv;
        }
        require(off == flat_grad.size(), "train: gradient layout mismatch");
        adam_step(views, flat_grad, res.opt, cfg);

        double irr_mean = irr_sum * inv, def_mean = def_sum * inv;
        EpochStats& es = res.epochs[size_t(epoch)];
        es.irr += irr_mean;
        es.def += def_mean;
        es.total += irr_mean + def_mean;
        es.steps += 1;

        char line[160];
        std::snprintf(line, sizeof(line), "step=%lld epoch=%lld irr=%.6f def=%.6f total=%.6f",
                      (long long)(step + 1), (long long)(epoch + 1), irr_mean, def_mean,
                      irr_mean + def_mean);
        log << line << "\n";
        log.flush();
        if (echo) *echo << line << "\n";

        if (cfg.checkpoint_interval > 0 && (step + 1) % cfg.checkpoint_interval == 0 &&
            step + 1 < total_steps) {
            net::CheckpointMeta meta{cfg.seed, step + 1, epoch, true,
                                     echo_json};
            net::save_checkpoint(
                (fs::path(cfg.out_dir) / ("ckpt_step" + std::to_string(step + 1) + ".bin"))
                    .string(),
                res.model, meta, &res.opt.m, &res.opt.v);
        }
    }

    for (EpochStats& es : res.epochs)
        if (es.steps > 0) {
            es.irr /= es.steps;
            es.def /= es.steps;
            es.total /= es.steps;
        }
    res.step = total_steps;
    res.final_checkpoint = (fs::path(cfg.out_dir) / "ckpt_final.bin").string();
    net::CheckpointMeta meta{cfg.seed, total_steps, cfg.epochs - 1, true,
                             echo_json};
    net::save_checkpoint(res.final_checkpoint, res.model, meta, &res.opt.m, &res.opt.v);
    return res;
}

}  // namespace specdiff::train

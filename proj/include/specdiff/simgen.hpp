#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "json.hpp"
#include "specdiff/io.hpp"
#include "specdiff/registration.hpp"

namespace specdiff::simgen {

using registration::PoseSim2;

// ===========================================================================
// Configuration
// ===========================================================================

struct Range {
    double lo = 0.0, hi = 0.0;
};

struct IntRange {
    int lo = 0, hi = 0;
};

enum class ShapeKind { Rectangle, Ellipse, Triangle, Line };

inline const char* shape_kind_name(ShapeKind k) {
    switch (k) {
        case ShapeKind::Rectangle: return "rectangle";
        case ShapeKind::Ellipse: return "ellipse";
        case ShapeKind::Triangle: return "triangle";
        case ShapeKind::Line: return "line";
    }
    return "rectangle";
}

inline ShapeKind shape_kind_from_name(const std::string& s) {
    if (s == "rectangle") return ShapeKind::Rectangle;
    if (s == "ellipse") return ShapeKind::Ellipse;
    if (s == "triangle") return ShapeKind::Triangle;
    if (s == "line") return ShapeKind::Line;
    throw std::invalid_argument("unknown shape kind: " + s);
}

struct GenConfig {
    int image_size = 256;
    IntRange n_shapes{5, 15};
    std::vector<ShapeKind> shape_kinds{ShapeKind::Rectangle, ShapeKind::Ellipse,
                                       ShapeKind::Triangle, ShapeKind::Line};
    Range jitter_px{0.0, 3.0};
    IntRange n_defects{1, 3};
    Range defect_area_frac{0.0005, 0.01};
    Range translation{-50.0, 50.0};
    Range rotation{0.0, kPi};
    Range scale{0.8, 1.2};
    Range lighting_gain{0.8, 1.2};
    uint64_t seed = 1;
};

inline void validate_config(const GenConfig& cfg) {
    auto ordered = [](const Range& r) { return r.lo <= r.hi; };
    require(cfg.image_size >= 32, "gen config: image_size too small");
    require(cfg.n_shapes.lo >= 0 && cfg.n_shapes.lo <= cfg.n_shapes.hi,
            "gen config: bad n_shapes range");
    require(cfg.n_defects.lo >= 0 && cfg.n_defects.lo <= cfg.n_defects.hi,
            "gen config: bad n_defects range");
    require(!cfg.shape_kinds.empty(), "gen config: no shape kinds");
    require(ordered(cfg.jitter_px) && cfg.jitter_px.lo >= 0.0, "gen config: bad jitter range");
    require(ordered(cfg.defect_area_frac) && cfg.defect_area_frac.lo > 0.0 &&
                cfg.defect_area_frac.hi <= 0.01,
            "gen config: defect area fraction must stay within (0, 0.01]");
    require(ordered(cfg.translation), "gen config: bad translation range");
    require(ordered(cfg.rotation) && cfg.rotation.lo >= 0.0 && cfg.rotation.hi <= 2.0 * kPi,
            "gen config: rotation range outside [0, 2 pi)");
    // the aligner clamps scale to [0.5, 2]; generating outside that is unrecoverable
    require(ordered(cfg.scale) && cfg.scale.lo >= 0.5 && cfg.scale.hi <= 2.0,
            "gen config: scale range outside the alignment envelope [0.5, 2]");
    require(ordered(cfg.lighting_gain) && cfg.lighting_gain.lo >= 0.0,
            "gen config: bad lighting gain range");
}

// ===========================================================================
// Shape rendering. Every primitive is a signed distance; coverage ramps over
// one pixel for anti-aliasing and shapes composite in draw order.
// ===========================================================================

struct ShapeSpec {
    ShapeKind kind = ShapeKind::Rectangle;
    double cy = 0.0, cx = 0.0;  // center in pixels
    double p0 = 1.0, p1 = 1.0;  // half extents / radii, pixels
    double angle = 0.0;         // radians
    double value = 0.0;         // fill intensity
};

namespace detail {

inline double triangle_sdf(double px, double py, double ax, double ay, double bx, double by,
                           double cx, double cy) {
    auto dot2 = [](double x, double y) { return x * x + y * y; };
    double e0x = bx - ax, e0y = by - ay, v0x = px - ax, v0y = py - ay;
    double e1x = cx - bx, e1y = cy - by, v1x = px - bx, v1y = py - by;
    double e2x = ax - cx, e2y = ay - cy, v2x = px - cx, v2y = py - cy;
    double t0 = std::clamp((v0x * e0x + v0y * e0y) / dot2(e0x, e0y), 0.0, 1.0);
    double t1 = std::clamp((v1x * e1x + v1y * e1y) / dot2(e1x, e1y), 0.0, 1.0);
    double t2 = std::clamp((v2x * e2x + v2y * e2y) / dot2(e2x, e2y), 0.0, 1.0);
    double d = std::min({dot2(v0x - t0 * e0x, v0y - t0 * e0y),
                         dot2(v1x - t1 * e1x, v1y - t1 * e1y),
                         dot2(v2x - t2 * e2x, v2y - t2 * e2y)});
    double s = e0x * e2y - e0y * e2x >= 0.0 ? 1.0 : -1.0;
    double cmin = std::min({s * (v0x * e0y - v0y * e0x), s * (v1x * e1y - v1y * e1x),
                            s * (v2x * e2y - v2y * e2x)});
    return (cmin >= 0.0 ? -1.0 : 1.0) * std::sqrt(d);
}

}  // namespace detail

inline double shape_sdf(const ShapeSpec& s, double y, double x) {
    double ct = std::cos(s.angle), st = std::sin(s.angle);
    double dx = x - s.cx, dy = y - s.cy;
    double u = ct * dx + st * dy;   // local frame
    double v = -st * dx + ct * dy;
    switch (s.kind) {
        case ShapeKind::Rectangle: {
            double qx = std::abs(u) - s.p0, qy = std::abs(v) - s.p1;
            double ox = std::max(qx, 0.0), oy = std::max(qy, 0.0);
            return std::sqrt(ox * ox + oy * oy) + std::min(std::max(qx, qy), 0.0);
        }
        case ShapeKind::Ellipse: {
            double k = std::sqrt((u / s.p0) * (u / s.p0) + (v / s.p1) * (v / s.p1));
            return (k - 1.0) * std::min(s.p0, s.p1);
        }
        case ShapeKind::Triangle: {
            // isoceles-ish triangle: vertices at fixed local bearings with
            // radii p0, p1 and their mean
            const double r2 = 0.5 * (s.p0 + s.p1);
            const double a0 = -kPi / 2, a1 = kPi / 6, a2 = 5.0 * kPi / 6;
            return detail::triangle_sdf(u, v, s.p0 * std::cos(a0), s.p0 * std::sin(a0),
                                        s.p1 * std::cos(a1), s.p1 * std::sin(a1),
                                        r2 * std::cos(a2), r2 * std::sin(a2));
        }
        case ShapeKind::Line: {
            double h = std::clamp(u, -s.p0, s.p0);
            double t = std::max(1.0, 0.35 * s.p1);  // stroke half-thickness
            return std::sqrt((u - h) * (u - h) + v * v) - t;
        }
    }
    return 1e9;
}

inline double shape_radius(const ShapeSpec& s) {
    switch (s.kind) {
        case ShapeKind::Rectangle: return std::hypot(s.p0, s.p1);
        case ShapeKind::Ellipse: return std::max(s.p0, s.p1);
        case ShapeKind::Triangle: return std::max(s.p0, s.p1);
        case ShapeKind::Line: return s.p0 + std::max(1.0, 0.35 * s.p1);
    }
    return 0.0;
}

namespace detail {

template <typename Fn>
inline void for_shape_pixels(const Plane& img, const ShapeSpec& s, Fn&& fn) {
    double rad = shape_radius(s) + 1.5;
    int y0 = std::max(0, int(std::floor(s.cy - rad)));
    int y1 = std::min(img.rows - 1, int(std::ceil(s.cy + rad)));
    int x0 = std::max(0, int(std::floor(s.cx - rad)));
    int x1 = std::min(img.cols - 1, int(std::ceil(s.cx + rad)));
    for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x) {
            double cov = std::clamp(0.5 - shape_sdf(s, double(y), double(x)), 0.0, 1.0);
            if (cov > 0.0) fn(y, x, cov);
        }
}

}  // namespace detail

inline void render_shape(Plane& img, const ShapeSpec& s) {
    detail::for_shape_pixels(
        img, s, [&](int y, int x, double cov) {
            img.at(y, x) = img.at(y, x) * (1.0 - cov) + s.value * cov;
        });
}

/** Marks pixels whose coverage is majority-inside; used for ground truth. */
inline void render_mask(Plane& mask, const ShapeSpec& s) {
    detail::for_shape_pixels(mask, s, [&](int y, int x, double cov) {
        if (cov > 0.5) mask.at(y, x) = 1.0;
    });
}

// ===========================================================================
// Template and pair generation
// ===========================================================================

constexpr double kBackground = 0.5;

struct TemplateDraw {
    ImageBuf image;
    std::vector<ShapeSpec> shapes;
};

namespace detail {

inline ShapeSpec draw_shape(Rng& rng, const GenConfig& cfg) {
    const double n = cfg.image_size;
    ShapeSpec s;
    s.kind = cfg.shape_kinds[size_t(rng.uniform_int(0, int(cfg.shape_kinds.size()) - 1))];
    s.cy = rng.uniform(0.15 * n, 0.85 * n);
    s.cx = rng.uniform(0.15 * n, 0.85 * n);
    s.p0 = rng.uniform(0.03 * n, 0.12 * n);
    s.p1 = rng.uniform(0.03 * n, 0.12 * n);
    s.angle = rng.uniform(0.0, kPi);
    s.value = rng.next_double();
    return s;
}

inline ImageBuf plane_to_image(const Plane& p) {
    ImageBuf out(p.rows, p.cols, 1);
    out.v = p.v;
    return out;
}

inline TemplateDraw draw_template(Rng& rng, const GenConfig& cfg) {
    TemplateDraw t;
    int n = int(rng.uniform_int(cfg.n_shapes.lo, cfg.n_shapes.hi));
    t.shapes.reserve(size_t(n));
    for (int i = 0; i < n; ++i) t.shapes.push_back(draw_shape(rng, cfg));
    Plane img(cfg.image_size, cfg.image_size);
    std::fill(img.v.begin(), img.v.end(), kBackground);
    for (const ShapeSpec& s : t.shapes) render_shape(img, s);
    t.image = plane_to_image(img);
    return t;
}

}  // namespace detail

inline ImageBuf gen_template(uint64_t seed, const GenConfig& cfg) {
    validate_config(cfg);
    Rng rng(seed);
    return detail::draw_template(rng, cfg).image;
}

/** Shape inventory behind a template draw, for tests that count instances. */
inline TemplateDraw gen_template_trace(uint64_t seed, const GenConfig& cfg) {
    validate_config(cfg);
    Rng rng(seed);
    return detail::draw_template(rng, cfg);
}

struct SamplePair {
    ImageBuf tmpl;
    ImageBuf source;
    Plane gt_mask;  // binary, in the source frame
    PoseSim2 gt_pose;
    bool has_gt_pose = true;
    uint64_t seed = 0;
};

/** gen_pair plus the intermediates that only tests care about. */
struct PairTrace {
    SamplePair pair;
    Plane pre_pose;  // defected render with lighting applied, before the pose warp
    std::vector<ShapeSpec> defects;
    double gain = 1.0;
};

namespace detail {

inline bool is_identity(const PoseSim2& p) {
    return p.theta == 0.0 && p.scale == 1.0 && p.t_x == 0.0 && p.t_y == 0.0;
}

/** Defect shape sized so its filled area is roughly `area` square pixels. */
inline ShapeSpec draw_defect(Rng& rng, const GenConfig& cfg, double area, const Plane& under) {
    const double n = cfg.image_size;
    ShapeSpec d;
    d.kind = cfg.shape_kinds[size_t(rng.uniform_int(0, int(cfg.shape_kinds.size()) - 1))];
    d.cy = rng.uniform(0.15 * n, 0.85 * n);
    d.cx = rng.uniform(0.15 * n, 0.85 * n);
    d.angle = rng.uniform(0.0, kPi);
    double aspect = rng.uniform(0.5, 2.0);
    switch (d.kind) {
        case ShapeKind::Rectangle:
            d.p0 = 0.5 * std::sqrt(area * aspect);
            d.p1 = 0.5 * std::sqrt(area / aspect);
            break;
        case ShapeKind::Ellipse:
            d.p0 = std::sqrt(area * aspect / kPi);
            d.p1 = std::sqrt(area / (aspect * kPi));
            break;
        case ShapeKind::Triangle: {
            double r = std::sqrt(area / 1.3);
            d.p0 = r * std::sqrt(aspect);
            d.p1 = r / std::sqrt(aspect);
            break;
        }
        case ShapeKind::Line: {
            double elong = 2.0 + 4.0 * aspect;
            double t = std::max(1.0, std::sqrt(area / (4.0 * elong)));
            d.p0 = area / (4.0 * t);
            d.p1 = t / 0.35;  // stroke thickness derives from p1
            break;
        }
    }
    d.p0 = std::max(d.p0, 1.0);
    d.p1 = std::max(d.p1, 1.0);
    // pick an intensity that contrasts with what the defect lands on
    double rad = shape_radius(d);
    int y0 = std::clamp(int(d.cy - rad), 0, under.rows - 1);
    int y1 = std::clamp(int(d.cy + rad), 0, under.rows - 1);
    int x0 = std::clamp(int(d.cx - rad), 0, under.cols - 1);
    int x1 = std::clamp(int(d.cx + rad), 0, under.cols - 1);
    double mean = 0.0;
    int count = 0;
    for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x) {
            mean += under.at(y, x);
            ++count;
        }
    mean = count > 0 ? mean / count : kBackground;
    double u = rng.next_double();
    d.value = mean < 0.5 ? 0.75 + 0.25 * u : 0.25 * u;
    return d;
}

}  // namespace detail

inline PairTrace gen_pair_trace(uint64_t seed, const GenConfig& cfg) {
    validate_config(cfg);
    Rng rng(seed);
    TemplateDraw td = detail::draw_template(rng, cfg);

    // per-shape translational jitter; the draw order never depends on values
    std::vector<ShapeSpec> moved = td.shapes;
    for (ShapeSpec& s : moved) {
        double mag = rng.uniform(cfg.jitter_px.lo, cfg.jitter_px.hi);
        double dir = rng.uniform(0.0, 2.0 * kPi);
        s.cy += mag * std::sin(dir);
        s.cx += mag * std::cos(dir);
    }

    PoseSim2 pose;
    pose.theta = rng.uniform(cfg.rotation.lo, cfg.rotation.hi);
    pose.scale = rng.uniform(cfg.scale.lo, cfg.scale.hi);
    pose.t_x = rng.uniform(cfg.translation.lo, cfg.translation.hi);
    pose.t_y = rng.uniform(cfg.translation.lo, cfg.translation.hi);
    double gain = rng.uniform(cfg.lighting_gain.lo, cfg.lighting_gain.hi);
    const bool identity = detail::is_identity(pose);

    Plane base(cfg.image_size, cfg.image_size);
    std::fill(base.v.begin(), base.v.end(), kBackground);
    for (const ShapeSpec& s : moved) render_shape(base, s);

    // inject defects; accept only when the emitted source-frame mask area
    // lands inside the configured bounds
    const double area_px = double(cfg.image_size) * double(cfg.image_size);
    std::vector<ShapeSpec> defects;
    Plane mask_src(cfg.image_size, cfg.image_size);
    bool accepted = false;
    for (int attempt = 0; attempt < 100 && !accepted; ++attempt) {
        int nd = int(rng.uniform_int(cfg.n_defects.lo, cfg.n_defects.hi));
        if (nd == 0) {
            defects.clear();
            std::fill(mask_src.v.begin(), mask_src.v.end(), 0.0);
            accepted = true;
            break;
        }
        double target = rng.uniform(cfg.defect_area_frac.lo, cfg.defect_area_frac.hi);
        std::vector<ShapeSpec> cand;
        Plane m(cfg.image_size, cfg.image_size);
        for (int i = 0; i < nd; ++i) {
            ShapeSpec d = detail::draw_defect(rng, cfg, target / nd * area_px, base);
            render_mask(m, d);
            cand.push_back(d);
        }
        Plane wm = m;
        if (!identity) {
            wm = registration::warp_sim2(m, pose);
            for (double& v : wm.v) v = v > 0.5 ? 1.0 : 0.0;
        }
        double frac = 0.0;
        for (double v : wm.v) frac += v;
        frac /= area_px;
        if (frac >= cfg.defect_area_frac.lo && frac <= cfg.defect_area_frac.hi) {
            defects = std::move(cand);
            mask_src = std::move(wm);
            accepted = true;
        }
    }
    require(accepted, "gen_pair: no defect draw satisfied the area bounds in 100 attempts");

    Plane defected = base;
    for (const ShapeSpec& d : defects) render_shape(defected, d);
    for (double& v : defected.v) v = std::clamp(v * gain, 0.0, 1.0);

    PairTrace out;
    out.pre_pose = defected;
    out.defects = std::move(defects);
    out.gain = gain;
    out.pair.tmpl = std::move(td.image);
    out.pair.source =
        identity ? detail::plane_to_image(defected)
                 : detail::plane_to_image(registration::warp_sim2(defected, pose));
    out.pair.gt_mask = std::move(mask_src);
    out.pair.gt_pose = pose;
    out.pair.has_gt_pose = true;
    out.pair.seed = seed;
    return out;
}

inline SamplePair gen_pair(uint64_t seed, const GenConfig& cfg) {
    return gen_pair_trace(seed, cfg).pair;
}

/** Pair i draws from its own stream keyed by (dataset seed, i), so order of
    generation cannot change any pair. */
inline uint64_t pair_seed(uint64_t dataset_seed, uint64_t index) {
    return Rng(dataset_seed, index).next_u64();
}

inline std::vector<SamplePair> gen_dataset(const GenConfig& cfg, int count) {
    require(count >= 0, "gen_dataset: negative count");
    std::vector<SamplePair> out;
    out.reserve(size_t(count));
    for (int i = 0; i < count; ++i) out.push_back(gen_pair(pair_seed(cfg.seed, uint64_t(i)), cfg));
    return out;
}

// ===========================================================================
// Dataset directory format
// ===========================================================================

constexpr int kDatasetFormatVersion = 1;

inline nlohmann::json config_to_json(const GenConfig& c) {
    nlohmann::json j;
    j["image_size"] = c.image_size;
    j["n_shapes"] = {c.n_shapes.lo, c.n_shapes.hi};
    std::vector<std::string> kinds;
    for (ShapeKind k : c.shape_kinds) kinds.emplace_back(shape_kind_name(k));
    j["shape_kinds"] = kinds;
    j["jitter_px"] = {c.jitter_px.lo, c.jitter_px.hi};
    j["n_defects"] = {c.n_defects.lo, c.n_defects.hi};
    j["defect_area_frac"] = {c.defect_area_frac.lo, c.defect_area_frac.hi};
    j["translation"] = {c.translation.lo, c.translation.hi};
    j["rotation"] = {c.rotation.lo, c.rotation.hi};
    j["scale"] = {c.scale.lo, c.scale.hi};
    j["lighting_gain"] = {c.lighting_gain.lo, c.lighting_gain.hi};
    j["seed"] = c.seed;
    return j;
}

inline GenConfig config_from_json(const nlohmann::json& j) {
    GenConfig c;
    auto range = [&](const char* key, Range d) {
        if (!j.contains(key)) return d;
        return Range{j[key][0].get<double>(), j[key][1].get<double>()};
    };
    auto irange = [&](const char* key, IntRange d) {
        if (!j.contains(key)) return d;
        return IntRange{j[key][0].get<int>(), j[key][1].get<int>()};
    };
    c.image_size = j.value("image_size", c.image_size);
    c.n_shapes = irange("n_shapes", c.n_shapes);
    if (j.contains("shape_kinds")) {
        c.shape_kinds.clear();
        for (const auto& s : j["shape_kinds"])
            c.shape_kinds.push_back(shape_kind_from_name(s.get<std::string>()));
    }
    c.jitter_px = range("jitter_px", c.jitter_px);
    c.n_defects = irange("n_defects", c.n_defects);
    c.defect_area_frac = range("defect_area_frac", c.defect_area_frac);
    c.translation = range("translation", c.translation);
    c.rotation = range("rotation", c.rotation);
    c.scale = range("scale", c.scale);
    c.lighting_gain = range("lighting_gain", c.lighting_gain);
    c.seed = j.value("seed", c.seed);
    validate_config(c);
    return c;
}

/** Applies flat key=value settings (ranges as "lo,hi") onto a config. */
inline void apply_config_kv(GenConfig& c, const std::map<std::string, std::string>& kv) {
    auto split2 = [](const std::string& s, const std::string& key) {
        size_t comma = s.find(',');
        require(comma != std::string::npos, "gen config: " + key + " wants \"lo,hi\"");
        return std::pair<std::string, std::string>{s.substr(0, comma), s.substr(comma + 1)};
    };
    for (const auto& [key, value] : kv) {
        if (key == "image_size") {
            c.image_size = std::stoi(value);
        } else if (key == "n_shapes") {
            auto [lo, hi] = split2(value, key);
            c.n_shapes = {std::stoi(lo), std::stoi(hi)};
        } else if (key == "shape_kinds") {
            c.shape_kinds.clear();
            std::istringstream in(value);
            std::string tok;
            while (std::getline(in, tok, ',')) c.shape_kinds.push_back(shape_kind_from_name(tok));
        } else if (key == "jitter_px") {
            auto [lo, hi] = split2(value, key);
            c.jitter_px = {std::stod(lo), std::stod(hi)};
        } else if (key == "n_defects") {
            auto [lo, hi] = split2(value, key);
            c.n_defects = {std::stoi(lo), std::stoi(hi)};
        } else if (key == "defect_area_frac") {
            auto [lo, hi] = split2(value, key);
            c.defect_area_frac = {std::stod(lo), std::stod(hi)};
        } else if (key == "translation") {
            auto [lo, hi] = split2(value, key);
            c.translation = {std::stod(lo), std::stod(hi)};
        } else if (key == "rotation") {
            auto [lo, hi] = split2(value, key);
            c.rotation = {std::stod(lo), std::stod(hi)};
        } else if (key == "scale") {
            auto [lo, hi] = split2(value, key);
            c.scale = {std::stod(lo), std::stod(hi)};
        } else if (key == "lighting_gain") {
            auto [lo, hi] = split2(value, key);
            c.lighting_gain = {std::stod(lo), std::stod(hi)};
        } else if (key == "seed") {
            c.seed = std::stoull(value);
        } else {
            throw std::invalid_argument("gen config: unknown key \"" + key + "\"");
        }
    }
    validate_config(c);
}

inline std::string pair_id(int index) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%06d", index);
    return buf;
}

inline void write_dataset(const std::vector<SamplePair>& pairs, const std::string& dir,
                          const GenConfig& cfg) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    for (size_t i = 0; i < pairs.size(); ++i) {
        const SamplePair& p = pairs[i];
        std::string stem = (fs::path(dir) / pair_id(int(i))).string();
        io::write_png(stem + "_template.png", p.tmpl);
        io::write_png(stem + "_source.png", p.source);
        io::write_png(stem + "_mask.png", p.gt_mask);
        nlohmann::json meta;
        meta["seed"] = p.seed;
        meta["theta_deg"] = p.gt_pose.theta * 180.0 / kPi;
        meta["scale"] = p.gt_pose.scale;
        meta["tx"] = p.gt_pose.t_x;
        meta["ty"] = p.gt_pose.t_y;
        meta["config"] = config_to_json(cfg);
        std::ofstream(stem + "_meta.json") << meta.dump(2) << "\n";
    }
    nlohmann::json manifest;
    manifest["format_version"] = kDatasetFormatVersion;
    manifest["count"] = pairs.size();
    manifest["config"] = config_to_json(cfg);
    std::ofstream((std::filesystem::path(dir) / "manifest.json").string())
        << manifest.dump(2) << "\n";
}

/** Pair ids present in a dataset directory, discovered by globbing
    `*_template.png`. Bare directories that ship only image triples (no
    per-pair metadata, no manifest) are valid; when a manifest exists its
    version and count must match. */
inline std::vector<std::string> list_pair_ids(const std::string& dir) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(dir))
        throw std::runtime_error("read_dataset: not a directory: " + dir);
    std::vector<std::string> stems;
    const std::string suffix = "_template.png";
    for (const auto& e : fs::directory_iterator(dir)) {
        std::string name = e.path().filename().string();
        if (name.size() > suffix.size() &&
            name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0)
            stems.push_back(name.substr(0, name.size() - suffix.size()));
    }
    std::sort(stems.begin(), stems.end());
    if (fs::exists(fs::path(dir) / "manifest.json")) {
        nlohmann::json manifest;
        std::ifstream in((fs::path(dir) / "manifest.json").string());
        in >> manifest;
        if (manifest.value("format_version", -1) != kDatasetFormatVersion)
            throw std::runtime_error("read_dataset: dataset format version mismatch");
        if (manifest.value("count", size_t(0)) != stems.size())
            throw std::runtime_error("read_dataset: manifest count differs from files present");
    }
    return stems;
}

/** Loads one triple; pose comes from `{id}_meta.json` when present,
    otherwise it is flagged absent (inference-only data). */
inline SamplePair read_pair(const std::string& dir, const std::string& id) {
    namespace fs = std::filesystem;
    std::string base = (fs::path(dir) / id).string();
    SamplePair p;
    p.tmpl = io::read_png(base + "_template.png");
    if (!fs::exists(base + "_source.png") || !fs::exists(base + "_mask.png"))
        throw std::runtime_error("read_dataset: incomplete triple for id " + id);
    p.source = io::read_png(base + "_source.png");
    ImageBuf mask = io::read_png(base + "_mask.png");
    p.gt_mask = spectral::to_grayscale(mask);
    for (double& v : p.gt_mask.v) v = v > 0.5 ? 1.0 : 0.0;
    if (fs::exists(base + "_meta.json")) {
        nlohmann::json meta;
        std::ifstream in(base + "_meta.json");
        in >> meta;
        p.seed = meta.value("seed", uint64_t(0));
        p.gt_pose.theta = meta.value("theta_deg", 0.0) * kPi / 180.0;
        p.gt_pose.scale = meta.value("scale", 1.0);
        p.gt_pose.t_x = meta.value("tx", 0.0);
        p.gt_pose.t_y = meta.value("ty", 0.0);
        p.has_gt_pose = true;
    } else {
        p.gt_pose = PoseSim2{};
        p.has_gt_pose = false;
    }
    return p;
}

inline std::vector<SamplePair> read_dataset(const std::string& dir) {
    std::vector<SamplePair> out;
    for (const std::string& id : list_pair_ids(dir)) out.push_back(read_pair(dir, id));
    return out;
}

}  // namespace specdiff::simgen

#pragma once

#include <functional>
#include <iomanip>
#include <sstream>

#include "specdiff/net.hpp"
#include "specdiff/simgen.hpp"

namespace specdiff::evalkit {

// ===========================================================================
// Pixel precision/recall sweep.
//
// Thresholds are the distinct positive prediction values themselves (rank
// subsampled to the requested count), not a fixed grid: that makes the swept
// operating points, and therefore AP and MaxF1, exactly invariant under any
// strictly monotone remapping of the predictions. Sigmoid-bounded outputs
// never sit at 0, so excluding 0 only affects the degenerate all-zero map,
// which scores an empty prediction at every threshold.
// ===========================================================================

struct PRCurve {
    std::vector<double> thresholds;  // descending
    std::vector<double> precision;
    std::vector<double> recall;
};

namespace detail {

/** Descending distinct positive values, rank-subsampled to at most n. */
inline std::vector<double> select_thresholds(const std::vector<double>& pred, int n) {
    std::vector<double> vals;
    vals.reserve(pred.size());
    for (double v : pred)
        if (v > 0.0) vals.push_back(v);
    if (vals.empty()) return {1.0};
    std::sort(vals.begin(), vals.end(), std::greater<>());
    vals.erase(std::unique(vals.begin(), vals.end()), vals.end());
    int m = int(vals.size());
    if (m <= n) return vals;
    std::vector<double> out;
    out.reserve(size_t(n));
    for (int j = 0; j < n; ++j) {
        int idx = int(std::llround(double(j) * (m - 1) / double(n - 1)));
        if (out.empty() || vals[size_t(idx)] != out.back()) out.push_back(vals[size_t(idx)]);
    }
    return out;
}

}  // namespace detail

inline PRCurve pr_curve(const Plane& pred, const Plane& gt, int n_thresholds = 256) {
    require(pred.rows == gt.rows && pred.cols == gt.cols, "pr_curve: shape mismatch");
    require(n_thresholds >= 2, "pr_curve: need at least 2 thresholds");
    size_t n_pos = 0;
    for (double v : gt.v) {
        require(v == 0.0 || v == 1.0, "pr_curve: ground truth must be binary");
        if (v == 1.0) ++n_pos;
    }

    PRCurve c;
    c.thresholds = detail::select_thresholds(pred.v, n_thresholds);

    // one descending sweep: pixels sorted by prediction, cumulative counts
    std::vector<size_t> order(pred.v.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(),
              [&](size_t a, size_t b) { return pred.v[a] > pred.v[b]; });
    size_t tp = 0, fp = 0, i = 0;
    for (double t : c.thresholds) {
        for (; i < order.size() && pred.v[order[i]] >= t; ++i)
            (gt.v[order[i]] == 1.0 ? tp : fp)++;
        double prec = tp + fp == 0 ? 1.0 : double(tp) / double(tp + fp);
        double rec = n_pos == 0 ? 1.0 : double(tp) / double(n_pos);
        c.precision.push_back(prec);
        c.recall.push_back(rec);
    }
    return c;
}

/** Step-summed area under the curve in increasing-recall order. */
inline double average_precision(const PRCurve& c) {
    require(!c.thresholds.empty(), "average_precision: empty curve");
    double ap = 0.0, prev = 0.0;
    // descending thresholds give nondecreasing recall, which is the
    // increasing-recall order the step sum wants
    for (size_t i = 0; i < c.precision.size(); ++i) {
        ap += (c.recall[i] - prev) * c.precision[i];
        prev = c.recall[i];
    }
    return ap;
}

struct MaxF1 {
    double f1 = 0.0;
    double threshold = 1.0;
};

inline MaxF1 max_f1(const PRCurve& c) {
    require(!c.thresholds.empty(), "max_f1: empty curve");
    MaxF1 best;
    for (size_t i = 0; i < c.precision.size(); ++i) {
        double p = c.precision[i], r = c.recall[i];
        double f1 = p + r == 0.0 ? 0.0 : 2.0 * p * r / (p + r);
        if (f1 > best.f1) {
            best.f1 = f1;
            best.threshold = c.thresholds[i];
        }
    }
    return best;
}

// ===========================================================================
// Small comparison helpers used by the post-training property checks
// ===========================================================================

/** Pearson-normalized cross-correlation; 0 when either side is constant. */
inline double ncc(const Plane& a, const Plane& b) {
    require(a.rows == b.rows && a.cols == b.cols, "ncc: shape mismatch");
    double ma = 0.0, mb = 0.0;
    for (size_t i = 0; i < a.v.size(); ++i) {
        ma += a.v[i];
        mb += b.v[i];
    }
    ma /= double(a.v.size());
    mb /= double(b.v.size());
    double cov = 0.0, va = 0.0, vb = 0.0;
    for (size_t i = 0; i < a.v.size(); ++i) {
        double da = a.v[i] - ma, db = b.v[i] - mb;
        cov += da * db;
        va += da * da;
        vb += db * db;
    }
    // mean subtraction leaves rounding residue on constant planes; treat
    // vanishing variance as constant
    if (va <= 1e-24 || vb <= 1e-24) return 0.0;
    return cov / std::sqrt(va * vb);
}

inline double iou(const Plane& pred, const Plane& gt, double threshold = 0.5) {
    require(pred.rows == gt.rows && pred.cols == gt.cols, "iou: shape mismatch");
    size_t inter = 0, uni = 0;
    for (size_t i = 0; i < pred.v.size(); ++i) {
        bool p = pred.v[i] >= threshold, g = gt.v[i] > 0.5;
        inter += p && g;
        uni += p || g;
    }
    return uni == 0 ? 1.0 : double(inter) / double(uni);
}

inline Plane crop_interior(const Plane& p, int margin) {
    if (margin <= 0 || p.rows <= 2 * margin || p.cols <= 2 * margin) return p;
    Plane out(p.rows - 2 * margin, p.cols - 2 * margin);
    for (int r = 0; r < out.rows; ++r)
        for (int c = 0; c < out.cols; ++c) out.at(r, c) = p.at(r + margin, c + margin);
    return out;
}

// ===========================================================================
// Dataset-level evaluation
// ===========================================================================

struct PairRecord {
    std::string id;
    double ap = 0.0;
    double max_f1 = 0.0;
    double best_threshold = 1.0;
};

struct EvalReport {
    double ap = 0.0;
    double max_f1 = 0.0;
    std::vector<PairRecord> pairs;
    int warnings = 0;  // unreadable pairs skipped
    std::string dataset_dir;
    int n_thresholds = 256;
};

struct EvalOptions {
    int n_thresholds = 256;
    // registration makes a border ring unreliable; metrics ignore it
    int margin = registration::kBorderMargin;
    // replaces the model prediction when set; lets tests inject an oracle
    std::function<Plane(const net::FullForward&, const simgen::SamplePair&)> predictor;
};

inline EvalReport evaluate_dataset(net::Model& model, const std::string& dataset_dir,
                                   const EvalOptions& opts = {}) {
    EvalReport rep;
    rep.dataset_dir = dataset_dir;
    rep.n_thresholds = opts.n_thresholds;
    for (const std::string& id : simgen::list_pair_ids(dataset_dir)) {
        simgen::SamplePair pair;
        try {
            pair = simgen::read_pair(dataset_dir, id);
        } catch (const std::exception&) {
            ++rep.warnings;
            continue;
        }
        net::FullForward f = net::full_forward(model, pair.tmpl, pair.source);
        Plane pred = opts.predictor ? opts.predictor(f, pair) : net::channel_plane(f.mask_out, 0);
        PRCurve curve = pr_curve(crop_interior(pred, opts.margin),
                                 crop_interior(pair.gt_mask, opts.margin), opts.n_thresholds);
        MaxF1 mf = max_f1(curve);
        rep.pairs.push_back({id, average_precision(curve), mf.f1, mf.threshold});
    }
    for (const PairRecord& p : rep.pairs) {
        rep.ap += p.ap;
        rep.max_f1 += p.max_f1;
    }
    if (!rep.pairs.empty()) {
        rep.ap /= double(rep.pairs.size());
        rep.max_f1 /= double(rep.pairs.size());
    }
    return rep;
}

inline std::string format_report(const EvalReport& rep) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(4);
    os << "# dataset: " << rep.dataset_dir << "\n";
    os << "# thresholds: " << rep.n_thresholds << "  pairs: " << rep.pairs.size()
       << "  skipped: " << rep.warnings << "\n";
    os << "# id ap max_f1 best_threshold\n";
    for (const PairRecord& p : rep.pairs)
        os << p.id << " " << p.ap << " " << p.max_f1 << " " << p.best_threshold << "\n";
    os << "aggregate ap " << rep.ap << "\n";
    os << "aggregate max_f1 " << rep.max_f1 << "\n";
    return os.str();
}

/** Source image with the thresholded prediction burned in as red. */
inline ImageBuf overlay(const ImageBuf& source, const Plane& pred, double threshold = 0.5) {
    Plane gray = spectral::to_grayscale(source);
    require(gray.rows == pred.rows && gray.cols == pred.cols, "overlay: shape mismatch");
    ImageBuf out(gray.rows, gray.cols, 3);
    for (int r = 0; r < gray.rows; ++r)
        for (int c = 0; c < gray.cols; ++c) {
            double v = gray.at(r, c);
            bool hit = pred.at(r, c) >= threshold;
            out.at(r, c, 0) = hit ? 1.0 : v;
            out.at(r, c, 1) = hit ? 0.15 : v;
            out.at(r, c, 2) = hit ? 0.15 : v;
        }
    return out;
}

}  // namespace specdiff::evalkit

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <limits>
#include <map>
#include <numbers>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "iseg/error.hpp"
#include "iseg/imaging.hpp"
#include "iseg/losses.hpp"

namespace iseg::metrics {

/// MSE after rescaling the prediction by the least-squares optimal brightness factor.
inline double mse_brightness_adjusted(const Tensor& pred, const Tensor& truth) { return loss::smse(pred, truth); }

/// Local MSE: mean SMSE over k x k windows placed at stride k/2 on a (C, H, W) image.
/// A window where the prediction is all zero (or anti-correlated) contributes mean(truth^2).
inline double lmse(const Tensor& pred, const Tensor& truth, std::size_t k = 20) {
    require_same_shape(pred, truth, "lmse");
    if (pred.rank() != 3) throw ShapeError("lmse: expected (C,H,W), got " + to_string(pred.shape()));
    const std::size_t C = pred.dim(0), H = pred.dim(1), W = pred.dim(2);
    if (k < 2 || H < k || W < k) {
        throw PreconditionError("lmse: image " + to_string(pred.shape()) + " smaller than window " + std::to_string(k));
    }
    const std::size_t step = k / 2;
    double total = 0;
    std::size_t windows = 0;
    for (std::size_t y0 = 0; y0 + k <= H; y0 += step) {
        for (std::size_t x0 = 0; x0 + k <= W; x0 += step) {
            double jj = 0, jt = 0;
            for (std::size_t c = 0; c < C; ++c) {
                for (std::size_t y = y0; y < y0 + k; ++y) {
                    for (std::size_t x = x0; x < x0 + k; ++x) {
                        jj += double(pred(c, y, x)) * pred(c, y, x);
                        jt += double(pred(c, y, x)) * truth(c, y, x);
                    }
                }
            }
            const double alpha = jj > 0 ? std::max(0.0, jt / jj) : 0.0;
            double err = 0;
            for (std::size_t c = 0; c < C; ++c) {
                for (std::size_t y = y0; y < y0 + k; ++y) {
                    for (std::size_t x = x0; x < x0 + k; ++x) {
                        const double d = alpha * pred(c, y, x) - truth(c, y, x);
                        err += d * d;
                    }
                }
            }
            total += err / double(C * k * k);
            ++windows;
        }
    }
    return total / double(windows);
}

namespace detail {

inline std::vector<double> gaussian_kernel(std::size_t size, double sigma) {
    std::vector<double> g(size);
    const double mid = double(size - 1) / 2.0;
    double s = 0;
    for (std::size_t i = 0; i < size; ++i) {
        g[i] = std::exp(-(double(i) - mid) * (double(i) - mid) / (2 * sigma * sigma));
        s += g[i];
    }
    for (auto& v : g) v /= s;
    return g;
}

/// Separable "valid" Gaussian filtering of an h x w plane.
inline std::vector<double> filter_valid(const std::vector<double>& img, std::size_t h, std::size_t w,
                                        const std::vector<double>& g) {
    const std::size_t k = g.size(), oh = h - k + 1, ow = w - k + 1;
    std::vector<double> rows(h * ow);
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < ow; ++x) {
            double acc = 0;
            for (std::size_t i = 0; i < k; ++i) acc += g[i] * img[y * w + x + i];
            rows[y * ow + x] = acc;
        }
    }
    std::vector<double> out(oh * ow);
    for (std::size_t y = 0; y < oh; ++y) {
        for (std::size_t x = 0; x < ow; ++x) {
            double acc = 0;
            for (std::size_t i = 0; i < k; ++i) acc += g[i] * rows[(y + i) * ow + x];
            out[y * ow + x] = acc;
        }
    }
    return out;
}

}  // namespace detail

inline constexpr std::size_t kSsimWindow = 11;
inline constexpr double kSsimSigma = 1.5;
inline constexpr double kSsimC1 = 0.01 * 0.01;
inline constexpr double kSsimC2 = 0.03 * 0.03;

/// Mean SSIM (11x11 Gaussian window, sigma 1.5, valid positions), averaged over channels.
inline double ssim(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "ssim");
    if (a.rank() != 3) throw ShapeError("ssim: expected (C,H,W), got " + to_string(a.shape()));
    const std::size_t C = a.dim(0), H = a.dim(1), W = a.dim(2);
    if (H < kSsimWindow || W < kSsimWindow) {
        throw PreconditionError("ssim: image " + to_string(a.shape()) + " smaller than the 11x11 window");
    }
    const auto g = detail::gaussian_kernel(kSsimWindow, kSsimSigma);
    double total = 0;
    for (std::size_t c = 0; c < C; ++c) {
        std::vector<double> x(H * W), y(H * W), xx(H * W), yy(H * W), xy(H * W);
        for (std::size_t i = 0; i < H * W; ++i) {
            x[i] = a[c * H * W + i];
            y[i] = b[c * H * W + i];
            xx[i] = x[i] * x[i];
            yy[i] = y[i] * y[i];
            xy[i] = x[i] * y[i];
        }
        const auto mx = detail::filter_valid(x, H, W, g), my = detail::filter_valid(y, H, W, g);
        const auto mxx = detail::filter_valid(xx, H, W, g), myy = detail::filter_valid(yy, H, W, g);
        const auto mxy = detail::filter_valid(xy, H, W, g);
        double s = 0;
        for (std::size_t i = 0; i < mx.size(); ++i) {
            const double vx = mxx[i] - mx[i] * mx[i], vy = myy[i] - my[i] * my[i], cxy = mxy[i] - mx[i] * my[i];
            s += ((2 * mx[i] * my[i] + kSsimC1) * (2 * cxy + kSsimC2)) /
                 ((mx[i] * mx[i] + my[i] * my[i] + kSsimC1) * (vx + vy + kSsimC2));
        }
        total += s / double(mx.size());
    }
    return total / double(C);
}

inline double dssim(const Tensor& a, const Tensor& b) { return (1.0 - ssim(a, b)) / 2.0; }

/// C x C pixel counts; rows are ground truth, columns prediction.
struct ConfusionMatrix {
    std::size_t num_classes = 0;
    std::vector<std::uint64_t> counts;

    ConfusionMatrix() = default;
    explicit ConfusionMatrix(std::size_t c) : num_classes(c), counts(c * c, 0) {}

    std::uint64_t& at(std::size_t truth, std::size_t pred) { return counts[truth * num_classes + pred]; }
    std::uint64_t at(std::size_t truth, std::size_t pred) const { return counts[truth * num_classes + pred]; }
    std::uint64_t total() const {
        std::uint64_t t = 0;
        for (auto v : counts) t += v;
        return t;
    }
    std::uint64_t row_sum(std::size_t c) const {
        std::uint64_t t = 0;
        for (std::size_t p = 0; p < num_classes; ++p) t += at(c, p);
        return t;
    }
    std::uint64_t col_sum(std::size_t c) const {
        std::uint64_t t = 0;
        for (std::size_t r = 0; r < num_classes; ++r) t += at(r, c);
        return t;
    }

    ConfusionMatrix& operator+=(const ConfusionMatrix& o) {
        if (o.num_classes != num_classes) throw ShapeError("confusion matrices have different class counts");
        for (std::size_t i = 0; i < counts.size(); ++i) counts[i] += o.counts[i];
        return *this;
    }

    friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;
};

inline ConfusionMatrix confusion(const LabelMap& pred, const LabelMap& truth, std::size_t num_classes) {
    if (pred.data.shape() != truth.data.shape()) {
        throw ShapeError("confusion: label maps " + to_string(pred.data.shape()) + " and " +
                         to_string(truth.data.shape()) + " differ");
    }
    ConfusionMatrix cm(num_classes);
    for (std::size_t i = 0; i < pred.data.size(); ++i) {
        const std::size_t p = pred.data[i], t = truth.data[i];
        if (p >= num_classes || t >= num_classes) {
            throw RangeError("confusion: label " + std::to_string(std::max(p, t)) + " >= num_classes " +
                             std::to_string(num_classes));
        }
        ++cm.at(t, p);
    }
    return cm;
}

struct SegScores {
    double global = 0;
    double class_average = 0;
    double miou = 0;
};

inline SegScores seg_scores(const ConfusionMatrix& cm) {
    const auto total = cm.total();
    if (total == 0) throw DegenerateInputError("seg_scores: confusion matrix is empty");
    SegScores s;
    std::uint64_t diag = 0;
    double acc_sum = 0, iou_sum = 0;
    std::size_t acc_n = 0, iou_n = 0;
    for (std::size_t c = 0; c < cm.num_classes; ++c) {
        const auto d = cm.at(c, c), r = cm.row_sum(c), u = r + cm.col_sum(c) - d;
        diag += d;
        if (r > 0) {
            acc_sum += double(d) / double(r);
            ++acc_n;
        }
        if (u > 0) {
            iou_sum += double(d) / double(u);
            ++iou_n;
        }
    }
    s.global = double(diag) / double(total);
    s.class_average = acc_n ? acc_sum / double(acc_n) : 0.0;
    s.miou = iou_n ? iou_sum / double(iou_n) : 0.0;
    return s;
}

/// IoU per class; NaN where the class appears in neither truth nor prediction.
inline std::vector<double> class_iou(const ConfusionMatrix& cm) {
    std::vector<double> out(cm.num_classes);
    for (std::size_t c = 0; c < cm.num_classes; ++c) {
        const auto d = cm.at(c, c), u = cm.row_sum(c) + cm.col_sum(c) - d;
        out[c] = u ? double(d) / double(u) : std::numeric_limits<double>::quiet_NaN();
    }
    return out;
}

// ---------------------------------------------------------------------------------------------
// Aggregated evaluation

struct MetricStats {
    std::vector<double> values;
    double mean = 0;
    double std = 0;  // population standard deviation over images
};

inline MetricStats summarize(std::vector<double> values) {
    MetricStats s;
    s.values = std::move(values);
    if (s.values.empty()) return s;
    double sum = 0;
    for (double v : s.values) sum += v;
    s.mean = sum / double(s.values.size());
    double var = 0;
    for (double v : s.values) var += (v - s.mean) * (v - s.mean);
    s.std = std::sqrt(var / double(s.values.size()));
    return s;
}

struct IntrinsicMetrics {
    MetricStats mse, lmse, dssim;
};

struct EvalReport {
    std::size_t num_images = 0;
    std::optional<IntrinsicMetrics> albedo;
    std::optional<IntrinsicMetrics> shading;
    std::optional<SegScores> segmentation;
    std::optional<ConfusionMatrix> confusion;
    std::vector<std::string> class_names;
};

/// Network (or oracle) output for one image; absent fields were not predicted.
struct Prediction {
    std::optional<Image> reflectance;
    std::optional<Image> shading;
    std::optional<LabelMap> labels;
};

namespace detail {

/// Brightness-adjusted MSE that maps an all-zero prediction to mean(truth^2) (the value for any scale).
inline double adjusted_mse_or_zero(const Tensor& pred, const Tensor& truth) {
    try {
        return mse_brightness_adjusted(pred, truth);
    } catch (const DegenerateInputError&) {
        return loss::mse(Tensor(truth.shape(), 0.0f), truth);
    }
}

/// Evaluation window: the default 20, shrunk (to an even size) for images smaller than that.
inline std::size_t lmse_window(const Tensor& t) {
    const std::size_t k = std::min<std::size_t>({20, t.dim(1), t.dim(2)});
    return std::max<std::size_t>(2, k - k % 2);
}

inline IntrinsicMetrics intrinsic_metrics(const std::vector<const Tensor*>& preds, const std::vector<const Tensor*>& truths) {
    std::vector<double> m, l, d;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        m.push_back(adjusted_mse_or_zero(*preds[i], *truths[i]));
        l.push_back(lmse(*preds[i], *truths[i], lmse_window(*truths[i])));
        d.push_back(dssim(*preds[i], *truths[i]));
    }
    return {summarize(std::move(m)), summarize(std::move(l)), summarize(std::move(d))};
}

}  // namespace detail

/// Per-image intrinsic metrics with mean and population std; segmentation scores from one pooled confusion matrix.
inline EvalReport evaluate(const std::vector<Prediction>& preds, const std::vector<Sample>& truth,
                           const std::vector<std::string>& class_names) {
    if (truth.empty()) throw PreconditionError("evaluate: empty split");
    if (preds.size() != truth.size()) throw ShapeError("evaluate: prediction and ground-truth counts differ");
    EvalReport r;
    r.num_images = truth.size();
    r.class_names = class_names;
    const bool has_r = preds.front().reflectance.has_value(), has_s = preds.front().shading.has_value(),
               has_l = preds.front().labels.has_value();
    for (const auto& p : preds) {
        if (p.reflectance.has_value() != has_r || p.shading.has_value() != has_s || p.labels.has_value() != has_l) {
            throw PreconditionError("evaluate: predictions disagree on which outputs are present");
        }
    }
    auto collect = [&](auto pred_field, auto truth_field) {
        std::vector<const Tensor*> ps, ts;
        for (std::size_t i = 0; i < preds.size(); ++i) {
            ps.push_back(&pred_field(preds[i]).data);
            ts.push_back(&truth_field(truth[i]).data);
        }
        return detail::intrinsic_metrics(ps, ts);
    };
    if (has_r) {
        r.albedo = collect([](const Prediction& p) -> const Image& { return *p.reflectance; },
                           [](const Sample& s) -> const Image& { return s.reflectance; });
    }
    if (has_s) {
        r.shading = collect([](const Prediction& p) -> const Image& { return *p.shading; },
                            [](const Sample& s) -> const Image& { return s.shading; });
    }
    if (has_l) {
        const std::size_t C = truth.front().labels.num_classes;
        ConfusionMatrix cm(C);
        for (std::size_t i = 0; i < preds.size(); ++i) cm += confusion(*preds[i].labels, truth[i].labels, C);
        r.segmentation = seg_scores(cm);
        r.confusion = std::move(cm);
    }
    return r;
}

// ---------------------------------------------------------------------------------------------
// Report serialization

namespace detail {

inline std::string fmt(double v, int precision = 10) {
    std::ostringstream os;
    os << std::setprecision(precision) << v;
    return os.str();
}

}  // namespace detail

/// Flat key=value view; key order is fixed so files compare byte-for-byte.
inline std::vector<std::pair<std::string, std::string>> report_items(const EvalReport& r) {
    std::vector<std::pair<std::string, std::string>> kv;
    kv.emplace_back("num_images", std::to_string(r.num_images));
    kv.emplace_back("std_convention", "population");
    auto intrinsic = [&](const char* name, const std::optional<IntrinsicMetrics>& m) {
        if (!m) return;
        const std::string p = name;
        for (auto [key, stats] : {std::pair{"mse", &m->mse}, std::pair{"lmse", &m->lmse}, std::pair{"dssim", &m->dssim}}) {
            kv.emplace_back(p + "." + key + ".mean", detail::fmt(stats->mean));
            kv.emplace_back(p + "." + key + ".std", detail::fmt(stats->std));
        }
    };
    intrinsic("albedo", r.albedo);
    intrinsic("shading", r.shading);
    if (r.segmentation) {
        kv.emplace_back("seg.global", detail::fmt(r.segmentation->global));
        kv.emplace_back("seg.class_average", detail::fmt(r.segmentation->class_average));
        kv.emplace_back("seg.miou", detail::fmt(r.segmentation->miou));
        const auto iou = class_iou(*r.confusion);
        for (std::size_t c = 0; c < iou.size(); ++c) {
            const std::string name = c < r.class_names.size() ? r.class_names[c] : std::to_string(c);
            kv.emplace_back("seg.iou." + name, std::isnan(iou[c]) ? "nan" : detail::fmt(iou[c]));
        }
    }
    return kv;
}

inline void write_report_kv(std::ostream& os, const EvalReport& r) {
    for (const auto& [k, v] : report_items(r)) os << k << '=' << v << '\n';
}

inline void write_report_text(std::ostream& os, const EvalReport& r) {
    os << "Evaluation over " << r.num_images << " images (mean +- population std over images)\n";
    auto row = [&](const char* name, const std::optional<IntrinsicMetrics>& m) {
        if (!m) return;
        os << std::left << std::setw(10) << name << std::fixed << std::setprecision(4) << "MSE " << m->mse.mean
           << " +- " << m->mse.std << "  LMSE " << m->lmse.mean << " +- " << m->lmse.std << "  DSSIM " << m->dssim.mean
           << " +- " << m->dssim.std << '\n';
        os.unsetf(std::ios::fixed);
    };
    row("albedo", r.albedo);
    row("shading", r.shading);
    if (r.segmentation) {
        os << std::fixed << std::setprecision(4) << "segmentation  global " << r.segmentation->global
           << "  class-average " << r.segmentation->class_average << "  mIoU " << r.segmentation->miou << '\n';
        const auto iou = class_iou(*r.confusion);
        for (std::size_t c = 0; c < iou.size(); ++c) {
            os << "  IoU " << std::left << std::setw(10) << (c < r.class_names.size() ? r.class_names[c] : std::to_string(c));
            if (std::isnan(iou[c])) {
                os << "n/a\n";
            } else {
                os << iou[c] << '\n';
            }
        }
        os.unsetf(std::ios::fixed);
    }
}

inline void write_confusion_csv(std::ostream& os, const ConfusionMatrix& cm, const std::vector<std::string>& names) {
    auto name = [&](std::size_t c) { return c < names.size() ? names[c] : std::to_string(c); };
    os << "truth\\pred";
    for (std::size_t c = 0; c < cm.num_classes; ++c) os << ',' << name(c);
    os << '\n';
    for (std::size_t t = 0; t < cm.num_classes; ++t) {
        os << name(t);
        for (std::size_t p = 0; p < cm.num_classes; ++p) os << ',' << cm.at(t, p);
        os << '\n';
    }
}

}  // namespace iseg::metrics

#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "iseg/error.hpp"
#include "iseg/losses.hpp"
#include "iseg/metrics.hpp"
#include "iseg/network.hpp"
#include "iseg/optim.hpp"
#include "iseg/scenegen.hpp"

namespace iseg {

enum class Experiment { single_intrinsics, single_segmentation, cascade_albedo_to_seg, cascade_seg_to_intrinsics, joint };

inline constexpr const char* kExperimentNames =
    "single_intrinsics, single_segmentation, cascade_albedo_to_seg, cascade_seg_to_intrinsics, joint";

inline const char* to_string(Experiment e) {
    switch (e) {
        case Experiment::single_intrinsics: return "single_intrinsics";
        case Experiment::single_segmentation: return "single_segmentation";
        case Experiment::cascade_albedo_to_seg: return "cascade_albedo_to_seg";
        case Experiment::cascade_seg_to_intrinsics: return "cascade_seg_to_intrinsics";
        case Experiment::joint: return "joint";
    }
    return "?";
}

inline Experiment parse_experiment(const std::string& s) {
    for (auto e : {Experiment::single_intrinsics, Experiment::single_segmentation, Experiment::cascade_albedo_to_seg,
                   Experiment::cascade_seg_to_intrinsics, Experiment::joint}) {
        if (s == to_string(e)) return e;
    }
    throw ConfigError("unknown experiment '" + s + "' (valid: " + kExperimentNames + ")");
}

enum class ClassWeighting { median_frequency, none };

/// 64-bit FNV-1a.
inline std::uint64_t fnv1a64(const std::string& text) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : text) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::string hex64(std::uint64_t v) {
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << v;
    return os.str();
}

namespace detail {

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

inline bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "1" || v == "true" || v == "on" || v == "yes") return true;
    if (v == "0" || v == "false" || v == "off" || v == "no") return false;
    throw ConfigError(key + ": expected a boolean, got '" + v + "'");
}

inline double parse_double(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        const double d = std::stod(v, &used);
        if (used != v.size() || !std::isfinite(d)) throw std::invalid_argument(v);
        return d;
    } catch (const std::logic_error&) {
        throw ConfigError(key + ": expected a number, got '" + v + "'");
    }
}

inline std::uint64_t parse_uint(const std::string& key, const std::string& v) {
    if (v.empty() || v.find_first_not_of("0123456789") != std::string::npos) {
        throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
    }
    try {
        return std::stoull(v);
    } catch (const std::logic_error&) {
        throw ConfigError(key + ": integer out of range '" + v + "'");
    }
}

inline std::string fmt_double(double v) {
    std::ostringstream os;
    os << std::setprecision(17) << v;
    return os.str();
}

}  // namespace detail

/// Everything that determines a training run. Text form is `key=value` lines; the canonical
/// form lists every key in a fixed order and is what the config hash covers.
struct TrainConfig {
    Experiment experiment = Experiment::single_segmentation;
    std::optional<std::size_t> epochs;  // required
    std::uint64_t seed = 1;
    std::size_t batch_size = 4;
    std::size_t height = 96, width = 128;
    LossWeights loss;
    AdadeltaConfig optimizer;
    std::vector<std::size_t> features{8, 16, 32, 64};
    bool mirror_links = true;
    bool inter_connections = true;
    std::vector<Head> trainable_heads;  // empty: every head of the experiment
    bool train_encoder = true;
    ClassWeighting class_weighting = ClassWeighting::median_frequency;
    AlphaGradient alpha_gradient = AlphaGradient::detached;
    bool eval_every_epoch = false;
    std::string albedo_checkpoint;  // cascade_albedo_to_seg: empty uses ground-truth albedo
    std::string init_checkpoint;    // optional warm start

    static const std::vector<std::string>& keys() {
        static const std::vector<std::string> k{
            "experiment", "epochs", "seed", "batch_size", "resolution", "lr", "rho", "eps", "weight_decay",
            "gamma_smse", "gamma_mse", "gamma_r", "gamma_s", "gamma_ce", "gamma_il", "intrinsic_scale", "w",
            "features", "mirror_links", "inter_connections", "trainable_heads", "train_encoder", "class_weighting",
            "alpha_gradient", "eval_every_epoch", "albedo_checkpoint", "init_checkpoint"};
        return k;
    }

    void set(const std::string& key, const std::string& raw) {
        const std::string v = detail::trim(raw);
        using detail::parse_bool;
        using detail::parse_double;
        using detail::parse_uint;
        if (key == "experiment") {
            experiment = parse_experiment(v);
        } else if (key == "epochs") {
            epochs = parse_uint(key, v);
        } else if (key == "seed") {
            seed = parse_uint(key, v);
        } else if (key == "batch_size") {
            batch_size = parse_uint(key, v);
        } else if (key == "resolution") {
            const auto x = v.find('x');
            if (x == std::string::npos) throw ConfigError("resolution: expected HxW, got '" + v + "'");
            height = parse_uint(key, v.substr(0, x));
            width = parse_uint(key, v.substr(x + 1));
        } else if (key == "lr") {
            optimizer.lr = parse_double(key, v);
        } else if (key == "rho") {
            optimizer.rho = parse_double(key, v);
        } else if (key == "eps") {
            optimizer.eps = parse_double(key, v);
        } else if (key == "weight_decay") {
            optimizer.weight_decay = parse_double(key, v);
        } else if (key == "gamma_smse") {
            loss.gamma_smse = parse_double(key, v);
        } else if (key == "gamma_mse") {
            loss.gamma_mse = parse_double(key, v);
        } else if (key == "gamma_r") {
            loss.gamma_r = parse_double(key, v);
        } else if (key == "gamma_s") {
            loss.gamma_s = parse_double(key, v);
        } else if (key == "gamma_ce") {
            loss.gamma_ce = parse_double(key, v);
        } else if (key == "gamma_il") {
            loss.gamma_il = parse_double(key, v);
        } else if (key == "intrinsic_scale") {
            loss.intrinsic_scale = parse_double(key, v);
        } else if (key == "w") {
            loss.w = parse_double(key, v);
        } else if (key == "features") {
            features.clear();
            for (const auto& f : iseg::detail::split_csv(v)) features.push_back(parse_uint(key, detail::trim(f)));
        } else if (key == "mirror_links") {
            mirror_links = parse_bool(key, v);
        } else if (key == "inter_connections") {
            inter_connections = parse_bool(key, v);
        } else if (key == "trainable_heads") {
            trainable_heads.clear();
            if (v != "all") {
                for (const auto& h : iseg::detail::split_csv(v)) {
                    try {
                        trainable_heads.push_back(parse_head(detail::trim(h)));
                    } catch (const Error& e) {
                        throw ConfigError(std::string("trainable_heads: ") + e.what());
                    }
                }
            }
        } else if (key == "train_encoder") {
            train_encoder = parse_bool(key, v);
        } else if (key == "class_weighting") {
            if (v == "median") {
                class_weighting = ClassWeighting::median_frequency;
            } else if (v == "none") {
                class_weighting = ClassWeighting::none;
            } else {
                throw ConfigError("class_weighting: expected median or none, got '" + v + "'");
            }
        } else if (key == "alpha_gradient") {
            if (v == "detached") {
                alpha_gradient = AlphaGradient::detached;
            } else if (v == "through") {
                alpha_gradient = AlphaGradient::through;
            } else {
                throw ConfigError("alpha_gradient: expected detached or through, got '" + v + "'");
            }
        } else if (key == "eval_every_epoch") {
            eval_every_epoch = parse_bool(key, v);
        } else if (key == "albedo_checkpoint") {
            albedo_checkpoint = v;
        } else if (key == "init_checkpoint") {
            init_checkpoint = v;
        } else {
            throw ConfigError("unknown config key '" + key + "'");
        }
    }

    /// Applies `key=value` lines; blank lines and `#` comments are skipped.
    void apply_text(const std::string& text) {
        std::istringstream is(text);
        std::string line;
        std::size_t lineno = 0;
        while (std::getline(is, line)) {
            ++lineno;
            const std::string t = detail::trim(line);
            if (t.empty() || t[0] == '#') continue;
            const auto eq = t.find('=');
            if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected key=value");
            set(detail::trim(t.substr(0, eq)), t.substr(eq + 1));
        }
    }

    static TrainConfig from_text(const std::string& text) {
        TrainConfig c;
        c.apply_text(text);
        return c;
    }

    static TrainConfig from_file(const std::filesystem::path& path) {
        std::ifstream is(path);
        if (!is) throw IoError("cannot open config " + path.string());
        std::stringstream ss;
        ss << is.rdbuf();
        return from_text(ss.str());
    }

    std::vector<Head> heads() const {
        switch (experiment) {
            case Experiment::single_segmentation:
            case Experiment::cascade_albedo_to_seg: return {Head::segmentation};
            case Experiment::joint: return {Head::reflectance, Head::shading, Head::segmentation};
            default: return {Head::reflectance, Head::shading};
        }
    }

    InputMode input_mode() const {
        if (experiment == Experiment::cascade_albedo_to_seg) return InputMode::albedo;
        if (experiment == Experiment::cascade_seg_to_intrinsics) return InputMode::rgb_labels;
        return InputMode::rgb;
    }

    NetworkSpec network_spec(std::size_t num_classes) const {
        NetworkSpec s;
        s.encoder_features = features;
        s.heads = heads();
        s.mirror_links = mirror_links;
        s.inter_connections = inter_connections;
        s.num_classes = num_classes;
        s.input = input_mode();
        return s;
    }

    void validate() const {
        if (!epochs) throw ConfigError("epochs is required");
        if (batch_size < 2) throw ConfigError("batch_size must be at least 2 (batch normalization needs batch statistics)");
        loss.validate();
        if (!(optimizer.lr >= 0) || !(optimizer.rho >= 0 && optimizer.rho < 1) || !(optimizer.eps > 0) ||
            !(optimizer.weight_decay >= 0)) {
            throw ConfigError("optimizer settings out of range (lr >= 0, 0 <= rho < 1, eps > 0, weight_decay >= 0)");
        }
        if (features.size() < 2) throw ConfigError("features needs at least 2 encoder stages");
        for (auto f : features) {
            if (f == 0) throw ConfigError("features must be positive");
        }
        const std::size_t div = std::size_t{1} << features.size();
        if (height == 0 || width == 0 || height % div != 0 || width % div != 0) {
            throw ConfigError("resolution " + std::to_string(height) + "x" + std::to_string(width) +
                              " must be divisible by " + std::to_string(div));
        }
        const auto hs = heads();
        for (Head h : trainable_heads) {
            if (std::find(hs.begin(), hs.end(), h) == hs.end()) {
                throw ConfigError(std::string("trainable_heads: ") + to_string(experiment) + " has no " + to_string(h) +
                                  " head");
            }
        }
        if (!albedo_checkpoint.empty() && experiment != Experiment::cascade_albedo_to_seg) {
            throw ConfigError("albedo_checkpoint only applies to cascade_albedo_to_seg");
        }
    }

    std::string canonical_text() const {
        std::ostringstream os;
        auto join_sizes = [](const std::vector<std::size_t>& v) {
            std::string s;
            for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
            return s;
        };
        std::string th = "all";
        if (!trainable_heads.empty()) {
            th.clear();
            for (std::size_t i = 0; i < trainable_heads.size(); ++i) th += (i ? "," : "") + std::string(to_string(trainable_heads[i]));
        }
        using detail::fmt_double;
        os << "experiment=" << to_string(experiment) << '\n'
           << "epochs=" << (epochs ? std::to_string(*epochs) : "") << '\n'
           << "seed=" << seed << '\n'
           << "batch_size=" << batch_size << '\n'
           << "resolution=" << height << 'x' << width << '\n'
           << "lr=" << fmt_double(optimizer.lr) << '\n'
           << "rho=" << fmt_double(optimizer.rho) << '\n'
           << "eps=" << fmt_double(optimizer.eps) << '\n'
           << "weight_decay=" << fmt_double(optimizer.weight_decay) << '\n'
           << "gamma_smse=" << fmt_double(loss.gamma_smse) << '\n'
           << "gamma_mse=" << fmt_double(loss.gamma_mse) << '\n'
           << "gamma_r=" << fmt_double(loss.gamma_r) << '\n'
           << "gamma_s=" << fmt_double(loss.gamma_s) << '\n'
           << "gamma_ce=" << fmt_double(loss.gamma_ce) << '\n'
           << "gamma_il=" << fmt_double(loss.gamma_il) << '\n'
           << "intrinsic_scale=" << fmt_double(loss.intrinsic_scale) << '\n'
           << "w=" << fmt_double(loss.w) << '\n'
           << "features=" << join_sizes(features) << '\n'
           << "mirror_links=" << (mirror_links ? 1 : 0) << '\n'
           << "inter_connections=" << (inter_connections ? 1 : 0) << '\n'
           << "trainable_heads=" << th << '\n'
           << "train_encoder=" << (train_encoder ? 1 : 0) << '\n'
           << "class_weighting=" << (class_weighting == ClassWeighting::none ? "none" : "median") << '\n'
           << "alpha_gradient=" << (alpha_gradient == AlphaGradient::through ? "through" : "detached") << '\n'
           << "eval_every_epoch=" << (eval_every_epoch ? 1 : 0) << '\n'
           << "albedo_checkpoint=" << albedo_checkpoint << '\n'
           << "init_checkpoint=" << init_checkpoint << '\n';
        return os.str();
    }

    std::uint64_t hash() const { return fnv1a64(canonical_text()); }
};

/// Loss terms of one epoch (means over its batches) plus optional test-split scores.
struct EpochRecord {
    std::vector<std::pair<std::string, double>> terms;

    double get(const std::string& name) const {
        for (const auto& [k, v] : terms) {
            if (k == name) return v;
        }
        throw RangeError("epoch record has no term '" + name + "'");
    }
};

struct RunRecord {
    std::string experiment;
    std::uint64_t config_hash = 0;
    std::string checkpoint;  // file name, relative to the run directory
    std::vector<EpochRecord> epochs;
    metrics::EvalReport report;

    std::vector<std::string> term_names() const {
        std::vector<std::string> out;
        if (!epochs.empty()) {
            for (const auto& t : epochs.front().terms) out.push_back(t.first);
        }
        return out;
    }
    std::vector<double> trace(const std::string& term) const {
        std::vector<double> out;
        for (const auto& e : epochs) out.push_back(e.get(term));
        return out;
    }
};

// ---------------------------------------------------------------------------------------------
// Data preparation

/// Network inputs and targets for one split, stacked per sample.
struct PreparedSplit {
    std::vector<Tensor> inputs;  // (Cin, H, W) each
    std::vector<Sample> samples;
};

namespace detail {

inline Tensor with_label_plane(const Image& rgb, const LabelMap& labels) {
    const std::size_t H = rgb.height(), W = rgb.width();
    Tensor out({4, H, W}, 0.0f);
    std::copy(rgb.data.values().begin(), rgb.data.values().end(), out.data());
    const float scale = labels.num_classes > 1 ? 1.0f / float(labels.num_classes - 1) : 0.0f;
    for (std::size_t i = 0; i < H * W; ++i) out[3 * H * W + i] = float(labels.data[i]) * scale;
    return out;
}

inline void gather(const std::vector<Tensor>& items, const std::vector<std::size_t>& idx, std::size_t begin,
                   std::size_t count, Tensor& out) {
    const Shape& s = items[idx[begin]].shape();
    Shape shape{count};
    shape.insert(shape.end(), s.begin(), s.end());
    out = Tensor(shape, 0.0f);
    const std::size_t per = numel(s);
    for (std::size_t i = 0; i < count; ++i) {
        const auto& t = items[idx[begin + i]];
        std::copy(t.values().begin(), t.values().end(), out.data() + i * per);
    }
}

struct Batch {
    Tensor input, reflectance, shading;
    std::vector<std::uint8_t> labels;
    std::size_t size = 0;
};

inline Batch make_batch(const PreparedSplit& split, const std::vector<std::size_t>& idx, std::size_t begin,
                        std::size_t count, bool targets) {
    Batch b;
    b.size = count;
    gather(split.inputs, idx, begin, count, b.input);
    if (!targets) return b;
    std::vector<Tensor> r, s;
    std::vector<std::size_t> local(count);
    std::iota(local.begin(), local.end(), std::size_t{0});
    for (std::size_t i = 0; i < count; ++i) {
        const Sample& smp = split.samples[idx[begin + i]];
        r.push_back(smp.reflectance.data);
        s.push_back(smp.shading.data);
        const auto l = smp.labels.data.values();
        b.labels.insert(b.labels.end(), l.begin(), l.end());
    }
    gather(r, local, 0, count, b.reflectance);
    gather(s, local, 0, count, b.shading);
    return b;
}

inline Tensor relu_copy(const Tensor& t, std::size_t n) {
    const Shape& s = t.shape();
    const std::size_t per = numel(s) / s[0];
    Tensor out({s[1], s[2], s[3]});
    for (std::size_t i = 0; i < per; ++i) out[i] = std::max(0.0f, t[n * per + i]);
    return out;
}

inline LabelMap argmax_labels(const Tensor& logits, std::size_t n) {
    const std::size_t C = logits.dim(1), H = logits.dim(2), W = logits.dim(3);
    LabelMap lm;
    lm.num_classes = C;
    lm.data = BasicTensor<std::uint8_t>({H, W}, 0);
    const float* base = logits.data() + n * C * H * W;
    for (std::size_t p = 0; p < H * W; ++p) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < C; ++c) {
            if (base[c * H * W + p] > base[best * H * W + p]) best = c;
        }
        lm.data[p] = static_cast<std::uint8_t>(best);
    }
    return lm;
}

}  // namespace detail

/// Eval-mode predictions: ReLU-clamped reflectance and shading, per-pixel argmax labels.
inline std::vector<metrics::Prediction> predict(Network<float>& net, const std::vector<Tensor>& inputs,
                                                std::size_t batch_size = 4) {
    std::vector<metrics::Prediction> out;
    std::vector<std::size_t> idx(inputs.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    for (std::size_t b = 0; b < inputs.size(); b += batch_size) {
        const std::size_t count = std::min(batch_size, inputs.size() - b);
        Tensor x;
        detail::gather(inputs, idx, b, count, x);
        const auto y = net.forward(x, ops::Mode::eval);
        for (std::size_t n = 0; n < count; ++n) {
            metrics::Prediction p;
            if (y.reflectance) p.reflectance = Image{detail::relu_copy(y.reflectance->value(), n)};
            if (y.shading) p.shading = Image{detail::relu_copy(y.shading->value(), n)};
            if (y.logits) p.labels = detail::argmax_labels(y.logits->value(), n);
            out.push_back(std::move(p));
        }
    }
    return out;
}

/// Loads a checkpoint, mapping format problems to a spec/checkpoint mismatch.
inline Network<float> load_checkpoint(const std::filesystem::path& path) {
    try {
        return Network<float>::load(path.string());
    } catch (const FormatError& e) {
        throw CheckpointMismatchError(path.string() + ": " + e.what());
    } catch (const ConfigError& e) {
        throw CheckpointMismatchError(path.string() + ": " + e.what());
    }
}

/// Network inputs for the given input mode. Albedo input comes from ground truth unless an
/// albedo model is supplied, in which case its predicted reflectance is used.
inline std::vector<Tensor> make_inputs(const std::vector<Sample>& samples, InputMode mode,
                                       Network<float>* albedo_model = nullptr) {
    std::vector<Tensor> out;
    out.reserve(samples.size());
    if (mode == InputMode::albedo && albedo_model) {
        std::vector<Tensor> rgb;
        for (const auto& s : samples) rgb.push_back(s.image.data);
        for (auto& p : predict(*albedo_model, rgb)) out.push_back(std::move(p.reflectance->data));
        return out;
    }
    for (const auto& s : samples) {
        switch (mode) {
            case InputMode::rgb: out.push_back(s.image.data); break;
            case InputMode::albedo: out.push_back(s.reflectance.data); break;
            case InputMode::rgb_labels: out.push_back(detail::with_label_plane(s.image, s.labels)); break;
        }
    }
    return out;
}

/// Checks that a dataset can feed a network built from this config.
inline void check_compatible(const TrainConfig& cfg, const DatasetManifest& m) {
    if (m.height != cfg.height || m.width != cfg.width) {
        throw CompatibilityError("dataset resolution " + std::to_string(m.height) + "x" + std::to_string(m.width) +
                                 " differs from configured " + std::to_string(cfg.height) + "x" + std::to_string(cfg.width));
    }
    if (m.num_classes < 2 || m.num_classes > 256) throw CompatibilityError("dataset must have 2..256 classes");
    if (m.count(Split::train) < 2) throw CompatibilityError("train split needs at least 2 samples");
    if (m.count(Split::test) < 1) throw CompatibilityError("test split is empty");
}

// ---------------------------------------------------------------------------------------------
// Training

struct RunOptions {
    /// Called after every epoch (progress output).
    std::function<void(std::size_t epoch, const EpochRecord&)> on_epoch;
};

namespace detail {

inline double primary_metric(const metrics::EvalReport& r, std::string& name) {
    if (r.segmentation) {
        name = "test_miou";
        return r.segmentation->miou;
    }
    name = "test_albedo_mse";
    return r.albedo->mse.mean;
}

}  // namespace detail

inline void write_run_record(std::ostream& os, const RunRecord& r);
inline void write_run_record_text(std::ostream& os, const RunRecord& r);

/// Trains the configured experiment on the dataset's train split, evaluates on its test split and
/// writes config.txt, checkpoint.isnn, run_record.{txt,kv}, eval_report.{txt,kv} (and confusion.csv) to out_dir.
inline RunRecord run_experiment(const TrainConfig& cfg, const std::filesystem::path& data_dir,
                                const std::filesystem::path& out_dir, const RunOptions& opts = {}) {
    cfg.validate();
    const DatasetManifest m = load_manifest(data_dir);
    check_compatible(cfg, m);

    const NetworkSpec spec = cfg.network_spec(m.num_classes);
    Network<float> net(spec, cfg.seed);
    if (!cfg.init_checkpoint.empty()) {
        Network<float> init = load_checkpoint(cfg.init_checkpoint);
        if (init.spec().to_text() != spec.to_text()) {
            throw CheckpointMismatchError(cfg.init_checkpoint + ": network layout differs from the configured experiment");
        }
        net = std::move(init);
    }
    net.set_trainable(cfg.trainable_heads.empty() ? spec.heads : cfg.trainable_heads, cfg.train_encoder);

    PreparedSplit train, test;
    train.samples = load_split(data_dir, m, Split::train);
    test.samples = load_split(data_dir, m, Split::test);
    {
        std::optional<Network<float>> albedo_model;
        if (!cfg.albedo_checkpoint.empty()) {
            albedo_model.emplace(load_checkpoint(cfg.albedo_checkpoint));
            const auto& as = albedo_model->spec();
            if (!as.has(Head::reflectance) || as.input != InputMode::rgb) {
                throw CheckpointMismatchError(cfg.albedo_checkpoint + ": albedo source must be an RGB-input model with a reflectance head");
            }
        }
        Network<float>* am = albedo_model ? &*albedo_model : nullptr;
        train.inputs = make_inputs(train.samples, spec.input, am);
        test.inputs = make_inputs(test.samples, spec.input, am);
    }

    ClassWeightVector cw = ClassWeightVector::uniform(m.num_classes);
    if (cfg.class_weighting == ClassWeighting::median_frequency) {
        cw = loss::median_frequency_weights(std::span<const std::uint64_t>(m.class_pixels_train));
    }

    const bool has_seg = spec.has(Head::segmentation), has_int = spec.has(Head::reflectance);
    const bool joint = has_seg && has_int;
    Adadelta<float> opt(net, cfg.optimizer);
    RunRecord rec;
    rec.experiment = to_string(cfg.experiment);
    rec.config_hash = cfg.hash();
    rec.checkpoint = "checkpoint.isnn";

    const std::size_t n_train = train.samples.size();
    std::vector<std::size_t> order(n_train);
    for (std::size_t epoch = 0; epoch < *cfg.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng shuffle_rng(derive_seed(cfg.seed, 100 + epoch));
        shuffle_rng.shuffle(order);

        std::vector<double> sums(5, 0.0);
        std::size_t batches = 0;
        for (std::size_t b = 0; b < n_train; b += cfg.batch_size) {
            const std::size_t count = std::min(cfg.batch_size, n_train - b);
            if (count < 2) break;  // a trailing singleton cannot be batch-normalized
            const auto batch = detail::make_batch(train, order, b, count, true);
            auto y = net.forward(batch.input, ops::Mode::train);
            Var<float> total;
            if (joint) {
                auto jl = loss::joint_loss(*y.logits, batch.labels, cw, *y.reflectance, batch.reflectance, *y.shading,
                                           batch.shading, cfg.loss, count, cfg.alpha_gradient);
                sums[1] += jl.cross_entropy;
                sums[2] += jl.intrinsic;
                sums[3] += jl.weighted_ce;
                sums[4] += jl.weighted_intrinsic;
                total = jl.total;
            } else if (has_seg) {
                total = loss::cross_entropy(*y.logits, batch.labels, cw);
            } else {
                auto lr = ops::scale(loss::combined_loss(*y.reflectance, batch.reflectance, cfg.loss, count, cfg.alpha_gradient),
                                     static_cast<float>(cfg.loss.gamma_r));
                auto ls = ops::scale(loss::combined_loss(*y.shading, batch.shading, cfg.loss, count, cfg.alpha_gradient),
                                     static_cast<float>(cfg.loss.gamma_s));
                sums[1] += lr.value()[0];
                sums[2] += ls.value()[0];
                total = ops::add(lr, ls);
            }
            sums[0] += total.value()[0];
            backward(total);
            opt.step(net);
            ++batches;
        }

        EpochRecord er;
        const double nb = double(batches);
        if (joint) {
            // Epoch total is defined as the sum of the two weighted epoch means, so it decomposes exactly.
            const double wce = sums[3] / nb, wil = sums[4] / nb;
            er.terms = {{"total", wce + wil},
                        {"cross_entropy", sums[1] / nb},
                        {"intrinsic", sums[2] / nb},
                        {"weighted_ce", wce},
                        {"weighted_intrinsic", wil}};
        } else if (has_seg) {
            er.terms = {{"total", sums[0] / nb}};
        } else {
            er.terms = {{"total", sums[0] / nb}, {"albedo", sums[1] / nb}, {"shading", sums[2] / nb}};
        }
        if (cfg.eval_every_epoch) {
            const auto rep = metrics::evaluate(predict(net, test.inputs, cfg.batch_size), test.samples, m.class_names);
            std::string name;
            const double v = detail::primary_metric(rep, name);
            er.terms.emplace_back(name, v);
        }
        if (opts.on_epoch) opts.on_epoch(epoch + 1, er);
        rec.epochs.push_back(std::move(er));
    }

    rec.report = metrics::evaluate(predict(net, test.inputs, cfg.batch_size), test.samples, m.class_names);

    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec || !std::filesystem::is_directory(out_dir)) throw IoError("cannot create directory " + out_dir.string());
    auto write = [&](const char* name, auto&& fn) {
        std::ofstream os(out_dir / name, std::ios::binary | std::ios::trunc);
        if (!os) throw IoError("cannot write " + (out_dir / name).string());
        fn(os);
        if (!os) throw IoError("failed writing " + (out_dir / name).string());
    };
    write("config.txt", [&](std::ostream& os) { os << cfg.canonical_text(); });
    net.save((out_dir / rec.checkpoint).string());
    write("run_record.kv", [&](std::ostream& os) { write_run_record(os, rec); });
    write("run_record.txt", [&](std::ostream& os) { write_run_record_text(os, rec); });
    write("eval_report.kv", [&](std::ostream& os) { metrics::write_report_kv(os, rec.report); });
    write("eval_report.txt", [&](std::ostream& os) { metrics::write_report_text(os, rec.report); });
    if (rec.report.confusion) {
        write("confusion.csv", [&](std::ostream& os) { metrics::write_confusion_csv(os, *rec.report.confusion, m.class_names); });
    }
    return rec;
}

// ---------------------------------------------------------------------------------------------
// RunRecord files

inline void write_run_record(std::ostream& os, const RunRecord& r) {
    os << "experiment=" << r.experiment << '\n'
       << "config_hash=" << hex64(r.config_hash) << '\n'
       << "checkpoint=" << r.checkpoint << '\n'
       << "epochs=" << r.epochs.size() << '\n';
    for (const auto& name : r.term_names()) {
        os << "trace." << name << '=';
        const auto t = r.trace(name);
        for (std::size_t i = 0; i < t.size(); ++i) os << (i ? "," : "") << detail::fmt_double(t[i]);
        os << '\n';
    }
    for (const auto& [k, v] : metrics::report_items(r.report)) os << "eval." << k << '=' << v << '\n';
}

inline void write_run_record_text(std::ostream& os, const RunRecord& r) {
    os << "experiment " << r.experiment << "  config " << hex64(r.config_hash) << "  checkpoint " << r.checkpoint << '\n';
    const auto names = r.term_names();
    os << std::left << std::setw(7) << "epoch";
    for (const auto& n : names) os << std::setw(20) << n;
    os << '\n';
    for (std::size_t e = 0; e < r.epochs.size(); ++e) {
        os << std::setw(7) << e + 1;
        for (const auto& n : names) os << std::setw(20) << detail::fmt_double(r.epochs[e].get(n)).substr(0, 18);
        os << '\n';
    }
    os << '\n';
    metrics::write_report_text(os, r.report);
}

/// Flat key=value file as an ordered list.
inline std::vector<std::pair<std::string, std::string>> read_kv_file(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open " + path.string());
    std::vector<std::pair<std::string, std::string>> out;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw FormatError(path.string() + ": malformed line '" + line + "'");
        out.emplace_back(line.substr(0, eq), line.substr(eq + 1));
    }
    return out;
}

/// Loss traces stored in a run_record.kv, by term name.
inline std::vector<std::pair<std::string, std::vector<double>>> read_traces(const std::filesystem::path& path) {
    std::vector<std::pair<std::string, std::vector<double>>> out;
    for (const auto& [k, v] : read_kv_file(path)) {
        if (k.rfind("trace.", 0) != 0) continue;
        std::vector<double> values;
        for (const auto& item : iseg::detail::split_csv(v)) {
            try {
                values.push_back(std::stod(item));
            } catch (const std::logic_error&) {
                throw FormatError(path.string() + ": bad trace value '" + item + "'");
            }
        }
        out.emplace_back(k.substr(6), std::move(values));
    }
    return out;
}

// ---------------------------------------------------------------------------------------------
// w sweep

inline const std::vector<double>& default_w_values() {
    static const std::vector<double> v{0.01, 0.5, 1.0, 2.0, 4.0};
    return v;
}

struct SweepRow {
    double w = 0;
    RunRecord record;
};

inline const std::vector<std::string>& sweep_columns() {
    static const std::vector<std::string> c{"Global",   "mIoU",      "Alb.MSE",  "Alb.LMSE",
                                            "Alb.DSSIM", "Shad.MSE", "Shad.LMSE", "Shad.DSSIM"};
    return c;
}

inline std::vector<double> sweep_values(const metrics::EvalReport& r) {
    return {r.segmentation->global, r.segmentation->miou, r.albedo->mse.mean,  r.albedo->lmse.mean,
            r.albedo->dssim.mean,   r.shading->mse.mean,  r.shading->lmse.mean, r.shading->dssim.mean};
}

inline void write_sweep_table(std::ostream& os, const std::vector<SweepRow>& rows) {
    os << std::left << std::setw(8) << "w";
    for (const auto& c : sweep_columns()) os << std::setw(12) << c;
    os << '\n';
    for (const auto& row : rows) {
        os << std::setw(8) << detail::fmt_double(row.w);
        for (double v : sweep_values(row.record.report)) {
            std::ostringstream cell;
            cell << std::fixed << std::setprecision(4) << v;
            os << std::setw(12) << cell.str();
        }
        os << '\n';
    }
}

inline void write_sweep_csv(std::ostream& os, const std::vector<SweepRow>& rows) {
    os << "w";
    for (const auto& c : sweep_columns()) os << ',' << c;
    os << '\n';
    for (const auto& row : rows) {
        os << detail::fmt_double(row.w);
        for (double v : sweep_values(row.record.report)) os << ',' << detail::fmt_double(v);
        os << '\n';
    }
}

/// Runs the joint model once per w; each run lands in out_dir/w_<value>, the table in out_dir/sweep_w.{txt,csv}.
inline std::vector<SweepRow> sweep_w(const std::vector<double>& values, TrainConfig base,
                                     const std::filesystem::path& data_dir, const std::filesystem::path& out_dir,
                                     const RunOptions& opts = {}) {
    if (values.empty()) throw ConfigError("sweep_w needs at least one w value");
    base.experiment = Experiment::joint;
    std::vector<SweepRow> rows;
    for (double w : values) {
        TrainConfig cfg = base;
        cfg.loss.w = w;
        rows.push_back({w, run_experiment(cfg, data_dir, out_dir / ("w_" + detail::fmt_double(w)), opts)});
    }
    auto write = [&](const char* name, auto&& fn) {
        std::ofstream os(out_dir / name, std::ios::trunc);
        if (!os) throw IoError("cannot write " + (out_dir / name).string());
        fn(os);
    };
    write("sweep_w.txt", [&](std::ostream& os) { write_sweep_table(os, rows); });
    write("sweep_w.csv", [&](std::ostream& os) { write_sweep_csv(os, rows); });
    return rows;
}

}  // namespace iseg

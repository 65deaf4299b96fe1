#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "iseg/binary_io.hpp"
#include "iseg/error.hpp"
#include "iseg/imaging.hpp"
#include "iseg/ops.hpp"
#include "iseg/rng.hpp"

namespace iseg {

enum class Head : std::uint8_t { reflectance = 0, shading = 1, segmentation = 2 };

inline const char* to_string(Head h) {
    switch (h) {
        case Head::reflectance: return "reflectance";
        case Head::shading: return "shading";
        default: return "segmentation";
    }
}

inline Head parse_head(const std::string& s) {
    if (s == "reflectance" || s == "albedo" || s == "R") return Head::reflectance;
    if (s == "shading" || s == "S") return Head::shading;
    if (s == "segmentation" || s == "seg") return Head::segmentation;
    throw RangeError("unknown head '" + s + "' (expected reflectance, shading or segmentation)");
}

/// What the network sees as input.
enum class InputMode : std::uint8_t { rgb, albedo, rgb_labels };

inline const char* to_string(InputMode m) {
    switch (m) {
        case InputMode::rgb: return "rgb";
        case InputMode::albedo: return "albedo";
        default: return "rgb_labels";
    }
}

inline InputMode parse_input_mode(const std::string& s) {
    if (s == "rgb") return InputMode::rgb;
    if (s == "albedo") return InputMode::albedo;
    if (s == "rgb_labels") return InputMode::rgb_labels;
    throw ConfigError("unknown input mode '" + s + "'");
}

/// Shared-encoder / multi-decoder architecture description.
struct NetworkSpec {
    std::vector<std::size_t> encoder_features{8, 16, 32, 64};
    std::size_t kernel = 3;
    std::size_t stride = 2;
    std::vector<Head> heads{Head::reflectance, Head::shading};
    bool mirror_links = true;
    bool inter_connections = true;
    std::size_t num_classes = 8;
    InputMode input = InputMode::rgb;

    std::size_t input_channels() const { return input == InputMode::rgb_labels ? 4 : 3; }
    bool has(Head h) const { return std::find(heads.begin(), heads.end(), h) != heads.end(); }
    std::size_t stages() const { return encoder_features.size(); }
    /// Spatial dims must be divisible by this.
    std::size_t resolution_divisor() const { return std::size_t{1} << stages(); }

    void validate() const {
        if (encoder_features.size() < 2) throw ConfigError("network needs at least 2 encoder stages");
        for (auto f : encoder_features) {
            if (f == 0) throw ConfigError("encoder feature counts must be positive");
        }
        if (heads.empty()) throw ConfigError("network needs at least one head");
        if (kernel != 3 || stride != 2) throw ConfigError("only 3x3 kernels with stride 2 are supported");
        if (has(Head::segmentation) && (num_classes < 1 || num_classes > 256)) {
            throw ConfigError("num_classes must be in [1, 256]");
        }
    }

    /// Canonical text form (stored inside checkpoints).
    std::string to_text() const {
        std::ostringstream os;
        os << "encoder_features=";
        for (std::size_t i = 0; i < encoder_features.size(); ++i) os << (i ? "," : "") << encoder_features[i];
        os << "\nkernel=" << kernel << "\nstride=" << stride << "\nheads=";
        for (std::size_t i = 0; i < heads.size(); ++i) os << (i ? "," : "") << to_string(heads[i]);
        os << "\nmirror_links=" << (mirror_links ? 1 : 0) << "\ninter_connections=" << (inter_connections ? 1 : 0)
           << "\nnum_classes=" << num_classes << "\ninput=" << to_string(input) << "\ninput_channels=" << input_channels()
           << '\n';
        return os.str();
    }

    static NetworkSpec from_text(const std::string& text) {
        std::map<std::string, std::string> kv;
        std::istringstream is(text);
        std::string line;
        while (std::getline(is, line)) {
            if (auto eq = line.find('='); eq != std::string::npos) kv[line.substr(0, eq)] = line.substr(eq + 1);
        }
        auto get = [&](const char* key) -> const std::string& {
            auto it = kv.find(key);
            if (it == kv.end()) throw FormatError(std::string("network spec missing key ") + key);
            return it->second;
        };
        auto csv = [](const std::string& s) {
            std::vector<std::string> out;
            std::istringstream ss(s);
            std::string item;
            while (std::getline(ss, item, ',')) out.push_back(item);
            return out;
        };
        NetworkSpec spec;
        try {
            spec.encoder_features.clear();
            for (const auto& f : csv(get("encoder_features"))) spec.encoder_features.push_back(std::stoul(f));
            spec.kernel = std::stoul(get("kernel"));
            spec.stride = std::stoul(get("stride"));
            spec.heads.clear();
            for (const auto& h : csv(get("heads"))) spec.heads.push_back(parse_head(h));
            spec.mirror_links = get("mirror_links") == "1";
            spec.inter_connections = get("inter_connections") == "1";
            spec.num_classes = std::stoul(get("num_classes"));
            spec.input = parse_input_mode(get("input"));
        } catch (const std::logic_error&) {
            throw FormatError("network spec contains a malformed value");
        } catch (const Error& e) {
            throw FormatError(std::string("network spec: ") + e.what());
        }
        spec.validate();
        return spec;
    }

    friend bool operator==(const NetworkSpec&, const NetworkSpec&) = default;
};

/// Parameter ownership groups; freezing works at this granularity.
enum class Group : std::uint8_t { encoder = 0, reflectance = 1, shading = 2, segmentation = 3 };

inline Group group_of(Head h) { return static_cast<Group>(static_cast<std::uint8_t>(h) + 1); }

template <class T>
struct HeadOutputs {
    std::optional<Var<T>> reflectance;  // (N, 3, H, W)
    std::optional<Var<T>> shading;      // (N, 1, H, W)
    std::optional<Var<T>> logits;       // (N, C, H, W)
};

/// Learnable parameter plus its identity.
template <class T>
struct Parameter {
    std::string name;
    Var<T> var;
    Group group;
};

/// Network parameters and running statistics, with the forward pass over them.
template <class T>
class Network {
   public:
    static constexpr double kInitStd = 0.05;

    Network(NetworkSpec spec, std::uint64_t seed) : spec_(std::move(spec)) {
        spec_.validate();
        Rng rng(derive_seed(seed, 0x11e7));
        build(rng);
        trainable_.fill(true);
    }

    // Parameters are shared graph nodes, so copies would alias; networks are move-only.
    Network(Network&&) noexcept = default;
    Network& operator=(Network&&) noexcept = default;
    Network(const Network&) = delete;
    Network& operator=(const Network&) = delete;

    const NetworkSpec& spec() const { return spec_; }

    HeadOutputs<T> forward(const BasicTensor<T>& batch, ops::Mode mode) {
        if (batch.rank() != 4 || batch.dim(1) != spec_.input_channels()) {
            throw ShapeError("forward: batch " + to_string(batch.shape()) + " does not match " +
                             std::to_string(spec_.input_channels()) + " input channels");
        }
        const std::size_t div = spec_.resolution_divisor();
        if (batch.dim(2) % div != 0 || batch.dim(3) % div != 0) {
            throw ShapeError("forward: spatial dims " + to_string(batch.shape()) + " not divisible by " + std::to_string(div));
        }
        Var<T> input(batch);
        const std::size_t k = spec_.stages();

        std::vector<Var<T>> enc;
        Var<T> x = input;
        for (auto& b : encoder_) {
            x = run_block(b, x, 2, mode);
            enc.push_back(x);
        }

        std::vector<Head> order = active_heads();
        std::map<Head, Var<T>> prev;
        for (Head h : order) prev[h] = enc.back();
        for (std::size_t j = 0; j < k; ++j) {
            std::map<Head, Var<T>> next;
            for (Head h : order) {
                std::vector<Var<T>> low{prev[h]};
                if (inter_active() && j >= 1) {
                    for (Head s : order) {
                        if (s != h) low.push_back(prev[s]);
                    }
                }
                std::vector<Var<T>> parts{ops::upsample_nearest2x(ops::concat_channels(low))};
                if (spec_.mirror_links) parts.push_back(j + 1 < k ? enc[k - 2 - j] : input);
                next[h] = run_block(decoders_[index(h)][j], ops::concat_channels(parts), 1, mode);
            }
            prev = std::move(next);
        }

        HeadOutputs<T> out;
        for (Head h : order) {
            auto& layers = heads_[index(h)];
            Var<T> y = prev[h];
            for (auto& b : layers) y = run_block(b, y, 1, mode);
            switch (h) {
                case Head::reflectance: out.reflectance = y; break;
                case Head::shading: out.shading = y; break;
                default: out.logits = y; break;
            }
        }
        return out;
    }

    std::vector<Parameter<T>> parameters() const {
        std::vector<Parameter<T>> out;
        visit_blocks([&](const Block& b) {
            out.push_back({b.name + ".conv.weight", b.weight, b.group});
            out.push_back({b.name + ".conv.bias", b.bias, b.group});
            if (b.norm) {
                out.push_back({b.name + ".bn.gamma", b.gamma, b.group});
                out.push_back({b.name + ".bn.beta", b.beta, b.group});
            }
        });
        return out;
    }

    /// Number of learnable scalars.
    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& p : parameters()) n += p.var.value().size();
        return n;
    }

    /// Restricts optimizer updates (and running-statistic updates) to the given heads plus, optionally, the encoder.
    void set_trainable(const std::vector<Head>& heads, bool encoder) {
        for (Head h : heads) {
            if (!spec_.has(h)) throw RangeError(std::string("set_trainable: network has no ") + to_string(h) + " head");
        }
        trainable_.fill(false);
        trainable_[0] = encoder;
        for (Head h : heads) trainable_[static_cast<std::size_t>(group_of(h))] = true;
    }
    bool trainable(Group g) const { return trainable_[static_cast<std::size_t>(g)]; }

    // Checkpoint (ISNN1): magic, version, length-prefixed spec text, record count, then
    // (name, u8 rank, u32 dims, f32 payload) records in a fixed order.
    void save(std::ostream& os) const {
        os.write("ISNN", 4);
        bin::put_u8(os, 0x01);
        bin::put_string(os, spec_.to_text());
        const auto records = named_tensors();
        bin::put_u32(os, static_cast<std::uint32_t>(records.size()));
        for (const auto& [name, t] : records) {
            bin::put_string(os, name);
            bin::put_u8(os, static_cast<std::uint8_t>(t->rank()));
            for (auto d : t->shape()) bin::put_u32(os, static_cast<std::uint32_t>(d));
            for (T v : t->values()) bin::put_f32(os, static_cast<float>(v));
        }
    }

    static Network load(std::istream& is) {
        bin::expect_magic(is, "ISNN", 0x01, "ISNN1");
        Network net(NetworkSpec::from_text(bin::get_string(is, 1u << 16)), 0);
        auto records = net.named_tensors();
        const std::uint32_t count = bin::get_u32(is);
        if (count != records.size()) {
            throw FormatError("checkpoint has " + std::to_string(count) + " records, spec implies " +
                              std::to_string(records.size()));
        }
        for (auto& [name, t] : records) {
            const std::string got = bin::get_string(is, 1024);
            if (got != name) throw FormatError("checkpoint record '" + got + "' where '" + name + "' was expected");
            const auto rank = bin::get_u8(is);
            Shape shape(rank);
            for (auto& d : shape) d = bin::get_u32(is);
            if (shape != t->shape()) throw FormatError("checkpoint record '" + name + "' has shape " + to_string(shape));
            for (auto& v : t->storage()) v = static_cast<T>(bin::get_f32(is));
        }
        return net;
    }

    void save(const std::string& path) const {
        std::ofstream os(path, std::ios::binary | std::ios::trunc);
        if (!os) throw IoError("cannot open " + path + " for writing");
        save(os);
        if (!os) throw IoError("failed writing " + path);
    }

    static Network load(const std::string& path) {
        std::ifstream is(path, std::ios::binary);
        if (!is) throw IoError("cannot open " + path);
        return load(is);
    }

   private:
    struct Block {
        std::string name;
        Group group;
        Var<T> weight, bias;
        bool norm = true;
        bool relu = true;
        Var<T> gamma, beta;
        ops::BatchNormState<T> state;
    };

    static std::size_t index(Head h) { return static_cast<std::size_t>(h); }

    std::vector<Head> active_heads() const {
        std::vector<Head> out;
        for (Head h : {Head::reflectance, Head::shading, Head::segmentation}) {
            if (spec_.has(h)) out.push_back(h);
        }
        return out;
    }

    bool inter_active() const { return spec_.inter_connections && spec_.heads.size() >= 2; }

    Block make_block(Rng& rng, std::string name, Group g, std::size_t cin, std::size_t cout, std::size_t k, bool norm,
                     bool relu) {
        Block b;
        b.name = std::move(name);
        b.group = g;
        BasicTensor<T> w({cout, cin, k, k});
        for (auto& v : w.storage()) v = static_cast<T>(kInitStd * rng.normal());
        b.weight = Var<T>(std::move(w), true);
        b.bias = Var<T>(BasicTensor<T>({cout}, T{0}), true);
        b.norm = norm;
        b.relu = relu;
        if (norm) {
            b.gamma = Var<T>(BasicTensor<T>({cout}, T{1}), true);
            b.beta = Var<T>(BasicTensor<T>({cout}, T{0}), true);
            b.state.running_mean = BasicTensor<T>({cout}, T{0});
            b.state.running_var = BasicTensor<T>({cout}, T{1});
        }
        return b;
    }

    void build(Rng& rng) {
        const auto& F = spec_.encoder_features;
        const std::size_t k = F.size();
        std::size_t cin = spec_.input_channels();
        for (std::size_t i = 0; i < k; ++i) {
            encoder_.push_back(make_block(rng, "enc" + std::to_string(i), Group::encoder, cin, F[i], 3, true, true));
            cin = F[i];
        }
        const auto heads = active_heads();
        const std::size_t siblings = inter_active() ? heads.size() - 1 : 0;
        for (Head h : heads) {
            const std::string base = std::string("dec.") + to_string(h) + ".";
            auto& blocks = decoders_[index(h)];
            std::size_t prev = F[k - 1];
            for (std::size_t j = 0; j < k; ++j) {
                const std::size_t out = j + 1 < k ? F[k - 2 - j] : F[0];
                std::size_t in = prev * (1 + (j >= 1 ? siblings : 0));
                if (spec_.mirror_links) in += j + 1 < k ? F[k - 2 - j] : spec_.input_channels();
                blocks.push_back(make_block(rng, base + std::to_string(j), group_of(h), in, out, 3, true, true));
                prev = out;
            }
            auto& tail = heads_[index(h)];
            const std::string hb = std::string("head.") + to_string(h);
            switch (h) {
                case Head::reflectance:
                    tail.push_back(make_block(rng, hb + ".proj", group_of(h), F[0], 3, 1, false, false));
                    break;
                case Head::shading:
                    tail.push_back(make_block(rng, hb + ".proj", group_of(h), F[0], 1, 1, false, false));
                    break;
                default:
                    tail.push_back(make_block(rng, hb + ".proj", group_of(h), F[0], spec_.num_classes, 3, true, true));
                    tail.push_back(make_block(rng, hb + ".out", group_of(h), spec_.num_classes, spec_.num_classes, 3,
                                              false, false));
                    break;
            }
        }
    }

    Var<T> run_block(Block& b, const Var<T>& x, std::size_t stride, ops::Mode mode) {
        const std::size_t pad = b.weight.dim(2) / 2;
        Var<T> y = ops::conv2d(x, b.weight, b.bias, stride, pad);
        if (b.norm) {
            const ops::Mode m = trainable(b.group) ? mode : ops::Mode::eval;
            y = ops::batch_norm(y, b.gamma, b.beta, b.state, m);
        }
        return b.relu ? ops::relu(y) : y;
    }

    template <class Fn>
    void visit_blocks(Fn&& fn) const {
        for (const auto& b : encoder_) fn(b);
        for (std::size_t h = 0; h < 3; ++h) {
            for (const auto& b : decoders_[h]) fn(b);
            for (const auto& b : heads_[h]) fn(b);
        }
    }

    std::vector<std::pair<std::string, BasicTensor<T>*>> named_tensors() const {
        std::vector<std::pair<std::string, BasicTensor<T>*>> out;
        auto& self = const_cast<Network&>(*this);
        auto add = [&](std::vector<Block>& blocks) {
            for (auto& b : blocks) {
                out.emplace_back(b.name + ".conv.weight", &b.weight.value());
                out.emplace_back(b.name + ".conv.bias", &b.bias.value());
                if (b.norm) {
                    out.emplace_back(b.name + ".bn.gamma", &b.gamma.value());
                    out.emplace_back(b.name + ".bn.beta", &b.beta.value());
                    out.emplace_back(b.name + ".bn.running_mean", &b.state.running_mean);
                    out.emplace_back(b.name + ".bn.running_var", &b.state.running_var);
                }
            }
        };
        add(self.encoder_);
        for (std::size_t h = 0; h < 3; ++h) {
            add(self.decoders_[h]);
            add(self.heads_[h]);
        }
        return out;
    }

    NetworkSpec spec_;
    std::vector<Block> encoder_;
    std::array<std::vector<Block>, 3> decoders_;
    std::array<std::vector<Block>, 3> heads_;
    std::array<bool, 4> trainable_{};
};

}  // namespace iseg

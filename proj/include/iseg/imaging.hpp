#pragma once

#include <cmath>
#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "iseg/error.hpp"
#include "iseg/tensor.hpp"

namespace iseg {

/// Linear-RGB image (or single-channel shading), stored as a (channels, height, width) tensor.
struct Image {
    Tensor data;

    Image() = default;
    explicit Image(Tensor t) : data(std::move(t)) {
        if (data.rank() != 3) throw ShapeError("image tensor must be rank 3, got " + to_string(data.shape()));
    }
    Image(std::size_t channels, std::size_t height, std::size_t width, float fill = 0.0f)
        : data({channels, height, width}, fill) {}

    std::size_t channels() const { return data.dim(0); }
    std::size_t height() const { return data.dim(1); }
    std::size_t width() const { return data.dim(2); }

    float& operator()(std::size_t c, std::size_t y, std::size_t x) { return data(c, y, x); }
    float operator()(std::size_t c, std::size_t y, std::size_t x) const { return data(c, y, x); }

    friend bool operator==(const Image&, const Image&) = default;
};

/// Per-pixel class ids in [0, num_classes).
struct LabelMap {
    BasicTensor<std::uint8_t> data;
    std::size_t num_classes = 0;

    LabelMap() = default;
    LabelMap(std::size_t height, std::size_t width, std::size_t classes)
        : data({height, width}, 0), num_classes(classes) {}

    std::size_t height() const { return data.dim(0); }
    std::size_t width() const { return data.dim(1); }
    std::uint8_t& operator()(std::size_t y, std::size_t x) { return data(y, x); }
    std::uint8_t operator()(std::size_t y, std::size_t x) const { return data(y, x); }

    friend bool operator==(const LabelMap&, const LabelMap&) = default;
};

struct SampleMeta {
    std::uint32_t scene_id = 0;
    std::uint32_t rig_id = 0;
    std::uint32_t camera_id = 0;

    friend bool operator==(const SampleMeta&, const SampleMeta&) = default;
};

/// One aligned dataset element: image = reflectance x shading, plus labels.
struct Sample {
    Image image;
    Image reflectance;
    Image shading;
    LabelMap labels;
    SampleMeta meta;

    friend bool operator==(const Sample&, const Sample&) = default;
};

/// Element-wise image formation I = R x S. A single-channel shading broadcasts over color.
inline Image compose(const Image& reflectance, const Image& shading) {
    if (reflectance.height() != shading.height() || reflectance.width() != shading.width() ||
        (shading.channels() != 1 && shading.channels() != reflectance.channels())) {
        throw ShapeError("compose: reflectance " + to_string(reflectance.data.shape()) + " and shading " +
                         to_string(shading.data.shape()) + " are incompatible");
    }
    Image out(reflectance.channels(), reflectance.height(), reflectance.width());
    const std::size_t plane = reflectance.height() * reflectance.width();
    const float* r = reflectance.data.data();
    const float* s = shading.data.data();
    float* o = out.data.data();
    for (std::size_t c = 0; c < reflectance.channels(); ++c) {
        const float* sc = s + (shading.channels() == 1 ? 0 : c * plane);
        for (std::size_t i = 0; i < plane; ++i) o[c * plane + i] = r[c * plane + i] * sc[i];
    }
    return out;
}

struct Violation {
    std::string field;
    std::size_t y = 0;
    std::size_t x = 0;
    std::string message;
};

namespace detail {

inline void check_finite_nonneg(const Image& img, const char* field, std::vector<Violation>& out) {
    for (std::size_t y = 0; y < img.height(); ++y) {
        for (std::size_t x = 0; x < img.width(); ++x) {
            for (std::size_t c = 0; c < img.channels(); ++c) {
                const float v = img(c, y, x);
                if (!std::isfinite(v) || v < 0.0f) {
                    out.push_back({field, y, x, "value not finite or negative"});
                    break;
                }
            }
        }
    }
}

}  // namespace detail

/// Returns every broken Sample invariant; empty means the sample is consistent within tol.
inline std::vector<Violation> validate_sample(const Sample& s, double tol) {
    std::vector<Violation> out;
    const std::size_t h = s.image.height(), w = s.image.width();
    auto same_dims = [&](std::size_t hh, std::size_t ww) { return hh == h && ww == w; };
    if (s.image.channels() != 3 || s.reflectance.channels() != 3 ||
        (s.shading.channels() != 1 && s.shading.channels() != 3)) {
        out.push_back({"channels", 0, 0, "image/reflectance need 3 channels, shading 1 or 3"});
        return out;
    }
    if (!same_dims(s.reflectance.height(), s.reflectance.width()) ||
        !same_dims(s.shading.height(), s.shading.width()) || !same_dims(s.labels.height(), s.labels.width())) {
        out.push_back({"dims", 0, 0, "spatial dimensions differ between image, reflectance, shading and labels"});
        return out;
    }
    detail::check_finite_nonneg(s.image, "image", out);
    detail::check_finite_nonneg(s.reflectance, "reflectance", out);
    detail::check_finite_nonneg(s.shading, "shading", out);

    const std::size_t plane = h * w;
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            double worst = 0.0;
            for (std::size_t c = 0; c < 3; ++c) {
                const double sh = s.shading.data[(s.shading.channels() == 1 ? 0 : c * plane) + y * w + x];
                const double residual = std::abs(double(s.image(c, y, x)) - double(s.reflectance(c, y, x)) * sh);
                worst = std::max(worst, residual);
            }
            if (!(worst <= tol)) {
                std::ostringstream msg;
                msg << "|I - R*S| = " << worst << " exceeds " << tol;
                out.push_back({"image", y, x, msg.str()});
            }
            if (s.labels(y, x) >= s.labels.num_classes) {
                out.push_back({"labels", y, x, "label out of range"});
            }
        }
    }
    return out;
}

}  // namespace iseg

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "iseg/binary_io.hpp"
#include "iseg/error.hpp"
#include "iseg/imaging.hpp"
#include "iseg/rng.hpp"

namespace iseg {

struct Vec3 {
    double x = 0, y = 0, z = 0;

    double dot(const Vec3& o) const { return x * o.x + y * o.y + z * o.z; }
    double norm() const { return std::sqrt(dot(*this)); }
    Vec3 normalized() const {
        const double n = norm();
        return {x / n, y / n, z / n};
    }
};

struct LightRig {
    Vec3 direction{0, 0, 1};  // unit vector pointing towards the light
    double ambient = 0.0;     // [0, 0.5]
    double intensity = 1.0;   // (0, 1.5]
};

inline void validate_rig(const LightRig& rig) {
    if (std::abs(rig.direction.norm() - 1.0) > 1e-9) throw PreconditionError("light direction is not unit length");
    if (!(rig.ambient >= 0.0 && rig.ambient <= 0.5)) throw PreconditionError("ambient outside [0, 0.5]");
    if (!(rig.intensity > 0.0 && rig.intensity <= 1.5)) throw PreconditionError("intensity outside (0, 1.5]");
}

/// Stored shading value: clamp01(ambient + intensity * max(0, n.s)).
inline double lambertian(const Vec3& normal, const LightRig& rig) {
    if (std::abs(normal.norm() - 1.0) > 1e-6) {
        throw PreconditionError("lambertian: surface normal is not unit length");
    }
    const double v = rig.ambient + rig.intensity * std::max(0.0, normal.dot(rig.direction));
    return std::clamp(v, 0.0, 1.0);
}

enum class ObjectShape : std::uint8_t { ground_plane, sphere, box, cylinder };

/// Positions and sizes are in pixel units of the canvas; heights along the view axis.
struct SceneObject {
    ObjectShape shape = ObjectShape::ground_plane;
    std::uint8_t class_id = 0;
    std::array<double, 3> albedo{0.5, 0.5, 0.5};
    double cx = 0, cy = 0;
    /// sphere: radii (a, b, c); box: half-extents (a, b) and top height; cylinder: half-length, radius, height.
    std::array<double, 3> size{1, 1, 1};
    double angle = 0;  // in-plane rotation (radians)
    bool upright = false;  // cylinders only: standing (pot) vs lying (log)
};

struct SceneSpec {
    std::uint64_t seed = 0;
    std::size_t num_classes = 8;
    std::size_t height = 96;
    std::size_t width = 128;
    std::vector<SceneObject> objects;
    std::vector<LightRig> light_rigs;
};

inline const std::vector<std::string>& default_class_names() {
    static const std::vector<std::string> names{"ground", "bush", "hedge", "trunk", "fence", "rock", "pot", "path"};
    return names;
}

inline std::vector<std::string> class_names_for(std::size_t num_classes) {
    std::vector<std::string> names;
    for (std::size_t c = 0; c < num_classes; ++c) {
        names.push_back(c < default_class_names().size() ? default_class_names()[c] : "class" + std::to_string(c));
    }
    return names;
}

inline void validate_scene(const SceneSpec& spec) {
    if (spec.objects.empty()) throw PreconditionError("scene has no objects");
    if (spec.objects.front().shape != ObjectShape::ground_plane) {
        throw PreconditionError("the ground plane must be the first scene object");
    }
    if (spec.num_classes == 0 || spec.num_classes > 256) throw PreconditionError("num_classes must be in [1, 256]");
    if (spec.height == 0 || spec.width == 0) throw PreconditionError("canvas must be non-empty");
    for (const auto& o : spec.objects) {
        if (o.class_id >= spec.num_classes) throw RangeError("object class id exceeds num_classes");
        for (double a : o.albedo) {
            if (!(a >= 0.05 && a <= 0.95)) throw PreconditionError("object albedo outside [0.05, 0.95]");
        }
    }
    for (const auto& r : spec.light_rigs) validate_rig(r);
}

namespace detail {

struct SurfaceHit {
    double z = 0;
    Vec3 normal{0, 0, 1};
};

inline Vec3 rotate_xy(const Vec3& v, double angle) {
    const double c = std::cos(angle), s = std::sin(angle);
    return {c * v.x - s * v.y, s * v.x + c * v.y, v.z};
}

/// Analytic height and normal of one object at world point (u, v), if it covers that point.
inline std::optional<SurfaceHit> intersect(const SceneObject& o, double u, double v) {
    if (o.shape == ObjectShape::ground_plane) return SurfaceHit{};
    const double c = std::cos(o.angle), s = std::sin(o.angle);
    const double lu = c * (u - o.cx) + s * (v - o.cy);
    const double lv = -s * (u - o.cx) + c * (v - o.cy);
    switch (o.shape) {
        case ObjectShape::sphere: {
            const auto [a, b, h] = o.size;
            const double q = (lu * lu) / (a * a) + (lv * lv) / (b * b);
            if (q >= 1.0) return std::nullopt;
            const double z = h * std::sqrt(1.0 - q);
            const Vec3 n = Vec3{lu / (a * a), lv / (b * b), z / (h * h)}.normalized();
            return SurfaceHit{z, rotate_xy(n, o.angle)};
        }
        case ObjectShape::box: {
            const auto [a, b, h] = o.size;
            const double du = a - std::abs(lu), dv = b - std::abs(lv);
            if (du <= 0 || dv <= 0) return std::nullopt;
            const double bevel = std::min({a, b, h}) * 0.35;
            if (std::min(du, dv) >= bevel) return SurfaceHit{h, {0, 0, 1}};
            constexpr double k = std::numbers::sqrt2 / 2;
            Vec3 n = du < dv ? Vec3{lu < 0 ? -k : k, 0, k} : Vec3{0, lv < 0 ? -k : k, k};
            return SurfaceHit{h - (bevel - std::min(du, dv)), rotate_xy(n, o.angle)};
        }
        case ObjectShape::cylinder: {
            if (o.upright) {
                // Flower-pot frustum seen from above: flat soil disc inside a sloped rim.
                const auto [inner, outer, h] = o.size;
                const double d = std::hypot(lu, lv);
                if (d >= outer) return std::nullopt;
                if (d < inner) return SurfaceHit{h * 0.85, {0, 0, 1}};
                const double phi = std::numbers::pi / 3;
                Vec3 n{std::sin(phi) * lu / d, std::sin(phi) * lv / d, std::cos(phi)};
                return SurfaceHit{h - (d - inner) * 0.3, rotate_xy(n, o.angle)};
            }
            const auto [half_len, r, unused] = o.size;
            (void)unused;
            if (std::abs(lu) >= half_len || std::abs(lv) >= r) return std::nullopt;
            const double z = std::sqrt(r * r - lv * lv);
            return SurfaceHit{z, rotate_xy(Vec3{0, lv / r, z / r}, o.angle)};
        }
        default:
            return std::nullopt;
    }
}

struct SurfacePoint {
    double z = 0;
    Vec3 normal{0, 0, 1};
    std::size_t object = 0;
};

/// Nearest surface to the (top-down, orthographic) camera: the highest one. Later objects win ties.
inline SurfacePoint trace(const SceneSpec& spec, double u, double v) {
    SurfacePoint best;
    for (std::size_t i = 1; i < spec.objects.size(); ++i) {
        if (auto hit = intersect(spec.objects[i], u, v); hit && hit->z >= best.z) {
            best = {hit->z, hit->normal, i};
        }
    }
    return best;
}

/// Per-scene camera translation derived from the scene seed; shared by all light rigs.
inline std::pair<double, double> camera_offset(std::uint64_t seed) {
    Rng rng(derive_seed(seed, 0xca3e7a));
    return {rng.uniform(-4.0, 4.0), rng.uniform(-4.0, 4.0)};
}

}  // namespace detail

/// Software-rasterized orthographic render with exact albedo, shading and labels.
/// Shading includes cast shadows: an occluded pixel receives only the ambient term.
inline Sample render_scene(const SceneSpec& spec, std::size_t rig_index) {
    validate_scene(spec);
    if (rig_index >= spec.light_rigs.size()) {
        throw RangeError("rig index " + std::to_string(rig_index) + " out of range (" +
                         std::to_string(spec.light_rigs.size()) + " rigs)");
    }
    const LightRig& rig = spec.light_rigs[rig_index];
    const std::size_t h = spec.height, w = spec.width;
    const auto [ox, oy] = detail::camera_offset(spec.seed);

    // Heightfield with a margin so off-canvas objects can still cast shadows into view.
    constexpr long margin = 48;
    const long gw = static_cast<long>(w) + 2 * margin, gh = static_cast<long>(h) + 2 * margin;
    std::vector<double> height_field(static_cast<std::size_t>(gw * gh));
    std::vector<detail::SurfacePoint> visible(h * w);
    for (long gy = 0; gy < gh; ++gy) {
        for (long gx = 0; gx < gw; ++gx) {
            const double u = double(gx - margin) + 0.5 + ox, v = double(gy - margin) + 0.5 + oy;
            const auto sp = detail::trace(spec, u, v);
            height_field[static_cast<std::size_t>(gy * gw + gx)] = sp.z;
            const long x = gx - margin, y = gy - margin;
            if (x >= 0 && y >= 0 && x < long(w) && y < long(h)) visible[std::size_t(y) * w + std::size_t(x)] = sp;
        }
    }

    const Vec3& s = rig.direction;
    const double planar = std::hypot(s.x, s.y);
    auto in_shadow = [&](long x, long y, double z) {
        if (planar < 1e-6) return false;
        const double step_x = s.x / planar, step_y = s.y / planar, rise = s.z / planar;
        for (int t = 1; t < 4 * margin; ++t) {
            const long gx = x + margin + std::lround(step_x * t);
            const long gy = y + margin + std::lround(step_y * t);
            if (gx < 0 || gy < 0 || gx >= gw || gy >= gh) return false;
            const double ray_z = z + rise * t;
            if (ray_z > 64.0) return false;
            if (height_field[static_cast<std::size_t>(gy * gw + gx)] > ray_z + 0.5) return true;
        }
        return false;
    };

    Sample out;
    out.reflectance = Image(3, h, w);
    out.shading = Image(1, h, w);
    out.labels = LabelMap(h, w, spec.num_classes);
    out.meta = {0, static_cast<std::uint32_t>(rig_index), 0};
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            const auto& sp = visible[y * w + x];
            const SceneObject& obj = spec.objects[sp.object];
            for (std::size_t c = 0; c < 3; ++c) out.reflectance(c, y, x) = static_cast<float>(obj.albedo[c]);
            double shade = lambertian(sp.normal, rig);
            if (sp.normal.dot(s) > 0 && in_shadow(long(x), long(y), sp.z)) shade = rig.ambient;
            out.shading(0, y, x) = static_cast<float>(std::clamp(shade, 0.0, 1.0));
            out.labels(y, x) = obj.class_id;
        }
    }
    out.image = compose(out.reflectance, out.shading);
    return out;
}

namespace detail {

inline std::array<double, 3> class_albedo(std::size_t kind, Rng& rng) {
    static constexpr std::array<std::array<double, 3>, 8> base{{
        {0.35, 0.50, 0.22},  // ground
        {0.22, 0.55, 0.20},  // bush
        {0.16, 0.45, 0.18},  // hedge
        {0.45, 0.30, 0.16},  // trunk
        {0.80, 0.78, 0.72},  // fence
        {0.52, 0.50, 0.48},  // rock
        {0.72, 0.38, 0.22},  // pot
        {0.74, 0.68, 0.52},  // path
    }};
    const auto& b = base[kind % base.size()];
    const double jitter = rng.uniform(-0.06, 0.06);
    std::array<double, 3> a{};
    for (std::size_t c = 0; c < 3; ++c) a[c] = std::clamp(b[c] + jitter + rng.uniform(-0.03, 0.03), 0.05, 0.95);
    return a;
}

/// Five lighting conditions cycled over rigs: clear sky, cloudy, sunset, twilight, noon.
inline LightRig make_rig(std::size_t index, Rng& rng) {
    double elevation = 0, ambient = 0, intensity = 0;
    switch (index % 5) {
        case 0: elevation = rng.uniform(40, 60); ambient = rng.uniform(0.10, 0.20); intensity = rng.uniform(0.85, 1.0); break;
        case 1: elevation = rng.uniform(50, 80); ambient = rng.uniform(0.35, 0.50); intensity = rng.uniform(0.20, 0.35); break;
        case 2: elevation = rng.uniform(12, 22); ambient = rng.uniform(0.05, 0.15); intensity = rng.uniform(0.70, 0.95); break;
        case 3: elevation = rng.uniform(20, 35); ambient = rng.uniform(0.05, 0.12); intensity = rng.uniform(0.15, 0.30); break;
        default: elevation = rng.uniform(70, 88); ambient = rng.uniform(0.15, 0.25); intensity = rng.uniform(1.0, 1.5); break;
    }
    const double az = rng.uniform(0, 2 * std::numbers::pi);
    const double el = elevation * std::numbers::pi / 180.0;
    const Vec3 dir = Vec3{std::cos(el) * std::cos(az), std::cos(el) * std::sin(az), std::sin(el)}.normalized();
    return {dir, ambient, intensity};
}

}  // namespace detail

/// Random garden-like scene: ground plane first, then paths, then raised objects.
inline SceneSpec random_scene(std::uint64_t seed, std::size_t rigs, std::size_t num_classes = 8, std::size_t height = 96,
                              std::size_t width = 128) {
    Rng rng(derive_seed(seed, 1));
    SceneSpec spec;
    spec.seed = seed;
    spec.num_classes = num_classes;
    spec.height = height;
    spec.width = width;

    SceneObject ground;
    ground.albedo = detail::class_albedo(0, rng);
    spec.objects.push_back(ground);

    // Kinds 1..7 map onto class ids; kinds at or beyond num_classes are not generated.
    const std::size_t kinds = std::min<std::size_t>(num_classes, 8);
    const double W = double(width), H = double(height);
    auto place = [&](SceneObject& o) {
        o.cx = rng.uniform(-0.1 * W, 1.1 * W);
        o.cy = rng.uniform(-0.1 * H, 1.1 * H);
        o.angle = rng.uniform(0, std::numbers::pi);
    };
    if (kinds > 7) {
        const std::size_t paths = 1 + rng.below(2);
        for (std::size_t i = 0; i < paths; ++i) {
            SceneObject p;
            p.shape = ObjectShape::box;
            p.class_id = 7;
            p.albedo = detail::class_albedo(7, rng);
            place(p);
            p.size = {rng.uniform(0.4, 0.8) * W, rng.uniform(5, 9), 0.5};
            spec.objects.push_back(p);
        }
    }
    const double scale = std::sqrt(W * H) / std::sqrt(96.0 * 128.0);
    const std::size_t count = kinds > 1 ? 6 + rng.below(7) : 0;
    for (std::size_t i = 0; i < count; ++i) {
        const std::size_t kind = 1 + rng.below(std::min<std::size_t>(kinds, 7) - 1);
        SceneObject o;
        o.class_id = static_cast<std::uint8_t>(kind);
        o.albedo = detail::class_albedo(kind, rng);
        place(o);
        switch (kind) {
            case 1: {  // spherical topiary
                o.shape = ObjectShape::sphere;
                const double r = rng.uniform(8, 16) * scale;
                o.size = {r, r, r};
                break;
            }
            case 2:  // rectangular hedge
                o.shape = ObjectShape::box;
                o.size = {rng.uniform(10, 22) * scale, rng.uniform(5, 9) * scale, rng.uniform(10, 18) * scale};
                break;
            case 3:  // fallen trunk
                o.shape = ObjectShape::cylinder;
                o.size = {rng.uniform(14, 28) * scale, rng.uniform(4, 7) * scale, 0};
                break;
            case 4:  // fence
                o.shape = ObjectShape::box;
                o.size = {rng.uniform(25, 50) * scale, rng.uniform(1.5, 2.5) * scale, rng.uniform(14, 22) * scale};
                break;
            case 5: {  // rock
                o.shape = ObjectShape::sphere;
                const double a = rng.uniform(6, 12) * scale;
                o.size = {a, a * rng.uniform(0.6, 1.0), a * rng.uniform(0.4, 0.6)};
                break;
            }
            default: {  // pot
                o.shape = ObjectShape::cylinder;
                o.upright = true;
                const double outer = rng.uniform(6, 10) * scale;
                o.size = {outer * 0.7, outer, rng.uniform(10, 15) * scale};
                break;
            }
        }
        spec.objects.push_back(o);
    }
    for (std::size_t r = 0; r < rigs; ++r) spec.light_rigs.push_back(detail::make_rig(r, rng));
    return spec;
}

// ---------------------------------------------------------------------------------------------
// ISEG1 sample container

namespace detail {

inline void put_f32_record(std::ostream& os, const Tensor& t) {
    bin::put_u8(os, 0x01);
    bin::put_u8(os, static_cast<std::uint8_t>(t.rank()));
    for (auto d : t.shape()) bin::put_u32(os, static_cast<std::uint32_t>(d));
    for (float v : t.values()) bin::put_f32(os, v);
}

inline Shape get_header(std::istream& is, std::uint8_t dtype, std::size_t rank, const char* what) {
    const auto tag = bin::get_u8(is);
    if (tag != dtype) throw FormatError(std::string(what) + ": unexpected dtype tag " + std::to_string(tag));
    const auto r = bin::get_u8(is);
    if (r != rank) throw FormatError(std::string(what) + ": unexpected rank " + std::to_string(r));
    Shape shape(r);
    for (auto& d : shape) {
        d = bin::get_u32(is);
        if (d == 0 || d > (1u << 16)) throw FormatError(std::string(what) + ": invalid dimension");
    }
    return shape;
}

inline Tensor get_f32_record(std::istream& is, const char* what) {
    Shape shape = get_header(is, 0x01, 3, what);
    std::vector<float> data(numel(shape));
    for (auto& v : data) v = bin::get_f32(is);
    return Tensor(std::move(shape), std::move(data));
}

}  // namespace detail

inline void write_sample(std::ostream& os, const Sample& s) {
    os.write("ISEG", 4);
    bin::put_u8(os, 0x01);
    detail::put_f32_record(os, s.image.data);
    detail::put_f32_record(os, s.reflectance.data);
    detail::put_f32_record(os, s.shading.data);
    bin::put_u8(os, 0x02);
    bin::put_u8(os, 2);
    bin::put_u32(os, static_cast<std::uint32_t>(s.labels.height()));
    bin::put_u32(os, static_cast<std::uint32_t>(s.labels.width()));
    os.write(reinterpret_cast<const char*>(s.labels.data.data()), static_cast<std::streamsize>(s.labels.data.size()));
}

/// Reads an ISEG1 sample. Metadata is not part of the container; the caller fills it from the manifest.
inline Sample read_sample(std::istream& is, std::size_t num_classes) {
    bin::expect_magic(is, "ISEG", 0x01, "ISEG1");
    Sample s;
    s.image = Image(detail::get_f32_record(is, "image"));
    s.reflectance = Image(detail::get_f32_record(is, "reflectance"));
    s.shading = Image(detail::get_f32_record(is, "shading"));
    Shape lshape = detail::get_header(is, 0x02, 2, "labels");
    s.labels.data = BasicTensor<std::uint8_t>(lshape);
    if (!is.read(reinterpret_cast<char*>(s.labels.data.data()), static_cast<std::streamsize>(s.labels.data.size()))) {
        throw FormatError("labels: unexpected end of file");
    }
    s.labels.num_classes = num_classes;
    if (s.image.channels() != 3 || s.reflectance.channels() != 3 || s.shading.channels() != 1) {
        throw FormatError("ISEG1 record channel counts must be 3, 3, 1");
    }
    return s;
}

inline void save_sample(const std::filesystem::path& path, const Sample& s) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open " + path.string() + " for writing");
    write_sample(os, s);
    if (!os) throw IoError("failed writing " + path.string());
}

inline Sample load_sample(const std::filesystem::path& path, std::size_t num_classes) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path.string());
    return read_sample(is, num_classes);
}

// ---------------------------------------------------------------------------------------------
// Dataset manifest

enum class Split { train, test };

inline const char* to_string(Split s) { return s == Split::train ? "train" : "test"; }

inline Split parse_split(const std::string& s) {
    if (s == "train") return Split::train;
    if (s == "test") return Split::test;
    throw ConfigError("unknown split '" + s + "' (expected train or test)");
}

struct ManifestEntry {
    std::size_t sample_id = 0;
    Split split = Split::train;
    std::uint32_t scene_id = 0;
    std::uint32_t rig_id = 0;
    std::string filename;
};

struct DatasetManifest {
    int format_version = 1;
    std::size_t height = 0, width = 0;
    std::size_t num_classes = 0;
    std::vector<std::string> class_names;
    std::uint64_t master_seed = 0;
    std::size_t num_scenes = 0, rigs_per_scene = 0;
    std::vector<std::uint64_t> class_pixels;        // over all samples
    std::vector<std::uint64_t> class_pixels_train;  // over the train split only
    std::vector<ManifestEntry> entries;

    std::size_t num_samples() const { return entries.size(); }
    std::size_t count(Split s) const {
        return static_cast<std::size_t>(std::count_if(entries.begin(), entries.end(), [s](const auto& e) { return e.split == s; }));
    }
};

namespace detail {

template <class V>
std::string join(const std::vector<V>& v) {
    std::ostringstream os;
    for (std::size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
    return os.str();
}

inline std::vector<std::string> split_csv(const std::string& s) {
    std::vector<std::string> out;
    std::string item;
    std::istringstream is(s);
    while (std::getline(is, item, ',')) out.push_back(item);
    return out;
}

}  // namespace detail

inline void write_manifest(std::ostream& os, const DatasetManifest& m) {
    os << "format_version=" << m.format_version << '\n'
       << "num_samples=" << m.num_samples() << '\n'
       << "height=" << m.height << '\n'
       << "width=" << m.width << '\n'
       << "num_classes=" << m.num_classes << '\n'
       << "class_names=" << detail::join(m.class_names) << '\n'
       << "master_seed=" << m.master_seed << '\n'
       << "num_scenes=" << m.num_scenes << '\n'
       << "rigs_per_scene=" << m.rigs_per_scene << '\n'
       << "class_pixels=" << detail::join(m.class_pixels) << '\n'
       << "class_pixels_train=" << detail::join(m.class_pixels_train) << '\n';
    for (const auto& e : m.entries) {
        os << e.sample_id << ' ' << to_string(e.split) << ' ' << e.scene_id << ' ' << e.rig_id << ' ' << e.filename
           << '\n';
    }
}

inline DatasetManifest read_manifest(std::istream& is) {
    DatasetManifest m;
    std::map<std::string, std::string> kv;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        if (auto eq = line.find('='); eq != std::string::npos) {
            kv[line.substr(0, eq)] = line.substr(eq + 1);
            continue;
        }
        std::istringstream ls(line);
        ManifestEntry e;
        std::string split;
        if (!(ls >> e.sample_id >> split >> e.scene_id >> e.rig_id >> e.filename)) {
            throw FormatError("malformed manifest sample line: " + line);
        }
        e.split = parse_split(split);
        m.entries.push_back(std::move(e));
    }
    auto get = [&](const char* key) -> const std::string& {
        auto it = kv.find(key);
        if (it == kv.end()) throw FormatError(std::string("manifest missing key ") + key);
        return it->second;
    };
    try {
        m.format_version = std::stoi(get("format_version"));
        m.height = std::stoul(get("height"));
        m.width = std::stoul(get("width"));
        m.num_classes = std::stoul(get("num_classes"));
        m.class_names = detail::split_csv(get("class_names"));
        m.master_seed = std::stoull(get("master_seed"));
        m.num_scenes = std::stoul(get("num_scenes"));
        m.rigs_per_scene = std::stoul(get("rigs_per_scene"));
        for (const auto& v : detail::split_csv(get("class_pixels"))) m.class_pixels.push_back(std::stoull(v));
        for (const auto& v : detail::split_csv(get("class_pixels_train"))) m.class_pixels_train.push_back(std::stoull(v));
        if (std::stoul(get("num_samples")) != m.entries.size()) throw FormatError("manifest sample count mismatch");
    } catch (const std::logic_error&) {
        throw FormatError("manifest contains a malformed numeric value");
    }
    if (m.format_version != 1) throw FormatError("unsupported manifest format_version");
    return m;
}

inline DatasetManifest load_manifest(const std::filesystem::path& dir) {
    std::ifstream is(dir / "manifest.txt");
    if (!is) throw IoError("cannot open manifest in " + dir.string());
    return read_manifest(is);
}

struct GenerateOptions {
    std::size_t num_classes = 8;
    std::size_t height = 96;
    std::size_t width = 128;
};

/// Renders num_scenes x rigs_per_scene samples into out_dir with an 80/20 split by scene.
/// Every sample is validated before it is written; the manifest is written last.
inline DatasetManifest generate_dataset(std::size_t num_scenes, std::size_t rigs_per_scene,
                                        const std::filesystem::path& out_dir, std::uint64_t master_seed,
                                        const GenerateOptions& opts = {}) {
    if (num_scenes < 2) throw PreconditionError("generate_dataset needs at least 2 scenes for a scene split");
    if (rigs_per_scene < 1) throw PreconditionError("generate_dataset needs at least 1 light rig per scene");
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec || !std::filesystem::is_directory(out_dir)) throw IoError("cannot create directory " + out_dir.string());

    DatasetManifest m;
    m.height = opts.height;
    m.width = opts.width;
    m.num_classes = opts.num_classes;
    m.class_names = class_names_for(opts.num_classes);
    m.master_seed = master_seed;
    m.num_scenes = num_scenes;
    m.rigs_per_scene = rigs_per_scene;
    m.class_pixels.assign(opts.num_classes, 0);
    m.class_pixels_train.assign(opts.num_classes, 0);

    std::vector<std::size_t> order(num_scenes);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng split_rng(derive_seed(master_seed, 0x5b117));
    split_rng.shuffle(order);
    const std::size_t num_test = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(0.2 * double(num_scenes))));
    std::vector<Split> scene_split(num_scenes, Split::train);
    for (std::size_t i = 0; i < num_test; ++i) scene_split[order[i]] = Split::test;

    for (std::size_t scene = 0; scene < num_scenes; ++scene) {
        const SceneSpec spec = random_scene(derive_seed(master_seed, 1000 + scene), rigs_per_scene, opts.num_classes,
                                            opts.height, opts.width);
        for (std::size_t rig = 0; rig < rigs_per_scene; ++rig) {
            Sample s = render_scene(spec, rig);
            s.meta.scene_id = static_cast<std::uint32_t>(scene);
            if (auto v = validate_sample(s, 1e-6); !v.empty()) {
                throw Error("generated sample violates consistency: " + v.front().field + ": " + v.front().message);
            }
            std::ostringstream name;
            name << 's' << std::setw(4) << std::setfill('0') << scene << "_r" << rig << ".iseg";
            save_sample(out_dir / name.str(), s);
            for (auto l : s.labels.data.values()) {
                ++m.class_pixels[l];
                if (scene_split[scene] == Split::train) ++m.class_pixels_train[l];
            }
            m.entries.push_back({m.entries.size(), scene_split[scene], static_cast<std::uint32_t>(scene),
                                 static_cast<std::uint32_t>(rig), name.str()});
        }
    }
    std::ofstream os(out_dir / "manifest.txt", std::ios::trunc);
    if (!os) throw IoError("cannot write manifest in " + out_dir.string());
    write_manifest(os, m);
    if (!os) throw IoError("failed writing manifest in " + out_dir.string());
    return m;
}

/// Loads all samples of one split (in manifest order).
inline std::vector<Sample> load_split(const std::filesystem::path& dir, const DatasetManifest& m, Split split) {
    std::vector<Sample> out;
    for (const auto& e : m.entries) {
        if (e.split != split) continue;
        Sample s = load_sample(dir / e.filename, m.num_classes);
        if (s.image.height() != m.height || s.image.width() != m.width) {
            throw FormatError(e.filename + ": dimensions disagree with manifest");
        }
        s.meta = {e.scene_id, e.rig_id, 0};
        out.push_back(std::move(s));
    }
    return out;
}

}  // namespace iseg

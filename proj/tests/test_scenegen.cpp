#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>

#include <unistd.h>

#include "iseg/scenegen.hpp"

using namespace iseg;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("iseg_scenegen_" + std::to_string(::getpid()) + "_" + name);
    fs::remove_all(p);
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(is), {}};
}

SceneSpec ground_only(LightRig rig) {
    SceneSpec spec;
    spec.seed = 11;
    spec.height = 16;
    spec.width = 24;
    SceneObject g;
    g.albedo = {0.3, 0.6, 0.9};
    spec.objects.push_back(g);
    spec.light_rigs.push_back(rig);
    return spec;
}

}  // namespace

TEST(Lambertian, AlignedVectors) { EXPECT_DOUBLE_EQ(lambertian({0, 0, 1}, {{0, 0, 1}, 0.0, 1.0}), 1.0); }

TEST(Lambertian, BackFacingKeepsAmbient) { EXPECT_DOUBLE_EQ(lambertian({0, 0, 1}, {{0, 0, -1}, 0.2, 1.0}), 0.2); }

TEST(Lambertian, TiltedLight) {
    const double r = 1.0 / std::sqrt(2.0);
    EXPECT_NEAR(lambertian({0, 0, 1}, {{0, r, r}, 0.0, 1.0}), 0.70711, 1e-5);
}

TEST(Lambertian, ClampsAndRejectsNonUnitNormal) {
    EXPECT_DOUBLE_EQ(lambertian({0, 0, 1}, {{0, 0, 1}, 0.5, 1.5}), 1.0);
    EXPECT_THROW(lambertian({0, 0, 2}, {{0, 0, 1}, 0.0, 1.0}), PreconditionError);
}

TEST(RenderScene, GroundPlaneUnitShading) {
    const Sample s = render_scene(ground_only({{0, 0, 1}, 0.0, 1.0}), 0);
    for (float v : s.shading.data.values()) EXPECT_EQ(v, 1.0f);
    EXPECT_EQ(s.image, s.reflectance);
    for (auto l : s.labels.data.values()) EXPECT_EQ(l, 0);
}

TEST(RenderScene, SphereApexShading) {
    SceneSpec spec = ground_only({{0, 0, 1}, 0.1, 0.7});
    spec.height = 40;
    spec.width = 40;
    const auto [ox, oy] = detail::camera_offset(spec.seed);
    SceneObject ball;
    ball.shape = ObjectShape::sphere;
    ball.class_id = 1;
    ball.albedo = {0.8, 0.1, 0.1};
    ball.cx = 20.0 + 0.5 + ox;  // centre of pixel (20, 20) in world units
    ball.cy = 20.0 + 0.5 + oy;
    ball.size = {8, 8, 8};
    spec.objects.push_back(ball);
    const Sample s = render_scene(spec, 0);
    const float shade = static_cast<float>(0.1 + 0.7);
    EXPECT_FLOAT_EQ(s.shading(0, 20, 20), shade);
    EXPECT_EQ(s.labels(20, 20), 1);
    for (std::size_t c = 0; c < 3; ++c) {
        EXPECT_EQ(s.image(c, 20, 20), static_cast<float>(ball.albedo[c]) * s.shading(0, 20, 20));
    }
}

TEST(RenderScene, Deterministic) {
    const SceneSpec spec = random_scene(5, 2, 8, 32, 48);
    EXPECT_EQ(render_scene(spec, 1), render_scene(spec, 1));
    EXPECT_EQ(random_scene(5, 2, 8, 32, 48).objects.size(), spec.objects.size());
}

TEST(RenderScene, Errors) {
    SceneSpec spec = ground_only({{0, 0, 1}, 0.0, 1.0});
    EXPECT_THROW(render_scene(spec, 1), RangeError);
    spec.objects.clear();
    EXPECT_THROW(render_scene(spec, 0), PreconditionError);
    EXPECT_THROW(render_scene(ground_only({{0, 0, 0.5}, 0.0, 1.0}), 0), PreconditionError);
}

TEST(RenderScene, AlbedoAndLabelsInvariantAcrossRigs) {
    for (std::uint64_t seed : {1u, 2u, 3u}) {
        const SceneSpec spec = random_scene(seed, 5, 8, 32, 48);
        const Sample first = render_scene(spec, 0);
        bool shading_differs = false;
        for (std::size_t r = 1; r < 5; ++r) {
            const Sample s = render_scene(spec, r);
            EXPECT_EQ(s.reflectance, first.reflectance);
            EXPECT_EQ(s.labels, first.labels);
            shading_differs = shading_differs || !(s.shading == first.shading);
        }
        EXPECT_TRUE(shading_differs);
    }
}

TEST(RandomScene, WithinDeclaredRanges) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const SceneSpec spec = random_scene(seed, 3, 8, 48, 64);
        EXPECT_NO_THROW(validate_scene(spec));
        for (const auto& o : spec.objects) {
            EXPECT_LT(o.class_id, 8);
            for (double a : o.albedo) {
                EXPECT_GE(a, 0.05);
                EXPECT_LE(a, 0.95);
            }
        }
        const Sample s = render_scene(spec, 2);
        EXPECT_TRUE(validate_sample(s, 1e-6).empty());
    }
}

TEST(GenerateDataset, MinimalSplit) {
    const auto dir = scratch("minimal");
    const auto m = generate_dataset(2, 1, dir, 9, {8, 16, 16});
    EXPECT_EQ(m.num_samples(), 2u);
    EXPECT_EQ(m.count(Split::train), 1u);
    EXPECT_EQ(m.count(Split::test), 1u);
    fs::remove_all(dir);
}

TEST(GenerateDataset, DefaultCountsSplitByScene) {
    const auto dir = scratch("counts");
    const auto m = generate_dataset(40, 5, dir, 1, {8, 16, 16});
    EXPECT_EQ(m.num_samples(), 200u);
    EXPECT_EQ(m.count(Split::train), 160u);
    EXPECT_EQ(m.count(Split::test), 40u);
    std::map<std::uint32_t, Split> scene_split;
    for (const auto& e : m.entries) {
        auto [it, fresh] = scene_split.emplace(e.scene_id, e.split);
        if (!fresh) {
            EXPECT_EQ(it->second, e.split);
        }
    }
    std::uint64_t total = 0;
    for (auto c : m.class_pixels) total += c;
    EXPECT_EQ(total, 200u * 16 * 16);
    const auto reread = load_manifest(dir);
    EXPECT_EQ(reread.class_pixels, m.class_pixels);
    EXPECT_EQ(reread.entries.size(), 200u);
    fs::remove_all(dir);
}

TEST(GenerateDataset, ByteIdenticalRegeneration) {
    const auto a = scratch("regen_a"), b = scratch("regen_b");
    generate_dataset(3, 2, a, 4, {8, 24, 32});
    generate_dataset(3, 2, b, 4, {8, 24, 32});
    for (const auto& entry : fs::directory_iterator(a)) {
        EXPECT_EQ(slurp(entry.path()), slurp(b / entry.path().filename())) << entry.path();
    }
    fs::remove_all(a);
    fs::remove_all(b);
}

TEST(GenerateDataset, RejectsSingleScene) {
    EXPECT_THROW(generate_dataset(1, 1, scratch("single"), 1), PreconditionError);
}

TEST(Container, RoundTrip) {
    Sample s = render_scene(random_scene(3, 1, 8, 16, 24), 0);
    std::stringstream ss;
    write_sample(ss, s);
    Sample back = read_sample(ss, 8);
    back.meta = s.meta;
    EXPECT_EQ(back, s);
}

TEST(Container, RejectsBadMagic) {
    std::stringstream ss;
    ss << "IXEG" << char(1);
    EXPECT_THROW(read_sample(ss, 8), FormatError);
    std::stringstream truncated;
    write_sample(truncated, render_scene(random_scene(3, 1, 8, 16, 24), 0));
    std::string bytes = truncated.str();
    std::stringstream cut(bytes.substr(0, bytes.size() - 10));
    EXPECT_THROW(read_sample(cut, 8), FormatError);
}

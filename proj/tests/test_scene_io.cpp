// Copyright Contributors to the splatfield project
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <limits>
#include <random>

#include <splatfield/scene_io.hpp>
#include <splatfield/synthetic.hpp>

#include "support.hpp"

using namespace splatfield;
using splatfield::testing::TempDir;

namespace {

GaussianCloud raw_cloud(std::size_t n, std::size_t sh_coeffs = 1) {
    GaussianCloud c;
    c.sh_coeffs = sh_coeffs;
    c.positions.assign(3 * n, 0.0f);
    c.sh.assign(n * sh_coeffs * 3, 0.0f);
    c.raw_opacities.assign(n, 0.0f);
    c.log_scales.assign(3 * n, 0.0f);
    c.raw_rotations.assign(4 * n, 0.0f);
    for (std::size_t k = 0; k < n; ++k) {
        c.raw_rotations[4 * k] = 1.0f;
    }
    return c;
}

template <typename T>
bool same_bits(const std::vector<T> &a, const std::vector<T> &b) {
    return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(T)) == 0;
}

template <typename F>
std::string error_of(F &&f) {
    try {
        f();
    } catch (const std::exception &e) {
        return e.what();
    }
    return {};
}

nlohmann::json camera_json(int view) {
    return {{"view", view}, {"width", 100}, {"height", 100}, {"fx", 100.0}, {"fy", 100.0}, {"cx", 50.0},
            {"cy", 50.0},   {"R", {1, 0, 0, 0, 1, 0, 0, 0, 1}}, {"t", {0, 0, 0}}};
}

} // namespace

TEST(Ply, ZeroRawOpacityLoadsAsHalf) {
    const auto cloud = parse_ply(encode_ply(raw_cloud(1)));
    ASSERT_EQ(cloud.count(), 1u);
    EXPECT_DOUBLE_EQ(cloud.opacity(0), 0.5);
}

TEST(Ply, ZeroRawScaleLoadsAsUnit) {
    const auto cloud = parse_ply(encode_ply(raw_cloud(1)));
    EXPECT_EQ(cloud.scale(0), Vec3(1.0, 1.0, 1.0));
}

TEST(Ply, RoundTripIsBitExact) {
    for (int degree : {0, 1, 3}) {
        TempDir dir;
        const auto scene = synth::random_scene({.gaussians = 100, .sh_degree = degree, .seed = 7});
        save_ply(scene.cloud, dir / "scene.ply");
        const auto back = load_ply(dir / "scene.ply");
        EXPECT_EQ(back.sh_coeffs, scene.cloud.sh_coeffs);
        EXPECT_TRUE(same_bits(back.positions, scene.cloud.positions));
        EXPECT_TRUE(same_bits(back.sh, scene.cloud.sh));
        EXPECT_TRUE(same_bits(back.raw_opacities, scene.cloud.raw_opacities));
        EXPECT_TRUE(same_bits(back.log_scales, scene.cloud.log_scales));
        EXPECT_TRUE(same_bits(back.raw_rotations, scene.cloud.raw_rotations));
        EXPECT_EQ(encode_ply(back), encode_ply(scene.cloud));
    }
}

TEST(Ply, DegreeInferredFromRestCount) {
    EXPECT_EQ(parse_ply(encode_ply(raw_cloud(2, 16))).sh_degree(), 3);
    EXPECT_EQ(parse_ply(encode_ply(raw_cloud(2, 4))).sh_degree(), 1);
}

TEST(Ply, RotationsAreNormalizedOnAccess) {
    auto c = raw_cloud(1);
    c.raw_rotations = {2.0f, 0.0f, 0.0f, 2.0f};
    const auto q = parse_ply(encode_ply(c)).rotation(0);
    EXPECT_NEAR(q.norm(), 1.0, 1e-12);
    EXPECT_NEAR(q.w(), std::sqrt(0.5), 1e-7);
}

TEST(Ply, MissingPropertyIsNamed) {
    std::string bytes = encode_ply(raw_cloud(1));
    const auto at = bytes.find("property float opacity\n");
    ASSERT_NE(at, std::string::npos);
    bytes.erase(at, std::strlen("property float opacity\n"));
    bytes.resize(bytes.size() - 4);
    const auto msg = error_of([&] { (void)parse_ply(bytes); });
    EXPECT_NE(msg.find("opacity"), std::string::npos) << msg;
    EXPECT_THROW((void)parse_ply(bytes), ParseError);
}

TEST(Ply, TruncatedPayloadIsRejected) {
    std::string bytes = encode_ply(raw_cloud(3));
    bytes.resize(bytes.size() - 10);
    const auto msg = error_of([&] { (void)parse_ply(bytes); });
    EXPECT_NE(msg.find("truncated"), std::string::npos) << msg;
    EXPECT_NE(msg.find("vertex 2"), std::string::npos) << msg;
    EXPECT_NE(msg.find("rot_"), std::string::npos) << msg;
}

TEST(Ply, MalformedHeaderIsRejected) {
    EXPECT_THROW((void)parse_ply("not a ply"), ParseError);
    std::string ascii = encode_ply(raw_cloud(1));
    ascii.replace(ascii.find("binary_little_endian"), 20, "ascii");
    EXPECT_THROW((void)parse_ply(ascii), ParseError);
}

TEST(Ply, NonFinitePayloadIsRejected) {
    auto c = raw_cloud(2);
    std::string bytes = encode_ply(c);
    const float nan = std::numeric_limits<float>::quiet_NaN();
    std::memcpy(bytes.data() + bytes.size() - sizeof(float), &nan, sizeof(float));
    const auto msg = error_of([&] { (void)parse_ply(bytes); });
    EXPECT_NE(msg.find("rot_3"), std::string::npos) << msg;
}

TEST(Ply, ZeroGaussiansIsAnEmptySceneError) {
    const std::string bytes = encode_ply(raw_cloud(0), true);
    EXPECT_THROW((void)parse_ply(bytes), EmptySceneError);
    EXPECT_EQ(parse_ply(bytes, "PLY", true).count(), 0u);
    EXPECT_THROW((void)encode_ply(raw_cloud(0)), EmptySceneError);
}

TEST(Ftn1, ZeroTensorLoads) {
    TempDir dir;
    const std::uint64_t dims[3] = {2, 2, 3};
    const std::vector<float> zeros(12, 0.0f);
    write_file(dir / "z.ftn1", encode_ftn1(dims, zeros));
    const auto map = load_feature_map(dir / "z.ftn1");
    EXPECT_EQ(map.height, 2u);
    EXPECT_EQ(map.width, 2u);
    EXPECT_EQ(map.channels, 3u);
    ASSERT_EQ(map.data.size(), 12u);
    for (float v : map.data) {
        EXPECT_EQ(v, 0.0f);
    }
}

TEST(Ftn1, NanNamesFirstOffendingIndex) {
    const std::uint64_t dims[3] = {2, 2, 3};
    std::vector<float> values(12, 1.0f);
    values[1 * 6 + 0 * 3 + 2] = std::numeric_limits<float>::quiet_NaN();
    values[11] = std::numeric_limits<float>::infinity();
    const auto msg = error_of([&] { (void)parse_ftn1(encode_ftn1(dims, values)); });
    EXPECT_NE(msg.find("(1,0,2)"), std::string::npos) << msg;
}

TEST(Ftn1, BadMagicAndDimMismatch) {
    const std::uint64_t dims[3] = {2, 2, 3};
    std::string bytes = encode_ftn1(dims, std::vector<float>(12, 0.0f));
    std::string bad = bytes;
    bad[0] = 'X';
    EXPECT_NE(error_of([&] { (void)parse_ftn1(bad); }).find("bad magic"), std::string::npos);
    std::string short_payload = bytes.substr(0, bytes.size() - 4);
    EXPECT_NE(error_of([&] { (void)parse_ftn1(short_payload); }).find("dim mismatch"), std::string::npos);
    EXPECT_THROW((void)parse_ftn1(bytes + "xxxx"), ParseError);
}

TEST(Ftn1, FeatureMapMustHaveRankThree) {
    TempDir dir;
    const std::uint64_t dims[2] = {3, 4};
    write_file(dir / "r2.ftn1", encode_ftn1(dims, std::vector<float>(12, 0.0f)));
    EXPECT_THROW((void)load_feature_map(dir / "r2.ftn1"), ParseError);
}

// Full-size LSeg-like map: 480 x 640 x 512 floats, about 630 MB on disk.
TEST(Ftn1, LargeFeatureMapRoundTripsByteIdentically) {
    TempDir dir;
    std::string original;
    {
        FeatureMap map(480, 640, 512);
        std::mt19937 rng(3);
        std::uniform_real_distribution<float> u(-1.0f, 1.0f);
        for (auto &v : map.data) {
            v = u(rng);
        }
        original = encode_ftn1(std::vector<std::uint64_t>{480, 640, 512}, map.data);
        save_feature_map(map, dir / "a.ftn1");
    }
    {
        const auto loaded = load_feature_map(dir / "a.ftn1");
        EXPECT_EQ(loaded.height, 480u);
        EXPECT_EQ(loaded.width, 640u);
        EXPECT_EQ(loaded.channels, 512u);
        save_feature_map(loaded, dir / "b.ftn1");
    }
    EXPECT_TRUE(read_file(dir / "b.ftn1") == original);
}

TEST(Cameras, IdentityPoseLooksDownPlusZ) {
    const auto cams = parse_cameras(nlohmann::json::array({camera_json(0)}));
    ASSERT_EQ(cams.size(), 1u);
    const Camera &c = cams[0];
    const Vec3 ray_world = c.R.transpose() * Vec3(0, 0, 1);
    EXPECT_EQ(ray_world, Vec3(0, 0, 1));
    EXPECT_EQ(c.center(), Vec3::Zero());
    EXPECT_EQ(c.width, 100);
    EXPECT_DOUBLE_EQ(c.cx, 50.0);
    // A point on +z projects to the principal point.
    const auto p = c.to_camera(Vec3(0, 0, 5));
    EXPECT_DOUBLE_EQ(c.fx * p.x() / p.z() + c.cx, 50.0);
    EXPECT_DOUBLE_EQ(c.fy * p.y() / p.z() + c.cy, 50.0);
}

TEST(Cameras, DuplicateViewIndexIsRejected) {
    const auto doc = nlohmann::json::array({camera_json(3), camera_json(3)});
    const auto msg = error_of([&] { (void)parse_cameras(doc); });
    EXPECT_NE(msg.find("duplicate view index 3"), std::string::npos) << msg;
}

TEST(Cameras, ReflectionIsRejected) {
    // Orthonormal but improper: a mirror through the x axis.
    auto cam = camera_json(0);
    cam["R"] = {-1, 0, 0, 0, 1, 0, 0, 0, 1};
    Eigen::Matrix3d R;
    R << -1, 0, 0, 0, 1, 0, 0, 0, 1;
    ASSERT_NEAR(R.determinant(), -1.0, 1e-12);
    ASSERT_NEAR((R * R.transpose() - Mat3::Identity()).norm(), 0.0, 1e-12);
    EXPECT_THROW((void)parse_cameras(nlohmann::json::array({cam})), ParseError);

    cam["R"] = {1.01, 0, 0, 0, 1, 0, 0, 0, 1};
    EXPECT_THROW((void)parse_cameras(nlohmann::json::array({cam})), ParseError);
}

TEST(Cameras, MissingFieldIsNamed) {
    auto cam = camera_json(0);
    cam.erase("fy");
    const auto msg = error_of([&] { (void)parse_cameras(nlohmann::json::array({cam})); });
    EXPECT_NE(msg.find("'fy'"), std::string::npos) << msg;
}

TEST(Cameras, SortedByViewAndRoundTrip) {
    TempDir dir;
    const auto cams = parse_cameras(nlohmann::json::array({camera_json(2), camera_json(0), camera_json(1)}));
    ASSERT_EQ(cams.size(), 3u);
    for (std::size_t i = 0; i < 3; ++i) {
        EXPECT_EQ(cams[i].view, i);
    }
    const auto orbit = synth::random_scene({.views = 4, .seed = 2}).cameras;
    save_cameras(orbit, dir / "c.json");
    const auto back = load_cameras(dir / "c.json");
    ASSERT_EQ(back.size(), orbit.size());
    for (std::size_t i = 0; i < orbit.size(); ++i) {
        EXPECT_EQ(back[i].R, orbit[i].R);
        EXPECT_EQ(back[i].t, orbit[i].t);
        EXPECT_EQ(back[i].fx, orbit[i].fx);
    }
}

TEST(FeatureStoreFile, SingleRowRoundTrips) {
    FeatureStore s(1, 4);
    s.data = {1, 2, 3, 4};
    const auto back = parse_feature_store(encode_feature_store(s));
    EXPECT_EQ(back, s);
}

TEST(FeatureStoreFile, PrunedRowIsZeroedOnSave) {
    FeatureStore s(2, 3);
    s.data = {1, 2, 3, 4, 5, 6};
    s.pruned[0] = 1;
    const auto back = parse_feature_store(encode_feature_store(s));
    EXPECT_TRUE(back.is_pruned(0));
    EXPECT_FALSE(back.is_pruned(1));
    EXPECT_EQ(back.data, (std::vector<float>{0, 0, 0, 4, 5, 6}));
}

TEST(FeatureStoreFile, RandomStoreRoundTripsBitExactly) {
    TempDir dir;
    FeatureStore s(1000, 64);
    std::mt19937 rng(11);
    std::normal_distribution<float> n(0.0f, 3.0f);
    for (auto &v : s.data) {
        v = n(rng);
    }
    for (std::size_t k = 0; k < s.count; k += 7) {
        s.set_pruned(k);
    }
    save_feature_store(s, dir / "s.sfs");
    const auto back = load_feature_store(dir / "s.sfs", 1000);
    EXPECT_TRUE(same_bits(back.data, s.data));
    EXPECT_EQ(back.pruned, s.pruned);
}

TEST(FeatureStoreFile, CountMismatchIsRejected) {
    const auto bytes = encode_feature_store(FeatureStore(10, 2));
    EXPECT_THROW((void)parse_feature_store(bytes, 11), ValidationError);
    EXPECT_NO_THROW((void)parse_feature_store(bytes, 10));
    EXPECT_THROW((void)parse_feature_store(bytes.substr(0, bytes.size() - 1)), ParseError);
}

TEST(PromptBankFile, RoundTripAndLookup) {
    TempDir dir;
    PromptBank bank{3, {{"chair", {1, 0, 0}}, {"table", {0, 0.5f, 0.5f}}}};
    save_prompt_bank(bank, dir / "p.json");
    const auto back = load_prompt_bank(dir / "p.json");
    EXPECT_EQ(back.names(), (std::vector<std::string>{"chair", "table"}));
    EXPECT_EQ(back.embedding("table"), bank.entries[1].embedding);
    const auto msg = error_of([&] { (void)back.embedding("sofa"); });
    EXPECT_NE(msg.find("chair, table"), std::string::npos) << msg;
}

TEST(PromptBankFile, InvalidBanksAreRejected) {
    EXPECT_THROW((void)parse_prompt_bank({{"dim", 2}, {"prompts", {{{"name", "a"}, {"embedding", {1, 0, 0}}}}}}),
                 ParseError);
    EXPECT_THROW((void)parse_prompt_bank({{"dim", 2}, {"prompts", {{{"name", "a"}, {"embedding", {0, 0}}}}}}),
                 ParseError);
    EXPECT_THROW((void)parse_prompt_bank({{"dim", 2},
                                          {"prompts",
                                           {{{"name", "a"}, {"embedding", {1, 0}}},
                                            {{"name", "a"}, {"embedding", {0, 1}}}}}}),
                 ParseError);
    EXPECT_THROW((void)parse_prompt_bank({{"prompts", nlohmann::json::array()}}), ParseError);
}

TEST(Pgm, MaskRoundTrip) {
    TempDir dir;
    Mask m(5, 7);
    for (std::size_t i = 0; i < m.data.size(); i += 3) {
        m.data[i] = 1;
    }
    save_mask(m, dir / "m.pgm");
    const std::string bytes = read_file(dir / "m.pgm");
    EXPECT_EQ(bytes.substr(0, 2), "P5");
    EXPECT_EQ(static_cast<unsigned char>(bytes[bytes.size() - m.data.size()]), 255);
    EXPECT_EQ(load_mask(dir / "m.pgm"), m);
}

TEST(Pgm, LabelRoundTripIncludingBackground) {
    TempDir dir;
    LabelImage l(4, 6);
    for (std::size_t i = 0; i < l.data.size(); ++i) {
        l.data[i] = static_cast<std::int32_t>(i % 5) - 1;
    }
    l.data[3] = 65534;
    save_labels(l, dir / "l.pgm");
    EXPECT_EQ(load_labels(dir / "l.pgm"), l);
    l.data[0] = 65535;
    EXPECT_THROW((void)encode_label_pgm(l), ValidationError);
}

TEST(Png, DecodesToTheEncodedBytes) {
    Image rgb(3, 5, 3);
    for (std::size_t i = 0; i < rgb.data.size(); ++i) {
        rgb.data[i] = float(i) / float(rgb.data.size() - 1);
    }
    const auto decoded = splatfield::testing::decode_png(encode_png(rgb));
    ASSERT_EQ(decoded.channels, 3u);
    ASSERT_EQ(decoded.width, 5u);
    ASSERT_EQ(decoded.height, 3u);
    for (std::size_t i = 0; i < rgb.data.size(); ++i) {
        EXPECT_EQ(decoded.data[i], std::lround(rgb.data[i] * 255.0));
    }
    Image gray(2, 2, 1, 2.0f);
    const auto g = splatfield::testing::decode_png(encode_png(gray));
    EXPECT_EQ(g.channels, 1u);
    EXPECT_EQ(g.data, (std::vector<std::uint8_t>(4, 255)));
    EXPECT_THROW((void)encode_png(Image(2, 2, 2)), ValidationError);
}

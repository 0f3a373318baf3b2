// Copyright Contributors to the splatfield project
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Procedural scenes with known ground truth, for tests, benchmarks and the CLI fixture generator.

#include "splatfield/backprojection.hpp"
#include "splatfield/feature_store.hpp"
#include "splatfield/gaussian.hpp"
#include "splatfield/query.hpp"
#include "splatfield/raster.hpp"
#include "splatfield/rasterizer.hpp"

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string>
#include <vector>

namespace splatfield::synth {

namespace detail {

inline Eigen::Quaterniond random_rotation(std::mt19937_64 &rng) {
    std::normal_distribution<double> n(0.0, 1.0);
    Eigen::Quaterniond q(n(rng), n(rng), n(rng), n(rng));
    q.normalize();
    return q;
}

inline Vec3 orbit_point(double radius, double azimuth, double elevation) {
    return {radius * std::cos(elevation) * std::sin(azimuth), radius * std::sin(elevation),
            -radius * std::cos(elevation) * std::cos(azimuth)};
}

} // namespace detail

/// Focal length giving a horizontal field of view of `fov_degrees`.
inline double focal_for_fov(int width, double fov_degrees) {
    return 0.5 * width / std::tan(0.5 * fov_degrees * std::numbers::pi / 180.0);
}

/// Camera on a sphere around `target`, y axis up. Azimuth 0 looks along +z.
inline Camera orbit_camera(std::size_t view, double radius, double azimuth, double elevation, int width, int height,
                           double focal, const Vec3 &target = Vec3::Zero()) {
    return look_at(view, target + detail::orbit_point(radius, azimuth, elevation), target, Vec3(0.0, 1.0, 0.0),
                   width, height, focal);
}

struct RandomSceneOptions {
    std::size_t gaussians = 200;
    int width = 64;
    int height = 64;
    std::size_t views = 1;
    int sh_degree = 0;
    /// Gaussian means are drawn uniformly from [-extent, extent]^3.
    double extent = 1.0;
    double min_scale = 0.03;
    double max_scale = 0.3;
    double min_opacity = 0.1;
    double max_opacity = 0.95;
    /// Base colors are drawn from [min_color, max_color] per channel.
    double min_color = 0.1;
    double max_color = 0.9;
    /// Standard deviation of the higher-order SH coefficients.
    double sh_sigma = 0.1;
    std::uint64_t seed = 0;
};

/// Random Gaussians in a cube, viewed by cameras on a ring at distance 4.
inline SceneBundle random_scene(const RandomSceneOptions &o) {
    std::mt19937_64 rng(o.seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::normal_distribution<double> n(0.0, 1.0);
    auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * u(rng); };

    SceneBundle scene;
    scene.cloud.sh_coeffs = sh::coeffs_for_degree(o.sh_degree);
    for (std::size_t k = 0; k < o.gaussians; ++k) {
        Gaussian g;
        g.position = Vec3(uniform(-o.extent, o.extent), uniform(-o.extent, o.extent), uniform(-o.extent, o.extent));
        g.rotation = detail::random_rotation(rng);
        const double ls = std::log(o.min_scale), hs = std::log(o.max_scale);
        g.scale = Vec3(std::exp(uniform(ls, hs)), std::exp(uniform(ls, hs)), std::exp(uniform(ls, hs)));
        g.opacity = uniform(o.min_opacity, o.max_opacity);
        g.sh = Gaussian::dc_from_color(
            {uniform(o.min_color, o.max_color), uniform(o.min_color, o.max_color), uniform(o.min_color, o.max_color)});
        for (std::size_t i = 1; i < scene.cloud.sh_coeffs; ++i) {
            g.sh.push_back({o.sh_sigma * n(rng), o.sh_sigma * n(rng), o.sh_sigma * n(rng)});
        }
        scene.cloud.append(g);
    }
    const double focal = focal_for_fov(o.width, 50.0);
    const double phase = uniform(0.0, 2.0 * std::numbers::pi);
    for (std::size_t v = 0; v < o.views; ++v) {
        const double az = phase + 2.0 * std::numbers::pi * double(v) / double(o.views);
        scene.cameras.push_back(orbit_camera(v, 4.0, az, uniform(-0.4, 0.4), o.width, o.height, focal));
    }
    scene.background = {uniform(0.0, 1.0), uniform(0.0, 1.0), uniform(0.0, 1.0)};
    return scene;
}

/// Scene of disjoint blobs, each one object; `object` holds every Gaussian's object id.
struct BlobScene {
    SceneBundle scene;
    std::vector<std::int32_t> object;
    std::size_t objects = 0;
    std::vector<std::size_t> training_views;
    std::vector<std::size_t> heldout_views;
};

struct BlobSceneOptions {
    std::size_t blobs = 5;
    std::size_t gaussians_per_blob = 400;
    std::size_t training_views = 12;
    std::size_t heldout_views = 2;
    int width = 128;
    int height = 128;
    /// Blob centers sit on a ring of this radius; Gaussian means lie within blob_radius of their center.
    double ring_radius = 0.75;
    double blob_radius = 0.22;
    std::uint64_t seed = 0;
};

inline BlobScene blob_scene(const BlobSceneOptions &o) {
    if (o.blobs == 0 || o.gaussians_per_blob == 0) {
        throw ValidationError("blob_scene needs at least one blob and one Gaussian per blob");
    }
    std::mt19937_64 rng(o.seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::normal_distribution<double> n(0.0, 1.0);
    BlobScene out;
    out.objects = o.blobs;
    for (std::size_t b = 0; b < o.blobs; ++b) {
        const double a = 2.0 * std::numbers::pi * double(b) / double(o.blobs);
        const Vec3 center(o.ring_radius * std::cos(a), 0.25 * std::sin(3.0 * a), o.ring_radius * std::sin(a));
        const Rgb base = {0.2 + 0.6 * u(rng), 0.2 + 0.6 * u(rng), 0.2 + 0.6 * u(rng)};
        for (std::size_t i = 0; i < o.gaussians_per_blob; ++i) {
            Vec3 d;
            do {
                d = Vec3(2.0 * u(rng) - 1.0, 2.0 * u(rng) - 1.0, 2.0 * u(rng) - 1.0);
            } while (d.squaredNorm() > 1.0);
            Gaussian g;
            g.position = center + o.blob_radius * d;
            g.rotation = detail::random_rotation(rng);
            g.scale = Vec3(0.02 + 0.03 * u(rng), 0.02 + 0.03 * u(rng), 0.02 + 0.03 * u(rng));
            g.opacity = 0.85 + 0.1 * u(rng);
            Rgb c = base;
            for (double &ch : c) {
                ch = std::clamp(ch + 0.05 * n(rng), 0.05, 0.95);
            }
            g.sh = Gaussian::dc_from_color(c);
            out.scene.cloud.append(g);
            out.object.push_back(static_cast<std::int32_t>(b));
        }
    }
    const double focal = focal_for_fov(o.width, 45.0);
    std::size_t view = 0;
    for (std::size_t i = 0; i < o.training_views; ++i, ++view) {
        const double az = 2.0 * std::numbers::pi * double(i) / double(o.training_views);
        const double el = (i % 2 == 0) ? 0.35 : 0.75;
        out.scene.cameras.push_back(orbit_camera(view, 3.5, az, el, o.width, o.height, focal));
        out.training_views.push_back(view);
    }
    for (std::size_t i = 0; i < o.heldout_views; ++i, ++view) {
        const double az = 2.0 * std::numbers::pi * (double(i) + 0.37) / double(std::max<std::size_t>(o.heldout_views, 1));
        out.scene.cameras.push_back(orbit_camera(view, 3.3, az, 0.55, o.width, o.height, focal));
        out.heldout_views.push_back(view);
    }
    out.scene.background = {0.0, 0.0, 0.0};
    return out;
}

/// Per-pixel argmax over one-hot channels; pixels whose channel sum is below `min_coverage` get -1.
inline LabelImage labels_from_onehot(const FeatureMap &features, double min_coverage = 0.5) {
    LabelImage out(features.height, features.width, 1, -1);
    for (std::size_t p = 0; p < features.pixel_count(); ++p) {
        const auto f = features.pixel(p);
        double sum = 0.0;
        std::size_t best = 0;
        for (std::size_t c = 0; c < f.size(); ++c) {
            sum += f[c];
            if (f[c] > f[best]) {
                best = c;
            }
        }
        if (sum >= min_coverage) {
            out.data[p] = static_cast<std::int32_t>(best);
        }
    }
    return out;
}

/// One-hot feature store from per-Gaussian class ids.
inline FeatureStore onehot_store(std::span<const std::int32_t> ids, std::size_t classes) {
    FeatureStore store(ids.size(), classes);
    for (std::size_t k = 0; k < ids.size(); ++k) {
        store.data[k * classes + static_cast<std::size_t>(ids[k])] = 1.0f;
    }
    return store;
}

/// Ground-truth object labels of a view: the rendered one-hot object field, thresholded at half coverage.
inline LabelImage object_labels(const BlobScene &blobs, std::size_t view, const RenderOptions &options = {}) {
    const FeatureStore ids = onehot_store(blobs.object, blobs.objects);
    return labels_from_onehot(*render_features(blobs.scene, view, ids, options).features);
}

/// One-hot feature map of a label image (zero where unlabeled).
inline FeatureMap onehot_feature_map(const LabelImage &labels, std::size_t classes) {
    FeatureMap map(labels.height, labels.width, classes);
    for (std::size_t p = 0; p < labels.pixel_count(); ++p) {
        if (labels.data[p] >= 0) {
            map.data[p * classes + static_cast<std::size_t>(labels.data[p])] = 1.0f;
        }
    }
    return map;
}

/// Per-Gaussian argmax of a store; pruned rows get -1.
inline std::vector<std::int32_t> store_argmax(const FeatureStore &store) {
    std::vector<std::int32_t> out(store.count, -1);
    for (std::size_t k = 0; k < store.count; ++k) {
        if (store.is_pruned(k)) {
            continue;
        }
        const auto f = store.row(k);
        out[k] = static_cast<std::int32_t>(std::max_element(f.begin(), f.end()) - f.begin());
    }
    return out;
}

/// Feature maps for a scene rendered from a per-Gaussian store, one per camera.
inline std::vector<FeatureMap> render_feature_maps(const SceneBundle &scene, const FeatureStore &store,
                                                   const RenderOptions &options = {}) {
    std::vector<FeatureMap> maps;
    maps.reserve(scene.cameras.size());
    for (std::size_t v = 0; v < scene.cameras.size(); ++v) {
        maps.push_back(*render_features(scene, v, store, options).features);
    }
    return maps;
}

/// Store of unit rows drawn uniformly from the sphere.
inline FeatureStore random_store(std::size_t count, std::size_t dim, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<float> n(0.0f, 1.0f);
    FeatureStore store(count, dim);
    for (std::size_t k = 0; k < count; ++k) {
        float norm2 = 0.0f;
        float *row = store.data.data() + k * dim;
        for (std::size_t d = 0; d < dim; ++d) {
            row[d] = n(rng);
            norm2 += row[d] * row[d];
        }
        const float inv = 1.0f / std::sqrt(norm2);
        for (std::size_t d = 0; d < dim; ++d) {
            row[d] *= inv;
        }
    }
    return store;
}

/// Target object whose Gaussians carry part features, plus labeled exemplars from a different instance.
struct AffordanceFixture {
    FeatureStore store;
    AffordanceSource source;
    std::vector<std::int32_t> truth;
};

struct AffordanceOptions {
    std::size_t gaussians = 3000;
    std::size_t dim = 32;
    std::size_t exemplars_per_part = 40;
    std::vector<std::string> parts = {"grasp", "body", "spout"};
    /// Per-dimension noise on every sampled feature.
    double noise = 0.08;
    /// Norm of the offset shared by all target features (the instance gap between source and target).
    double instance_shift = 0.3;
    std::uint64_t seed = 0;
};

/// Parts are contiguous bands along the object's axis; each part has a prototype feature that both
/// instances sample around.
inline AffordanceFixture affordance_fixture(const AffordanceOptions &o) {
    if (o.parts.empty() || o.dim < 2) {
        throw ValidationError("affordance_fixture needs parts and dim >= 2");
    }
    std::mt19937_64 rng(o.seed);
    std::normal_distribution<double> n(0.0, 1.0);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    auto unit = [&]() {
        std::vector<double> v(o.dim);
        double s = 0.0;
        for (double &x : v) {
            x = n(rng);
            s += x * x;
        }
        for (double &x : v) {
            x /= std::sqrt(s);
        }
        return v;
    };
    const std::size_t P = o.parts.size();
    std::vector<std::vector<double>> prototypes(P);
    for (auto &p : prototypes) {
        p = unit();
    }
    const std::vector<double> shift = unit();
    auto sample = [&](std::size_t part, double shift_norm) {
        std::vector<float> f(o.dim);
        for (std::size_t d = 0; d < o.dim; ++d) {
            f[d] = static_cast<float>(prototypes[part][d] + shift_norm * shift[d] + o.noise * n(rng));
        }
        return f;
    };

    AffordanceFixture fx;
    fx.source.label_names = o.parts;
    for (std::size_t part = 0; part < P; ++part) {
        for (std::size_t e = 0; e < o.exemplars_per_part; ++e) {
            fx.source.exemplars.push_back({sample(part, 0.0), static_cast<std::int32_t>(part)});
        }
    }
    fx.store = FeatureStore(o.gaussians, o.dim);
    fx.truth.resize(o.gaussians);
    for (std::size_t k = 0; k < o.gaussians; ++k) {
        const double axis = u(rng);
        const auto part = std::min(P - 1, static_cast<std::size_t>(axis * double(P)));
        fx.truth[k] = static_cast<std::int32_t>(part);
        const auto f = sample(part, o.instance_shift);
        std::copy(f.begin(), f.end(), fx.store.data.begin() + static_cast<std::ptrdiff_t>(k * o.dim));
    }
    return fx;
}

} // namespace splatfield::synth

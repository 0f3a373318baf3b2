// Copyright Contributors to the splatfield project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "splatfield/error.hpp"
#include "splatfield/feature_store.hpp"
#include "splatfield/gaussian.hpp"
#include "splatfield/parallel.hpp"
#include "splatfield/rasterizer.hpp"

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace splatfield {

enum class BackprojectionMode {
    /// f_k = sum(F * w) / sum(w): weighted average of the texels the Gaussian contributes to.
    expected,
    /// f_k = sum(F * w), no denominator.
    accumulated,
};

struct BackprojectionConfig {
    BackprojectionMode mode = BackprojectionMode::expected;
    /// Scale every surviving row to unit L2 norm.
    bool normalize = true;
    /// Gaussians whose total weight is <= this are pruned.
    double prune_epsilon = 1e-8;
};

/// Turns accumulated weights into per-Gaussian features.
inline FeatureStore finalize_features(const WeightSink &sink, const BackprojectionConfig &config) {
    if (sink.mode != WeightSink::Mode::feature) {
        throw ValidationError("back-projection needs a feature-mode weight sink");
    }
    if (!std::isfinite(config.prune_epsilon) || config.prune_epsilon < 0.0) {
        throw ValidationError("prune_epsilon must be finite and >= 0");
    }
    const std::size_t D = sink.dim;
    FeatureStore store(sink.count, D);
    parallel_for(0, static_cast<std::ptrdiff_t>(sink.count), [&](std::ptrdiff_t k) {
        const double den = sink.denominators[k];
        if (!(den > config.prune_epsilon)) {
            store.pruned[k] = 1;
            return;
        }
        const auto num = sink.numerator(k);
        const bool expected = config.mode == BackprojectionMode::expected;
        std::vector<double> f(D);
        double norm2 = 0.0;
        for (std::size_t d = 0; d < D; ++d) {
            f[d] = expected ? num[d] / den : num[d];
            norm2 += f[d] * f[d];
        }
        const double norm = std::sqrt(norm2);
        float *out = store.data.data() + k * D;
        for (std::size_t d = 0; d < D; ++d) {
            const double v = config.normalize ? (norm > 0.0 ? f[d] / norm : 0.0) : f[d];
            out[d] = static_cast<float>(v);
        }
    });
    return store;
}

/// Single-pass aggregation of 2D feature maps over views into one weight sink.
class Backprojector {
public:
    Backprojector(const SceneBundle &scene, std::size_t dim, RenderOptions options = {})
        : scene_(scene), options_(options), sink_(WeightSink::features(scene.cloud.count(), dim)) {}

    /// Adds one view. Views may arrive in any order; each should be added once.
    AccumulateStats add_view(std::size_t view, const FeatureMap &features) {
        if (features.channels != sink_.dim) {
            throw ValidationError("feature map for view " + std::to_string(view) + " has dimension " +
                                  std::to_string(features.channels) + ", expected " + std::to_string(sink_.dim));
        }
        ++views_;
        return accumulate_weights(scene_, view, &features, sink_, options_);
    }

    [[nodiscard]] FeatureStore finish(const BackprojectionConfig &config) const {
        return finalize_features(sink_, config);
    }
    [[nodiscard]] const WeightSink &sink() const { return sink_; }
    [[nodiscard]] std::size_t views_added() const { return views_; }

private:
    const SceneBundle &scene_;
    RenderOptions options_;
    WeightSink sink_;
    std::size_t views_ = 0;
};

/// Back-projects one feature map per camera (index = view) into per-Gaussian features.
inline FeatureStore backproject(const SceneBundle &scene, std::span<const FeatureMap> feature_maps,
                                const BackprojectionConfig &config = {}, const RenderOptions &options = {}) {
    if (feature_maps.size() != scene.cameras.size()) {
        throw ValidationError("got " + std::to_string(feature_maps.size()) + " feature maps for " +
                              std::to_string(scene.cameras.size()) + " views");
    }
    if (feature_maps.empty()) {
        throw ValidationError("back-projection needs at least one view");
    }
    const std::size_t D = feature_maps.front().channels;
    Backprojector bp(scene, D, options);
    for (std::size_t v = 0; v < feature_maps.size(); ++v) {
        bp.add_view(v, feature_maps[v]);
    }
    return bp.finish(config);
}

/// Result of removing Gaussians: the surviving cloud and store, plus old -> new index (-1 = removed).
struct EditResult {
    GaussianCloud cloud;
    FeatureStore store;
    std::vector<std::int64_t> index_map;
    std::vector<std::uint32_t> kept;
};

inline EditResult keep_gaussians(const GaussianCloud &cloud, const FeatureStore &store,
                                 std::vector<std::uint32_t> keep) {
    EditResult r;
    r.index_map.assign(cloud.count(), -1);
    for (std::size_t i = 0; i < keep.size(); ++i) {
        r.index_map[keep[i]] = static_cast<std::int64_t>(i);
    }
    r.cloud = cloud.subset(keep);
    r.store = store.subset(keep);
    r.kept = std::move(keep);
    return r;
}

/// Drops pruned Gaussians from both cloud and store, preserving order.
inline EditResult prune_cloud(const GaussianCloud &cloud, const FeatureStore &store) {
    if (store.count != cloud.count()) {
        throw ValidationError("feature store has " + std::to_string(store.count) + " rows, cloud has " +
                              std::to_string(cloud.count()));
    }
    std::vector<std::uint32_t> keep;
    keep.reserve(cloud.count());
    for (std::size_t k = 0; k < cloud.count(); ++k) {
        if (!store.is_pruned(k)) {
            keep.push_back(static_cast<std::uint32_t>(k));
        }
    }
    return keep_gaussians(cloud, store, std::move(keep));
}

} // namespace splatfield

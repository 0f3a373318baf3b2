// Copyright Contributors to the splatfield project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "splatfield/error.hpp"
#include "splatfield/feature_store.hpp"
#include "splatfield/gaussian.hpp"
#include "splatfield/parallel.hpp"
#include "splatfield/raster.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <tuple>
#include <vector>

namespace splatfield {

struct RenderOptions {
    ProjectionParams projection;
    int tile_size = 16;
    double alpha_max = 0.99;
    double alpha_min = 1.0 / 255.0;
    /// A pixel stops blending once the next transmittance would drop below this. 0 disables early termination.
    double termination_transmittance = 1e-4;
    /// Keep the per-pixel list of blended Gaussians in RenderOutput::fragments.
    bool record_fragments = false;
};

/// One Gaussian blended into one pixel. weight() is its compositing coefficient alpha * T.
struct Fragment {
    std::uint32_t gaussian = 0;
    double alpha = 0.0;
    double transmittance = 0.0;

    [[nodiscard]] double weight() const { return alpha * transmittance; }
};

struct RenderOutput {
    Image color;
    /// Transmittance left after the last blended Gaussian (1 channel).
    Image transmittance;
    std::optional<FeatureMap> features;
    /// Per pixel, in blend order. Empty unless RenderOptions::record_fragments.
    std::vector<std::vector<Fragment>> fragments;
};

namespace detail {

/// Visible Gaussians of one view, binned into screen tiles and depth-sorted per tile.
struct ViewBins {
    int width = 0;
    int height = 0;
    int tile = 16;
    int tiles_x = 0;
    int tiles_y = 0;
    std::vector<ProjectedGaussian> projected;
    /// Indices into `projected`, front to back; ties broken by ascending Gaussian index.
    std::vector<std::vector<std::uint32_t>> tile_lists;
};

inline ViewBins bin_view(const GaussianCloud &cloud, const Camera &cam, const RenderOptions &opts) {
    if (opts.tile_size < 1) {
        throw ValidationError("tile size must be >= 1");
    }
    ViewBins bins;
    bins.width = cam.width;
    bins.height = cam.height;
    bins.tile = opts.tile_size;
    bins.tiles_x = (cam.width + opts.tile_size - 1) / opts.tile_size;
    bins.tiles_y = (cam.height + opts.tile_size - 1) / opts.tile_size;

    std::vector<std::optional<ProjectedGaussian>> all(cloud.count());
    parallel_for(0, static_cast<std::ptrdiff_t>(cloud.count()),
                 [&](std::ptrdiff_t k) { all[k] = project_gaussian(cloud, k, cam, opts.projection); });
    for (auto &p : all) {
        if (p) {
            bins.projected.push_back(*p);
        }
    }

    bins.tile_lists.resize(static_cast<std::size_t>(bins.tiles_x) * bins.tiles_y);
    for (std::size_t i = 0; i < bins.projected.size(); ++i) {
        const auto &g = bins.projected[i];
        // Pixel centers sit at (x + 0.5, y + 0.5).
        const int x0 = std::max(0, static_cast<int>(std::ceil(g.mean.x() - g.radius - 0.5)));
        const int x1 = std::min(cam.width - 1, static_cast<int>(std::floor(g.mean.x() + g.radius - 0.5)));
        const int y0 = std::max(0, static_cast<int>(std::ceil(g.mean.y() - g.radius - 0.5)));
        const int y1 = std::min(cam.height - 1, static_cast<int>(std::floor(g.mean.y() + g.radius - 0.5)));
        if (x0 > x1 || y0 > y1) {
            continue;
        }
        for (int ty = y0 / bins.tile; ty <= y1 / bins.tile; ++ty) {
            for (int tx = x0 / bins.tile; tx <= x1 / bins.tile; ++tx) {
                bins.tile_lists[static_cast<std::size_t>(ty) * bins.tiles_x + tx].push_back(
                    static_cast<std::uint32_t>(i));
            }
        }
    }
    parallel_for(
        0, static_cast<std::ptrdiff_t>(bins.tile_lists.size()),
        [&](std::ptrdiff_t t) {
            auto &list = bins.tile_lists[t];
            std::sort(list.begin(), list.end(), [&](std::uint32_t a, std::uint32_t b) {
                const auto &ga = bins.projected[a];
                const auto &gb = bins.projected[b];
                return std::tie(ga.depth, ga.index) < std::tie(gb.depth, gb.index);
            });
        },
        true);
    return bins;
}

/// Opacity of `g` at a pixel center; 0 outside the 3-sigma ellipse.
inline double splat_alpha(const ProjectedGaussian &g, double px, double py, const RenderOptions &opts) {
    const double dx = px - g.mean.x();
    const double dy = py - g.mean.y();
    const double mahalanobis = g.conic[0] * dx * dx + 2.0 * g.conic[1] * dx * dy + g.conic[2] * dy * dy;
    if (!(mahalanobis <= 9.0)) {
        return 0.0;
    }
    return std::min(opts.alpha_max, g.opacity * std::exp(-0.5 * mahalanobis));
}

/// Front-to-back blend of one pixel. Calls visit(gaussian, alpha, T) for every blended Gaussian and
/// returns the final transmittance. Render and weight accumulation both go through here, so the
/// accumulated weights are exactly the rendering weights.
template <typename Visit>
double blend_pixel(const ViewBins &bins, std::span<const std::uint32_t> list, int x, int y,
                   const RenderOptions &opts, Visit &&visit) {
    const double px = x + 0.5;
    const double py = y + 0.5;
    double T = 1.0;
    for (std::uint32_t i : list) {
        const ProjectedGaussian &g = bins.projected[i];
        const double alpha = splat_alpha(g, px, py, opts);
        if (alpha < opts.alpha_min) {
            continue;
        }
        const double next_T = T * (1.0 - alpha);
        if (next_T < opts.termination_transmittance) {
            break;
        }
        visit(g, alpha, T);
        T = next_T;
    }
    return T;
}

template <typename PerTile>
void for_each_tile(const ViewBins &bins, PerTile &&fn) {
    parallel_for(
        0, static_cast<std::ptrdiff_t>(bins.tile_lists.size()),
        [&](std::ptrdiff_t t) {
            const int tx = static_cast<int>(t % bins.tiles_x);
            const int ty = static_cast<int>(t / bins.tiles_x);
            const int x0 = tx * bins.tile;
            const int y0 = ty * bins.tile;
            fn(static_cast<std::size_t>(t), x0, y0, std::min(x0 + bins.tile, bins.width),
               std::min(y0 + bins.tile, bins.height));
        },
        true);
}

inline void check_store(const GaussianCloud &cloud, const FeatureStore &store) {
    if (store.count != cloud.count() || store.data.size() != store.count * store.dim) {
        throw ValidationError("feature store has " + std::to_string(store.count) + " rows, scene has " +
                              std::to_string(cloud.count()) + " Gaussians");
    }
}

} // namespace detail

/// Tile-based forward render of `cloud` from `cam`. When `store` is given, also blends per-Gaussian
/// features into RenderOutput::features (background feature = 0).
inline RenderOutput render(const GaussianCloud &cloud, const Camera &cam, const Rgb &background,
                           const RenderOptions &opts = {}, const FeatureStore *store = nullptr) {
    if (store) {
        detail::check_store(cloud, *store);
    }
    const detail::ViewBins bins = detail::bin_view(cloud, cam, opts);
    const std::size_t W = static_cast<std::size_t>(cam.width);
    const std::size_t H = static_cast<std::size_t>(cam.height);
    const std::size_t D = store ? store->dim : 0;

    RenderOutput out;
    out.color = Image(H, W, 3);
    out.transmittance = Image(H, W, 1);
    if (store) {
        out.features = FeatureMap(H, W, D);
    }
    if (opts.record_fragments) {
        out.fragments.resize(H * W);
    }

    detail::for_each_tile(bins, [&](std::size_t t, int x0, int y0, int x1, int y1) {
        std::vector<double> feat(D);
        const auto &list = bins.tile_lists[t];
        for (int y = y0; y < y1; ++y) {
            for (int x = x0; x < x1; ++x) {
                const std::size_t pix = static_cast<std::size_t>(y) * W + x;
                double rgb[3] = {0.0, 0.0, 0.0};
                std::fill(feat.begin(), feat.end(), 0.0);
                auto *frags = opts.record_fragments ? &out.fragments[pix] : nullptr;
                const double T = detail::blend_pixel(
                    bins, list, x, y, opts, [&](const ProjectedGaussian &g, double alpha, double trans) {
                        const double w = alpha * trans;
                        for (int c = 0; c < 3; ++c) {
                            rgb[c] += g.rgb[c] * w;
                        }
                        if (store) {
                            const auto f = store->row(g.index);
                            for (std::size_t d = 0; d < D; ++d) {
                                feat[d] += double(f[d]) * w;
                            }
                        }
                        if (frags) {
                            frags->push_back({g.index, alpha, trans});
                        }
                    });
                for (int c = 0; c < 3; ++c) {
                    out.color.data[pix * 3 + c] = static_cast<float>(rgb[c] + T * background[c]);
                }
                out.transmittance.data[pix] = static_cast<float>(T);
                if (store) {
                    for (std::size_t d = 0; d < D; ++d) {
                        out.features->data[pix * D + d] = static_cast<float>(feat[d]);
                    }
                }
            }
        }
    });
    return out;
}

inline const Camera &checked_camera(const SceneBundle &scene, std::size_t view) {
    if (view >= scene.cameras.size()) {
        throw ValidationError("invalid view index " + std::to_string(view) + " (scene has " +
                              std::to_string(scene.cameras.size()) + " views)");
    }
    return scene.cameras[view];
}

inline RenderOutput render(const SceneBundle &scene, std::size_t view, const RenderOptions &opts = {}) {
    return render(scene.cloud, checked_camera(scene, view), scene.background, opts);
}

/// Render with per-pixel features F(x,y) = sum_n f_n alpha_n T_n.
inline RenderOutput render_features(const SceneBundle &scene, std::size_t view, const FeatureStore &store,
                                    const RenderOptions &opts = {}) {
    return render(scene.cloud, checked_camera(scene, view), scene.background, opts, &store);
}

// ---------------------------------------------------------------------------------------------------------------
// Weight accumulation

/// Per-Gaussian sums of alpha*T (denominators) and, in feature mode, of F_2D * alpha*T (numerators).
struct WeightSink {
    enum class Mode { scalar, feature };

    Mode mode = Mode::scalar;
    std::size_t count = 0;
    std::size_t dim = 0;
    std::vector<double> numerators;   // count x dim, feature mode only
    std::vector<double> denominators; // count

    static WeightSink scalar(std::size_t n) {
        WeightSink s;
        s.count = n;
        s.denominators.assign(n, 0.0);
        return s;
    }
    static WeightSink features(std::size_t n, std::size_t d) {
        WeightSink s;
        s.mode = Mode::feature;
        s.count = n;
        s.dim = d;
        s.numerators.assign(n * d, 0.0);
        s.denominators.assign(n, 0.0);
        return s;
    }

    [[nodiscard]] std::span<const double> numerator(std::size_t k) const { return {numerators.data() + k * dim, dim}; }

    void merge(const WeightSink &other) {
        if (other.mode != mode || other.count != count || other.dim != dim) {
            throw ValidationError("cannot merge weight sinks of different shape");
        }
        for (std::size_t i = 0; i < numerators.size(); ++i) {
            numerators[i] += other.numerators[i];
        }
        for (std::size_t i = 0; i < denominators.size(); ++i) {
            denominators[i] += other.denominators[i];
        }
    }
};

struct AccumulateStats {
    std::size_t width = 0;
    std::size_t height = 0;
    std::size_t fragments = 0;
    /// Sum of accumulated weights per pixel; filled only when requested.
    Raster<double> pixel_weight_sum;
};

/// Adds one view's blending weights into `sink`. With a feature map, the view is rasterized at the
/// feature map's resolution (intrinsics rescaled) and numerators gain F_2D(x,y) * alpha*T.
/// Sums are formed per Gaussian in a fixed tile/pixel order, so results do not depend on thread count.
inline AccumulateStats accumulate_weights(const SceneBundle &scene, std::size_t view, const FeatureMap *features,
                                          WeightSink &sink, const RenderOptions &opts = {},
                                          bool record_pixel_sums = false) {
    const Camera &base = checked_camera(scene, view);
    if (sink.count != scene.cloud.count()) {
        throw ValidationError("weight sink holds " + std::to_string(sink.count) + " Gaussians, scene has " +
                              std::to_string(scene.cloud.count()));
    }
    if (features && sink.mode != WeightSink::Mode::feature) {
        throw ValidationError("sink mode mismatch: feature map given to a scalar weight sink");
    }
    if (!features && sink.mode != WeightSink::Mode::scalar) {
        throw ValidationError("sink mode mismatch: feature weight sink needs a feature map");
    }
    Camera cam = base;
    if (features) {
        if (features->channels != sink.dim) {
            throw ValidationError("feature map for view " + std::to_string(view) + " has dimension " +
                                  std::to_string(features->channels) + ", sink expects " + std::to_string(sink.dim));
        }
        if (features->width == 0 || features->height == 0 || features->data.size() != features->pixel_count() * features->channels) {
            throw ValidationError("resolution mismatch: empty or inconsistent feature map for view " +
                                  std::to_string(view));
        }
        const double sx = double(features->width) / base.width;
        const double sy = double(features->height) / base.height;
        if (std::abs(sx - sy) > 0.05 * std::max(sx, sy)) {
            throw ValidationError("resolution mismatch: feature map " + std::to_string(features->width) + "x" +
                                  std::to_string(features->height) + " vs camera " + std::to_string(base.width) +
                                  "x" + std::to_string(base.height) + " for view " + std::to_string(view));
        }
        cam = base.resized(static_cast<int>(features->width), static_cast<int>(features->height));
    }

    struct WeightFragment {
        std::uint32_t gaussian;
        std::uint32_t pixel;
        double weight;
    };

    const detail::ViewBins bins = detail::bin_view(scene.cloud, cam, opts);
    const std::size_t W = static_cast<std::size_t>(cam.width);
    const std::size_t D = sink.dim;
    AccumulateStats stats;
    stats.width = W;
    stats.height = static_cast<std::size_t>(cam.height);
    if (record_pixel_sums) {
        stats.pixel_weight_sum = Raster<double>(stats.height, W, 1);
    }

    const std::size_t tiles = bins.tile_lists.size();
    const std::size_t batch = 256;
    std::vector<std::vector<WeightFragment>> per_tile(std::min(tiles, batch));
    std::vector<WeightFragment> merged;
    std::vector<std::size_t> group_starts;
    for (std::size_t first = 0; first < tiles; first += batch) {
        const std::size_t last = std::min(tiles, first + batch);
        parallel_for(
            static_cast<std::ptrdiff_t>(first), static_cast<std::ptrdiff_t>(last),
            [&](std::ptrdiff_t t) {
                auto &frags = per_tile[t - first];
                frags.clear();
                const int x0 = static_cast<int>(t % bins.tiles_x) * bins.tile;
                const int y0 = static_cast<int>(t / bins.tiles_x) * bins.tile;
                const int x1 = std::min(x0 + bins.tile, bins.width);
                const int y1 = std::min(y0 + bins.tile, bins.height);
                for (int y = y0; y < y1; ++y) {
                    for (int x = x0; x < x1; ++x) {
                        const auto pix = static_cast<std::uint32_t>(static_cast<std::size_t>(y) * W + x);
                        detail::blend_pixel(bins, bins.tile_lists[t], x, y, opts,
                                            [&](const ProjectedGaussian &g, double alpha, double T) {
                                                frags.push_back({g.index, pix, alpha * T});
                                            });
                    }
                }
            },
            true);

        merged.clear();
        for (std::size_t t = first; t < last; ++t) {
            merged.insert(merged.end(), per_tile[t - first].begin(), per_tile[t - first].end());
        }
        stats.fragments += merged.size();
        if (record_pixel_sums) {
            for (const auto &f : merged) {
                stats.pixel_weight_sum.data[f.pixel] += f.weight;
            }
        }
        std::stable_sort(merged.begin(), merged.end(),
                         [](const WeightFragment &a, const WeightFragment &b) { return a.gaussian < b.gaussian; });
        group_starts.clear();
        for (std::size_t i = 0; i < merged.size(); ++i) {
            if (i == 0 || merged[i].gaussian != merged[i - 1].gaussian) {
                group_starts.push_back(i);
            }
        }
        group_starts.push_back(merged.size());
        parallel_for(0, static_cast<std::ptrdiff_t>(group_starts.size()) - 1, [&](std::ptrdiff_t gi) {
            const std::size_t b = group_starts[gi];
            const std::size_t e = group_starts[gi + 1];
            const std::size_t k = merged[b].gaussian;
            double den = sink.denominators[k];
            double *num = D ? sink.numerators.data() + k * D : nullptr;
            for (std::size_t i = b; i < e; ++i) {
                const double w = merged[i].weight;
                den += w;
                if (features) {
                    const float *f = features->data.data() + static_cast<std::size_t>(merged[i].pixel) * D;
                    for (std::size_t d = 0; d < D; ++d) {
                        num[d] += double(f[d]) * w;
                    }
                }
            }
            sink.denominators[k] = den;
        });
    }
    return stats;
}

// ---------------------------------------------------------------------------------------------------------------
// Brute-force reference

/// Reference renderer for small scenes: every pixel evaluates every projected Gaussian, sorts the
/// whole list by (depth, index) and blends without tiling or early termination.
inline RenderOutput oracle_render(const SceneBundle &scene, std::size_t view, const FeatureStore *store = nullptr,
                                  const RenderOptions &opts = {}) {
    const Camera &cam = checked_camera(scene, view);
    if (store) {
        detail::check_store(scene.cloud, *store);
    }
    std::vector<ProjectedGaussian> projected;
    for (std::size_t k = 0; k < scene.cloud.count(); ++k) {
        if (auto g = project_gaussian(scene.cloud, k, cam, opts.projection)) {
            projected.push_back(*g);
        }
    }
    const std::size_t W = static_cast<std::size_t>(cam.width);
    const std::size_t H = static_cast<std::size_t>(cam.height);
    const std::size_t D = store ? store->dim : 0;
    RenderOutput out;
    out.color = Image(H, W, 3);
    out.transmittance = Image(H, W, 1);
    if (store) {
        out.features = FeatureMap(H, W, D);
    }
    out.fragments.resize(H * W);

    struct Hit {
        double depth;
        std::uint32_t index;
        double alpha;
        const ProjectedGaussian *g;
    };
    std::vector<Hit> hits;
    for (std::size_t y = 0; y < H; ++y) {
        for (std::size_t x = 0; x < W; ++x) {
            const double px = x + 0.5;
            const double py = y + 0.5;
            hits.clear();
            for (const auto &g : projected) {
                const double dx = px - g.mean.x();
                const double dy = py - g.mean.y();
                const Vec2 d(dx, dy);
                const double m = d.dot(g.cov.inverse() * d);
                if (m > 9.0) {
                    continue;
                }
                const double alpha = std::min(opts.alpha_max, g.opacity * std::exp(-0.5 * m));
                if (alpha >= opts.alpha_min) {
                    hits.push_back({g.depth, g.index, alpha, &g});
                }
            }
            std::sort(hits.begin(), hits.end(),
                      [](const Hit &a, const Hit &b) { return std::tie(a.depth, a.index) < std::tie(b.depth, b.index); });
            const std::size_t pix = y * W + x;
            double T = 1.0;
            double rgb[3] = {0.0, 0.0, 0.0};
            std::vector<double> feat(D, 0.0);
            for (const Hit &h : hits) {
                const double w = h.alpha * T;
                for (int c = 0; c < 3; ++c) {
                    rgb[c] += h.g->rgb[c] * w;
                }
                for (std::size_t d = 0; d < D; ++d) {
                    feat[d] += double(store->row(h.index)[d]) * w;
                }
                out.fragments[pix].push_back({h.index, h.alpha, T});
                T *= 1.0 - h.alpha;
            }
            for (int c = 0; c < 3; ++c) {
                out.color.data[pix * 3 + c] = static_cast<float>(rgb[c] + T * scene.background[c]);
            }
            out.transmittance.data[pix] = static_cast<float>(T);
            for (std::size_t d = 0; d < D; ++d) {
                out.features->data[pix * D + d] = static_cast<float>(feat[d]);
            }
        }
    }
    return out;
}

} // namespace splatfield

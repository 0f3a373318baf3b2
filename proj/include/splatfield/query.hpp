// Copyright Contributors to the splatfield project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "splatfield/backprojection.hpp"
#include "splatfield/error.hpp"
#include "splatfield/feature_store.hpp"
#include "splatfield/parallel.hpp"
#include "splatfield/raster.hpp"
#include "splatfield/scene_io.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <span>
#include <string>
#include <vector>

namespace splatfield {

namespace detail {

inline double norm(std::span<const float> v) {
    double s = 0.0;
    for (float x : v) {
        s += double(x) * x;
    }
    return std::sqrt(s);
}

/// Cosine with precomputed norms; 0 when either norm is below 1e-12.
inline double cosine(std::span<const float> a, double norm_a, std::span<const float> b, double norm_b) {
    if (norm_a < 1e-12 || norm_b < 1e-12) {
        return 0.0;
    }
    double dot = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += double(a[i]) * b[i];
    }
    return std::clamp(dot / (norm_a * norm_b), -1.0, 1.0);
}

} // namespace detail

/// Cosine similarity; 0 when either vector has norm < 1e-12.
inline double similarity(std::span<const float> f, std::span<const float> q) {
    if (f.size() != q.size()) {
        throw ValidationError("similarity: dimension mismatch (" + std::to_string(f.size()) + " vs " +
                              std::to_string(q.size()) + ")");
    }
    return detail::cosine(f, detail::norm(f), q, detail::norm(q));
}

/// Positive prompt q0, optional negatives, threshold theta.
struct QuerySpec {
    std::vector<float> positive;
    std::vector<std::vector<float>> negatives;
    double theta = 0.0;
    /// With negatives, members must also score higher on q0 than on every negative.
    bool require_argmax = true;

    void validate(std::size_t dim) const {
        if (positive.size() != dim) {
            throw ValidationError("query: positive has dimension " + std::to_string(positive.size()) +
                                  ", features have " + std::to_string(dim));
        }
        if (detail::norm(positive) < 1e-12) {
            throw ValidationError("query: positive prompt is all-zero");
        }
        for (const auto &n : negatives) {
            if (n.size() != dim) {
                throw ValidationError("query: negative has dimension " + std::to_string(n.size()) +
                                      ", features have " + std::to_string(dim));
            }
        }
        if (!std::isfinite(theta)) {
            throw ValidationError("query: theta must be finite");
        }
    }
};

struct SegmentationResult {
    /// Member Gaussian indices, ascending.
    std::vector<std::uint32_t> members;
    /// sim(f_k, q0) for every Gaussian (0 for pruned rows).
    std::vector<float> scores;
    QuerySpec spec;
};

namespace detail {

/// Scores rows against unit-normalized prompts with float SIMD lanes.
class QueryKernel {
public:
    QueryKernel(const QuerySpec &spec, std::size_t dim) : dim_(dim) {
        spec.validate(dim);
        add(spec.positive);
        for (const auto &n : spec.negatives) {
            add(n);
        }
        theta_ = spec.theta;
        argmax_ = spec.require_argmax && !spec.negatives.empty();
    }

    /// sim(f, q0) and whether f satisfies the query predicate.
    [[nodiscard]] std::pair<float, bool> evaluate(const float *f) const {
        float n2 = 0.0f;
#pragma omp simd reduction(+ : n2)
        for (std::size_t d = 0; d < dim_; ++d) {
            n2 += f[d] * f[d];
        }
        const double norm = std::sqrt(double(n2));
        if (norm < 1e-12) {
            return {0.0f, 0.0 > theta_ && !argmax_};
        }
        const float s0 = score(f, 0, norm);
        bool member = double(s0) > theta_;
        if (member && argmax_) {
            for (std::size_t j = 1; j < prompts_.size() && member; ++j) {
                member = s0 > score(f, j, norm);
            }
        }
        return {s0, member};
    }

private:
    void add(const std::vector<float> &q) {
        const double n = detail::norm(q);
        std::vector<float> unit(q.size(), 0.0f);
        if (n >= 1e-12) {
            for (std::size_t i = 0; i < q.size(); ++i) {
                unit[i] = static_cast<float>(q[i] / n);
            }
        }
        prompts_.push_back(std::move(unit));
    }

    [[nodiscard]] float score(const float *f, std::size_t j, double norm) const {
        const float *q = prompts_[j].data();
        float dot = 0.0f;
#pragma omp simd reduction(+ : dot)
        for (std::size_t d = 0; d < dim_; ++d) {
            dot += f[d] * q[d];
        }
        return static_cast<float>(std::clamp(double(dot) / norm, -1.0, 1.0));
    }

    std::size_t dim_;
    std::vector<std::vector<float>> prompts_;
    double theta_ = 0.0;
    bool argmax_ = false;
};

} // namespace detail

/// Membership: not pruned, sim(f_k, q0) > theta and, with require_argmax and negatives,
/// sim(f_k, q0) > max_i sim(f_k, q_i).
inline SegmentationResult segment_3d(const FeatureStore &store, const QuerySpec &spec) {
    if (store.count == 0) {
        throw ValidationError("segment_3d: empty feature store");
    }
    const detail::QueryKernel kernel(spec, store.dim);
    SegmentationResult result;
    result.spec = spec;
    result.scores.assign(store.count, 0.0f);
    std::vector<std::uint8_t> member(store.count, 0);
    parallel_for(0, static_cast<std::ptrdiff_t>(store.count), [&](std::ptrdiff_t k) {
        if (store.pruned[k]) {
            return;
        }
        const auto [score, in] = kernel.evaluate(store.data.data() + k * store.dim);
        result.scores[k] = score;
        member[k] = in;
    });
    for (std::size_t k = 0; k < store.count; ++k) {
        if (member[k]) {
            result.members.push_back(static_cast<std::uint32_t>(k));
        }
    }
    return result;
}

/// Pixelwise version of segment_3d over a rendered feature image.
inline Mask segment_2d(const FeatureMap &features, const QuerySpec &spec) {
    const detail::QueryKernel kernel(spec, features.channels);
    Mask mask(features.height, features.width);
    parallel_for(0, static_cast<std::ptrdiff_t>(features.pixel_count()), [&](std::ptrdiff_t p) {
        mask.data[p] = kernel.evaluate(features.data.data() + p * features.channels).second;
    });
    return mask;
}

/// Per-pixel sim(F(x,y), q).
inline Raster<float> similarity_map(const FeatureMap &features, std::span<const float> q) {
    if (q.size() != features.channels) {
        throw ValidationError("similarity_map: dimension mismatch");
    }
    const double qn = detail::norm(q);
    Raster<float> out(features.height, features.width);
    parallel_for(0, static_cast<std::ptrdiff_t>(features.pixel_count()), [&](std::ptrdiff_t p) {
        const auto f = features.pixel(p);
        out.data[p] = static_cast<float>(detail::cosine(f, detail::norm(f), q, qn));
    });
    return out;
}

/// Histogram of non-pruned scores over [-1, 1].
inline std::vector<std::uint64_t> score_histogram(const SegmentationResult &result, const FeatureStore &store,
                                                  std::size_t bins = 32) {
    std::vector<std::uint64_t> hist(bins, 0);
    for (std::size_t k = 0; k < result.scores.size(); ++k) {
        if (store.pruned[k]) {
            continue;
        }
        const double t = (double(result.scores[k]) + 1.0) * 0.5 * bins;
        const auto b = static_cast<std::size_t>(std::clamp(t, 0.0, double(bins - 1)));
        ++hist[b];
    }
    return hist;
}

/// Keeps exactly the members of `result`.
inline EditResult extract_members(const GaussianCloud &cloud, const FeatureStore &store,
                                  const SegmentationResult &result) {
    for (auto k : result.members) {
        if (k >= cloud.count()) {
            throw ValidationError("segmentation index " + std::to_string(k) + " out of range");
        }
    }
    return keep_gaussians(cloud, store, result.members);
}

/// Keeps exactly the non-members of `result`.
inline EditResult delete_members(const GaussianCloud &cloud, const FeatureStore &store,
                                 const SegmentationResult &result) {
    std::vector<std::uint8_t> drop(cloud.count(), 0);
    for (auto k : result.members) {
        if (k >= cloud.count()) {
            throw ValidationError("segmentation index " + std::to_string(k) + " out of range");
        }
        drop[k] = 1;
    }
    std::vector<std::uint32_t> keep;
    for (std::size_t k = 0; k < cloud.count(); ++k) {
        if (!drop[k]) {
            keep.push_back(static_cast<std::uint32_t>(k));
        }
    }
    return keep_gaussians(cloud, store, std::move(keep));
}

inline nlohmann::json segmentation_to_json(const SegmentationResult &result, const FeatureStore &store) {
    double lo = std::numeric_limits<double>::infinity();
    double hi = -lo;
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t k = 0; k < result.scores.size(); ++k) {
        if (store.pruned[k]) {
            continue;
        }
        lo = std::min(lo, double(result.scores[k]));
        hi = std::max(hi, double(result.scores[k]));
        sum += result.scores[k];
        ++n;
    }
    return {{"schema", 1},
            {"memberCount", result.members.size()},
            {"indices", result.members},
            {"theta", result.spec.theta},
            {"argmax", result.spec.require_argmax && !result.spec.negatives.empty()},
            {"negatives", result.spec.negatives.size()},
            {"scores",
             {{"count", n},
              {"min", n ? lo : 0.0},
              {"max", n ? hi : 0.0},
              {"mean", n ? sum / double(n) : 0.0},
              {"histogram", score_histogram(result, store)}}}};
}

// ---------------------------------------------------------------------------------------------------------------
// Affordance transfer

struct Exemplar {
    std::vector<float> feature;
    std::int32_t label = 0;
};

struct AffordanceSource {
    std::vector<Exemplar> exemplars;
    std::vector<std::string> label_names;

    void validate(std::size_t dim) const {
        if (exemplars.empty()) {
            throw ValidationError("affordance source has no exemplars");
        }
        std::vector<std::size_t> per_label(label_names.size(), 0);
        for (const auto &e : exemplars) {
            if (e.feature.size() != dim) {
                throw ValidationError("exemplar dimension " + std::to_string(e.feature.size()) + " != " +
                                      std::to_string(dim));
            }
            if (e.label < 0 || static_cast<std::size_t>(e.label) >= label_names.size()) {
                throw ValidationError("exemplar label " + std::to_string(e.label) + " is not declared");
            }
            ++per_label[e.label];
        }
        for (std::size_t l = 0; l < per_label.size(); ++l) {
            if (per_label[l] == 0) {
                throw ValidationError("label '" + label_names[l] + "' has no exemplar");
            }
        }
    }
};

inline AffordanceSource parse_affordance_source(const nlohmann::json &doc, const std::string &what = "exemplars") {
    AffordanceSource src;
    try {
        const auto dim = doc.at("dim").get<std::size_t>();
        src.label_names = doc.at("labels").get<std::vector<std::string>>();
        for (const auto &e : doc.at("exemplars")) {
            src.exemplars.push_back({e.at("feature").get<std::vector<float>>(), e.at("label").get<std::int32_t>()});
        }
        src.validate(dim);
    } catch (const nlohmann::json::exception &ex) {
        throw ParseError(what + ": " + ex.what());
    } catch (const ValidationError &ex) {
        throw ParseError(what + ": " + ex.what());
    }
    return src;
}

inline AffordanceSource load_affordance_source(const std::filesystem::path &path) {
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(read_file(path));
    } catch (const nlohmann::json::parse_error &ex) {
        throw ParseError(path.string() + ": " + ex.what());
    }
    return parse_affordance_source(doc, path.string());
}

inline nlohmann::json affordance_source_to_json(const AffordanceSource &src) {
    nlohmann::json doc = {{"dim", src.exemplars.empty() ? 0 : src.exemplars.front().feature.size()},
                          {"labels", src.label_names},
                          {"exemplars", nlohmann::json::array()}};
    for (const auto &e : src.exemplars) {
        doc["exemplars"].push_back({{"label", e.label}, {"feature", e.feature}});
    }
    return doc;
}

inline constexpr std::int32_t kBackgroundLabel = -1;

/// kNN label per Gaussian by cosine similarity. Majority vote over the k most similar exemplars
/// (similarity ties -> lower exemplar index); vote ties -> higher summed similarity, then lower label.
/// Pruned Gaussians, and those whose best similarity is below `background_threshold`, get -1.
inline std::vector<std::int32_t> knn_transfer(const FeatureStore &store, const AffordanceSource &source, std::size_t k,
                                              double background_threshold = 0.0) {
    source.validate(store.dim);
    if (k < 1 || k > source.exemplars.size()) {
        throw ValidationError("k must lie in [1, " + std::to_string(source.exemplars.size()) + "], got " +
                              std::to_string(k));
    }
    std::vector<double> ex_norm(source.exemplars.size());
    for (std::size_t e = 0; e < ex_norm.size(); ++e) {
        ex_norm[e] = detail::norm(source.exemplars[e].feature);
    }
    const std::size_t n_labels = source.label_names.size();
    std::vector<std::int32_t> labels(store.count, kBackgroundLabel);
    parallel_for(0, static_cast<std::ptrdiff_t>(store.count), [&](std::ptrdiff_t g) {
        if (store.pruned[g]) {
            return;
        }
        const auto f = store.row(g);
        const double fn = detail::norm(f);
        // best[0..k) kept in ranking order
        std::vector<std::pair<double, std::size_t>> best;
        best.reserve(k + 1);
        auto better = [](const std::pair<double, std::size_t> &a, const std::pair<double, std::size_t> &b) {
            return a.first > b.first || (a.first == b.first && a.second < b.second);
        };
        for (std::size_t e = 0; e < source.exemplars.size(); ++e) {
            const std::pair<double, std::size_t> cand{detail::cosine(f, fn, source.exemplars[e].feature, ex_norm[e]), e};
            if (best.size() == k && !better(cand, best.back())) {
                continue;
            }
            best.insert(std::upper_bound(best.begin(), best.end(), cand, better), cand);
            if (best.size() > k) {
                best.pop_back();
            }
        }
        if (best.front().first < background_threshold) {
            return;
        }
        std::vector<std::size_t> votes(n_labels, 0);
        std::vector<double> sums(n_labels, 0.0);
        for (const auto &[sim, e] : best) {
            const auto l = static_cast<std::size_t>(source.exemplars[e].label);
            ++votes[l];
            sums[l] += sim;
        }
        std::size_t winner = 0;
        for (std::size_t l = 1; l < n_labels; ++l) {
            if (votes[l] > votes[winner] || (votes[l] == votes[winner] && sums[l] > sums[winner])) {
                winner = l;
            }
        }
        labels[g] = static_cast<std::int32_t>(winner);
    });
    return labels;
}

// ---------------------------------------------------------------------------------------------------------------
// Metrics

struct MaskMetrics {
    double iou = 1.0;
    double recall = 1.0;
};

/// IoU and recall of `pred` against `truth`; each is 1 when its denominator is empty.
inline MaskMetrics mask_metrics(const Mask &pred, const Mask &truth) {
    require_same_size(pred, truth, "mask_metrics");
    std::size_t inter = 0, uni = 0, t = 0;
    for (std::size_t i = 0; i < pred.pixel_count(); ++i) {
        const bool p = pred.data[i * pred.channels] != 0;
        const bool g = truth.data[i * truth.channels] != 0;
        inter += p && g;
        uni += p || g;
        t += g;
    }
    MaskMetrics m;
    m.iou = uni ? double(inter) / double(uni) : 1.0;
    m.recall = t ? double(inter) / double(t) : 1.0;
    return m;
}

/// Mean IoU of two label sequences over `class_ids`; classes absent from both are skipped (1.0 if all are).
inline double mean_iou(std::span<const std::int32_t> pred, std::span<const std::int32_t> truth,
                       std::span<const std::int32_t> class_ids) {
    if (pred.size() != truth.size()) {
        throw ValidationError("mean_iou: " + std::to_string(pred.size()) + " predictions for " +
                              std::to_string(truth.size()) + " labels");
    }
    double sum = 0.0;
    std::size_t used = 0;
    for (std::int32_t c : class_ids) {
        std::size_t inter = 0, uni = 0;
        for (std::size_t i = 0; i < pred.size(); ++i) {
            const bool p = pred[i] == c;
            const bool t = truth[i] == c;
            inter += p && t;
            uni += p || t;
        }
        if (uni == 0) {
            continue;
        }
        sum += double(inter) / double(uni);
        ++used;
    }
    return used ? sum / double(used) : 1.0;
}

/// Pixels equal to `label`.
inline Mask label_mask(const LabelImage &labels, std::int32_t label) {
    Mask m(labels.height, labels.width);
    for (std::size_t i = 0; i < labels.pixel_count(); ++i) {
        m.data[i] = labels.data[i] == label;
    }
    return m;
}

} // namespace splatfield

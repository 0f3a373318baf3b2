// Copyright Contributors to the splatfield project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "splatfield/error.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace splatfield {

/// Per-Gaussian feature vectors (N x D float32) with a pruned flag per row. Pruned rows are zero.
struct FeatureStore {
    std::size_t count = 0;
    std::size_t dim = 0;
    std::vector<float> data;
    std::vector<std::uint8_t> pruned;

    FeatureStore() = default;
    FeatureStore(std::size_t n, std::size_t d) : count(n), dim(d), data(n * d, 0.0f), pruned(n, 0) {}

    [[nodiscard]] std::span<float> row(std::size_t k) { return {data.data() + k * dim, dim}; }
    [[nodiscard]] std::span<const float> row(std::size_t k) const { return {data.data() + k * dim, dim}; }
    [[nodiscard]] bool is_pruned(std::size_t k) const { return pruned[k] != 0; }

    [[nodiscard]] std::size_t pruned_count() const {
        return static_cast<std::size_t>(std::count_if(pruned.begin(), pruned.end(), [](auto p) { return p != 0; }));
    }

    void set_pruned(std::size_t k) {
        pruned[k] = 1;
        std::fill_n(data.begin() + static_cast<std::ptrdiff_t>(k * dim), dim, 0.0f);
    }

    void validate() const {
        if (data.size() != count * dim || pruned.size() != count) {
            throw ValidationError("FeatureStore: payload size disagrees with " + std::to_string(count) + " x " +
                                  std::to_string(dim));
        }
        for (std::size_t i = 0; i < data.size(); ++i) {
            if (!std::isfinite(data[i])) {
                throw ValidationError("FeatureStore: non-finite value at row " + std::to_string(i / dim));
            }
        }
        for (std::size_t k = 0; k < count; ++k) {
            if (pruned[k]) {
                for (float v : row(k)) {
                    if (v != 0.0f) {
                        throw ValidationError("FeatureStore: pruned row " + std::to_string(k) + " is not zero");
                    }
                }
            }
        }
    }

    [[nodiscard]] FeatureStore subset(std::span<const std::uint32_t> keep) const {
        FeatureStore out(keep.size(), dim);
        for (std::size_t i = 0; i < keep.size(); ++i) {
            std::copy_n(data.begin() + static_cast<std::ptrdiff_t>(keep[i] * dim), dim,
                        out.data.begin() + static_cast<std::ptrdiff_t>(i * dim));
            out.pruned[i] = pruned[keep[i]];
        }
        return out;
    }

    bool operator==(const FeatureStore &) const = default;
};

} // namespace splatfield

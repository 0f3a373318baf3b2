// Copyright Contributors to the splatfield project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "splatfield/error.hpp"

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace splatfield {

/// Row-major H x W x C grid. Used for color images, transmittance, feature maps, masks and labels.
template <typename T>
struct Raster {
    std::size_t height = 0;
    std::size_t width = 0;
    std::size_t channels = 1;
    std::vector<T> data;

    Raster() = default;
    Raster(std::size_t h, std::size_t w, std::size_t c = 1, T fill = T{})
        : height(h), width(w), channels(c), data(h * w * c, fill) {}

    [[nodiscard]] std::size_t pixel_count() const { return height * width; }
    [[nodiscard]] bool empty() const { return data.empty(); }

    [[nodiscard]] std::span<T> at(std::size_t x, std::size_t y) {
        return {data.data() + (y * width + x) * channels, channels};
    }
    [[nodiscard]] std::span<const T> at(std::size_t x, std::size_t y) const {
        return {data.data() + (y * width + x) * channels, channels};
    }
    [[nodiscard]] std::span<T> pixel(std::size_t index) {
        return {data.data() + index * channels, channels};
    }
    [[nodiscard]] std::span<const T> pixel(std::size_t index) const {
        return {data.data() + index * channels, channels};
    }
    T &operator()(std::size_t x, std::size_t y, std::size_t c = 0) { return data[(y * width + x) * channels + c]; }
    const T &operator()(std::size_t x, std::size_t y, std::size_t c = 0) const {
        return data[(y * width + x) * channels + c];
    }

    [[nodiscard]] bool same_shape(const Raster &other) const {
        return height == other.height && width == other.width && channels == other.channels;
    }
    bool operator==(const Raster &) const = default;
};

/// H x W x D real tensor; one per view for back-projection, or a rendered feature image.
using FeatureMap = Raster<float>;
/// RGB (3 channels) or single-channel float image.
using Image = Raster<float>;
/// Binary mask, 0 or 1 per pixel.
using Mask = Raster<std::uint8_t>;
/// Per-pixel class label, -1 = unlabeled/background.
using LabelImage = Raster<std::int32_t>;

template <typename T, typename U>
void require_same_size(const Raster<T> &a, const Raster<U> &b, const std::string &what) {
    if (a.width != b.width || a.height != b.height) {
        throw ValidationError(what + ": dimension mismatch (" + std::to_string(a.width) + "x" +
                              std::to_string(a.height) + " vs " + std::to_string(b.width) + "x" +
                              std::to_string(b.height) + ")");
    }
}

} // namespace splatfield

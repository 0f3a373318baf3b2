// Copyright Contributors to the splatfield project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <zlib.h>

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>

#include <splatfield/raster.hpp>

namespace splatfield::testing {

/// Scratch directory removed on destruction.
class TempDir {
public:
    TempDir() {
        static std::atomic<int> counter{0};
        std::random_device rd;
        path_ = std::filesystem::temp_directory_path() /
                ("splatfield-test-" + std::to_string(rd()) + "-" + std::to_string(counter++));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir &) = delete;
    TempDir &operator=(const TempDir &) = delete;

    [[nodiscard]] const std::filesystem::path &path() const { return path_; }
    [[nodiscard]] std::filesystem::path operator/(const std::string &name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

/// Minimal decoder for the PNGs the library writes: 8-bit gray or RGB, one IDAT, filter 0 on every row.
inline Raster<std::uint8_t> decode_png(std::string_view png) {
    auto be32 = [&](std::size_t at) {
        return (std::uint32_t(std::uint8_t(png[at])) << 24) | (std::uint32_t(std::uint8_t(png[at + 1])) << 16) |
               (std::uint32_t(std::uint8_t(png[at + 2])) << 8) | std::uint32_t(std::uint8_t(png[at + 3]));
    };
    if (png.substr(0, 8) != std::string_view("\x89PNG\r\n\x1a\n", 8)) {
        throw std::runtime_error("not a PNG");
    }
    std::size_t pos = 8;
    std::uint32_t width = 0, height = 0;
    std::size_t channels = 0;
    std::string idat;
    while (pos + 8 <= png.size()) {
        const std::uint32_t len = be32(pos);
        const std::string_view type = png.substr(pos + 4, 4);
        const std::string_view data = png.substr(pos + 8, len);
        const std::uint32_t crc = be32(pos + 8 + len);
        const auto expect = crc32(0L, reinterpret_cast<const Bytef *>(png.data() + pos + 4), len + 4);
        if (crc != expect) {
            throw std::runtime_error("bad CRC in chunk " + std::string(type));
        }
        if (type == "IHDR") {
            width = be32(pos + 8);
            height = be32(pos + 12);
            channels = data[9] == 2 ? 3 : 1;
        } else if (type == "IDAT") {
            idat.append(data);
        }
        pos += 12 + len;
    }
    std::string raw(height * (width * channels + 1), '\0');
    uLongf size = raw.size();
    if (uncompress(reinterpret_cast<Bytef *>(raw.data()), &size, reinterpret_cast<const Bytef *>(idat.data()),
                   idat.size()) != Z_OK ||
        size != raw.size()) {
        throw std::runtime_error("bad IDAT");
    }
    Raster<std::uint8_t> img(height, width, channels);
    for (std::size_t y = 0; y < height; ++y) {
        const std::size_t row = y * (width * channels + 1);
        if (raw[row] != 0) {
            throw std::runtime_error("unsupported filter");
        }
        std::copy_n(raw.data() + row + 1, width * channels,
                    reinterpret_cast<char *>(img.data.data() + y * width * channels));
    }
    return img;
}

} // namespace splatfield::testing

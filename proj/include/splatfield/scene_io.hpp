// Copyright Contributors to the splatfield project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "splatfield/error.hpp"
#include "splatfield/feature_store.hpp"
#include "splatfield/gaussian.hpp"
#include "splatfield/raster.hpp"

#include <json.hpp>
#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cctype>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

namespace splatfield {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

// ---------------------------------------------------------------------------------------------------------------
// Raw file access

inline std::string read_file(const std::filesystem::path &path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open '" + path.string() + "'");
    }
    std::ostringstream buf;
    buf << in.rdbuf();
    return std::move(buf).str();
}

inline void write_file(const std::filesystem::path &path, std::string_view bytes) {
    if (path.has_parent_path()) {
        std::error_code ec;
        std::filesystem::create_directories(path.parent_path(), ec);
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw IoError("cannot open '" + path.string() + "' for writing");
    }
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) {
        throw IoError("write to '" + path.string() + "' failed");
    }
}

namespace detail {

template <typename T>
void append_pod(std::string &out, const T &value) {
    out.append(reinterpret_cast<const char *>(&value), sizeof(T));
}

template <typename T>
void append_span(std::string &out, std::span<const T> values) {
    out.append(reinterpret_cast<const char *>(values.data()), values.size_bytes());
}

class ByteReader {
public:
    ByteReader(std::string_view bytes, std::string what) : bytes_(bytes), what_(std::move(what)) {}

    template <typename T>
    T read(const char *field) {
        T value;
        take(&value, sizeof(T), field);
        return value;
    }
    void take(void *dst, std::size_t n, const char *field) {
        if (bytes_.size() - pos_ < n) {
            throw ParseError(what_ + ": truncated while reading " + field);
        }
        std::memcpy(dst, bytes_.data() + pos_, n);
        pos_ += n;
    }
    [[nodiscard]] std::size_t remaining() const { return bytes_.size() - pos_; }

private:
    std::string_view bytes_;
    std::string what_;
    std::size_t pos_ = 0;
};

inline void check_finite(std::span<const float> values, const std::string &what) {
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (!std::isfinite(values[i])) {
            throw ParseError(what + ": non-finite value at flat index " + std::to_string(i));
        }
    }
}

} // namespace detail

// ---------------------------------------------------------------------------------------------------------------
// Gaussian scenes (3DGS PLY layout)

namespace detail {

inline std::size_t ply_type_size(const std::string &type) {
    static const std::map<std::string, std::size_t> sizes = {
        {"char", 1},  {"uchar", 1},  {"int8", 1},    {"uint8", 1},   {"short", 2},  {"ushort", 2},
        {"int16", 2}, {"uint16", 2}, {"int", 4},     {"uint", 4},    {"int32", 4},  {"uint32", 4},
        {"float", 4}, {"float32", 4}, {"double", 8}, {"float64", 8}};
    auto it = sizes.find(type);
    if (it == sizes.end()) {
        throw ParseError("PLY: unknown property type '" + type + "'");
    }
    return it->second;
}

struct PlyProperty {
    std::string name;
    std::string type;
    std::size_t offset = 0;
};

} // namespace detail

/// Zero vertices is an EmptySceneError unless `allow_empty` (rendering an empty scene is well defined).
inline GaussianCloud parse_ply(std::string_view bytes, const std::string &source = "PLY", bool allow_empty = false) {
    const std::string what = source;
    const auto header_end = bytes.find("end_header");
    if (bytes.substr(0, 3) != "ply" || header_end == std::string_view::npos) {
        throw ParseError(what + ": malformed header (missing 'ply' magic or 'end_header')");
    }
    auto payload_start = bytes.find('\n', header_end);
    if (payload_start == std::string_view::npos) {
        throw ParseError(what + ": malformed header (no newline after end_header)");
    }
    ++payload_start;

    std::istringstream header(std::string(bytes.substr(0, header_end)));
    std::string line;
    std::size_t vertex_count = 0;
    bool in_vertex = false;
    bool seen_vertex = false;
    bool format_ok = false;
    std::vector<detail::PlyProperty> props;
    std::size_t stride = 0;
    while (std::getline(header, line)) {
        if (!line.empty() && line.back() == '\r') {
            line.pop_back();
        }
        std::istringstream ls(line);
        std::string key;
        ls >> key;
        if (key == "format") {
            std::string fmt, version;
            ls >> fmt >> version;
            if (fmt != "binary_little_endian") {
                throw ParseError(what + ": malformed header (format '" + fmt + "', expected binary_little_endian)");
            }
            format_ok = true;
        } else if (key == "element") {
            std::string name;
            long long n = -1;
            ls >> name >> n;
            if (name == "vertex") {
                if (seen_vertex || n < 0) {
                    throw ParseError(what + ": malformed header (bad vertex element)");
                }
                if (!props.empty() || stride != 0) {
                    throw ParseError(what + ": malformed header (vertex must be the first element)");
                }
                vertex_count = static_cast<std::size_t>(n);
                in_vertex = true;
                seen_vertex = true;
            } else {
                if (!seen_vertex) {
                    throw ParseError(what + ": malformed header (element '" + name + "' precedes vertex)");
                }
                in_vertex = false;
            }
        } else if (key == "property" && in_vertex) {
            std::string type, name;
            ls >> type;
            if (type == "list") {
                throw ParseError(what + ": malformed header (list property in vertex element)");
            }
            ls >> name;
            props.push_back({name, type, stride});
            stride += detail::ply_type_size(type);
        }
    }
    if (!format_ok || !seen_vertex) {
        throw ParseError(what + ": malformed header (missing format or vertex element)");
    }
    if (vertex_count == 0 && !allow_empty) {
        throw EmptySceneError(what + ": scene has zero Gaussians");
    }

    auto find_prop = [&](const std::string &name) -> const detail::PlyProperty & {
        for (const auto &p : props) {
            if (p.name == name) {
                if (p.type != "float" && p.type != "float32") {
                    throw ParseError(what + ": property '" + name + "' must be float32, found " + p.type);
                }
                return p;
            }
        }
        throw ParseError(what + ": missing property '" + name + "'");
    };

    std::size_t rest_count = 0;
    while (std::any_of(props.begin(), props.end(),
                       [&](const auto &p) { return p.name == "f_rest_" + std::to_string(rest_count); })) {
        ++rest_count;
    }
    if (rest_count % 3 != 0) {
        throw ParseError(what + ": f_rest count " + std::to_string(rest_count) + " is not a multiple of 3");
    }
    GaussianCloud cloud;
    cloud.sh_coeffs = rest_count / 3 + 1;
    try {
        sh::degree_for_coeffs(cloud.sh_coeffs);
    } catch (const ValidationError &) {
        throw ParseError(what + ": unsupported f_rest count " + std::to_string(rest_count));
    }

    std::vector<const detail::PlyProperty *> pos = {&find_prop("x"), &find_prop("y"), &find_prop("z")};
    std::vector<const detail::PlyProperty *> dc = {&find_prop("f_dc_0"), &find_prop("f_dc_1"), &find_prop("f_dc_2")};
    std::vector<const detail::PlyProperty *> rest;
    for (std::size_t i = 0; i < rest_count; ++i) {
        rest.push_back(&find_prop("f_rest_" + std::to_string(i)));
    }
    const auto *opacity = &find_prop("opacity");
    std::vector<const detail::PlyProperty *> scale = {&find_prop("scale_0"), &find_prop("scale_1"),
                                                      &find_prop("scale_2")};
    std::vector<const detail::PlyProperty *> rot = {&find_prop("rot_0"), &find_prop("rot_1"), &find_prop("rot_2"),
                                                    &find_prop("rot_3")};

    const std::string_view payload = bytes.substr(payload_start);
    if (payload.size() < vertex_count * stride) {
        const std::size_t vertex = payload.size() / stride;
        const std::size_t within = payload.size() % stride;
        std::string prop_name = props.front().name;
        for (const auto &p : props) {
            if (p.offset <= within) {
                prop_name = p.name;
            }
        }
        throw ParseError(what + ": truncated payload at vertex " + std::to_string(vertex) + ", property '" +
                         prop_name + "'");
    }

    const std::size_t n = vertex_count;
    const std::size_t k_rest = cloud.sh_coeffs - 1;
    cloud.positions.resize(3 * n);
    cloud.sh.resize(n * cloud.sh_coeffs * 3);
    cloud.raw_opacities.resize(n);
    cloud.log_scales.resize(3 * n);
    cloud.raw_rotations.resize(4 * n);
    auto get = [&](std::size_t v, const detail::PlyProperty *p) {
        float value;
        std::memcpy(&value, payload.data() + v * stride + p->offset, sizeof(float));
        if (!std::isfinite(value)) {
            throw ParseError(what + ": non-finite value in property '" + p->name + "' of vertex " + std::to_string(v));
        }
        return value;
    };
    for (std::size_t v = 0; v < n; ++v) {
        for (int i = 0; i < 3; ++i) {
            cloud.positions[3 * v + i] = get(v, pos[i]);
            cloud.log_scales[3 * v + i] = get(v, scale[i]);
            cloud.sh[(v * cloud.sh_coeffs) * 3 + i] = get(v, dc[i]);
        }
        for (std::size_t c = 0; c < 3; ++c) {
            for (std::size_t i = 0; i < k_rest; ++i) {
                cloud.sh[(v * cloud.sh_coeffs + 1 + i) * 3 + c] = get(v, rest[c * k_rest + i]);
            }
        }
        cloud.raw_opacities[v] = get(v, opacity);
        for (int i = 0; i < 4; ++i) {
            cloud.raw_rotations[4 * v + i] = get(v, rot[i]);
        }
        const double qn = std::hypot(std::hypot(cloud.raw_rotations[4 * v], cloud.raw_rotations[4 * v + 1]),
                                     std::hypot(cloud.raw_rotations[4 * v + 2], cloud.raw_rotations[4 * v + 3]));
        if (qn == 0.0) {
            throw ParseError(what + ": zero quaternion in property 'rot_0'..'rot_3' of vertex " + std::to_string(v));
        }
    }
    return cloud;
}

inline GaussianCloud load_ply(const std::filesystem::path &path, bool allow_empty = false) {
    return parse_ply(read_file(path), path.string(), allow_empty);
}

inline std::string encode_ply(const GaussianCloud &cloud, bool allow_empty = false) {
    cloud.validate();
    if (cloud.empty() && !allow_empty) {
        throw EmptySceneError("cannot write a PLY scene with zero Gaussians");
    }
    const std::size_t k_rest = cloud.sh_coeffs - 1;
    std::string out = "ply\nformat binary_little_endian 1.0\nelement vertex " + std::to_string(cloud.count()) + "\n";
    for (const char *name : {"x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"}) {
        out += std::string("property float ") + name + "\n";
    }
    for (std::size_t i = 0; i < 3 * k_rest; ++i) {
        out += "property float f_rest_" + std::to_string(i) + "\n";
    }
    for (const char *name : {"opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"}) {
        out += std::string("property float ") + name + "\n";
    }
    out += "end_header\n";
    const std::size_t floats_per_vertex = 17 + 3 * k_rest;
    std::vector<float> row(floats_per_vertex);
    out.reserve(out.size() + cloud.count() * floats_per_vertex * sizeof(float));
    for (std::size_t v = 0; v < cloud.count(); ++v) {
        std::size_t j = 0;
        for (int i = 0; i < 3; ++i) {
            row[j++] = cloud.positions[3 * v + i];
        }
        for (int i = 0; i < 3; ++i) {
            row[j++] = 0.0f;
        }
        for (int i = 0; i < 3; ++i) {
            row[j++] = cloud.sh[v * cloud.sh_coeffs * 3 + i];
        }
        for (std::size_t c = 0; c < 3; ++c) {
            for (std::size_t i = 0; i < k_rest; ++i) {
                row[j++] = cloud.sh[(v * cloud.sh_coeffs + 1 + i) * 3 + c];
            }
        }
        row[j++] = cloud.raw_opacities[v];
        for (int i = 0; i < 3; ++i) {
            row[j++] = cloud.log_scales[3 * v + i];
        }
        for (int i = 0; i < 4; ++i) {
            row[j++] = cloud.raw_rotations[4 * v + i];
        }
        detail::append_span<float>(out, row);
    }
    return out;
}

inline void save_ply(const GaussianCloud &cloud, const std::filesystem::path &path, bool allow_empty = false) {
    write_file(path, encode_ply(cloud, allow_empty));
}

// ---------------------------------------------------------------------------------------------------------------
// FTN1 tensors: "FTN1", u8 rank, rank x u64 dims, row-major float32 payload.

struct Tensor {
    std::vector<std::uint64_t> dims;
    std::vector<float> data;
};

inline std::string encode_ftn1(std::span<const std::uint64_t> dims, std::span<const float> data) {
    std::uint64_t total = 1;
    for (auto d : dims) {
        total *= d;
    }
    if (total != data.size() || dims.size() > 255) {
        throw ValidationError("FTN1: payload size disagrees with dims");
    }
    std::string out = "FTN1";
    detail::append_pod(out, static_cast<std::uint8_t>(dims.size()));
    detail::append_span(out, dims);
    detail::append_span(out, data);
    return out;
}

inline Tensor parse_ftn1(std::string_view bytes, const std::string &what = "FTN1") {
    if (bytes.substr(0, 4) != "FTN1") {
        throw ParseError(what + ": bad magic (expected 'FTN1')");
    }
    detail::ByteReader in(bytes.substr(4), what);
    Tensor t;
    const auto rank = in.read<std::uint8_t>("rank");
    t.dims.resize(rank);
    std::uint64_t total = 1;
    for (auto &d : t.dims) {
        d = in.read<std::uint64_t>("dims");
        total *= d;
    }
    if (in.remaining() != total * sizeof(float)) {
        throw ParseError(what + ": dim mismatch (header declares " + std::to_string(total) + " values, payload holds " +
                         std::to_string(in.remaining() / sizeof(float)) + ")");
    }
    t.data.resize(total);
    in.take(t.data.data(), total * sizeof(float), "payload");
    for (std::size_t i = 0; i < t.data.size(); ++i) {
        if (!std::isfinite(t.data[i])) {
            std::string index;
            std::uint64_t rem = i;
            std::vector<std::uint64_t> coords(rank);
            for (int r = rank - 1; r >= 0; --r) {
                coords[r] = t.dims[r] ? rem % t.dims[r] : 0;
                rem = t.dims[r] ? rem / t.dims[r] : 0;
            }
            for (std::size_t r = 0; r < coords.size(); ++r) {
                index += (r ? "," : "") + std::to_string(coords[r]);
            }
            throw ParseError(what + ": non-finite value at index (" + index + ")");
        }
    }
    return t;
}

inline Tensor load_tensor(const std::filesystem::path &path) { return parse_ftn1(read_file(path), path.string()); }

inline void save_tensor(const Tensor &t, const std::filesystem::path &path) {
    write_file(path, encode_ftn1(t.dims, t.data));
}

inline FeatureMap load_feature_map(const std::filesystem::path &path) {
    Tensor t = load_tensor(path);
    if (t.dims.size() != 3) {
        throw ParseError(path.string() + ": dim mismatch (feature map must have rank 3, found " +
                         std::to_string(t.dims.size()) + ")");
    }
    FeatureMap m;
    m.height = t.dims[0];
    m.width = t.dims[1];
    m.channels = t.dims[2];
    m.data = std::move(t.data);
    return m;
}

inline void save_feature_map(const FeatureMap &map, const std::filesystem::path &path) {
    const std::uint64_t dims[3] = {map.height, map.width, map.channels};
    write_file(path, encode_ftn1(dims, map.data));
}

/// Single-channel image as a rank-2 tensor, multi-channel as rank 3.
inline void save_image_tensor(const Image &image, const std::filesystem::path &path) {
    if (image.channels == 1) {
        const std::uint64_t dims[2] = {image.height, image.width};
        write_file(path, encode_ftn1(dims, image.data));
    } else {
        save_feature_map(image, path);
    }
}

// ---------------------------------------------------------------------------------------------------------------
// Cameras: JSON array of {view, width, height, fx, fy, cx, cy, R[9] row-major, t[3]}

inline std::vector<Camera> parse_cameras(const nlohmann::json &doc, const std::string &what = "cameras") {
    if (!doc.is_array()) {
        throw ParseError(what + ": expected a JSON array of cameras");
    }
    std::vector<Camera> cams;
    std::set<std::size_t> seen;
    for (std::size_t i = 0; i < doc.size(); ++i) {
        const auto &e = doc[i];
        auto field = [&](const char *name) -> const nlohmann::json & {
            if (!e.is_object() || !e.contains(name)) {
                throw ParseError(what + ": camera entry " + std::to_string(i) + " is missing field '" + name + "'");
            }
            return e.at(name);
        };
        Camera c;
        try {
            const auto view = field("view").get<long long>();
            if (view < 0) {
                throw ParseError(what + ": negative view index " + std::to_string(view));
            }
            c.view = static_cast<std::size_t>(view);
            c.width = field("width").get<int>();
            c.height = field("height").get<int>();
            c.fx = field("fx").get<double>();
            c.fy = field("fy").get<double>();
            c.cx = field("cx").get<double>();
            c.cy = field("cy").get<double>();
            const auto R = field("R").get<std::vector<double>>();
            const auto t = field("t").get<std::vector<double>>();
            if (R.size() != 9 || t.size() != 3) {
                throw ParseError(what + ": camera entry " + std::to_string(i) + " needs R[9] and t[3]");
            }
            for (int r = 0; r < 3; ++r) {
                for (int col = 0; col < 3; ++col) {
                    c.R(r, col) = R[3 * r + col];
                }
                c.t[r] = t[r];
            }
        } catch (const nlohmann::json::exception &ex) {
            throw ParseError(what + ": camera entry " + std::to_string(i) + ": " + ex.what());
        }
        if (!seen.insert(c.view).second) {
            throw ParseError(what + ": duplicate view index " + std::to_string(c.view));
        }
        try {
            c.validate();
        } catch (const ValidationError &ex) {
            throw ParseError(what + ": " + ex.what());
        }
        cams.push_back(c);
    }
    std::sort(cams.begin(), cams.end(), [](const Camera &a, const Camera &b) { return a.view < b.view; });
    return cams;
}

inline std::vector<Camera> load_cameras(const std::filesystem::path &path) {
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(read_file(path));
    } catch (const nlohmann::json::parse_error &ex) {
        throw ParseError(path.string() + ": " + ex.what());
    }
    return parse_cameras(doc, path.string());
}

inline nlohmann::json cameras_to_json(std::span<const Camera> cams) {
    nlohmann::json doc = nlohmann::json::array();
    for (const auto &c : cams) {
        std::vector<double> R(9);
        for (int r = 0; r < 3; ++r) {
            for (int col = 0; col < 3; ++col) {
                R[3 * r + col] = c.R(r, col);
            }
        }
        doc.push_back({{"view", c.view},
                       {"width", c.width},
                       {"height", c.height},
                       {"fx", c.fx},
                       {"fy", c.fy},
                       {"cx", c.cx},
                       {"cy", c.cy},
                       {"R", R},
                       {"t", std::vector<double>{c.t.x(), c.t.y(), c.t.z()}}});
    }
    return doc;
}

inline void save_cameras(std::span<const Camera> cams, const std::filesystem::path &path) {
    write_file(path, cameras_to_json(cams).dump(2) + "\n");
}

inline SceneBundle load_scene(const std::filesystem::path &ply, const std::filesystem::path &cameras,
                              Rgb background = {0.0, 0.0, 0.0}, bool allow_empty = false) {
    SceneBundle scene{load_ply(ply, allow_empty), load_cameras(cameras), background};
    scene.validate();
    return scene;
}

// ---------------------------------------------------------------------------------------------------------------
// Prompt banks: {dim, prompts: [{name, embedding}]}

struct Prompt {
    std::string name;
    std::vector<float> embedding;
};

struct PromptBank {
    std::size_t dim = 0;
    std::vector<Prompt> entries;

    [[nodiscard]] const Prompt *find(std::string_view name) const {
        for (const auto &p : entries) {
            if (p.name == name) {
                return &p;
            }
        }
        return nullptr;
    }
    [[nodiscard]] std::vector<std::string> names() const {
        std::vector<std::string> out;
        for (const auto &p : entries) {
            out.push_back(p.name);
        }
        return out;
    }
    /// Embedding for `name`; throws listing the available names when absent.
    [[nodiscard]] const std::vector<float> &embedding(std::string_view name) const {
        if (const Prompt *p = find(name)) {
            return p->embedding;
        }
        std::string avail;
        for (const auto &p : entries) {
            avail += (avail.empty() ? "" : ", ") + p.name;
        }
        throw ValidationError("unknown prompt '" + std::string(name) + "'; available: " + avail);
    }

    void validate() const {
        std::set<std::string> names;
        for (const auto &p : entries) {
            if (!names.insert(p.name).second) {
                throw ValidationError("prompt bank: duplicate name '" + p.name + "'");
            }
            if (p.embedding.size() != dim) {
                throw ValidationError("prompt bank: '" + p.name + "' has dimension " +
                                      std::to_string(p.embedding.size()) + ", expected " + std::to_string(dim));
            }
            if (std::all_of(p.embedding.begin(), p.embedding.end(), [](float v) { return v == 0.0f; })) {
                throw ValidationError("prompt bank: '" + p.name + "' is all-zero");
            }
            for (float v : p.embedding) {
                if (!std::isfinite(v)) {
                    throw ValidationError("prompt bank: '" + p.name + "' has a non-finite value");
                }
            }
        }
    }
};

inline PromptBank parse_prompt_bank(const nlohmann::json &doc, const std::string &what = "prompt bank") {
    PromptBank bank;
    try {
        bank.dim = doc.at("dim").get<std::size_t>();
        for (const auto &p : doc.at("prompts")) {
            bank.entries.push_back({p.at("name").get<std::string>(), p.at("embedding").get<std::vector<float>>()});
        }
        bank.validate();
    } catch (const nlohmann::json::exception &ex) {
        throw ParseError(what + ": " + ex.what());
    } catch (const ValidationError &ex) {
        throw ParseError(what + ": " + ex.what());
    }
    return bank;
}

inline PromptBank load_prompt_bank(const std::filesystem::path &path) {
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(read_file(path));
    } catch (const nlohmann::json::parse_error &ex) {
        throw ParseError(path.string() + ": " + ex.what());
    }
    return parse_prompt_bank(doc, path.string());
}

inline void save_prompt_bank(const PromptBank &bank, const std::filesystem::path &path) {
    nlohmann::json doc = {{"dim", bank.dim}, {"prompts", nlohmann::json::array()}};
    for (const auto &p : bank.entries) {
        doc["prompts"].push_back({{"name", p.name}, {"embedding", p.embedding}});
    }
    write_file(path, doc.dump() + "\n");
}

// ---------------------------------------------------------------------------------------------------------------
// Feature stores: "SFS1", u64 count, u64 dim, count x dim float32, pruned bitmap (LSB-first, ceil(count/8) bytes)

inline std::string encode_feature_store(const FeatureStore &store) {
    if (store.data.size() != store.count * store.dim || store.pruned.size() != store.count) {
        throw ValidationError("FeatureStore: inconsistent dimensions");
    }
    std::string out = "SFS1";
    detail::append_pod(out, static_cast<std::uint64_t>(store.count));
    detail::append_pod(out, static_cast<std::uint64_t>(store.dim));
    const std::size_t payload_at = out.size();
    detail::append_span<float>(out, store.data);
    std::string bitmap((store.count + 7) / 8, '\0');
    for (std::size_t k = 0; k < store.count; ++k) {
        if (store.pruned[k]) {
            bitmap[k / 8] = static_cast<char>(bitmap[k / 8] | (1 << (k % 8)));
            std::memset(out.data() + payload_at + k * store.dim * sizeof(float), 0, store.dim * sizeof(float));
        }
    }
    return out + bitmap;
}

inline FeatureStore parse_feature_store(std::string_view bytes, std::optional<std::size_t> expected_count = {},
                                        const std::string &what = "feature store") {
    if (bytes.substr(0, 4) != "SFS1") {
        throw ParseError(what + ": bad magic (expected 'SFS1')");
    }
    detail::ByteReader in(bytes.substr(4), what);
    const auto count = in.read<std::uint64_t>("count");
    const auto dim = in.read<std::uint64_t>("dim");
    if (in.remaining() != count * dim * sizeof(float) + (count + 7) / 8) {
        throw ParseError(what + ": payload size disagrees with " + std::to_string(count) + " x " + std::to_string(dim));
    }
    if (expected_count && *expected_count != count) {
        throw ValidationError(what + ": count mismatch (store has " + std::to_string(count) + " rows, scene has " +
                              std::to_string(*expected_count) + " Gaussians)");
    }
    FeatureStore store(count, dim);
    in.take(store.data.data(), store.data.size() * sizeof(float), "payload");
    detail::check_finite(store.data, what);
    std::string bitmap((count + 7) / 8, '\0');
    in.take(bitmap.data(), bitmap.size(), "pruned bitmap");
    for (std::size_t k = 0; k < count; ++k) {
        store.pruned[k] = (static_cast<unsigned char>(bitmap[k / 8]) >> (k % 8)) & 1u;
    }
    return store;
}

inline void save_feature_store(const FeatureStore &store, const std::filesystem::path &path) {
    write_file(path, encode_feature_store(store));
}

inline FeatureStore load_feature_store(const std::filesystem::path &path,
                                       std::optional<std::size_t> expected_count = {}) {
    return parse_feature_store(read_file(path), expected_count, path.string());
}

// ---------------------------------------------------------------------------------------------------------------
// PGM (P5) masks and label images

namespace detail {

struct Pgm {
    std::size_t width = 0;
    std::size_t height = 0;
    unsigned maxval = 0;
    std::vector<std::uint16_t> values;
};

inline Pgm parse_pgm(std::string_view bytes, const std::string &what) {
    std::size_t pos = 0;
    auto skip_space = [&] {
        while (pos < bytes.size()) {
            if (bytes[pos] == '#') {
                while (pos < bytes.size() && bytes[pos] != '\n') {
                    ++pos;
                }
            } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
                ++pos;
            } else {
                break;
            }
        }
    };
    auto number = [&](const char *field) {
        skip_space();
        std::size_t v = 0;
        const std::size_t start = pos;
        while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
            v = v * 10 + static_cast<std::size_t>(bytes[pos++] - '0');
        }
        if (pos == start) {
            throw ParseError(what + ": malformed PGM header (" + field + ")");
        }
        return v;
    };
    if (bytes.substr(0, 2) != "P5") {
        throw ParseError(what + ": not a binary PGM (P5)");
    }
    pos = 2;
    Pgm pgm;
    pgm.width = number("width");
    pgm.height = number("height");
    pgm.maxval = static_cast<unsigned>(number("maxval"));
    if (pgm.maxval == 0 || pgm.maxval > 65535) {
        throw ParseError(what + ": bad PGM maxval");
    }
    ++pos;
    const std::size_t bpp = pgm.maxval > 255 ? 2 : 1;
    const std::size_t n = pgm.width * pgm.height;
    if (pos > bytes.size() || bytes.size() - pos < n * bpp) {
        throw ParseError(what + ": truncated PGM payload");
    }
    pgm.values.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        if (bpp == 1) {
            pgm.values[i] = static_cast<unsigned char>(bytes[pos + i]);
        } else {
            pgm.values[i] = static_cast<std::uint16_t>((static_cast<unsigned char>(bytes[pos + 2 * i]) << 8) |
                                                       static_cast<unsigned char>(bytes[pos + 2 * i + 1]));
        }
    }
    return pgm;
}

inline std::string pgm_header(std::size_t w, std::size_t h, unsigned maxval) {
    return "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n" + std::to_string(maxval) + "\n";
}

} // namespace detail

/// 8-bit PGM, 0 = background, 255 = mask.
inline std::string encode_mask_pgm(const Mask &mask) {
    std::string out = detail::pgm_header(mask.width, mask.height, 255);
    for (std::size_t i = 0; i < mask.pixel_count(); ++i) {
        out.push_back(mask.data[i * mask.channels] ? static_cast<char>(255) : '\0');
    }
    return out;
}

inline void save_mask(const Mask &mask, const std::filesystem::path &path) { write_file(path, encode_mask_pgm(mask)); }

/// Any nonzero sample is part of the mask.
inline Mask load_mask(const std::filesystem::path &path) {
    const auto pgm = detail::parse_pgm(read_file(path), path.string());
    Mask m(pgm.height, pgm.width);
    for (std::size_t i = 0; i < pgm.values.size(); ++i) {
        m.data[i] = pgm.values[i] != 0;
    }
    return m;
}

/// 16-bit PGM, value = label + 1, 0 = unlabeled.
inline std::string encode_label_pgm(const LabelImage &labels) {
    std::string out = detail::pgm_header(labels.width, labels.height, 65535);
    for (std::size_t i = 0; i < labels.pixel_count(); ++i) {
        const std::int32_t l = labels.data[i];
        if (l < -1 || l > 65534) {
            throw ValidationError("label " + std::to_string(l) + " does not fit a 16-bit label image");
        }
        const auto v = static_cast<std::uint16_t>(l + 1);
        out.push_back(static_cast<char>(v >> 8));
        out.push_back(static_cast<char>(v & 0xff));
    }
    return out;
}

inline void save_labels(const LabelImage &labels, const std::filesystem::path &path) {
    write_file(path, encode_label_pgm(labels));
}

inline LabelImage load_labels(const std::filesystem::path &path) {
    const auto pgm = detail::parse_pgm(read_file(path), path.string());
    LabelImage l(pgm.height, pgm.width);
    for (std::size_t i = 0; i < pgm.values.size(); ++i) {
        l.data[i] = static_cast<std::int32_t>(pgm.values[i]) - 1;
    }
    return l;
}

// ---------------------------------------------------------------------------------------------------------------
// PNG export (8-bit gray or RGB)

namespace detail {

inline void png_chunk(std::string &out, const char *type, std::string_view data) {
    const auto be32 = [&](std::uint32_t v) {
        for (int s = 24; s >= 0; s -= 8) {
            out.push_back(static_cast<char>((v >> s) & 0xff));
        }
    };
    be32(static_cast<std::uint32_t>(data.size()));
    const std::size_t crc_from = out.size();
    out.append(type, 4);
    out.append(data);
    const auto crc = crc32(0L, reinterpret_cast<const Bytef *>(out.data() + crc_from),
                           static_cast<uInt>(out.size() - crc_from));
    be32(static_cast<std::uint32_t>(crc));
}

} // namespace detail

inline std::uint8_t to_byte(double v) {
    return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

/// Encodes an 8-bit image with 1 (gray) or 3 (RGB) channels.
inline std::string encode_png(const Raster<std::uint8_t> &img) {
    if (img.channels != 1 && img.channels != 3) {
        throw ValidationError("PNG export supports 1 or 3 channels");
    }
    std::string raw;
    raw.reserve(img.height * (img.width * img.channels + 1));
    for (std::size_t y = 0; y < img.height; ++y) {
        raw.push_back('\0');
        raw.append(reinterpret_cast<const char *>(img.data.data() + y * img.width * img.channels),
                   img.width * img.channels);
    }
    uLongf zsize = compressBound(static_cast<uLong>(raw.size()));
    std::string z(zsize, '\0');
    if (compress2(reinterpret_cast<Bytef *>(z.data()), &zsize, reinterpret_cast<const Bytef *>(raw.data()),
                  static_cast<uLong>(raw.size()), 6) != Z_OK) {
        throw IoError("PNG compression failed");
    }
    z.resize(zsize);

    std::string out("\x89PNG\r\n\x1a\n", 8);
    std::string ihdr;
    for (std::uint32_t v : {static_cast<std::uint32_t>(img.width), static_cast<std::uint32_t>(img.height)}) {
        for (int s = 24; s >= 0; s -= 8) {
            ihdr.push_back(static_cast<char>((v >> s) & 0xff));
        }
    }
    ihdr.push_back(8);
    ihdr.push_back(img.channels == 3 ? 2 : 0);
    ihdr.append(3, '\0');
    detail::png_chunk(out, "IHDR", ihdr);
    detail::png_chunk(out, "IDAT", z);
    detail::png_chunk(out, "IEND", {});
    return out;
}

/// Float image in [0,1] to PNG.
inline std::string encode_png(const Image &img) {
    Raster<std::uint8_t> bytes(img.height, img.width, img.channels);
    for (std::size_t i = 0; i < img.data.size(); ++i) {
        bytes.data[i] = to_byte(img.data[i]);
    }
    return encode_png(bytes);
}

inline void save_png(const Image &img, const std::filesystem::path &path) { write_file(path, encode_png(img)); }

} // namespace splatfield

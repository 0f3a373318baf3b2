// Copyright Contributors to the splatfield project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "splatfield/backprojection.hpp"
#include "splatfield/error.hpp"
#include "splatfield/feature_store.hpp"
#include "splatfield/parallel.hpp"
#include "splatfield/query.hpp"
#include "splatfield/raster.hpp"
#include "splatfield/scene_io.hpp"

#include <Eigen/Core>
#include <json.hpp>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <random>
#include <set>
#include <span>
#include <string>
#include <vector>

namespace splatfield {

/// Class embeddings E (N_c x D_id) and a linear-softmax decoder (W_dec, b).
struct IdentityCodebook {
    std::size_t n_classes = 0;
    std::size_t dim = 0;
    Eigen::MatrixXd embeddings; // N_c x D_id
    Eigen::MatrixXd decoder;    // N_c x D_id
    Eigen::VectorXd bias;       // N_c
    /// Loss after the last training step; NaN for constructed codebooks.
    double final_loss = std::numeric_limits<double>::quiet_NaN();

    [[nodiscard]] std::vector<float> code(std::size_t cls) const {
        std::vector<float> out(dim);
        for (std::size_t d = 0; d < dim; ++d) {
            out[d] = static_cast<float>(embeddings(static_cast<Eigen::Index>(cls), static_cast<Eigen::Index>(d)));
        }
        return out;
    }

    /// argmax_j (W_dec f + b)_j, lowest index on ties.
    [[nodiscard]] std::int32_t decode(std::span<const float> f) const {
        std::int32_t best = 0;
        double best_logit = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < n_classes; ++j) {
            double z = bias[static_cast<Eigen::Index>(j)];
            for (std::size_t d = 0; d < dim; ++d) {
                z += decoder(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(d)) * f[d];
            }
            if (z > best_logit) {
                best_logit = z;
                best = static_cast<std::int32_t>(j);
            }
        }
        return best;
    }
};

/// One-hot codes: E = first n_classes rows of I; the decoder reads off the argmax coordinate.
inline IdentityCodebook orthogonal_codes(std::size_t n_classes, std::size_t dim) {
    if (n_classes > dim) {
        throw CapacityError("orthogonal encoding holds at most " + std::to_string(dim) + " classes in " +
                            std::to_string(dim) + " dimensions, requested " + std::to_string(n_classes));
    }
    if (n_classes == 0) {
        throw ValidationError("orthogonal_codes: need at least one class");
    }
    IdentityCodebook cb;
    cb.n_classes = n_classes;
    cb.dim = dim;
    cb.embeddings = Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(n_classes), static_cast<Eigen::Index>(dim));
    cb.decoder = cb.embeddings;
    cb.bias = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n_classes));
    return cb;
}

/// ||E E^T - I||_F
inline double orthogonality_loss(const Eigen::MatrixXd &E) {
    const Eigen::MatrixXd G = E * E.transpose() - Eigen::MatrixXd::Identity(E.rows(), E.rows());
    return G.norm();
}

/// d/dE ||E E^T - I||_F = 2 (E E^T - I) E / ||E E^T - I||_F, taken as 0 at the minimum.
inline Eigen::MatrixXd orthogonality_gradient(const Eigen::MatrixXd &E) {
    const Eigen::MatrixXd G = E * E.transpose() - Eigen::MatrixXd::Identity(E.rows(), E.rows());
    const double n = G.norm();
    if (n == 0.0) {
        return Eigen::MatrixXd::Zero(E.rows(), E.cols());
    }
    return (2.0 / n) * G * E;
}

struct IdentityLoss {
    double classification = 0.0;
    double orthogonality = 0.0;
    [[nodiscard]] double total() const { return classification + orthogonality; }
};

/// Loss over one sample per class (input E_y, label y): cross-entropy summed over the samples + ||E E^T - I||_F.
inline IdentityLoss identity_loss(const IdentityCodebook &cb) {
    const Eigen::MatrixXd Z = (cb.embeddings * cb.decoder.transpose()).rowwise() + cb.bias.transpose();
    double ce = 0.0;
    for (Eigen::Index y = 0; y < Z.rows(); ++y) {
        const double m = Z.row(y).maxCoeff();
        const double lse = m + std::log((Z.row(y).array() - m).exp().sum());
        ce += lse - Z(y, y);
    }
    return {ce, orthogonality_loss(cb.embeddings)};
}

struct ContrastiveConfig {
    std::size_t epochs = 2000;
    double lr = 0.05;
    std::uint64_t seed = 0;
    /// Start from one-hot embeddings (requires n_classes <= dim) instead of random ones.
    bool orthogonal_init = false;
};

/// Jointly trains embeddings and decoder by full-batch gradient descent on identity_loss.
inline IdentityCodebook train_contrastive(std::size_t n_classes, std::size_t dim, const ContrastiveConfig &config) {
    if (n_classes < 2 || dim < 2) {
        throw ValidationError("train_contrastive needs n_classes >= 2 and dim >= 2");
    }
    if (!(config.lr > 0.0) || !std::isfinite(config.lr)) {
        throw ValidationError("learning rate must be positive");
    }
    const auto n = static_cast<Eigen::Index>(n_classes);
    const auto d = static_cast<Eigen::Index>(dim);
    IdentityCodebook cb;
    cb.n_classes = n_classes;
    cb.dim = dim;
    std::mt19937_64 rng(config.seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    if (config.orthogonal_init) {
        cb.embeddings = orthogonal_codes(n_classes, dim).embeddings;
    } else {
        cb.embeddings.resize(n, d);
        const double s = 1.0 / std::sqrt(double(dim));
        for (Eigen::Index i = 0; i < n; ++i) {
            for (Eigen::Index j = 0; j < d; ++j) {
                cb.embeddings(i, j) = s * normal(rng);
            }
        }
    }
    cb.decoder.resize(n, d);
    for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index j = 0; j < d; ++j) {
            cb.decoder(i, j) = 0.1 * normal(rng);
        }
    }
    cb.bias = Eigen::VectorXd::Zero(n);

    const Eigen::MatrixXd I = Eigen::MatrixXd::Identity(n, n);
    for (std::size_t epoch = 0; epoch <= config.epochs; ++epoch) {
        Eigen::MatrixXd Z = (cb.embeddings * cb.decoder.transpose()).rowwise() + cb.bias.transpose();
        double ce = 0.0;
        for (Eigen::Index y = 0; y < n; ++y) {
            const double m = Z.row(y).maxCoeff();
            Z.row(y) = (Z.row(y).array() - m).exp();
            const double s = Z.row(y).sum();
            Z.row(y) /= s;
            ce -= std::log(Z(y, y));
        }
        const Eigen::MatrixXd G = cb.embeddings * cb.embeddings.transpose() - I;
        const double orth = G.norm();
        cb.final_loss = ce + orth;
        if (!std::isfinite(cb.final_loss)) {
            throw DivergenceError("identity training diverged at epoch " + std::to_string(epoch) +
                                  " (non-finite loss); try a smaller learning rate than " + std::to_string(config.lr));
        }
        if (epoch == config.epochs) {
            break;
        }
        const Eigen::MatrixXd dZ = Z - I;
        Eigen::MatrixXd dE = dZ * cb.decoder;
        if (orth > 0.0) {
            dE += (2.0 / orth) * G * cb.embeddings;
        }
        const Eigen::MatrixXd dW = dZ.transpose() * cb.embeddings;
        const Eigen::VectorXd db = dZ.colwise().sum().transpose();
        cb.embeddings -= config.lr * dE;
        cb.decoder -= config.lr * dW;
        cb.bias -= config.lr * db;
    }
    return cb;
}

inline IdentityCodebook train_contrastive(std::size_t n_classes, std::size_t dim, std::size_t epochs, double lr,
                                          std::uint64_t seed) {
    return train_contrastive(n_classes, dim, ContrastiveConfig{epochs, lr, seed, false});
}

/// Fraction of embedding rows the decoder maps back to their own class.
inline double self_classification_accuracy(const IdentityCodebook &cb) {
    std::size_t ok = 0;
    for (std::size_t c = 0; c < cb.n_classes; ++c) {
        ok += cb.decode(cb.code(c)) == static_cast<std::int32_t>(c);
    }
    return double(ok) / double(cb.n_classes);
}

/// A view with per-pixel class labels (-1 = unlabeled).
struct LabeledView {
    std::size_t view = 0;
    LabelImage labels;
};

/// Per-view feature map F(x,y) = E[label(x,y)], zero where unlabeled.
inline FeatureMap identity_feature_map(const LabelImage &labels, const IdentityCodebook &cb) {
    FeatureMap map(labels.height, labels.width, cb.dim);
    std::vector<std::vector<float>> codes(cb.n_classes);
    for (std::size_t c = 0; c < cb.n_classes; ++c) {
        codes[c] = cb.code(c);
    }
    for (std::size_t p = 0; p < labels.pixel_count(); ++p) {
        const std::int32_t l = labels.data[p];
        if (l < -1 || l >= static_cast<std::int32_t>(cb.n_classes)) {
            throw ValidationError("label " + std::to_string(l) + " is outside [-1, " + std::to_string(cb.n_classes) +
                                  ")");
        }
        if (l >= 0) {
            std::copy(codes[l].begin(), codes[l].end(), map.data.begin() + static_cast<std::ptrdiff_t>(p * cb.dim));
        }
    }
    return map;
}

/// Back-projects identity codes of the labeled views into per-Gaussian features (expected mode).
inline FeatureStore encode_scene(const SceneBundle &scene, std::span<const LabeledView> views,
                                 const IdentityCodebook &cb, BackprojectionConfig config = {},
                                 const RenderOptions &options = {}) {
    config.mode = BackprojectionMode::expected;
    Backprojector bp(scene, cb.dim, options);
    for (const auto &lv : views) {
        checked_camera(scene, lv.view);
        bp.add_view(lv.view, identity_feature_map(lv.labels, cb));
    }
    return bp.finish(config);
}

/// Decoder argmax per pixel; pixels whose feature norm is below `reject_threshold` get -1.
inline LabelImage classify_pixels(const FeatureMap &features, const IdentityCodebook &cb,
                                  double reject_threshold = 0.1) {
    if (features.channels != cb.dim) {
        throw ValidationError("classify_pixels: feature dimension " + std::to_string(features.channels) +
                              " != codebook dimension " + std::to_string(cb.dim));
    }
    LabelImage out(features.height, features.width, 1, -1);
    parallel_for(0, static_cast<std::ptrdiff_t>(features.pixel_count()), [&](std::ptrdiff_t p) {
        const auto f = features.pixel(p);
        double n2 = 0.0;
        for (float v : f) {
            n2 += double(v) * v;
        }
        if (std::sqrt(n2) >= reject_threshold) {
            out.data[p] = cb.decode(f);
        }
    });
    return out;
}

/// Mean IoU over `class_ids`; classes absent from both images are skipped (1.0 if all are skipped).
inline double grouping_miou(const LabelImage &pred, const LabelImage &truth, std::span<const std::int32_t> class_ids) {
    require_same_size(pred, truth, "grouping_miou");
    return mean_iou(pred.data, truth.data, class_ids);
}

/// Class ids >= 0 present in either image, ascending.
inline std::vector<std::int32_t> present_classes(const LabelImage &a, const LabelImage &b) {
    std::set<std::int32_t> s;
    for (auto v : a.data) {
        if (v >= 0) {
            s.insert(v);
        }
    }
    for (auto v : b.data) {
        if (v >= 0) {
            s.insert(v);
        }
    }
    return {s.begin(), s.end()};
}

// ---------------------------------------------------------------------------------------------------------------
// Codebook files: {n_classes, dim, E, W_dec, b}

inline nlohmann::json codebook_to_json(const IdentityCodebook &cb) {
    auto rows = [](const Eigen::MatrixXd &m) {
        std::vector<std::vector<double>> out(static_cast<std::size_t>(m.rows()));
        for (Eigen::Index r = 0; r < m.rows(); ++r) {
            for (Eigen::Index c = 0; c < m.cols(); ++c) {
                out[r].push_back(m(r, c));
            }
        }
        return out;
    };
    std::vector<double> b(cb.bias.data(), cb.bias.data() + cb.bias.size());
    return {{"n_classes", cb.n_classes}, {"dim", cb.dim}, {"E", rows(cb.embeddings)}, {"W_dec", rows(cb.decoder)},
            {"b", b}};
}

inline IdentityCodebook codebook_from_json(const nlohmann::json &doc, const std::string &what = "codebook") {
    IdentityCodebook cb;
    try {
        cb.n_classes = doc.at("n_classes").get<std::size_t>();
        cb.dim = doc.at("dim").get<std::size_t>();
        const auto n = static_cast<Eigen::Index>(cb.n_classes);
        const auto d = static_cast<Eigen::Index>(cb.dim);
        auto matrix = [&](const char *key) {
            const auto rows = doc.at(key).get<std::vector<std::vector<double>>>();
            if (rows.size() != cb.n_classes) {
                throw ParseError(what + ": '" + key + "' must have n_classes rows");
            }
            Eigen::MatrixXd m(n, d);
            for (Eigen::Index r = 0; r < n; ++r) {
                if (rows[r].size() != cb.dim) {
                    throw ParseError(what + ": '" + key + "' row " + std::to_string(r) + " must have dim entries");
                }
                for (Eigen::Index c = 0; c < d; ++c) {
                    if (!std::isfinite(rows[r][c])) {
                        throw ParseError(what + ": non-finite value in '" + key + "'");
                    }
                    m(r, c) = rows[r][c];
                }
            }
            return m;
        };
        cb.embeddings = matrix("E");
        cb.decoder = matrix("W_dec");
        const auto b = doc.at("b").get<std::vector<double>>();
        if (b.size() != cb.n_classes) {
            throw ParseError(what + ": 'b' must have n_classes entries");
        }
        cb.bias = Eigen::Map<const Eigen::VectorXd>(b.data(), n);
    } catch (const nlohmann::json::exception &ex) {
        throw ParseError(what + ": " + ex.what());
    }
    return cb;
}

inline void save_codebook(const IdentityCodebook &cb, const std::filesystem::path &path) {
    write_file(path, codebook_to_json(cb).dump() + "\n");
}

inline IdentityCodebook load_codebook(const std::filesystem::path &path) {
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(read_file(path));
    } catch (const nlohmann::json::parse_error &ex) {
        throw ParseError(path.string() + ": " + ex.what());
    }
    return codebook_from_json(doc, path.string());
}

} // namespace splatfield

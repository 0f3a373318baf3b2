// Copyright Contributors to the splatfield project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "splatfield/error.hpp"

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace splatfield {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat2 = Eigen::Matrix2d;
using Mat3 = Eigen::Matrix3d;
using Rgb = std::array<double, 3>;

namespace sh {
inline constexpr double C0 = 0.28209479177387814;
inline constexpr double C1 = 0.4886025119029199;
inline constexpr std::array<double, 5> C2 = {1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
                                             -1.0925484305920792, 0.5462742152960396};
inline constexpr std::array<double, 7> C3 = {-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
                                             0.3731763325901154,  -0.4570457994644658, 1.445305721320277,
                                             -0.5900435899266435};

/// Coefficients per channel for an SH degree (1, 4, 9, 16).
constexpr std::size_t coeffs_for_degree(int degree) {
    return static_cast<std::size_t>((degree + 1) * (degree + 1));
}

inline int degree_for_coeffs(std::size_t coeffs) {
    switch (coeffs) {
    case 1: return 0;
    case 4: return 1;
    case 9: return 2;
    case 16: return 3;
    default: throw ValidationError("unsupported SH coefficient count " + std::to_string(coeffs));
    }
}
} // namespace sh

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }
inline double logit(double p) { return std::log(p / (1.0 - p)); }

/// Activated parameters of one Gaussian, used to build clouds in memory.
struct Gaussian {
    Vec3 position = Vec3::Zero();
    Eigen::Quaterniond rotation = Eigen::Quaterniond::Identity();
    Vec3 scale = Vec3::Ones();
    double opacity = 0.5;
    /// K x 3, coefficient-major. K = 1 for a constant color.
    std::vector<Rgb> sh = {Rgb{0.0, 0.0, 0.0}};

    /// Degree-0 coefficients that evaluate to the given color.
    static std::vector<Rgb> dc_from_color(const Rgb &rgb) {
        return {Rgb{(rgb[0] - 0.5) / sh::C0, (rgb[1] - 0.5) / sh::C0, (rgb[2] - 0.5) / sh::C0}};
    }
};

/// Scene of N Gaussians. Arrays hold the raw (PLY-domain) values; accessors apply the activations
/// (sigmoid opacity, exp scale, normalized wxyz quaternion).
struct GaussianCloud {
    std::size_t sh_coeffs = 1;
    std::vector<float> positions;      // N x 3
    std::vector<float> sh;             // N x K x 3
    std::vector<float> raw_opacities;  // N, logits
    std::vector<float> log_scales;     // N x 3
    std::vector<float> raw_rotations;  // N x 4, w x y z

    [[nodiscard]] std::size_t count() const { return raw_opacities.size(); }
    [[nodiscard]] bool empty() const { return raw_opacities.empty(); }
    [[nodiscard]] int sh_degree() const { return sh::degree_for_coeffs(sh_coeffs); }

    [[nodiscard]] Vec3 position(std::size_t k) const {
        return {positions[3 * k], positions[3 * k + 1], positions[3 * k + 2]};
    }
    [[nodiscard]] double opacity(std::size_t k) const { return sigmoid(raw_opacities[k]); }
    [[nodiscard]] Vec3 scale(std::size_t k) const {
        return {std::exp(double(log_scales[3 * k])), std::exp(double(log_scales[3 * k + 1])),
                std::exp(double(log_scales[3 * k + 2]))};
    }
    [[nodiscard]] Eigen::Quaterniond rotation(std::size_t k) const {
        Eigen::Quaterniond q(raw_rotations[4 * k], raw_rotations[4 * k + 1], raw_rotations[4 * k + 2],
                             raw_rotations[4 * k + 3]);
        q.normalize();
        return q;
    }
    [[nodiscard]] std::span<const float> sh_of(std::size_t k) const {
        return {sh.data() + k * sh_coeffs * 3, sh_coeffs * 3};
    }

    /// Appends a Gaussian given in activated form. Its SH list is padded or truncated to sh_coeffs.
    void append(const Gaussian &g) {
        for (int i = 0; i < 3; ++i) {
            positions.push_back(static_cast<float>(g.position[i]));
        }
        for (std::size_t i = 0; i < sh_coeffs; ++i) {
            const Rgb c = i < g.sh.size() ? g.sh[i] : Rgb{0.0, 0.0, 0.0};
            for (double v : c) {
                sh.push_back(static_cast<float>(v));
            }
        }
        raw_opacities.push_back(static_cast<float>(logit(std::clamp(g.opacity, 1e-6, 1.0 - 1e-6))));
        for (int i = 0; i < 3; ++i) {
            log_scales.push_back(static_cast<float>(std::log(g.scale[i])));
        }
        const Eigen::Quaterniond q = g.rotation.normalized();
        raw_rotations.insert(raw_rotations.end(), {static_cast<float>(q.w()), static_cast<float>(q.x()),
                                                   static_cast<float>(q.y()), static_cast<float>(q.z())});
    }

    /// Copy restricted to `keep`, in the given order.
    [[nodiscard]] GaussianCloud subset(std::span<const std::uint32_t> keep) const {
        GaussianCloud out;
        out.sh_coeffs = sh_coeffs;
        const std::size_t stride = sh_coeffs * 3;
        out.positions.reserve(keep.size() * 3);
        out.sh.reserve(keep.size() * stride);
        out.raw_opacities.reserve(keep.size());
        out.log_scales.reserve(keep.size() * 3);
        out.raw_rotations.reserve(keep.size() * 4);
        for (std::uint32_t k : keep) {
            out.positions.insert(out.positions.end(), positions.begin() + 3 * k, positions.begin() + 3 * k + 3);
            out.sh.insert(out.sh.end(), sh.begin() + k * stride, sh.begin() + (k + 1) * stride);
            out.raw_opacities.push_back(raw_opacities[k]);
            out.log_scales.insert(out.log_scales.end(), log_scales.begin() + 3 * k, log_scales.begin() + 3 * k + 3);
            out.raw_rotations.insert(out.raw_rotations.end(), raw_rotations.begin() + 4 * k,
                                     raw_rotations.begin() + 4 * k + 4);
        }
        return out;
    }

    void validate() const {
        const std::size_t n = count();
        sh::degree_for_coeffs(sh_coeffs);
        if (positions.size() != 3 * n || log_scales.size() != 3 * n || raw_rotations.size() != 4 * n ||
            sh.size() != n * sh_coeffs * 3) {
            throw ValidationError("GaussianCloud: array lengths disagree with count " + std::to_string(n));
        }
        auto finite = [](const std::vector<float> &v, const char *name) {
            for (std::size_t i = 0; i < v.size(); ++i) {
                if (!std::isfinite(v[i])) {
                    throw ValidationError(std::string("GaussianCloud: non-finite ") + name + " at index " +
                                          std::to_string(i));
                }
            }
        };
        finite(positions, "position");
        finite(sh, "sh");
        finite(raw_opacities, "opacity");
        finite(log_scales, "scale");
        finite(raw_rotations, "rotation");
        for (std::size_t k = 0; k < n; ++k) {
            const double norm2 = double(raw_rotations[4 * k]) * raw_rotations[4 * k] +
                                 double(raw_rotations[4 * k + 1]) * raw_rotations[4 * k + 1] +
                                 double(raw_rotations[4 * k + 2]) * raw_rotations[4 * k + 2] +
                                 double(raw_rotations[4 * k + 3]) * raw_rotations[4 * k + 3];
            if (norm2 <= 0.0) {
                throw ValidationError("GaussianCloud: zero quaternion at Gaussian " + std::to_string(k));
            }
        }
    }
};

/// Pinhole camera with world-to-camera pose x_cam = R * x_world + t (x right, y down, z forward).
struct Camera {
    std::size_t view = 0;
    int width = 1;
    int height = 1;
    double fx = 1.0;
    double fy = 1.0;
    double cx = 0.5;
    double cy = 0.5;
    Mat3 R = Mat3::Identity();
    Vec3 t = Vec3::Zero();

    [[nodiscard]] Vec3 to_camera(const Vec3 &world) const { return R * world + t; }
    [[nodiscard]] Vec3 center() const { return -R.transpose() * t; }

    /// Same pose with intrinsics rescaled to a new resolution.
    [[nodiscard]] Camera resized(int new_width, int new_height) const {
        Camera c = *this;
        const double sx = double(new_width) / width;
        const double sy = double(new_height) / height;
        c.width = new_width;
        c.height = new_height;
        c.fx *= sx;
        c.cx *= sx;
        c.fy *= sy;
        c.cy *= sy;
        return c;
    }

    void validate() const {
        const std::string where = "camera " + std::to_string(view) + ": ";
        if (width < 1 || height < 1) {
            throw ValidationError(where + "image dimensions must be >= 1");
        }
        if (!(fx > 0.0) || !(fy > 0.0)) {
            throw ValidationError(where + "focal lengths must be positive");
        }
        if (!R.allFinite() || !t.allFinite() || !std::isfinite(cx) || !std::isfinite(cy)) {
            throw ValidationError(where + "non-finite pose or intrinsics");
        }
        const double ortho = (R * R.transpose() - Mat3::Identity()).cwiseAbs().maxCoeff();
        if (ortho > 1e-5 || std::abs(R.determinant() - 1.0) > 1e-5) {
            throw ValidationError(where + "rotation is not rigid (orthonormality error " + std::to_string(ortho) +
                                  ", det " + std::to_string(R.determinant()) + ")");
        }
    }
};

/// Camera at `eye` looking at `target`; `up` is the world up direction.
inline Camera look_at(std::size_t view, const Vec3 &eye, const Vec3 &target, const Vec3 &up, int width, int height,
                      double focal) {
    const Vec3 forward = (target - eye).normalized();
    const Vec3 right = forward.cross(up).normalized();
    const Vec3 down = forward.cross(right);
    Camera cam;
    cam.view = view;
    cam.width = width;
    cam.height = height;
    cam.fx = focal;
    cam.fy = focal;
    cam.cx = 0.5 * width;
    cam.cy = 0.5 * height;
    cam.R.row(0) = right.transpose();
    cam.R.row(1) = down.transpose();
    cam.R.row(2) = forward.transpose();
    cam.t = -cam.R * eye;
    return cam;
}

/// Cloud plus its ordered views; view index n is the position in `cameras`.
struct SceneBundle {
    GaussianCloud cloud;
    std::vector<Camera> cameras;
    Rgb background = {0.0, 0.0, 0.0};

    void validate() const {
        cloud.validate();
        for (std::size_t i = 0; i < cameras.size(); ++i) {
            cameras[i].validate();
            if (cameras[i].view != i) {
                throw ValidationError("camera views must be contiguous from 0; position " + std::to_string(i) +
                                      " holds view " + std::to_string(cameras[i].view));
            }
        }
        for (double c : background) {
            if (!(c >= 0.0 && c <= 1.0)) {
                throw ValidationError("background components must lie in [0,1]");
            }
        }
    }
};

/// View-dependent color of Gaussian k: clamp(SH(dir) + 0.5, 0, 1). `dir` points from the camera to the mean.
inline Rgb evaluate_sh(const GaussianCloud &cloud, std::size_t k, const Vec3 &dir) {
    const std::span<const float> c = cloud.sh_of(k);
    const int degree = cloud.sh_degree();
    const double x = dir.x(), y = dir.y(), z = dir.z();
    Rgb out{};
    for (int ch = 0; ch < 3; ++ch) {
        auto s = [&](int i) { return double(c[3 * i + ch]); };
        double v = sh::C0 * s(0);
        if (degree > 0) {
            v += -sh::C1 * y * s(1) + sh::C1 * z * s(2) - sh::C1 * x * s(3);
            if (degree > 1) {
                const double xx = x * x, yy = y * y, zz = z * z;
                const double xy = x * y, yz = y * z, xz = x * z;
                v += sh::C2[0] * xy * s(4) + sh::C2[1] * yz * s(5) + sh::C2[2] * (2.0 * zz - xx - yy) * s(6) +
                     sh::C2[3] * xz * s(7) + sh::C2[4] * (xx - yy) * s(8);
                if (degree > 2) {
                    v += sh::C3[0] * y * (3.0 * xx - yy) * s(9) + sh::C3[1] * xy * z * s(10) +
                         sh::C3[2] * y * (4.0 * zz - xx - yy) * s(11) +
                         sh::C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy) * s(12) +
                         sh::C3[4] * x * (4.0 * zz - xx - yy) * s(13) + sh::C3[5] * z * (xx - yy) * s(14) +
                         sh::C3[6] * x * (xx - 3.0 * yy) * s(15);
                }
            }
        }
        out[ch] = std::clamp(v + 0.5, 0.0, 1.0);
    }
    return out;
}

/// World covariance R diag(s^2) R^T of Gaussian k.
inline Mat3 covariance3d(const GaussianCloud &cloud, std::size_t k) {
    const Mat3 rot = cloud.rotation(k).toRotationMatrix();
    const Vec3 s = cloud.scale(k);
    return rot * s.cwiseProduct(s).asDiagonal() * rot.transpose();
}

struct ProjectionParams {
    double near_plane = 0.01;
    /// Added to the diagonal of every screen-space covariance (pixels^2).
    double lowpass = 0.3;
};

/// One Gaussian as seen from a camera.
struct ProjectedGaussian {
    std::uint32_t index = 0;
    Vec2 mean = Vec2::Zero();
    Mat2 cov = Mat2::Identity();
    /// Upper triangle (a, b, c) of cov^-1.
    Eigen::Vector3d conic = Eigen::Vector3d::Zero();
    double depth = 0.0;
    double opacity = 0.0;
    Rgb rgb{};
    double radius = 0.0;
};

/// EWA projection of Gaussian k. Returns nullopt when the mean is at or behind the near plane or the
/// 3-sigma footprint misses the image.
inline std::optional<ProjectedGaussian> project_gaussian(const GaussianCloud &cloud, std::size_t k,
                                                         const Camera &cam, const ProjectionParams &params = {}) {
    const Vec3 world = cloud.position(k);
    const Vec3 p = cam.to_camera(world);
    if (!(p.z() > params.near_plane)) {
        return std::nullopt;
    }
    const double inv_z = 1.0 / p.z();
    ProjectedGaussian g;
    g.index = static_cast<std::uint32_t>(k);
    g.depth = p.z();
    g.mean = {cam.fx * p.x() * inv_z + cam.cx, cam.fy * p.y() * inv_z + cam.cy};

    Eigen::Matrix<double, 2, 3> J;
    J << cam.fx * inv_z, 0.0, -cam.fx * p.x() * inv_z * inv_z, 0.0, cam.fy * inv_z, -cam.fy * p.y() * inv_z * inv_z;
    const Eigen::Matrix<double, 2, 3> T = J * cam.R;
    g.cov = T * covariance3d(cloud, k) * T.transpose();
    g.cov(0, 1) = g.cov(1, 0) = 0.5 * (g.cov(0, 1) + g.cov(1, 0));
    g.cov(0, 0) += params.lowpass;
    g.cov(1, 1) += params.lowpass;

    const double det = g.cov.determinant();
    if (!(det > 0.0)) {
        return std::nullopt;
    }
    g.conic = {g.cov(1, 1) / det, -g.cov(0, 1) / det, g.cov(0, 0) / det};
    const double mid = 0.5 * (g.cov(0, 0) + g.cov(1, 1));
    const double lambda_max = mid + std::sqrt(std::max(0.0, mid * mid - det));
    g.radius = 3.0 * std::sqrt(lambda_max);
    if (g.mean.x() + g.radius < 0.0 || g.mean.x() - g.radius > cam.width || g.mean.y() + g.radius < 0.0 ||
        g.mean.y() - g.radius > cam.height) {
        return std::nullopt;
    }
    g.opacity = cloud.opacity(k);
    g.rgb = evaluate_sh(cloud, k, (world - cam.center()).normalized());
    return g;
}

} // namespace splatfield

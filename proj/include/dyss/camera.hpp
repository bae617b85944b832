#pragma once

#include <array>
#include <cmath>
#include <stdexcept>

namespace dyss {

// Row-major 4x4 rigid transform.
using Mat4 = std::array<double, 16>;

inline Mat4 mat4_identity() {
    return {1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1};
}

inline Mat4 mat4_mul(const Mat4& a, const Mat4& b) {
    Mat4 c{};
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j) {
            double s = 0.0;
            for (int k = 0; k < 4; ++k) s += a[static_cast<std::size_t>(i * 4 + k)] *
                                              b[static_cast<std::size_t>(k * 4 + j)];
            c[static_cast<std::size_t>(i * 4 + j)] = s;
        }
    return c;
}

// Inverse of a rigid transform: [R t]^-1 = [R^T, -R^T t].
inline Mat4 mat4_inv_rigid(const Mat4& m) {
    Mat4 inv = mat4_identity();
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j)
            inv[static_cast<std::size_t>(i * 4 + j)] = m[static_cast<std::size_t>(j * 4 + i)];
    for (int i = 0; i < 3; ++i) {
        double s = 0.0;
        for (int j = 0; j < 3; ++j)
            s += inv[static_cast<std::size_t>(i * 4 + j)] * m[static_cast<std::size_t>(j * 4 + 3)];
        inv[static_cast<std::size_t>(i * 4 + 3)] = -s;
    }
    return inv;
}

inline std::array<double, 3> mat4_apply(const Mat4& m, const std::array<double, 3>& p) {
    std::array<double, 3> q{};
    for (int i = 0; i < 3; ++i)
        q[static_cast<std::size_t>(i)] = m[static_cast<std::size_t>(i * 4 + 0)] * p[0] +
                                         m[static_cast<std::size_t>(i * 4 + 1)] * p[1] +
                                         m[static_cast<std::size_t>(i * 4 + 2)] * p[2] +
                                         m[static_cast<std::size_t>(i * 4 + 3)];
    return q;
}

// Rotation by yaw about +z, then translation. Camera frames follow the usual
// optical convention (+z forward, +x right, +y down), built by the rig setup.
inline Mat4 mat4_from_yaw_trans(double yaw, double tx, double ty, double tz) {
    double c = std::cos(yaw), s = std::sin(yaw);
    return {c, -s, 0, tx, s, c, 0, ty, 0, 0, 1, tz, 0, 0, 0, 1};
}

inline double mat4_rot_orthonormality_err(const Mat4& m) {
    double worst = 0.0;
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
            double dot = 0.0;
            for (int k = 0; k < 3; ++k)
                dot += m[static_cast<std::size_t>(i * 4 + k)] *
                       m[static_cast<std::size_t>(j * 4 + k)];
            worst = std::max(worst, std::fabs(dot - (i == j ? 1.0 : 0.0)));
        }
    return worst;
}

constexpr double kMinProjectionDepth = 0.1;  // meters

struct CameraModel {
    double fx = 0.0, fy = 0.0;  // focal lengths, px
    double cx = 0.0, cy = 0.0;  // principal point, px
    int width = 0, height = 0;
    Mat4 cam_from_ego = mat4_identity();

    void validate() const {
        if (fx <= 0.0 || fy <= 0.0)
            throw std::invalid_argument("CameraModel: non-positive focal length");
        if (mat4_rot_orthonormality_err(cam_from_ego) > 1e-9)
            throw std::invalid_argument("CameraModel: extrinsics rotation not orthonormal");
    }
};

struct PixelProjection {
    double u = 0.0, v = 0.0;
    double depth = 0.0;
    bool valid = false;
};

// Plain (non-tape) pinhole projection of a world point; ego_pose is the rigid
// world<-ego transform at the frame in question.
inline PixelProjection project_point(const CameraModel& cam, const Mat4& ego_pose,
                                     const std::array<double, 3>& p_world) {
    Mat4 cam_from_world = mat4_mul(cam.cam_from_ego, mat4_inv_rigid(ego_pose));
    auto pc = mat4_apply(cam_from_world, p_world);
    PixelProjection out;
    out.depth = pc[2];
    if (pc[2] <= kMinProjectionDepth) return out;
    out.u = cam.fx * pc[0] / pc[2] + cam.cx;
    out.v = cam.fy * pc[1] / pc[2] + cam.cy;
    out.valid = out.u >= 0.0 && out.u < static_cast<double>(cam.width) && out.v >= 0.0 &&
                out.v < static_cast<double>(cam.height);
    return out;
}

}  // namespace dyss

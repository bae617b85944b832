#pragma once

#include <cmath>
#include <vector>

#include "dyss/autodiff.hpp"
#include "dyss/camera.hpp"

namespace dyss {

// Box rows are [x y z w l h theta vx vy]; offsets are [Nq x 3P] packed
// (dx0 dy0 dz0 dx1 ...). Output rows are (query, point) flattened, one row per
// sampling point: offsets scaled by the box dimensions, rotated by yaw,
// anchored at the pillar center (x, y, z + h/2), then warped back in time by
// the query velocity, p - v*dt.
inline Val sample_points(Val boxes, Val offsets, std::size_t points, double dt) {
    detail::same_graph(boxes, offsets, "sample_points");
    Graph& g = *boxes.g;
    const Tensor& bv = g.value(boxes.id);
    const Tensor& ov = g.value(offsets.id);
    detail::require_matrix(bv, "sample_points");
    detail::require_matrix(ov, "sample_points");
    if (bv.dim(1) != 9)
        throw std::invalid_argument("sample_points: boxes must be [Nq x 9], got " +
                                    shape_str(bv.shape));
    if (ov.dim(0) != bv.dim(0) || ov.dim(1) != 3 * points)
        throw std::invalid_argument("sample_points: offsets " + shape_str(ov.shape) +
                                    " do not match boxes " + shape_str(bv.shape) + " with P=" +
                                    std::to_string(points));
    const std::size_t nq = bv.dim(0);
    Tensor out(Shape{nq * points, 3});
    for (std::size_t q = 0; q < nq; ++q) {
        const double x = bv.at(q, 0), y = bv.at(q, 1), z = bv.at(q, 2);
        const double w = bv.at(q, 3), l = bv.at(q, 4), h = bv.at(q, 5);
        const double c = std::cos(bv.at(q, 6)), s = std::sin(bv.at(q, 6));
        const double vx = bv.at(q, 7), vy = bv.at(q, 8);
        for (std::size_t p = 0; p < points; ++p) {
            const double ox = ov.at(q, 3 * p + 0);
            const double oy = ov.at(q, 3 * p + 1);
            const double oz = ov.at(q, 3 * p + 2);
            const std::size_t r = q * points + p;
            out.at(r, 0) = x + c * ox * w - s * oy * l - vx * dt;
            out.at(r, 1) = y + s * ox * w + c * oy * l - vy * dt;
            out.at(r, 2) = z + h * 0.5 + oz * h;
        }
    }
    const int bid = boxes.id, oid = offsets.id;
    int id = g.add_node(std::move(out), [bid, oid, nq, points, dt](Graph& gr, int self) {
        const Tensor& go = gr.grad(self);
        const Tensor& bv2 = gr.value(bid);
        const Tensor& ov2 = gr.value(oid);
        Tensor& gb = gr.grad(bid);
        Tensor& gof = gr.grad(oid);
        for (std::size_t q = 0; q < nq; ++q) {
            const double w = bv2.at(q, 3), l = bv2.at(q, 4), h = bv2.at(q, 5);
            const double th = bv2.at(q, 6);
            const double c = std::cos(th), s = std::sin(th);
            for (std::size_t p = 0; p < points; ++p) {
                const double ox = ov2.at(q, 3 * p + 0);
                const double oy = ov2.at(q, 3 * p + 1);
                const double oz = ov2.at(q, 3 * p + 2);
                const std::size_t r = q * points + p;
                const double gx = go.at(r, 0), gy = go.at(r, 1), gz = go.at(r, 2);
                gb.at(q, 0) += gx;
                gb.at(q, 1) += gy;
                gb.at(q, 2) += gz;
                gb.at(q, 3) += gx * c * ox + gy * s * ox;
                gb.at(q, 4) += -gx * s * oy + gy * c * oy;
                gb.at(q, 5) += gz * (0.5 + oz);
                gb.at(q, 6) += gx * (-s * ox * w - c * oy * l) + gy * (c * ox * w - s * oy * l);
                gb.at(q, 7) += -gx * dt;
                gb.at(q, 8) += -gy * dt;
                gof.at(q, 3 * p + 0) += gx * c * w + gy * s * w;
                gof.at(q, 3 * p + 1) += -gx * s * l + gy * c * l;
                gof.at(q, 3 * p + 2) += gz * h;
            }
        }
    });
    return Val{&g, id};
}

struct ProjectedPixels {
    Val pix;                  // [n x 2] in feature-map coordinates
    std::vector<bool> valid;  // depth > 0.1 m and inside image bounds
};

// Pinhole projection of world points through ego_pose (world<-ego) and the
// camera extrinsics, with pixel coordinates scaled into feature-map cells.
// Invalid rows project to (0,0) and receive no gradient.
inline ProjectedPixels project_rows(Val pts, const CameraModel& cam, const Mat4& ego_pose,
                                    double stride) {
    Graph& g = *pts.g;
    const Tensor& pv = g.value(pts.id);
    detail::require_matrix(pv, "project_rows");
    if (pv.dim(1) != 3)
        throw std::invalid_argument("project_rows: points must be [n x 3], got " +
                                    shape_str(pv.shape));
    const std::size_t n = pv.dim(0);
    const Mat4 m = mat4_mul(cam.cam_from_ego, mat4_inv_rigid(ego_pose));
    Tensor out(Shape{n, 2});
    std::vector<bool> valid(n, false);
    std::vector<double> cam_xyz(3 * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        std::array<double, 3> p{pv.at(i, 0), pv.at(i, 1), pv.at(i, 2)};
        auto pc = mat4_apply(m, p);
        cam_xyz[3 * i + 0] = pc[0];
        cam_xyz[3 * i + 1] = pc[1];
        cam_xyz[3 * i + 2] = pc[2];
        if (pc[2] <= kMinProjectionDepth) continue;
        double u = cam.fx * pc[0] / pc[2] + cam.cx;
        double v = cam.fy * pc[1] / pc[2] + cam.cy;
        bool in = u >= 0.0 && u < static_cast<double>(cam.width) && v >= 0.0 &&
                  v < static_cast<double>(cam.height);
        if (!in) continue;
        valid[i] = true;
        out.at(i, 0) = u / stride;
        out.at(i, 1) = v / stride;
    }
    const int pid = pts.id;
    const double fx = cam.fx, fy = cam.fy;
    int id = g.add_node(
        std::move(out), [pid, n, m, fx, fy, stride, valid, cam_xyz](Graph& gr, int self) {
            const Tensor& go = gr.grad(self);
            Tensor& gp = gr.grad(pid);
            for (std::size_t i = 0; i < n; ++i) {
                if (!valid[i]) continue;
                const double xc = cam_xyz[3 * i + 0];
                const double yc = cam_xyz[3 * i + 1];
                const double zc = cam_xyz[3 * i + 2];
                const double gu = go.at(i, 0) / stride;
                const double gv = go.at(i, 1) / stride;
                for (std::size_t k = 0; k < 3; ++k) {
                    const double m0 = m[0 * 4 + k], m1 = m[1 * 4 + k], m2 = m[2 * 4 + k];
                    const double du = fx * (m0 - (xc / zc) * m2) / zc;
                    const double dv = fy * (m1 - (yc / zc) * m2) / zc;
                    gp.at(i, k) += gu * du + gv * dv;
                }
            }
        });
    return ProjectedPixels{Val{&g, id}, std::move(valid)};
}

// Bilinear interpolation of a [C x H x W] map at feature-map coordinates.
// Out-of-map corners contribute zero; invalid rows yield zero features.
// Differentiable in both the map and the pixel coordinates.
inline Val bilinear_rows(Val map, Val pix, const std::vector<bool>& valid) {
    detail::same_graph(map, pix, "bilinear_rows");
    Graph& g = *map.g;
    const Tensor& mv = g.value(map.id);
    const Tensor& xv = g.value(pix.id);
    if (mv.rank() != 3)
        throw std::invalid_argument("bilinear_rows: map must be [C x H x W], got " +
                                    shape_str(mv.shape));
    detail::require_matrix(xv, "bilinear_rows");
    const std::size_t n = xv.dim(0);
    if (valid.size() != n) throw std::invalid_argument("bilinear_rows: valid mask size mismatch");
    const std::size_t ch = mv.dim(0);
    const long hh = static_cast<long>(mv.dim(1)), ww = static_cast<long>(mv.dim(2));
    Tensor out(Shape{n, ch});
    auto corner = [&](std::size_t c, long yy, long xx) -> double {
        if (yy < 0 || yy >= hh || xx < 0 || xx >= ww) return 0.0;
        return mv.at(c, static_cast<std::size_t>(yy), static_cast<std::size_t>(xx));
    };
    for (std::size_t i = 0; i < n; ++i) {
        if (!valid[i]) continue;
        const double x = xv.at(i, 0), y = xv.at(i, 1);
        const long x0 = static_cast<long>(std::floor(x)), y0 = static_cast<long>(std::floor(y));
        const double ax = x - static_cast<double>(x0), ay = y - static_cast<double>(y0);
        for (std::size_t c = 0; c < ch; ++c) {
            const double v00 = corner(c, y0, x0), v01 = corner(c, y0, x0 + 1);
            const double v10 = corner(c, y0 + 1, x0), v11 = corner(c, y0 + 1, x0 + 1);
            out.at(i, c) = (1.0 - ay) * ((1.0 - ax) * v00 + ax * v01) +
                           ay * ((1.0 - ax) * v10 + ax * v11);
        }
    }
    const int mid = map.id, xid = pix.id;
    int id = g.add_node(std::move(out), [mid, xid, n, ch, hh, ww, valid](Graph& gr, int self) {
        const Tensor& go = gr.grad(self);
        const Tensor& mv2 = gr.value(mid);
        const Tensor& xv2 = gr.value(xid);
        Tensor& gm = gr.grad(mid);
        Tensor& gx = gr.grad(xid);
        auto corner = [&](std::size_t c, long yy, long xx) -> double {
            if (yy < 0 || yy >= hh || xx < 0 || xx >= ww) return 0.0;
            return mv2.at(c, static_cast<std::size_t>(yy), static_cast<std::size_t>(xx));
        };
        auto scatter = [&](std::size_t c, long yy, long xx, double v) {
            if (yy < 0 || yy >= hh || xx < 0 || xx >= ww) return;
            gm.at(c, static_cast<std::size_t>(yy), static_cast<std::size_t>(xx)) += v;
        };
        for (std::size_t i = 0; i < n; ++i) {
            if (!valid[i]) continue;
            const double x = xv2.at(i, 0), y = xv2.at(i, 1);
            const long x0 = static_cast<long>(std::floor(x));
            const long y0 = static_cast<long>(std::floor(y));
            const double ax = x - static_cast<double>(x0), ay = y - static_cast<double>(y0);
            double dx = 0.0, dy = 0.0;
            for (std::size_t c = 0; c < ch; ++c) {
                const double gi = go.at(i, c);
                scatter(c, y0, x0, gi * (1.0 - ay) * (1.0 - ax));
                scatter(c, y0, x0 + 1, gi * (1.0 - ay) * ax);
                scatter(c, y0 + 1, x0, gi * ay * (1.0 - ax));
                scatter(c, y0 + 1, x0 + 1, gi * ay * ax);
                const double v00 = corner(c, y0, x0), v01 = corner(c, y0, x0 + 1);
                const double v10 = corner(c, y0 + 1, x0), v11 = corner(c, y0 + 1, x0 + 1);
                dx += gi * ((1.0 - ay) * (v01 - v00) + ay * (v11 - v10));
                dy += gi * ((1.0 - ax) * (v10 - v00) + ax * (v11 - v01));
            }
            gx.at(i, 0) += dx;
            gx.at(i, 1) += dy;
        }
    });
    return Val{&g, id};
}

struct SamplingConfig {
    std::size_t points = 4;
    double frame_dt = 0.5;  // seconds between frames
    double stride = 8.0;    // image px per feature-map cell
};

struct SampleAllResult {
    std::vector<Val> features;  // per frame: [tokens x C], tokens = Nq*P
    std::vector<std::vector<std::vector<bool>>> valid;  // [t][cam][token]
};

// Full sampling stage for one decoder layer: one point set per frame
// (velocity-warped), projected into every camera, bilinearly sampled, and
// averaged over the cameras that see each point. Frame T-1 is "now".
inline SampleAllResult sample_all(Graph& g, Val boxes, Val offsets,
                                  const std::vector<CameraModel>& rig,
                                  const std::vector<std::vector<Val>>& maps,
                                  const std::vector<Mat4>& ego_poses, const SamplingConfig& cfg) {
    const std::size_t frames = maps.size();
    if (ego_poses.size() != frames)
        throw std::invalid_argument("sample_all: ego pose count does not match frames");
    const std::size_t tokens = boxes.rows() * cfg.points;
    SampleAllResult res;
    res.features.reserve(frames);
    res.valid.resize(frames);
    for (std::size_t t = 0; t < frames; ++t) {
        if (maps[t].size() != rig.size())
            throw std::invalid_argument("sample_all: map/camera count mismatch at frame " +
                                        std::to_string(t));
        const double dt = static_cast<double>(frames - 1 - t) * cfg.frame_dt;
        Val pts = sample_points(boxes, offsets, cfg.points, dt);
        Val acc;
        std::vector<double> counts(tokens, 0.0);
        for (std::size_t c = 0; c < rig.size(); ++c) {
            ProjectedPixels pp = project_rows(pts, rig[c], ego_poses[t], cfg.stride);
            Val sampled = bilinear_rows(maps[t][c], pp.pix, pp.valid);
            for (std::size_t i = 0; i < tokens; ++i)
                if (pp.valid[i]) counts[i] += 1.0;
            acc = acc.valid() ? add(acc, sampled) : sampled;
            res.valid[t].push_back(std::move(pp.valid));
        }
        Tensor inv_count(Shape{tokens});
        for (std::size_t i = 0; i < tokens; ++i)
            inv_count.data[i] = counts[i] > 0.0 ? 1.0 / counts[i] : 0.0;
        res.features.push_back(mul_colvec(acc, g.leaf(std::move(inv_count))));
    }
    return res;
}

}  // namespace dyss

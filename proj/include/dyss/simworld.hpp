#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "dyss/camera.hpp"
#include "dyss/io.hpp"
#include "dyss/matching.hpp"
#include "dyss/queries.hpp"
#include "dyss/rng.hpp"

namespace dyss {

struct WorldConfig {
    std::size_t cameras = 6;
    int image_w = 160, image_h = 96;
    double hfov_deg = 70.0;
    std::size_t channels = 32;
    double stride = 8.0;
    std::size_t frames = 8;
    double frame_dt = 0.5;
    double bounds = 20.0;         // object centers in [-bounds, bounds]^2
    std::size_t classes = 4;
    std::size_t n_objects_min = 3;
    std::size_t n_objects_max = 8;
    double max_speed = 5.0;       // per-axis velocity range, m/s
    double noise_sigma = 0.05;
    double blob_sigma_px = 1.5;   // in feature-map cells
    double blob_amplitude = 2.0;
    bool moving_ego = false;

    std::size_t map_w() const { return static_cast<std::size_t>(image_w / stride); }
    std::size_t map_h() const { return static_cast<std::size_t>(image_h / stride); }
};

struct SceneObject {
    int class_id = 0;
    QueryBox box;  // pose at the last frame; velocity fields drive the motion
};

struct Scene {
    std::uint64_t seed = 0;
    std::size_t frames = 8;
    double frame_dt = 0.5;
    std::vector<SceneObject> objects;
    std::vector<Mat4> ego_poses;       // world<-ego per frame
    std::vector<CameraModel> rig;

    // Constant velocity: the box at frame t, anchored at the last frame.
    QueryBox box_at(std::size_t obj, std::size_t t) const {
        QueryBox b = objects[obj].box;
        const double dt = static_cast<double>(frames - 1 - t) * frame_dt;
        b.x -= b.vx * dt;
        b.y -= b.vy * dt;
        return b;
    }
};

// 60-degree-spaced ring of forward-tilted pinhole cameras at the ego origin.
inline std::vector<CameraModel> make_ring_rig(const WorldConfig& cfg) {
    std::vector<CameraModel> rig;
    const double pi = 3.14159265358979323846;
    const double fx = (cfg.image_w / 2.0) / std::tan(cfg.hfov_deg * pi / 180.0 / 2.0);
    // ego->optical axis shuffle: x_cam = -y_ego', y_cam = -z_ego', z_cam = x_ego'
    const Mat4 axes{0, -1, 0, 0, 0, 0, -1, 0, 1, 0, 0, 0, 0, 0, 0, 1};
    for (std::size_t c = 0; c < cfg.cameras; ++c) {
        const double yaw = 2.0 * pi * static_cast<double>(c) / static_cast<double>(cfg.cameras);
        CameraModel cam;
        cam.fx = cam.fy = fx;
        cam.cx = cfg.image_w / 2.0;
        cam.cy = cfg.image_h / 2.0;
        cam.width = cfg.image_w;
        cam.height = cfg.image_h;
        cam.cam_from_ego = mat4_mul(axes, mat4_from_yaw_trans(-yaw, 0.0, 0.0, 0.0));
        cam.validate();
        rig.push_back(cam);
    }
    return rig;
}

// Class geometry priors (mean w, l, h), roughly car / truck / bus / pedestrian.
inline std::array<double, 3> class_size_mean(int class_id) {
    switch (class_id % 4) {
        case 0: return {1.9, 4.5, 1.6};
        case 1: return {2.5, 7.0, 2.9};
        case 2: return {2.9, 10.0, 3.3};
        default: return {0.7, 0.7, 1.75};
    }
}

// Fixed random unit vector in channel space; the learnable class evidence.
inline Tensor class_signature(int class_id, std::size_t channels) {
    Rng rng = Rng::derive(0xC1A5500Dull, {static_cast<std::uint64_t>(class_id)});
    Tensor sig(Shape{channels});
    double norm = 0.0;
    for (auto& v : sig.data) {
        v = rng.gaussian();
        norm += v * v;
    }
    norm = std::sqrt(norm);
    for (auto& v : sig.data) v /= norm;
    return sig;
}

inline Scene gen_scene(std::uint64_t seed, std::size_t n_objects, const WorldConfig& cfg) {
    Scene sc;
    sc.seed = seed;
    sc.frames = cfg.frames;
    sc.frame_dt = cfg.frame_dt;
    sc.rig = make_ring_rig(cfg);
    Rng rng = Rng::derive(seed, {0x7363656eull});
    const double pi = 3.14159265358979323846;
    for (std::size_t i = 0; i < n_objects; ++i) {
        SceneObject obj;
        obj.class_id = static_cast<int>(rng.index(cfg.classes));
        auto mean = class_size_mean(obj.class_id);
        obj.box.x = rng.uniform(-cfg.bounds, cfg.bounds);
        obj.box.y = rng.uniform(-cfg.bounds, cfg.bounds);
        obj.box.z = 0.0;
        obj.box.w = std::max(0.3, rng.gaussian(mean[0], 0.1 * mean[0]));
        obj.box.l = std::max(0.3, rng.gaussian(mean[1], 0.1 * mean[1]));
        obj.box.h = std::max(0.3, rng.gaussian(mean[2], 0.1 * mean[2]));
        obj.box.theta = wrap_angle(rng.uniform(-pi, pi));
        obj.box.vx = rng.uniform(-cfg.max_speed, cfg.max_speed);
        obj.box.vy = rng.uniform(-cfg.max_speed, cfg.max_speed);
        sc.objects.push_back(obj);
    }
    for (std::size_t t = 0; t < cfg.frames; ++t) {
        if (cfg.moving_ego) {
            const double dt = static_cast<double>(cfg.frames - 1 - t) * cfg.frame_dt;
            sc.ego_poses.push_back(mat4_from_yaw_trans(-0.02 * dt, -2.0 * dt, 0.0, 0.0));
        } else {
            sc.ego_poses.push_back(mat4_identity());
        }
    }
    return sc;
}

// One feature map: Gaussian pixel noise plus, per visible object, an
// isotropic blob of its class signature at the projected center.
inline Tensor render_features(const Scene& sc, std::size_t t, std::size_t cam,
                              const WorldConfig& cfg) {
    const std::size_t ch = cfg.channels, mh = cfg.map_h(), mw = cfg.map_w();
    Tensor map(Shape{ch, mh, mw});
    if (cfg.noise_sigma > 0.0) {
        Rng rng = Rng::derive(sc.seed, {0x6e6f697365ull, t, cam});
        for (auto& v : map.data) v = rng.gaussian(0.0, cfg.noise_sigma);
    }
    for (std::size_t o = 0; o < sc.objects.size(); ++o) {
        QueryBox b = sc.box_at(o, t);
        auto pp = project_point(sc.rig[cam], sc.ego_poses[t], {b.x, b.y, b.z + b.h * 0.5});
        if (!pp.valid) continue;
        const double u = pp.u / cfg.stride, v = pp.v / cfg.stride;
        const double s = cfg.blob_sigma_px;
        Tensor sig = class_signature(sc.objects[o].class_id, ch);
        const long x0 = static_cast<long>(std::floor(u - 3.0 * s));
        const long x1 = static_cast<long>(std::ceil(u + 3.0 * s));
        const long y0 = static_cast<long>(std::floor(v - 3.0 * s));
        const long y1 = static_cast<long>(std::ceil(v + 3.0 * s));
        for (long y = std::max(0l, y0); y <= std::min(static_cast<long>(mh) - 1, y1); ++y)
            for (long x = std::max(0l, x0); x <= std::min(static_cast<long>(mw) - 1, x1); ++x) {
                const double du = static_cast<double>(x) - u;
                const double dv = static_cast<double>(y) - v;
                const double w =
                    cfg.blob_amplitude * std::exp(-(du * du + dv * dv) / (2.0 * s * s));
                for (std::size_t c = 0; c < ch; ++c)
                    map.at(c, static_cast<std::size_t>(y), static_cast<std::size_t>(x)) +=
                        w * sig.data[c];
            }
    }
    return map;
}

inline std::vector<std::vector<Tensor>> render_all(const Scene& sc, const WorldConfig& cfg) {
    std::vector<std::vector<Tensor>> maps(sc.frames);
    for (std::size_t t = 0; t < sc.frames; ++t)
        for (std::size_t c = 0; c < sc.rig.size(); ++c)
            maps[t].push_back(render_features(sc, t, c, cfg));
    return maps;
}

// Detection targets: last-frame boxes and class ids.
inline GroundTruth scene_ground_truth(const Scene& sc) {
    GroundTruth gt;
    gt.boxes = Tensor(Shape{sc.objects.size(), kBoxCols});
    for (std::size_t o = 0; o < sc.objects.size(); ++o) {
        const QueryBox& b = sc.objects[o].box;
        gt.classes.push_back(sc.objects[o].class_id);
        gt.boxes.at(o, kBoxX) = b.x;
        gt.boxes.at(o, kBoxY) = b.y;
        gt.boxes.at(o, kBoxZ) = b.z;
        gt.boxes.at(o, kBoxW) = b.w;
        gt.boxes.at(o, kBoxL) = b.l;
        gt.boxes.at(o, kBoxH) = b.h;
        gt.boxes.at(o, kBoxTheta) = b.theta;
        gt.boxes.at(o, kBoxVx) = b.vx;
        gt.boxes.at(o, kBoxVy) = b.vy;
    }
    return gt;
}

// ---- dataset (de)serialization: manifest + one blob per scene ----

namespace detail {

inline json box_to_json(const QueryBox& b) {
    return json::array({b.x, b.y, b.z, b.w, b.l, b.h, b.theta, b.vx, b.vy});
}

inline QueryBox box_from_json(const json& a) {
    QueryBox b;
    b.x = a.at(0);
    b.y = a.at(1);
    b.z = a.at(2);
    b.w = a.at(3);
    b.l = a.at(4);
    b.h = a.at(5);
    b.theta = a.at(6);
    b.vx = a.at(7);
    b.vy = a.at(8);
    return b;
}

inline json world_to_json(const WorldConfig& w) {
    return json{{"cameras", w.cameras},       {"image_w", w.image_w},
                {"image_h", w.image_h},       {"hfov_deg", w.hfov_deg},
                {"channels", w.channels},     {"stride", w.stride},
                {"frames", w.frames},         {"frame_dt", w.frame_dt},
                {"bounds", w.bounds},         {"classes", w.classes},
                {"n_objects_min", w.n_objects_min}, {"n_objects_max", w.n_objects_max},
                {"max_speed", w.max_speed},   {"noise_sigma", w.noise_sigma},
                {"blob_sigma_px", w.blob_sigma_px}, {"blob_amplitude", w.blob_amplitude},
                {"moving_ego", w.moving_ego}};
}

inline WorldConfig world_from_json(const json& j) {
    WorldConfig w;
    static const std::vector<std::string> known = {
        "cameras",  "image_w", "image_h",       "hfov_deg",      "channels",
        "stride",   "frames",  "frame_dt",      "bounds",        "classes",
        "n_objects_min", "n_objects_max", "max_speed", "noise_sigma", "blob_sigma_px",
        "blob_amplitude", "moving_ego"};
    for (auto it = j.begin(); it != j.end(); ++it)
        if (std::find(known.begin(), known.end(), it.key()) == known.end())
            throw std::runtime_error("world config: unknown key '" + it.key() + "'");
    w.cameras = require_field(j, "cameras", "world").get<std::size_t>();
    w.image_w = require_field(j, "image_w", "world").get<int>();
    w.image_h = require_field(j, "image_h", "world").get<int>();
    w.hfov_deg = require_field(j, "hfov_deg", "world").get<double>();
    w.channels = require_field(j, "channels", "world").get<std::size_t>();
    w.stride = require_field(j, "stride", "world").get<double>();
    w.frames = require_field(j, "frames", "world").get<std::size_t>();
    w.frame_dt = require_field(j, "frame_dt", "world").get<double>();
    w.bounds = require_field(j, "bounds", "world").get<double>();
    w.classes = require_field(j, "classes", "world").get<std::size_t>();
    w.n_objects_min = require_field(j, "n_objects_min", "world").get<std::size_t>();
    w.n_objects_max = require_field(j, "n_objects_max", "world").get<std::size_t>();
    w.max_speed = require_field(j, "max_speed", "world").get<double>();
    w.noise_sigma = require_field(j, "noise_sigma", "world").get<double>();
    w.blob_sigma_px = require_field(j, "blob_sigma_px", "world").get<double>();
    w.blob_amplitude = require_field(j, "blob_amplitude", "world").get<double>();
    w.moving_ego = require_field(j, "moving_ego", "world").get<bool>();
    return w;
}

}  // namespace detail

struct Dataset {
    WorldConfig world;
    std::vector<Scene> scenes;
    std::vector<std::vector<std::vector<Tensor>>> maps;  // [scene][frame][camera]
};

inline std::string scene_file_name(std::size_t index) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "scene_%05zu.bin", index);
    return buf;
}

// Deterministic generation: scene i derives its RNG stream from
// (seed, i); maps are rendered from the scene alone.
inline Dataset gen_dataset(std::uint64_t seed, std::size_t n_scenes, const WorldConfig& cfg) {
    Dataset ds;
    ds.world = cfg;
    for (std::size_t i = 0; i < n_scenes; ++i) {
        Rng rng = Rng::derive(seed, {0x64617461ull, i});
        std::size_t spread = cfg.n_objects_max >= cfg.n_objects_min
                                 ? cfg.n_objects_max - cfg.n_objects_min + 1
                                 : 1;
        std::size_t n_obj = cfg.n_objects_min + rng.index(spread);
        Scene sc = gen_scene(mix64(seed ^ mix64(i + 1)), n_obj, cfg);
        ds.maps.push_back(render_all(sc, cfg));
        ds.scenes.push_back(std::move(sc));
    }
    return ds;
}

inline void save_dataset(const std::string& dir, const Dataset& ds, bool force = false) {
    namespace fs = std::filesystem;
    fs::path root(dir);
    if (fs::exists(root) && !fs::is_empty(root) && !force)
        throw std::runtime_error("save_dataset: " + dir +
                                 " exists and is not empty (use --force to overwrite)");
    fs::create_directories(root);
    json manifest;
    manifest["format"] = "dyss-dataset-v1";
    manifest["world"] = detail::world_to_json(ds.world);
    manifest["scenes"] = json::array();
    for (std::size_t i = 0; i < ds.scenes.size(); ++i) {
        const Scene& sc = ds.scenes[i];
        json sj;
        sj["file"] = scene_file_name(i);
        sj["seed"] = sc.seed;
        sj["frames"] = sc.frames;
        sj["frame_dt"] = sc.frame_dt;
        sj["objects"] = json::array();
        for (const auto& o : sc.objects)
            sj["objects"].push_back(json{{"class", o.class_id},
                                         {"box", detail::box_to_json(o.box)}});
        sj["ego_poses"] = json::array();
        for (const auto& p : sc.ego_poses) sj["ego_poses"].push_back(p);
        BlobWriter blob;
        json tensors = json::array();
        for (std::size_t t = 0; t < ds.maps[i].size(); ++t)
            for (std::size_t c = 0; c < ds.maps[i][t].size(); ++c)
                tensors.push_back(blob.add_f32(
                    "t" + std::to_string(t) + "_cam" + std::to_string(c), ds.maps[i][t][c]));
        sj["tensors"] = tensors;
        sj["blob_bytes"] = blob.size();
        blob.write((root / scene_file_name(i)).string());
        manifest["scenes"].push_back(std::move(sj));
    }
    write_json_file((root / "manifest.json").string(), manifest);
}

inline Dataset load_dataset(const std::string& dir) {
    namespace fs = std::filesystem;
    fs::path root(dir);
    json manifest = read_json_file((root / "manifest.json").string());
    if (require_field(manifest, "format", "dataset manifest") != "dyss-dataset-v1")
        throw std::runtime_error("dataset manifest: unsupported format");
    Dataset ds;
    ds.world = detail::world_from_json(require_field(manifest, "world", "dataset manifest"));
    for (const json& sj : require_field(manifest, "scenes", "dataset manifest")) {
        Scene sc;
        sc.seed = require_field(sj, "seed", "scene").get<std::uint64_t>();
        sc.frames = require_field(sj, "frames", "scene").get<std::size_t>();
        sc.frame_dt = require_field(sj, "frame_dt", "scene").get<double>();
        sc.rig = make_ring_rig(ds.world);
        for (const json& oj : require_field(sj, "objects", "scene")) {
            SceneObject o;
            o.class_id = require_field(oj, "class", "object").get<int>();
            o.box = detail::box_from_json(require_field(oj, "box", "object"));
            sc.objects.push_back(o);
        }
        for (const json& pj : require_field(sj, "ego_poses", "scene"))
            sc.ego_poses.push_back(pj.get<Mat4>());
        const std::string file = require_field(sj, "file", "scene").get<std::string>();
        BlobReader blob((root / file).string());
        const std::size_t expect = require_field(sj, "blob_bytes", "scene").get<std::size_t>();
        if (blob.size() != expect)
            throw std::runtime_error("scene blob " + file + " size mismatch: expected " +
                                     std::to_string(expect) + " bytes, found " +
                                     std::to_string(blob.size()));
        std::vector<std::vector<Tensor>> maps(sc.frames);
        for (const json& rec : require_field(sj, "tensors", "scene")) {
            const std::string name = rec.at("name").get<std::string>();
            auto us = name.find("_cam");
            std::size_t t = std::stoul(name.substr(1, us - 1));
            maps.at(t).push_back(blob.get(rec));
        }
        ds.maps.push_back(std::move(maps));
        ds.scenes.push_back(std::move(sc));
    }
    return ds;
}

}  // namespace dyss

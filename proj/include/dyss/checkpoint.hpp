#pragma once

#include <map>
#include <string>

#include "dyss/config.hpp"
#include "dyss/decoder.hpp"
#include "dyss/io.hpp"

namespace dyss {

// Adam moments travel with the checkpoint so a resumed run continues the
// exact optimizer trajectory.
struct AdamState {
    std::vector<Tensor> m, v;
    std::size_t step = 0;

    void init(const ParamStore& ps) {
        m.clear();
        v.clear();
        for (std::size_t i = 0; i < ps.size(); ++i) {
            m.emplace_back(ps[static_cast<int>(i)].value.shape);
            v.emplace_back(ps[static_cast<int>(i)].value.shape);
        }
        step = 0;
    }
};

// Checkpoint = manifest.json + params.bin (flat little-endian float64).
// Bit-exact round trip; loading validates every tensor's name and shape
// against the live model.
inline void save_checkpoint(const std::string& manifest_path, const std::string& blob_path,
                            const DetectionModel& model, const AdamState* adam,
                            const RunConfig* cfg) {
    BlobWriter blob;
    json tensors = json::array();
    for (std::size_t i = 0; i < model.store.size(); ++i) {
        const Param& p = model.store[static_cast<int>(i)];
        tensors.push_back(blob.add_f64(p.name, p.value));
    }
    if (adam != nullptr) {
        for (std::size_t i = 0; i < model.store.size(); ++i) {
            const Param& p = model.store[static_cast<int>(i)];
            tensors.push_back(blob.add_f64("adam.m." + p.name, adam->m[i]));
            tensors.push_back(blob.add_f64("adam.v." + p.name, adam->v[i]));
        }
    }
    json manifest;
    manifest["format"] = "dyss-checkpoint-v1";
    manifest["blob"] = std::filesystem::path(blob_path).filename().string();
    manifest["tensors"] = tensors;
    manifest["channels"] = model.channels;
    if (adam != nullptr) manifest["adam_step"] = adam->step;
    if (cfg != nullptr) manifest["config"] = run_config_to_json(*cfg);
    blob.write(blob_path);
    write_json_file(manifest_path, manifest);
}

inline void save_checkpoint(const std::string& dir, const DetectionModel& model,
                            const AdamState* adam = nullptr, const RunConfig* cfg = nullptr) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    save_checkpoint((fs::path(dir) / "manifest.json").string(),
                    (fs::path(dir) / "params.bin").string(), model, adam, cfg);
}

struct CheckpointContents {
    bool has_adam = false;
    AdamState adam;
    bool has_config = false;
    RunConfig config;
};

inline CheckpointContents load_checkpoint(const std::string& dir, DetectionModel& model) {
    namespace fs = std::filesystem;
    json manifest = read_json_file((fs::path(dir) / "manifest.json").string());
    if (require_field(manifest, "format", "checkpoint") != "dyss-checkpoint-v1")
        throw std::runtime_error("checkpoint: unsupported format");
    BlobReader blob((fs::path(dir) / require_field(manifest, "blob", "checkpoint")
                         .get<std::string>()).string());

    std::map<std::string, json> records;
    for (const json& rec : require_field(manifest, "tensors", "checkpoint"))
        records[rec.at("name").get<std::string>()] = rec;

    auto fetch = [&](const std::string& name, const Shape& expect) {
        auto it = records.find(name);
        if (it == records.end())
            throw std::runtime_error("checkpoint: tensor '" + name + "' missing from manifest");
        Tensor t = blob.get(it->second);
        if (t.shape != expect)
            throw std::runtime_error("checkpoint: tensor '" + name + "' has shape " +
                                     shape_str(t.shape) + " but the model expects " +
                                     shape_str(expect));
        return t;
    };

    for (std::size_t i = 0; i < model.store.size(); ++i) {
        Param& p = model.store[static_cast<int>(i)];
        p.value = fetch(p.name, p.value.shape);
    }

    CheckpointContents out;
    if (manifest.contains("adam_step")) {
        out.has_adam = true;
        out.adam.step = manifest["adam_step"].get<std::size_t>();
        for (std::size_t i = 0; i < model.store.size(); ++i) {
            const Param& p = model.store[static_cast<int>(i)];
            out.adam.m.push_back(fetch("adam.m." + p.name, p.value.shape));
            out.adam.v.push_back(fetch("adam.v." + p.name, p.value.shape));
        }
    }
    if (manifest.contains("config")) {
        out.has_config = true;
        out.config = run_config_from_json(manifest["config"]);
    }
    return out;
}

}  // namespace dyss

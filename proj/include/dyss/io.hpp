#pragma once

#include <bit>
#include <cstring>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dyss/tensor.hpp"

namespace dyss {

using json = nlohmann::json;

static_assert(std::endian::native == std::endian::little,
              "serialized blobs are little-endian; big-endian hosts are unsupported");

// Flat binary blob + manifest records. The same convention backs checkpoint
// files and dataset scene files: the manifest (JSON) names each tensor with
// shape, dtype (f64/f32) and byte offset into the blob.
class BlobWriter {
public:
    // Returns the manifest record for the appended tensor.
    json add_f64(const std::string& name, const Tensor& t) {
        json rec = record(name, t, "f64");
        const char* p = reinterpret_cast<const char*>(t.data.data());
        blob_.insert(blob_.end(), p, p + t.data.size() * sizeof(double));
        return rec;
    }

    json add_f32(const std::string& name, const Tensor& t) {
        json rec = record(name, t, "f32");
        std::vector<float> tmp(t.data.begin(), t.data.end());
        const char* p = reinterpret_cast<const char*>(tmp.data());
        blob_.insert(blob_.end(), p, p + tmp.size() * sizeof(float));
        return rec;
    }

    std::size_t size() const { return blob_.size(); }

    void write(const std::string& path) const {
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("BlobWriter: cannot open " + path);
        out.write(blob_.data(), static_cast<std::streamsize>(blob_.size()));
        if (!out) throw std::runtime_error("BlobWriter: short write to " + path);
    }

private:
    json record(const std::string& name, const Tensor& t, const char* dtype) {
        json rec;
        rec["name"] = name;
        rec["shape"] = t.shape;
        rec["dtype"] = dtype;
        rec["offset"] = blob_.size();
        return rec;
    }

    std::vector<char> blob_;
};

class BlobReader {
public:
    explicit BlobReader(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw std::runtime_error("BlobReader: cannot open " + path);
        blob_.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
    }

    std::size_t size() const { return blob_.size(); }

    Tensor get(const json& rec) const {
        Shape shape = rec.at("shape").get<Shape>();
        const std::string dtype = rec.at("dtype").get<std::string>();
        const std::size_t offset = rec.at("offset").get<std::size_t>();
        const std::size_t n = shape_numel(shape);
        const std::size_t bytes = n * (dtype == "f64" ? sizeof(double) : sizeof(float));
        if (offset + bytes > blob_.size())
            throw std::runtime_error("BlobReader: tensor '" +
                                     rec.at("name").get<std::string>() +
                                     "' extends past end of blob (size mismatch: need " +
                                     std::to_string(offset + bytes) + " bytes, have " +
                                     std::to_string(blob_.size()) + ")");
        Tensor t(std::move(shape));
        if (dtype == "f64") {
            std::memcpy(t.data.data(), blob_.data() + offset, bytes);
        } else if (dtype == "f32") {
            std::vector<float> tmp(n);
            std::memcpy(tmp.data(), blob_.data() + offset, bytes);
            for (std::size_t i = 0; i < n; ++i) t.data[i] = static_cast<double>(tmp[i]);
        } else {
            throw std::runtime_error("BlobReader: unknown dtype '" + dtype + "'");
        }
        return t;
    }

private:
    std::vector<char> blob_;
};

inline void write_json_file(const std::string& path, const json& j) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + path + " for writing");
    out << j.dump(1, ' ') << "\n";
}

inline json read_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path);
    json j;
    in >> j;
    return j;
}

// Strict field access that names the missing field.
inline const json& require_field(const json& j, const std::string& field,
                                 const std::string& context) {
    auto it = j.find(field);
    if (it == j.end())
        throw std::runtime_error(context + ": missing field '" + field + "'");
    return *it;
}

}  // namespace dyss

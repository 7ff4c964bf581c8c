#pragma once

// Checkpoint file format:
//   magic "EMNX", u32 version = 1, u32 tensor count;
//   per tensor: u16 name length, UTF-8 name, u8 dtype (0 = f32), u8 rank,
//               u32 dims[rank], raw little-endian payload;
//   trailing u32-length-prefixed UTF-8 JSON metadata blob.
// Optimizer tensors are prefixed "optim/", EMA tensors "ema/".

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "emonext/errors.hpp"
#include "emonext/model.hpp"
#include "emonext/tensor.hpp"

namespace emonext {

inline nlohmann::json config_to_json(const ModelConfig& c) {
    return nlohmann::json{{"name", c.name},
                          {"channels", c.channels},
                          {"blocks", c.blocks},
                          {"num_classes", c.num_classes},
                          {"in_channels", c.in_channels},
                          {"se_reduction", c.se_reduction},
                          {"lambda", c.lambda},
                          {"drop_path_max", c.drop_path_max},
                          {"label_smoothing", c.label_smoothing},
                          {"input_size", c.input_size}};
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    if (j.contains("name")) c.name = j.at("name").get<std::string>();
    c.channels = j.at("channels").get<std::array<int64_t, 4>>();
    c.blocks = j.at("blocks").get<std::array<int64_t, 4>>();
    if (j.contains("num_classes")) c.num_classes = j.at("num_classes").get<int64_t>();
    if (j.contains("in_channels")) c.in_channels = j.at("in_channels").get<int64_t>();
    if (j.contains("se_reduction")) c.se_reduction = j.at("se_reduction").get<int64_t>();
    if (j.contains("lambda")) c.lambda = j.at("lambda").get<double>();
    if (j.contains("drop_path_max")) c.drop_path_max = j.at("drop_path_max").get<double>();
    if (j.contains("label_smoothing")) c.label_smoothing = j.at("label_smoothing").get<double>();
    if (j.contains("input_size")) c.input_size = j.at("input_size").get<int64_t>();
    return c;
}

struct CheckpointTensor {
    std::string name;
    Shape shape;
    std::vector<float> data;
};

struct Checkpoint {
    std::vector<CheckpointTensor> tensors;
    nlohmann::json metadata;

    const CheckpointTensor* find(const std::string& name) const {
        for (const auto& t : tensors)
            if (t.name == name) return &t;
        return nullptr;
    }
};

namespace detail {

template <typename V>
void write_raw(std::ofstream& out, V v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <typename V>
V read_raw(std::ifstream& in, const std::string& path) {
    V v;
    in.read(reinterpret_cast<char*>(&v), sizeof(V));
    if (!in) throw FormatError(path + ": truncated checkpoint file");
    return v;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const std::vector<CheckpointTensor>& tensors,
                            const nlohmann::json& metadata) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot open checkpoint for writing: " + path);
    out.write("EMNX", 4);
    detail::write_raw<uint32_t>(out, 1);  // version
    detail::write_raw<uint32_t>(out, static_cast<uint32_t>(tensors.size()));
    for (const auto& t : tensors) {
        detail::write_raw<uint16_t>(out, static_cast<uint16_t>(t.name.size()));
        out.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
        detail::write_raw<uint8_t>(out, 0);  // dtype f32
        detail::write_raw<uint8_t>(out, static_cast<uint8_t>(t.shape.size()));
        for (int64_t d : t.shape) detail::write_raw<uint32_t>(out, static_cast<uint32_t>(d));
        out.write(reinterpret_cast<const char*>(t.data.data()),
                  static_cast<std::streamsize>(t.data.size() * sizeof(float)));
    }
    std::string meta = metadata.dump();
    detail::write_raw<uint32_t>(out, static_cast<uint32_t>(meta.size()));
    out.write(meta.data(), static_cast<std::streamsize>(meta.size()));
    if (!out) throw FormatError("write failure on checkpoint: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open checkpoint: " + path);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, "EMNX", 4) != 0)
        throw FormatError(path + ": bad magic, not an EMNX checkpoint");
    uint32_t version = detail::read_raw<uint32_t>(in, path);
    if (version != 1)
        throw FormatError(path + ": unsupported checkpoint version " + std::to_string(version));
    uint32_t count = detail::read_raw<uint32_t>(in, path);

    Checkpoint ck;
    ck.tensors.reserve(count);
    for (uint32_t i = 0; i < count; ++i) {
        CheckpointTensor t;
        uint16_t name_len = detail::read_raw<uint16_t>(in, path);
        t.name.resize(name_len);
        in.read(t.name.data(), name_len);
        if (!in) throw FormatError(path + ": truncated checkpoint file");
        uint8_t dtype = detail::read_raw<uint8_t>(in, path);
        if (dtype != 0) throw FormatError(path + ": unsupported dtype " + std::to_string(dtype));
        uint8_t rank = detail::read_raw<uint8_t>(in, path);
        int64_t numel = 1;
        for (uint8_t d = 0; d < rank; ++d) {
            uint32_t dim = detail::read_raw<uint32_t>(in, path);
            t.shape.push_back(static_cast<int64_t>(dim));
            numel *= dim;
        }
        t.data.resize(static_cast<size_t>(numel));
        in.read(reinterpret_cast<char*>(t.data.data()),
                static_cast<std::streamsize>(t.data.size() * sizeof(float)));
        if (!in) throw FormatError(path + ": truncated checkpoint file");
        ck.tensors.push_back(std::move(t));
    }
    uint32_t meta_len = detail::read_raw<uint32_t>(in, path);
    std::string meta(meta_len, '\0');
    in.read(meta.data(), meta_len);
    if (!in) throw FormatError(path + ": truncated checkpoint file");
    try {
        ck.metadata = nlohmann::json::parse(meta);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path + ": bad metadata JSON: " + e.what());
    }
    return ck;
}

// Copies checkpoint tensors (model-parameter entries only) into an existing
// model; names and shapes must match exactly.
template <typename T>
void load_params_into(Model<T>& model, const Checkpoint& ck) {
    for (auto& [name, tensor] : model.named_params()) {
        const CheckpointTensor* src = ck.find(name);
        if (!src) throw FormatError("checkpoint missing tensor '" + name + "'");
        if (src->shape != tensor.shape())
            throw FormatError("checkpoint tensor '" + name + "' has shape " +
                              shape_str(src->shape) + ", model expects " +
                              shape_str(tensor.shape()));
        auto& dst = const_cast<Tensor<T>&>(tensor).data();
        for (size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(src->data[i]);
    }
}

}  // namespace emonext

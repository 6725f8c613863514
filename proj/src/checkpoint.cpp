#include "mhc/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>

#include <json.hpp>

#include "mhc/errors.hpp"

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

namespace mhc {

using json = nlohmann::ordered_json;

namespace {

json config_to_json(const ModelConfig& c) {
    return json{{"layers", c.layers},   {"streams", c.streams}, {"model_dim", c.model_dim},
                {"heads", c.heads},     {"head_dim", c.head_dim}, {"vocab", c.vocab},
                {"context", c.context}, {"routing_mode", to_string(c.routing_mode)}, {"seed", c.seed}};
}

ModelConfig config_from_json(const json& j) {
    ModelConfig c;
    c.layers = j.at("layers").get<int>();
    c.streams = j.at("streams").get<int>();
    c.model_dim = j.at("model_dim").get<int>();
    c.heads = j.at("heads").get<int>();
    c.head_dim = j.at("head_dim").get<int>();
    c.vocab = j.at("vocab").get<int>();
    c.context = j.at("context").get<int>();
    c.routing_mode = routing_mode_from_string(j.at("routing_mode").get<std::string>());
    c.seed = j.at("seed").get<std::uint64_t>();
    return c;
}

struct NamedTensor {
    std::string name;
    Tensor<float>* tensor;
};

std::vector<NamedTensor> manifest_tensors(Model& model) {
    std::vector<NamedTensor> out;
    for (auto* p : model.parameters()) out.push_back({p->name, &p->value});
    out.push_back({"collapse_weights", &model.collapse_weights()});
    return out;
}

template <typename T>
void write_raw(std::ofstream& f, const T& v) {
    f.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_raw(std::ifstream& f) {
    T v{};
    f.read(reinterpret_cast<char*>(&v), sizeof(T));
    return v;
}

}  // namespace

void save_checkpoint(Model& model, const std::string& path) {
    auto tensors = manifest_tensors(model);

    json header;
    header["config"] = config_to_json(model.config());
    json manifest = json::array();
    std::uint64_t offset = 0;
    for (const auto& nt : tensors) {
        manifest.push_back({{"name", nt.name}, {"shape", nt.tensor->shape()}, {"offset", offset}});
        offset += static_cast<std::uint64_t>(nt.tensor->size()) * sizeof(float);
    }
    header["tensors"] = std::move(manifest);
    const std::string header_str = header.dump();

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw io_error("cannot open checkpoint for writing: " + path);
    f.write("MHCK", 4);
    write_raw(f, kCheckpointVersion);
    write_raw(f, static_cast<std::uint64_t>(header_str.size()));
    f.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));
    for (const auto& nt : tensors)
        f.write(reinterpret_cast<const char*>(nt.tensor->data()),
                static_cast<std::streamsize>(nt.tensor->size() * sizeof(float)));
    if (!f) throw io_error("write failed for checkpoint: " + path);
}

Model load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw io_error("cannot open checkpoint: " + path);

    char magic[4];
    f.read(magic, 4);
    if (!f || std::memcmp(magic, "MHCK", 4) != 0) throw io_error("not an MHCK checkpoint: " + path);
    const auto version = read_raw<std::uint32_t>(f);
    if (version != kCheckpointVersion)
        throw io_error("unsupported checkpoint version " + std::to_string(version) + " in " + path);
    const auto header_len = read_raw<std::uint64_t>(f);
    std::string header_str(header_len, '\0');
    f.read(header_str.data(), static_cast<std::streamsize>(header_len));
    if (!f) throw io_error("truncated checkpoint header: " + path);

    json header;
    try {
        header = json::parse(header_str);
    } catch (const json::exception& e) {
        throw io_error("bad checkpoint header in " + path + ": " + e.what());
    }

    Model model(config_from_json(header.at("config")));
    auto tensors = manifest_tensors(model);

    const std::streampos payload_start = f.tellg();
    for (const auto& entry : header.at("tensors")) {
        const std::string name = entry.at("name").get<std::string>();
        const Shape shape = entry.at("shape").get<Shape>();
        const auto offset = entry.at("offset").get<std::uint64_t>();
        auto it = std::find_if(tensors.begin(), tensors.end(),
                               [&](const NamedTensor& nt) { return nt.name == name; });
        if (it == tensors.end()) throw io_error("checkpoint tensor \"" + name + "\" unknown to this model");
        if (it->tensor->shape() != shape)
            throw io_error("checkpoint tensor \"" + name + "\" has shape " + shape_str(shape) +
                           ", expected " + shape_str(it->tensor->shape()));
        f.seekg(payload_start + static_cast<std::streamoff>(offset));
        f.read(reinterpret_cast<char*>(it->tensor->data()),
               static_cast<std::streamsize>(it->tensor->size() * sizeof(float)));
        if (!f) throw io_error("truncated checkpoint payload for tensor \"" + name + "\": " + path);
    }
    return model;
}

}  // namespace mhc

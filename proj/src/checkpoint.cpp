#include <bit>
#include <cstring>
#include <fstream>
#include <json.hpp>
#include <stdexcept>

#include "xalign/model.hpp"

namespace xalign {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'X', 'A', 'L', 'G', 'N', 'C', 'K', 'P'};
constexpr std::uint32_t kVersion = 1;

using nlohmann::json;

json layer_to_json(const LayerSpec& layer) {
  json j = {{"kind", std::string(layer_name(layer.kind))}};
  auto put = [&](const char* key, std::int64_t value, std::int64_t unset) {
    if (value != unset) j[key] = value;
  };
  put("in", layer.in, 0);
  put("out", layer.out, 0);
  put("kernel", layer.kernel, 0);
  put("stride", layer.stride, 1);
  put("padding", layer.padding, 0);
  put("heads", layer.heads, 0);
  put("patch", layer.patch, 0);
  put("tokens", layer.tokens, 0);
  if (!layer.body.empty()) {
    j["body"] = json::array();
    for (const auto& inner : layer.body) j["body"].push_back(layer_to_json(inner));
  }
  return j;
}

LayerSpec layer_from_json(const json& j) {
  LayerSpec layer;
  layer.kind = parse_layer_kind(j.at("kind").get<std::string>());
  layer.in = j.value("in", std::int64_t{0});
  layer.out = j.value("out", std::int64_t{0});
  layer.kernel = j.value("kernel", std::int64_t{0});
  layer.stride = j.value("stride", std::int64_t{1});
  layer.padding = j.value("padding", std::int64_t{0});
  layer.heads = j.value("heads", std::int64_t{0});
  layer.patch = j.value("patch", std::int64_t{0});
  layer.tokens = j.value("tokens", std::int64_t{0});
  if (j.contains("body")) {
    for (const auto& inner : j.at("body")) layer.body.push_back(layer_from_json(inner));
  }
  return layer;
}

json model_to_json(const Model& model) {
  json layers = json::array();
  for (const auto& layer : model.layers()) layers.push_back(layer_to_json(layer));
  const auto& in = model.input_shape();
  return {{"architecture", model.architecture()},
          {"input", {in.channels, in.height, in.width}},
          {"num_labels", model.num_labels()},
          {"layers", layers}};
}

template <typename T>
void write_pod(std::ostream& out, T value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in, const std::string& path) {
  T value{};
  in.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!in) throw std::runtime_error("load_checkpoint: truncated file " + path);
  return value;
}

}  // namespace

std::string architecture_descriptor(const Model& model) { return model_to_json(model).dump(); }

void save_checkpoint(const std::string& path, const Model& model, const std::map<std::string, std::string>& metadata) {
  json descriptor = model_to_json(model);
  descriptor["metadata"] = metadata;
  const std::string text = descriptor.dump();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("save_checkpoint: cannot open " + path);
  out.write(kMagic, sizeof(kMagic));
  write_pod<std::uint32_t>(out, kVersion);
  write_pod<std::uint64_t>(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  const auto params = model.parameters();
  write_pod<std::uint64_t>(out, params.size());
  for (const auto& p : params) {
    write_pod<std::uint64_t>(out, static_cast<std::uint64_t>(p.numel()));
    const auto values = p.values();
    out.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size_bytes()));
  }
  if (!out) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path);
  char magic[sizeof(kMagic)];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw std::runtime_error("load_checkpoint: " + path + " is not a checkpoint");
  }
  const auto version = read_pod<std::uint32_t>(in, path);
  if (version != kVersion) {
    throw std::runtime_error("load_checkpoint: unsupported version " + std::to_string(version) + " in " + path);
  }
  const auto length = read_pod<std::uint64_t>(in, path);
  std::string text(length, '\0');
  in.read(text.data(), static_cast<std::streamsize>(length));
  if (!in) throw std::runtime_error("load_checkpoint: truncated descriptor in " + path);
  const json descriptor = json::parse(text);

  std::vector<LayerSpec> layers;
  for (const auto& j : descriptor.at("layers")) layers.push_back(layer_from_json(j));
  const auto& shape = descriptor.at("input");
  InputShape input{shape.at(0).get<std::int64_t>(), shape.at(1).get<std::int64_t>(), shape.at(2).get<std::int64_t>()};
  Checkpoint ck{Model(descriptor.at("architecture").get<std::string>(), input,
                      descriptor.at("num_labels").get<std::int64_t>(), std::move(layers)),
                descriptor.value("metadata", std::map<std::string, std::string>{})};

  const auto count = read_pod<std::uint64_t>(in, path);
  const auto expected = ck.model.parameters();
  if (count != expected.size()) {
    throw std::runtime_error("load_checkpoint: " + path + " holds " + std::to_string(count) + " tensors, architecture needs " +
                             std::to_string(expected.size()));
  }
  std::vector<Tensor> params;
  for (std::size_t i = 0; i < count; ++i) {
    const auto n = read_pod<std::uint64_t>(in, path);
    if (static_cast<std::int64_t>(n) != expected[i].numel()) {
      throw std::runtime_error("load_checkpoint: tensor " + ck.model.parameter_names()[i] + " has " + std::to_string(n) +
                               " values, expected " + std::to_string(expected[i].numel()));
    }
    std::vector<double> values(n);
    in.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(n * sizeof(double)));
    if (!in) throw std::runtime_error("load_checkpoint: truncated tensor data in " + path);
    params.emplace_back(expected[i].shape(), std::move(values));
  }
  ck.model.set_parameters(std::move(params));
  return ck;
}

}  // namespace xalign

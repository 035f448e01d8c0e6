#pragma once

// Binary container shared by checkpoints and adapters:
//   magic "FGMKCKPT" | u32 version | u32 kind | u64 header length | header (JSON text)
//   | u64 tensor count | per tensor: u32 name length, name, u32 rank, u64 dims..., f64 values
// All integers and floats little-endian.

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

#include "model.hpp"

namespace forgetmark {

inline constexpr char container_magic[8] = {'F', 'G', 'M', 'K', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t container_version = 1;

enum class ContainerKind : std::uint32_t { weights = 0, adapter = 1 };

namespace io_detail {

template <typename T>
void put(std::string& out, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  auto bits = std::bit_cast<std::array<unsigned char, sizeof(T)>>(v);
  if constexpr (std::endian::native == std::endian::big) std::reverse(bits.begin(), bits.end());
  out.append(reinterpret_cast<const char*>(bits.data()), sizeof(T));
}

class Reader {
 public:
  Reader(std::string data, std::string source) : data_(std::move(data)), source_(std::move(source)) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    std::array<unsigned char, sizeof(T)> bits{};
    std::memcpy(bits.data(), data_.data() + pos_, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(bits.begin(), bits.end());
    pos_ += sizeof(T);
    return std::bit_cast<T>(bits);
  }

  std::string bytes(std::size_t n) {
    need(n);
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == data_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > data_.size()) fail(ErrorKind::schema, "truncated container " + source_);
  }
  std::string data_;
  std::string source_;
  std::size_t pos_ = 0;
};

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::io, "cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::io, "cannot write " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorKind::io, "short write to " + path);
}

}  // namespace io_detail

struct Container {
  ContainerKind kind = ContainerKind::weights;
  nlohmann::json header;
  TensorMap tensors;
};

inline std::string encode_container(const Container& c) {
  using io_detail::put;
  std::string out(container_magic, sizeof container_magic);
  put<std::uint32_t>(out, container_version);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(c.kind));
  const std::string header = c.header.dump();
  put<std::uint64_t>(out, header.size());
  out += header;
  put<std::uint64_t>(out, c.tensors.size());
  for (const auto& [name, t] : c.tensors) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.shape.size()));
    for (std::size_t d : t.shape) put<std::uint64_t>(out, d);
    for (double v : t.data) put<double>(out, v);
  }
  return out;
}

inline Container decode_container(std::string bytes, const std::string& source = "<memory>") {
  if (bytes.size() < sizeof container_magic || std::memcmp(bytes.data(), container_magic, sizeof container_magic) != 0)
    fail(ErrorKind::schema, source + " is not a forgetmark container");
  io_detail::Reader r(bytes.substr(sizeof container_magic), source);
  const auto version = r.get<std::uint32_t>();
  if (version != container_version)
    fail(ErrorKind::schema, source + ": unsupported container version " + std::to_string(version));
  Container c;
  c.kind = static_cast<ContainerKind>(r.get<std::uint32_t>());
  const auto header_len = r.get<std::uint64_t>();
  try {
    c.header = nlohmann::json::parse(r.bytes(header_len));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::schema, source + ": malformed header: " + e.what());
  }
  const auto count = r.get<std::uint64_t>();
  for (std::uint64_t i = 0; i < count; ++i) {
    std::string name = r.bytes(r.get<std::uint32_t>());
    const auto rank = r.get<std::uint32_t>();
    std::vector<std::size_t> shape;
    for (std::uint32_t k = 0; k < rank; ++k) shape.push_back(static_cast<std::size_t>(r.get<std::uint64_t>()));
    Tensor t(shape);
    for (double& v : t.data) v = r.get<double>();
    c.tensors.emplace(std::move(name), std::move(t));
  }
  if (!r.done()) fail(ErrorKind::schema, source + ": trailing bytes after tensors");
  return c;
}

inline nlohmann::json to_json(const ModelConfig& c) {
  return {{"vocab_size", c.vocab_size}, {"dim", c.dim},         {"layers", c.layers},
          {"heads", c.heads},           {"context", c.context}, {"seed", c.seed}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.vocab_size = j.at("vocab_size").get<std::size_t>();
    c.dim = j.at("dim").get<std::size_t>();
    c.layers = j.at("layers").get<std::size_t>();
    c.heads = j.at("heads").get<std::size_t>();
    c.context = j.at("context").get<std::size_t>();
    c.seed = j.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::schema, std::string("bad model config header: ") + e.what());
  }
  c.validate();
  return c;
}

inline nlohmann::json to_json(const LoraConfig& c) {
  return {{"rank", c.rank}, {"scaling", c.scaling}, {"targets", c.targets}, {"seed", c.seed}};
}

inline LoraConfig lora_config_from_json(const nlohmann::json& j) {
  LoraConfig c;
  try {
    c.rank = j.at("rank").get<std::size_t>();
    c.scaling = j.at("scaling").get<double>();
    c.targets = j.at("targets").get<std::vector<std::string>>();
    c.seed = j.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::schema, std::string("bad adapter config header: ") + e.what());
  }
  return c;
}

/// `meta` is stored verbatim in the header (tokenizer kind, vocab hash, provenance).
inline void save_weights(const std::string& path, const Weights& w, const nlohmann::json& meta = nlohmann::json::object()) {
  Container c{ContainerKind::weights, {{"config", to_json(w.config)}, {"meta", meta}}, w.tensors};
  io_detail::write_file(path, encode_container(c));
}

struct LoadedWeights {
  Weights weights;
  nlohmann::json meta;
};

inline LoadedWeights load_weights(const std::string& path) {
  Container c = decode_container(io_detail::read_file(path), path);
  if (c.kind != ContainerKind::weights) fail(ErrorKind::schema, path + " is not a weights checkpoint");
  LoadedWeights out{Weights{model_config_from_json(c.header.at("config")), std::move(c.tensors)},
                    c.header.value("meta", nlohmann::json::object())};
  validate_weights(out.weights);
  return out;
}

inline void save_adapter(const std::string& path, const LoraAdapter& a,
                         const nlohmann::json& provenance = nlohmann::json::object()) {
  Container c{ContainerKind::adapter,
              {{"lora", to_json(a.config)}, {"base_config", to_json(a.base_config)}, {"provenance", provenance}},
              {}};
  for (const auto& [name, p] : a.pairs) {
    c.tensors.emplace(name + ".lora_a", p.a);
    c.tensors.emplace(name + ".lora_b", p.b);
  }
  io_detail::write_file(path, encode_container(c));
}

struct LoadedAdapter {
  LoraAdapter adapter;
  nlohmann::json provenance;
};

inline LoadedAdapter load_adapter(const std::string& path) {
  Container c = decode_container(io_detail::read_file(path), path);
  if (c.kind != ContainerKind::adapter) fail(ErrorKind::schema, path + " is not an adapter file");
  LoadedAdapter out;
  out.adapter.config = lora_config_from_json(c.header.at("lora"));
  out.adapter.base_config = model_config_from_json(c.header.at("base_config"));
  out.provenance = c.header.value("provenance", nlohmann::json::object());
  for (auto& [key, t] : c.tensors) {
    const auto dot = key.rfind('.');
    const std::string target = key.substr(0, dot), part = key.substr(dot + 1);
    if (part == "lora_a") out.adapter.pairs[target].a = std::move(t);
    else if (part == "lora_b") out.adapter.pairs[target].b = std::move(t);
    else fail(ErrorKind::schema, path + ": unexpected adapter tensor '" + key + "'");
  }
  return out;
}

}  // namespace forgetmark

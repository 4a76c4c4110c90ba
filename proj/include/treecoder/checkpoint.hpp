#pragma once

// Checkpoint layout: one line of JSON (config, training metadata, parameter
// manifest with byte offsets into the data section) terminated by '\n',
// followed by every parameter as little-endian float32, row-major, in
// manifest order.

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include <json.hpp>

#include "treecoder/tree.hpp"

namespace treecoder {

inline constexpr const char* kCheckpointFormat = "treecoder-checkpoint";
inline constexpr int kCheckpointVersion = 1;

inline nlohmann::json config_to_json(const TreeConfig& c) {
  return {{"k", c.k},
          {"h", c.h},
          {"dec", c.dec},
          {"d_model", c.d_model},
          {"n_heads", c.n_heads},
          {"ffn_hidden", c.ffn_width()},
          {"context_len", c.context_len},
          {"vocab_size", c.vocab_size},
          {"selector_hidden_mult", c.selector_hidden_mult},
          {"dropout", c.dropout},
          {"rms_eps", c.rms_eps},
          {"routing_mode", to_string(c.routing)}};
}

inline TreeConfig config_from_json(const nlohmann::json& j) {
  TreeConfig c;
  c.k = j.at("k").get<std::size_t>();
  c.h = j.at("h").get<std::size_t>();
  c.dec = j.at("dec").get<std::size_t>();
  c.d_model = j.at("d_model").get<std::size_t>();
  c.n_heads = j.at("n_heads").get<std::size_t>();
  c.ffn_hidden = j.at("ffn_hidden").get<std::size_t>();
  c.context_len = j.at("context_len").get<std::size_t>();
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.selector_hidden_mult = j.at("selector_hidden_mult").get<std::size_t>();
  c.dropout = j.at("dropout").get<double>();
  c.rms_eps = j.at("rms_eps").get<double>();
  c.routing = parse_routing(j.at("routing_mode").get<std::string>());
  c.validate();
  return c;
}

struct CheckpointMeta {
  std::uint64_t step = 0;
  std::uint64_t epoch = 0;
  double best_valid_ppl = std::numeric_limits<double>::infinity();
  nlohmann::json vocab;  // embedded tokenizer, or null
};

template <class T>
struct LoadedCheckpoint {
  TreeCoderModel<T> model;
  CheckpointMeta meta;
};

namespace detail {
inline std::uint32_t to_little(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::little) {
    return v;
  } else {
    return ((v & 0xffu) << 24) | ((v & 0xff00u) << 8) | ((v >> 8) & 0xff00u) | (v >> 24);
  }
}
}  // namespace detail

template <class T>
void save_checkpoint(const std::filesystem::path& path, const TreeCoderModel<T>& model,
                     const CheckpointMeta& meta) {
  nlohmann::json header;
  header["format"] = kCheckpointFormat;
  header["version"] = kCheckpointVersion;
  header["config"] = config_to_json(model.config);
  header["step"] = meta.step;
  header["epoch"] = meta.epoch;
  header["best_valid_ppl"] =
      std::isfinite(meta.best_valid_ppl) ? nlohmann::json(meta.best_valid_ppl) : nlohmann::json();
  header["vocab"] = meta.vocab;
  auto manifest = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& p : model.params) {
    manifest.push_back({{"name", p.spec.name}, {"shape", p.array.shape()}, {"offset", offset}});
    offset += p.array.size() * sizeof(float);
  }
  header["params"] = std::move(manifest);
  header["data_bytes"] = offset;

  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw InputError("cannot write checkpoint " + path.string());
    out << header.dump() << '\n';
    std::vector<std::uint32_t> buf;
    for (const auto& p : model.params) {
      buf.resize(p.array.size());
      auto v = p.array.values();
      for (std::size_t i = 0; i < v.size(); ++i)
        buf[i] = detail::to_little(std::bit_cast<std::uint32_t>(static_cast<float>(v[i])));
      out.write(reinterpret_cast<const char*>(buf.data()),
                static_cast<std::streamsize>(buf.size() * sizeof(std::uint32_t)));
    }
    if (!out) throw InputError("short write to checkpoint " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

template <class T = float>
LoadedCheckpoint<T> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open checkpoint " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw InputError("empty checkpoint " + path.string());
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw InputError("malformed checkpoint header: " + std::string(e.what()));
  }
  try {
    if (header.at("format").get<std::string>() != kCheckpointFormat ||
        header.at("version").get<int>() != kCheckpointVersion) {
      throw InputError("unsupported checkpoint format in " + path.string());
    }
    LoadedCheckpoint<T> ck{allocate<T>(config_from_json(header.at("config"))), {}};
    ck.meta.step = header.at("step").get<std::uint64_t>();
    ck.meta.epoch = header.at("epoch").get<std::uint64_t>();
    const auto& best = header.at("best_valid_ppl");
    ck.meta.best_valid_ppl = best.is_null() ? std::numeric_limits<double>::infinity() : best.get<double>();
    ck.meta.vocab = header.value("vocab", nlohmann::json());
    const auto& manifest = header.at("params");
    if (manifest.size() != ck.model.params.size()) {
      throw InputError("checkpoint manifest does not match its config");
    }
    const auto data_start = in.tellg();
    std::vector<std::uint32_t> buf;
    for (std::size_t i = 0; i < manifest.size(); ++i) {
      auto& p = ck.model.params[i];
      if (manifest[i].at("name").get<std::string>() != p.spec.name ||
          manifest[i].at("shape").get<Shape>() != p.array.shape()) {
        throw InputError("checkpoint parameter " + std::to_string(i) + " (" +
                         manifest[i].at("name").get<std::string>() + ") does not match " + p.spec.name);
      }
      in.seekg(data_start + static_cast<std::streamoff>(manifest[i].at("offset").get<std::uint64_t>()));
      buf.resize(p.array.size());
      in.read(reinterpret_cast<char*>(buf.data()),
              static_cast<std::streamsize>(buf.size() * sizeof(std::uint32_t)));
      if (!in) throw InputError("truncated checkpoint " + path.string());
      auto v = p.array.mutable_values();
      for (std::size_t j = 0; j < v.size(); ++j)
        v[j] = static_cast<T>(std::bit_cast<float>(detail::to_little(buf[j])));
    }
    return ck;
  } catch (const nlohmann::json::exception& e) {
    throw InputError("malformed checkpoint header: " + std::string(e.what()));
  } catch (const ConfigError& e) {
    throw InputError("checkpoint holds an invalid config: " + std::string(e.what()));
  }
}

}  // namespace treecoder

#pragma once

// Checkpoint container shared by the translators and the segmenter.
//
// File layout:
//   "XMODA-CKPT 1\n"
//   <manifest byte length, decimal>\n
//   <manifest JSON>
//   <payload: arrays in manifest order, little-endian float32>
//
// The manifest holds kind, config, epoch, loss_history, rng_state, any extra
// fields, and an array table {name, shape, offset, count}.

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "xmoda/error.hpp"
#include "xmoda/ndarray.hpp"
#include "xmoda/nn/layers.hpp"
#include "xmoda/nn/optim.hpp"
#include "xmoda/rng.hpp"

namespace xmoda {

static_assert(std::endian::native == std::endian::little, "checkpoint payload is written in host order");

using LossHistory = std::vector<std::map<std::string, double>>;

struct Checkpoint {
  std::string kind;  // cyclegan | qsattn | segmenter
  nlohmann::json config;
  int epoch = 0;
  LossHistory loss_history;
  std::string rng_state;
  nlohmann::json extra = nlohmann::json::object();
  std::map<std::string, NdArray<float>> arrays;

  bool operator==(const Checkpoint&) const = default;
};

inline constexpr const char* kCheckpointMagic = "XMODA-CKPT 1";

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline std::string hash_bytes(std::string_view bytes) { return hex64(fnv1a64(bytes)); }

inline std::string hash_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw Error(Errc::MissingFile, "cannot open " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return hash_bytes(ss.str());
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
inline void write_file_atomic(const std::filesystem::path& path, std::string_view bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(Errc::IoFailure, "cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error(Errc::IoFailure, "short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline std::string serialize_checkpoint(const Checkpoint& c) {
  nlohmann::ordered_json m;
  m["kind"] = c.kind;
  m["epoch"] = c.epoch;
  m["config"] = c.config;
  nlohmann::ordered_json hist = nlohmann::ordered_json::array();
  for (const auto& e : c.loss_history) {
    nlohmann::ordered_json row = nlohmann::ordered_json::object();
    for (const auto& [k, v] : e) {
      if (!std::isfinite(v)) throw Error(Errc::NonFiniteData, "loss_history entry " + k + " is not finite");
      row[k] = v;
    }
    hist.push_back(row);
  }
  m["loss_history"] = hist;
  m["rng_state"] = c.rng_state;
  m["extra"] = c.extra;
  nlohmann::ordered_json table = nlohmann::ordered_json::array();
  std::int64_t offset = 0;
  for (const auto& [name, a] : c.arrays) {
    if (shape_numel(a.shape) != static_cast<std::int64_t>(a.data.size()))
      throw Error(Errc::ShapeMismatch, "array " + name + " does not match its shape");
    table.push_back({{"name", name}, {"shape", a.shape}, {"offset", offset}, {"count", a.data.size()}});
    offset += static_cast<std::int64_t>(a.data.size());
  }
  m["arrays"] = table;
  const std::string manifest = m.dump();
  std::string out = std::string(kCheckpointMagic) + "\n" + std::to_string(manifest.size()) + "\n" + manifest;
  const std::size_t head = out.size();
  out.resize(head + static_cast<std::size_t>(offset) * sizeof(float));
  char* dst = out.data() + head;
  for (const auto& [_, a] : c.arrays) {
    std::memcpy(dst, a.data.data(), a.data.size() * sizeof(float));
    dst += a.data.size() * sizeof(float);
  }
  return out;
}

inline Checkpoint deserialize_checkpoint(const std::string& bytes) {
  const std::string magic = std::string(kCheckpointMagic) + "\n";
  if (bytes.compare(0, magic.size(), magic) != 0) throw Error(Errc::CorruptHeader, "not a checkpoint file");
  const auto nl = bytes.find('\n', magic.size());
  if (nl == std::string::npos) throw Error(Errc::CorruptHeader, "truncated checkpoint header");
  std::size_t mlen = 0;
  try {
    mlen = std::stoull(bytes.substr(magic.size(), nl - magic.size()));
  } catch (const std::exception&) {
    throw Error(Errc::CorruptHeader, "bad manifest length");
  }
  if (nl + 1 + mlen > bytes.size()) throw Error(Errc::CorruptHeader, "truncated checkpoint manifest");
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(bytes.substr(nl + 1, mlen));
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::CorruptHeader, std::string("checkpoint manifest: ") + e.what());
  }
  const std::size_t payload = nl + 1 + mlen;
  Checkpoint c;
  try {
    c.kind = m.at("kind").get<std::string>();
    c.epoch = m.at("epoch").get<int>();
    c.config = m.at("config");
    for (const auto& row : m.at("loss_history")) {
      std::map<std::string, double> e;
      for (auto it = row.begin(); it != row.end(); ++it) e[it.key()] = it.value().get<double>();
      c.loss_history.push_back(std::move(e));
    }
    c.rng_state = m.at("rng_state").get<std::string>();
    c.extra = m.value("extra", nlohmann::json::object());
    for (const auto& a : m.at("arrays")) {
      NdArray<float> arr;
      arr.shape = a.at("shape").get<Shape>();
      const auto offset = a.at("offset").get<std::size_t>();
      const auto count = a.at("count").get<std::size_t>();
      if (static_cast<std::int64_t>(count) != shape_numel(arr.shape))
        throw Error(Errc::CorruptHeader, "array count does not match shape");
      const std::size_t begin = payload + offset * sizeof(float);
      if (begin + count * sizeof(float) > bytes.size()) throw Error(Errc::CorruptHeader, "truncated checkpoint payload");
      arr.data.resize(count);
      std::memcpy(arr.data.data(), bytes.data() + begin, count * sizeof(float));
      c.arrays.emplace(a.at("name").get<std::string>(), std::move(arr));
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::CorruptHeader, std::string("checkpoint manifest: ") + e.what());
  }
  return c;
}

inline void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path) {
  write_file_atomic(path, serialize_checkpoint(c));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::MissingFile, "cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return deserialize_checkpoint(ss.str());
}

inline void store_params(Checkpoint& c, const nn::ParamStore& ps) {
  for (const auto& [name, t] : ps.all()) c.arrays[name] = NdArray<float>{t.shape(), t.value()};
}

/// Copies arrays into the store's tensors; every parameter must be present
/// with the same shape.
inline void load_params(const Checkpoint& c, nn::ParamStore& ps) {
  for (auto& [name, t] : ps.all()) {
    auto it = c.arrays.find(name);
    if (it == c.arrays.end()) throw Error(Errc::IncompatibleCheckpoint, "checkpoint lacks parameter " + name);
    if (it->second.shape != t.shape())
      throw Error(Errc::IncompatibleCheckpoint, "parameter " + name + " has shape " + shape_str(it->second.shape) +
                                                    ", network expects " + shape_str(t.shape()));
    t.value() = it->second.data;
  }
}

inline void store_adam(Checkpoint& c, const std::string& key, const nn::Adam& opt) {
  c.extra["adam_steps"][key] = opt.steps();
  for (const auto& [name, s] : opt.slots()) {
    const Shape sh{static_cast<std::int64_t>(s.m.size())};
    c.arrays["adam." + key + ".m." + name] = NdArray<float>{sh, s.m};
    c.arrays["adam." + key + ".v." + name] = NdArray<float>{sh, s.v};
  }
}

inline void load_adam(const Checkpoint& c, const std::string& key, nn::Adam& opt) {
  opt.slots().clear();
  opt.set_steps(c.extra.contains("adam_steps") ? c.extra["adam_steps"].value(key, std::int64_t{0}) : 0);
  const std::string pm = "adam." + key + ".m.";
  const std::string pv = "adam." + key + ".v.";
  for (const auto& [name, a] : c.arrays) {
    if (name.rfind(pm, 0) == 0) opt.slots()[name.substr(pm.size())].m = a.data;
    if (name.rfind(pv, 0) == 0) opt.slots()[name.substr(pv.size())].v = a.data;
  }
}

}  // namespace xmoda

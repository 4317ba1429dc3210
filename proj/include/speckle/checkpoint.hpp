#pragma once

// Checkpoint file: 8-byte magic, a little-endian u64 byte length, UTF-8
// "key = value" metadata lines (format version, architecture config,
// rotation convention, counters), then raw little-endian float32 blocks:
// trainable parameters in registry order, the batch-norm running
// statistics, and optionally Adam first/second moments in the same
// parameter order. Round trips are bit-exact.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "speckle/net.hpp"

namespace speckle::net {

inline constexpr char kCheckpointMagic[9] = "BSNET001";

template <class S>
struct AdamBlob {
  std::vector<Buffer<S>> m, v;  // one pair per trainable parameter
  std::int64_t step = 0;
};

namespace detail {

inline std::string fmt_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

template <class S>
void write_block(std::ofstream& out, const Buffer<S>& buf) {
  std::vector<float> tmp(buf.size());
  for (Eigen::Index i = 0; i < buf.size(); ++i)
    tmp[i] = static_cast<float>(buf[i]);
  out.write(reinterpret_cast<const char*>(tmp.data()),
            static_cast<std::streamsize>(tmp.size() * sizeof(float)));
}

template <class S>
void read_block(std::ifstream& in, Buffer<S>& buf, Eigen::Index count,
                const std::string& path) {
  std::vector<float> tmp(count);
  in.read(reinterpret_cast<char*>(tmp.data()),
          static_cast<std::streamsize>(tmp.size() * sizeof(float)));
  if (!in) throw std::runtime_error(path + ": truncated weight block");
  buf.resize(count);
  for (Eigen::Index i = 0; i < count; ++i) buf[i] = static_cast<S>(tmp[i]);
}

}  // namespace detail

template <class S>
void save_checkpoint(const std::string& path, NetworkState<S>& state,
                     const AdamBlob<S>* adam = nullptr) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error(path + ": cannot open for writing");

  const NetConfig& c = state.config;
  std::string meta;
  meta += "format_version = 1\n";
  meta += "blocks = " + std::to_string(c.blocks) + "\n";
  meta += "channels = " + std::to_string(c.channels) + "\n";
  meta += "kernel = " + std::to_string(c.kernel) + "\n";
  meta += "nonlocal = " + std::to_string(c.nonlocal ? 1 : 0) + "\n";
  meta += "nonlocal_every = " + std::to_string(c.nonlocal_every) + "\n";
  meta += "nonlocal_q = " + std::to_string(c.nonlocal_q) + "\n";
  meta += "lrelu_slope = " + detail::fmt_double(c.lrelu_slope) + "\n";
  meta += "bn_eps = " + detail::fmt_double(c.bn_eps) + "\n";
  meta += "bn_momentum = " + detail::fmt_double(c.bn_momentum) + "\n";
  meta += "positive_eps = " + detail::fmt_double(c.positive_eps) + "\n";
  meta += "input_scale = " + detail::fmt_double(c.input_scale) + "\n";
  meta += "rotation = ccw\n";
  meta += "concat_order = up,down,left,right\n";
  meta += "weight_dtype = f32\n";
  meta += "trained_iterations = " + std::to_string(state.trained_iterations) +
          "\n";
  meta += "has_adam = " + std::to_string(adam ? 1 : 0) + "\n";
  if (adam) meta += "adam_step = " + std::to_string(adam->step) + "\n";

  out.write(kCheckpointMagic, 8);
  const std::uint64_t len = meta.size();
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(meta.data(), static_cast<std::streamsize>(meta.size()));

  for (auto& p : state.parameters()) detail::write_block(out, *p.buf);
  for (auto& p : state.running_stats()) detail::write_block(out, *p.buf);
  if (adam) {
    auto params = state.parameters();
    if (adam->m.size() != params.size() || adam->v.size() != params.size())
      throw std::invalid_argument("save_checkpoint: adam blob size mismatch");
    for (std::size_t i = 0; i < params.size(); ++i)
      detail::write_block(out, adam->m[i]);
    for (std::size_t i = 0; i < params.size(); ++i)
      detail::write_block(out, adam->v[i]);
  }
  if (!out) throw std::runtime_error(path + ": write failed");
}

template <class S>
NetworkState<S> load_checkpoint(const std::string& path,
                                AdamBlob<S>* adam_out = nullptr) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error(path + ": cannot open");
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw std::runtime_error(path + ": not a checkpoint file");
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  std::string meta(len, '\0');
  in.read(meta.data(), static_cast<std::streamsize>(len));
  if (!in) throw std::runtime_error(path + ": truncated metadata");

  std::map<std::string, std::string> kv;
  std::istringstream ms(meta);
  std::string line;
  while (std::getline(ms, line)) {
    const auto eq = line.find(" = ");
    if (eq == std::string::npos) continue;
    kv[line.substr(0, eq)] = line.substr(eq + 3);
  }
  auto want = [&](const std::string& key) -> const std::string& {
    auto it = kv.find(key);
    if (it == kv.end())
      throw std::runtime_error(path + ": missing metadata key " + key);
    return it->second;
  };
  if (want("format_version") != "1")
    throw std::runtime_error(path + ": unsupported checkpoint version");

  NetConfig cfg;
  cfg.blocks = std::stoi(want("blocks"));
  cfg.channels = std::stoi(want("channels"));
  cfg.kernel = std::stoi(want("kernel"));
  cfg.nonlocal = want("nonlocal") == "1";
  cfg.nonlocal_every = std::stoi(want("nonlocal_every"));
  cfg.nonlocal_q = std::stoi(want("nonlocal_q"));
  cfg.lrelu_slope = std::stod(want("lrelu_slope"));
  cfg.bn_eps = std::stod(want("bn_eps"));
  cfg.bn_momentum = std::stod(want("bn_momentum"));
  cfg.positive_eps = std::stod(want("positive_eps"));
  cfg.input_scale = std::stod(want("input_scale"));

  NetworkState<S> state = NetworkState<S>::random_init(cfg, 0);
  state.trained_iterations = std::stoull(want("trained_iterations"));
  for (auto& p : state.parameters())
    detail::read_block(in, *p.buf, p.shape.count(), path);
  for (auto& p : state.running_stats())
    detail::read_block(in, *p.buf, p.shape.count(), path);

  const bool has_adam = want("has_adam") == "1";
  if (adam_out) {
    adam_out->m.clear();
    adam_out->v.clear();
    adam_out->step = 0;
    if (has_adam) {
      auto params = state.parameters();
      adam_out->step = std::stoll(want("adam_step"));
      adam_out->m.resize(params.size());
      adam_out->v.resize(params.size());
      for (std::size_t i = 0; i < params.size(); ++i)
        detail::read_block(in, adam_out->m[i], params[i].shape.count(), path);
      for (std::size_t i = 0; i < params.size(); ++i)
        detail::read_block(in, adam_out->v[i], params[i].shape.count(), path);
    }
  }
  return state;
}

}  // namespace speckle::net

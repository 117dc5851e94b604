#pragma once

#include <bit>
#include <cstdint>
#include <cstdio>
#include <string>
#include <utility>
#include <vector>

#include "gaam/config.hpp"
#include "gaam/data.hpp"
#include "gaam/decoder.hpp"
#include "gaam/errors.hpp"

namespace gaam {

inline constexpr char kCheckpointMagic[8] = {'G', 'A', 'T', 'C', 'K', 'P', 'T', '1'};

// Layout (little-endian):
//   "GATCKPT1" | u32 num_params | u32 num_meta
//   num_params x { u32 name_len, name, u32 rank, u32 extents[rank], f32 values[] }
//   num_meta   x { u32 key_len, key, u32 value_len, value }
struct Checkpoint {
  std::vector<std::pair<std::string, Array<float>>> params;
  std::vector<std::pair<std::string, std::string>> meta;

  const std::string* find_meta(const std::string& key) const {
    for (const auto& [k, v] : meta) {
      if (k == key) return &v;
    }
    return nullptr;
  }
};

inline std::string encode_checkpoint(const Checkpoint& ck) {
  using detail::put_le;
  std::string out(kCheckpointMagic, sizeof kCheckpointMagic);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(ck.params.size()));
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(ck.meta.size()));
  auto put_str = [&](const std::string& s) {
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
    out += s;
  };
  for (const auto& [name, a] : ck.params) {
    put_str(name);
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(a.rank()));
    for (std::size_t e : a.shape()) put_le<std::uint32_t>(out, static_cast<std::uint32_t>(e));
    for (float v : a.storage()) put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(v));
  }
  for (const auto& [k, v] : ck.meta) {
    put_str(k);
    put_str(v);
  }
  return out;
}

inline Checkpoint decode_checkpoint(const std::string& bytes) {
  std::size_t pos = 0;
  auto need = [&](std::size_t n, const char* what) {
    if (bytes.size() - pos < n) throw FormatError(std::string("checkpoint truncated while reading ") + what, bytes.size());
  };
  auto u32 = [&](const char* what) {
    need(4, what);
    const auto v = detail::get_le<std::uint32_t>(bytes, pos);
    pos += 4;
    return v;
  };
  auto str = [&](const char* what) {
    const std::uint32_t n = u32(what);
    need(n, what);
    std::string s = bytes.substr(pos, n);
    pos += n;
    return s;
  };
  if (bytes.size() < sizeof kCheckpointMagic || bytes.compare(0, 8, kCheckpointMagic, 8) != 0) {
    throw FormatError("not a GATCKPT1 checkpoint", 0);
  }
  pos = 8;
  Checkpoint ck;
  const std::uint32_t np = u32("parameter count");
  const std::uint32_t nm = u32("metadata count");
  for (std::uint32_t i = 0; i < np; ++i) {
    std::string name = str("parameter name");
    const std::uint32_t rank = u32("rank");
    if (rank > 8) throw FormatError("implausible rank " + std::to_string(rank), pos - 4);
    Shape shape;
    for (std::uint32_t r = 0; r < rank; ++r) shape.push_back(u32("extent"));
    const std::size_t n = shape_numel(shape);
    need(4 * n, "parameter values");
    std::vector<float> vals(n);
    for (std::size_t k = 0; k < n; ++k, pos += 4) vals[k] = std::bit_cast<float>(detail::get_le<std::uint32_t>(bytes, pos));
    ck.params.emplace_back(std::move(name), Array<float>(std::move(shape), std::move(vals)));
  }
  for (std::uint32_t i = 0; i < nm; ++i) {
    std::string k = str("metadata key");
    ck.meta.emplace_back(std::move(k), str("metadata value"));
  }
  if (pos != bytes.size()) throw FormatError("trailing bytes after checkpoint", pos);
  return ck;
}

template <typename T>
Checkpoint make_checkpoint(const GatDecoder<T>& model, const TrainConfig& tcfg) {
  Checkpoint ck;
  for (const auto& name : model.params().names()) {
    ck.params.emplace_back(name, model.params().at(name).value().template cast<float>());
  }
  ck.meta.emplace_back("config", model_config_text(model.config(), tcfg));
  return ck;
}

template <typename T>
void save_checkpoint(const GatDecoder<T>& model, const TrainConfig& tcfg, const std::string& path) {
  detail::write_file(path, encode_checkpoint(make_checkpoint(model, tcfg)));
}

template <typename T>
struct LoadedModel {
  GatDecoder<T> model;
  TrainConfig train;
};

template <typename T>
LoadedModel<T> restore_checkpoint(const Checkpoint& ck) {
  const std::string* text = ck.find_meta("config");
  if (!text) throw FormatError("checkpoint has no config record", 0);
  const RunConfig rc = parse_run_config(*text);
  LoadedModel<T> out{GatDecoder<T>(rc.decoder, rc.train.seed), rc.train};
  ParamStore<T>& store = out.model.params();
  if (ck.params.size() != store.size()) {
    throw FormatError("checkpoint holds " + std::to_string(ck.params.size()) + " parameters, model expects " +
                      std::to_string(store.size()), 0);
  }
  for (const auto& [name, a] : ck.params) {
    if (!store.contains(name)) throw FormatError("unexpected parameter '" + name + "' in checkpoint", 0);
    Var<T>& p = store.at(name);
    if (p.shape() != a.shape()) {
      throw FormatError("parameter '" + name + "' has shape " + shape_str(a.shape()) + ", expected " +
                        shape_str(p.shape()), 0);
    }
    p.mutable_value() = a.template cast<T>();
  }
  return out;
}

template <typename T>
LoadedModel<T> load_checkpoint(const std::string& path) {
  return restore_checkpoint<T>(decode_checkpoint(detail::read_file(path)));
}

inline std::string metrics_csv(const std::vector<EpochMetrics>& history) {
  std::string out = "epoch,train_loss,val_accuracy\n";
  char buf[96];
  for (const auto& m : history) {
    std::snprintf(buf, sizeof buf, "%zu,%.9g,%.6f\n", m.epoch, m.train_loss, m.val_accuracy);
    out += buf;
  }
  return out;
}

inline void write_metrics_csv(const std::vector<EpochMetrics>& history, const std::string& path) {
  detail::write_file(path, metrics_csv(history));
}

}  // namespace gaam

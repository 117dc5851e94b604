#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "gaam/array.hpp"
#include "gaam/errors.hpp"
#include "gaam/rng.hpp"

namespace gaam {

// Frozen-encoder output for one input: layers x steps x dim, layer-major.
struct EmbeddingStack {
  std::size_t layers = 0;
  std::size_t steps = 0;
  std::size_t dim = 0;
  std::vector<float> values;
  std::uint32_t label = 0;
  std::uint32_t source_id = 0;

  float at(std::size_t layer, std::size_t step, std::size_t j) const {
    return values[(layer * steps + step) * dim + j];
  }
  float& at(std::size_t layer, std::size_t step, std::size_t j) { return values[(layer * steps + step) * dim + j]; }

  void validate() const {
    if (layers == 0 || steps == 0 || dim == 0) throw DimensionError("EmbeddingStack: N, T and d must all be >= 1");
    if (values.size() != layers * steps * dim) throw DimensionError("EmbeddingStack: value count does not match N*T*d");
    for (float v : values) {
      if (!std::isfinite(v)) throw NumericError("EmbeddingStack: non-finite value");
    }
  }

  friend bool operator==(const EmbeddingStack&, const EmbeddingStack&) = default;
};

// Mean over the time axis: (N, T, d) -> (N, d).
template <typename T>
Array<T> mean_pool_time(const EmbeddingStack& s) {
  if (s.steps == 0) throw DimensionError("mean_pool_time: stack has no time steps");
  if (s.layers == 0 || s.dim == 0) throw DimensionError("mean_pool_time: empty stack");
  Array<T> out({s.layers, s.dim});
  for (std::size_t l = 0; l < s.layers; ++l) {
    for (std::size_t t = 0; t < s.steps; ++t) {
      for (std::size_t j = 0; j < s.dim; ++j) out.at(l, j) += static_cast<T>(s.at(l, t, j));
    }
  }
  const T inv = T(1) / static_cast<T>(s.steps);
  for (auto& v : out.storage()) v *= inv;
  return out;
}

// ============================================================================
// Synthetic regime-switching generator
// ============================================================================

// Each sample is standard normal noise (times noise_scale). On informative
// layers, time is cut into piecewise-stationary segments at random
// boundaries; inside "active" segments class c adds mean_shift[c] and scales
// the noise by var_mult[c]. `feature_fraction` < 1 confines the class regime
// to a class-specific random subset of feature dimensions.
struct RegimeSpec {
  std::size_t num_samples = 400;
  std::size_t num_classes = 4;
  std::size_t layers = 8;
  std::size_t steps = 16;
  std::size_t dim = 64;
  std::vector<std::size_t> informative_layers{2};
  std::vector<double> mean_shift;  // per class; empty -> default_mean_shift
  std::vector<double> var_mult;    // per class; empty -> default_var_mult
  double noise_scale = 1.0;
  double feature_fraction = 1.0;
  std::size_t max_switches = 3;
  std::uint64_t seed = 0;

  static std::vector<double> default_mean_shift(std::size_t k) {
    std::vector<double> out(k);
    for (std::size_t c = 0; c < k; ++c) out[c] = static_cast<double>(c) - 0.5 * static_cast<double>(k - 1);
    return out;
  }
  static std::vector<double> default_var_mult(std::size_t k) {
    std::vector<double> out(k);
    for (std::size_t c = 0; c < k; ++c) out[c] = 1.0 + 0.5 * static_cast<double>(c % 2);
    return out;
  }

  double shift(std::size_t c) const { return mean_shift.empty() ? default_mean_shift(num_classes)[c] : mean_shift[c]; }
  double mult(std::size_t c) const { return var_mult.empty() ? default_var_mult(num_classes)[c] : var_mult[c]; }

  void validate() const {
    if (num_samples == 0) throw ContractError("RegimeSpec: num_samples must be >= 1");
    if (num_classes < 1) throw ContractError("RegimeSpec: num_classes must be >= 1");
    if (layers == 0 || steps == 0 || dim == 0) throw ContractError("RegimeSpec: N, T and d must be >= 1");
    for (std::size_t l : informative_layers) {
      if (l >= layers) {
        throw ContractError("RegimeSpec: informative layer " + std::to_string(l) + " outside [0, " +
                            std::to_string(layers) + ")");
      }
    }
    if (!mean_shift.empty() && mean_shift.size() != num_classes) {
      throw ContractError("RegimeSpec: mean_shift needs one value per class");
    }
    if (!var_mult.empty() && var_mult.size() != num_classes) {
      throw ContractError("RegimeSpec: var_mult needs one value per class");
    }
    for (std::size_t c = 0; c < num_classes; ++c) {
      if (!(mult(c) > 0.0)) throw ContractError("RegimeSpec: variance multipliers must be positive");
      if (!std::isfinite(shift(c))) throw ContractError("RegimeSpec: mean shifts must be finite");
    }
    if (!(noise_scale >= 0.0) || !std::isfinite(noise_scale)) throw ContractError("RegimeSpec: noise_scale must be >= 0");
    if (!(feature_fraction > 0.0 && feature_fraction <= 1.0)) {
      throw ContractError("RegimeSpec: feature_fraction must lie in (0, 1]");
    }
    if (max_switches < 1) throw ContractError("RegimeSpec: max_switches must be >= 1");
  }
};

struct GeneratedSet {
  std::vector<EmbeddingStack> samples;
  // active[i][t]: sample i's class regime is on at step t (informative layers only).
  std::vector<std::vector<bool>> active;
  // Feature dimensions each class regime touches.
  std::vector<std::vector<bool>> class_features;
};

// Switch points uniform over [T/4, 3T/4], 1..max_switches of them; the
// starting state is a fair coin. Returns per-step activity.
inline std::vector<bool> sample_regime_mask(std::size_t steps, std::size_t max_switches, Rng& rng) {
  const std::size_t lo = steps / 4;
  const std::size_t hi = std::max(lo, (3 * steps) / 4);
  const std::size_t n = 1 + static_cast<std::size_t>(rng.below(max_switches));
  std::vector<std::size_t> cuts;
  for (std::size_t i = 0; i < n; ++i) cuts.push_back(lo + static_cast<std::size_t>(rng.below(hi - lo + 1)));
  std::sort(cuts.begin(), cuts.end());
  cuts.erase(std::unique(cuts.begin(), cuts.end()), cuts.end());
  bool on = rng.below(2) == 1;
  std::vector<bool> mask(steps);
  std::size_t next = 0;
  for (std::size_t t = 0; t < steps; ++t) {
    while (next < cuts.size() && cuts[next] == t) {
      on = !on;
      ++next;
    }
    mask[t] = on;
  }
  return mask;
}

inline GeneratedSet generate_with_regimes(const RegimeSpec& spec) {
  spec.validate();
  const Rng root(spec.seed);
  GeneratedSet set;

  // Class feature subsets come from a stream separate from the samples.
  Rng feat_rng = root.fork(0xFEA7);
  const std::size_t active_dims =
      std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(spec.feature_fraction * spec.dim)));
  for (std::size_t c = 0; c < spec.num_classes; ++c) {
    std::vector<std::size_t> perm(spec.dim);
    for (std::size_t j = 0; j < spec.dim; ++j) perm[j] = j;
    for (std::size_t j = spec.dim; j-- > 1;) std::swap(perm[j], perm[feat_rng.below(j + 1)]);
    std::vector<bool> on(spec.dim, false);
    for (std::size_t j = 0; j < active_dims; ++j) on[perm[j]] = true;
    set.class_features.push_back(std::move(on));
  }

  std::vector<bool> informative(spec.layers, false);
  for (std::size_t l : spec.informative_layers) informative[l] = true;

  for (std::size_t i = 0; i < spec.num_samples; ++i) {
    Rng rng = root.fork(i + 1);
    const auto c = static_cast<std::uint32_t>(i % spec.num_classes);
    EmbeddingStack s{spec.layers, spec.steps, spec.dim, std::vector<float>(spec.layers * spec.steps * spec.dim), c,
                     static_cast<std::uint32_t>(i)};
    std::vector<bool> mask = sample_regime_mask(spec.steps, spec.max_switches, rng);
    const double mu = spec.shift(c), sigma = spec.mult(c);
    const auto& feats = set.class_features[c];
    for (std::size_t l = 0; l < spec.layers; ++l) {
      for (std::size_t t = 0; t < spec.steps; ++t) {
        for (std::size_t j = 0; j < spec.dim; ++j) {
          const double z = spec.noise_scale * rng.normal();
          const bool regime = informative[l] && mask[t] && feats[j];
          s.at(l, t, j) = static_cast<float>(regime ? mu + sigma * z : z);
        }
      }
    }
    set.samples.push_back(std::move(s));
    set.active.push_back(std::move(mask));
  }
  return set;
}

inline std::vector<EmbeddingStack> generate(const RegimeSpec& spec) { return generate_with_regimes(spec).samples; }

// ============================================================================
// GAEB binary format
// ============================================================================
//
//   offset  size  field
//   0       4     magic "GAEB"
//   4       2     version (u16) = 1
//   6       16    num_samples, N, T, d (u32 each)
//   22      8     label table offset (u64)
//   30      ...   payload: num_samples * N * T * d float32
//   label   4*S   labels (u32)
// All integers and floats little-endian.

inline constexpr char kEmbeddingMagic[4] = {'G', 'A', 'E', 'B'};
inline constexpr std::uint16_t kEmbeddingVersion = 1;
inline constexpr std::size_t kEmbeddingHeaderSize = 30;

struct EmbeddingFileHeader {
  std::uint16_t version = kEmbeddingVersion;
  std::uint32_t num_samples = 0;
  std::uint32_t layers = 0;
  std::uint32_t steps = 0;
  std::uint32_t dim = 0;
  std::uint64_t label_offset = 0;
};

namespace detail {

template <typename U>
void put_le(std::string& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xFF));
}

template <typename U>
U get_le(const std::string& in, std::size_t pos) {
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  return static_cast<U>(v);
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "' for reading");
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write to '" + path + "' failed");
}

}  // namespace detail

inline std::string encode_embeddings(const std::vector<EmbeddingStack>& samples) {
  if (samples.empty()) throw ContractError("write_embeddings: no samples");
  const EmbeddingStack& first = samples.front();
  for (const auto& s : samples) {
    s.validate();
    if (s.layers != first.layers || s.steps != first.steps || s.dim != first.dim) {
      throw DimensionError("write_embeddings: samples disagree on (N, T, d)");
    }
  }
  const std::uint64_t payload = static_cast<std::uint64_t>(samples.size()) * first.values.size() * 4;
  std::string out;
  out.reserve(kEmbeddingHeaderSize + payload + 4 * samples.size());
  out.append(kEmbeddingMagic, 4);
  detail::put_le<std::uint16_t>(out, kEmbeddingVersion);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(samples.size()));
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(first.layers));
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(first.steps));
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(first.dim));
  detail::put_le<std::uint64_t>(out, kEmbeddingHeaderSize + payload);
  for (const auto& s : samples) {
    for (float v : s.values) detail::put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(v));
  }
  for (const auto& s : samples) detail::put_le<std::uint32_t>(out, s.label);
  return out;
}

inline EmbeddingFileHeader decode_embedding_header(const std::string& bytes) {
  if (bytes.size() < 4 || !std::equal(kEmbeddingMagic, kEmbeddingMagic + 4, bytes.begin())) {
    throw FormatError("embedding file: bad magic (expected \"GAEB\")", 0);
  }
  if (bytes.size() < kEmbeddingHeaderSize) {
    throw FormatError("embedding file: truncated header", bytes.size());
  }
  EmbeddingFileHeader h;
  h.version = detail::get_le<std::uint16_t>(bytes, 4);
  if (h.version != kEmbeddingVersion) {
    throw FormatError("embedding file: unsupported version " + std::to_string(h.version), 4);
  }
  h.num_samples = detail::get_le<std::uint32_t>(bytes, 6);
  h.layers = detail::get_le<std::uint32_t>(bytes, 10);
  h.steps = detail::get_le<std::uint32_t>(bytes, 14);
  h.dim = detail::get_le<std::uint32_t>(bytes, 18);
  h.label_offset = detail::get_le<std::uint64_t>(bytes, 22);
  if (h.num_samples == 0 || h.layers == 0 || h.steps == 0 || h.dim == 0) {
    throw FormatError("embedding file: zero count in header", 6);
  }
  const std::uint64_t payload = static_cast<std::uint64_t>(h.num_samples) * h.layers * h.steps * h.dim * 4;
  if (h.label_offset != kEmbeddingHeaderSize + payload) {
    throw FormatError("embedding file: label table offset disagrees with header counts", 22);
  }
  return h;
}

inline std::vector<EmbeddingStack> decode_embeddings(const std::string& bytes) {
  const EmbeddingFileHeader h = decode_embedding_header(bytes);
  const std::uint64_t expected = h.label_offset + 4ULL * h.num_samples;
  if (bytes.size() < expected) {
    throw FormatError("embedding file: truncated, expected " + std::to_string(expected) + " bytes but file has " +
                          std::to_string(bytes.size()),
                      bytes.size());
  }
  if (bytes.size() > expected) throw FormatError("embedding file: trailing bytes after label table", expected);
  const std::size_t per = static_cast<std::size_t>(h.layers) * h.steps * h.dim;
  std::vector<EmbeddingStack> out(h.num_samples);
  std::size_t pos = kEmbeddingHeaderSize;
  for (std::uint32_t i = 0; i < h.num_samples; ++i) {
    EmbeddingStack& s = out[i];
    s.layers = h.layers;
    s.steps = h.steps;
    s.dim = h.dim;
    s.source_id = i;
    s.values.resize(per);
    for (std::size_t k = 0; k < per; ++k, pos += 4) {
      s.values[k] = std::bit_cast<float>(detail::get_le<std::uint32_t>(bytes, pos));
      if (!std::isfinite(s.values[k])) throw FormatError("embedding file: non-finite value", pos);
    }
  }
  for (std::uint32_t i = 0; i < h.num_samples; ++i, pos += 4) out[i].label = detail::get_le<std::uint32_t>(bytes, pos);
  return out;
}

inline void write_embeddings(const std::vector<EmbeddingStack>& samples, const std::string& path) {
  detail::write_file(path, encode_embeddings(samples));
}

inline std::vector<EmbeddingStack> read_embeddings(const std::string& path) {
  return decode_embeddings(detail::read_file(path));
}

// Optional `sample_id,label` sidecar.
inline void write_label_sidecar(const std::vector<EmbeddingStack>& samples, const std::string& path) {
  std::string out = "sample_id,label\n";
  for (const auto& s : samples) out += std::to_string(s.source_id) + "," + std::to_string(s.label) + "\n";
  detail::write_file(path, out);
}

// ============================================================================
// Stratified split
// ============================================================================

// Each class keeps round(fraction * n_c) samples for training (at least one
// on each side). Both halves keep the input order.
inline std::pair<std::vector<EmbeddingStack>, std::vector<EmbeddingStack>> split(
    const std::vector<EmbeddingStack>& samples, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction < 1.0)) throw ContractError("split: fraction must lie in (0, 1)");
  std::map<std::uint32_t, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < samples.size(); ++i) by_class[samples[i].label].push_back(i);
  std::vector<bool> to_train(samples.size(), false);
  const Rng root(seed);
  for (auto& [label, idx] : by_class) {
    if (idx.size() < 2) {
      throw ContractError("split: class " + std::to_string(label) + " has fewer than 2 samples");
    }
    Rng rng = root.fork(label);
    for (std::size_t j = idx.size(); j-- > 1;) std::swap(idx[j], idx[rng.below(j + 1)]);
    auto n_train = static_cast<std::size_t>(std::lround(fraction * static_cast<double>(idx.size())));
    n_train = std::clamp<std::size_t>(n_train, 1, idx.size() - 1);
    for (std::size_t j = 0; j < n_train; ++j) to_train[idx[j]] = true;
  }
  std::pair<std::vector<EmbeddingStack>, std::vector<EmbeddingStack>> out;
  for (std::size_t i = 0; i < samples.size(); ++i) (to_train[i] ? out.first : out.second).push_back(samples[i]);
  return out;
}

// Keeps only the listed encoder layers, in the given order.
inline std::vector<EmbeddingStack> select_layer_rows(const std::vector<EmbeddingStack>& samples,
                                                     const std::vector<std::size_t>& layers) {
  std::vector<EmbeddingStack> out;
  out.reserve(samples.size());
  for (const auto& s : samples) {
    EmbeddingStack r{layers.size(), s.steps, s.dim, {}, s.label, s.source_id};
    r.values.reserve(layers.size() * s.steps * s.dim);
    for (std::size_t l : layers) {
      if (l >= s.layers) throw ContractError("select_layer_rows: layer " + std::to_string(l) + " out of range");
      const auto begin = s.values.begin() + static_cast<std::ptrdiff_t>(l * s.steps * s.dim);
      r.values.insert(r.values.end(), begin, begin + static_cast<std::ptrdiff_t>(s.steps * s.dim));
    }
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace gaam

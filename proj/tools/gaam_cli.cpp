// gaam: generate data, train and evaluate decoders, export IF heatmaps, run ablations.
//
// Exit codes: 0 ok, 2 configuration, 3 I/O or file format, 4 numeric failure.
#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "gaam/gaam.hpp"

namespace {

using namespace gaam;
using Real = double;

enum Exit { kOk = 0, kConfig = 2, kIo = 3, kNumeric = 4 };

int guarded(const std::function<void()>& body) {
  try {
    body();
    return kOk;
  } catch (const TrainingDiverged& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kNumeric;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numeric error: %s\n", e.what());
    return kNumeric;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kConfig;
  } catch (const DimensionError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kConfig;
  } catch (const ContractError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kConfig;
  } catch (const FormatError& e) {
    std::fprintf(stderr, "format error: %s\n", e.what());
    return kIo;
  } catch (const IoError& e) {
    std::fprintf(stderr, "i/o error: %s\n", e.what());
    return kIo;
  }
}

void print_histogram(const std::vector<EmbeddingStack>& samples) {
  std::map<std::uint32_t, std::size_t> hist;
  for (const auto& s : samples) ++hist[s.label];
  std::printf("class histogram:");
  for (const auto& [c, n] : hist) std::printf(" %u:%zu", c, n);
  std::printf("\n");
}

// Data must match the model's (N, d) and label range.
void check_data(const std::vector<EmbeddingStack>& data, const DecoderConfig& d, const std::string& what) {
  if (data.empty()) throw ConfigError(what + " holds no samples");
  const auto& s = data.front();
  if (s.layers != d.layers || s.dim != d.dim) {
    throw ConfigError(what + " has N=" + std::to_string(s.layers) + ", d=" + std::to_string(s.dim) +
                      " but the model expects N=" + std::to_string(d.layers) + ", d=" + std::to_string(d.dim));
  }
  for (const auto& x : data) {
    if (x.label >= d.num_classes) {
      throw ConfigError(what + ": label " + std::to_string(x.label) + " is outside the model's " +
                        std::to_string(d.num_classes) + " classes");
    }
  }
}

void print_banner(const GatDecoder<Real>& m) {
  const DecoderConfig& c = m.config();
  std::printf("attention=%s N=%zu d=%zu classes=%zu\n", to_string(c.attention), c.layers, c.dim, c.num_classes);
  std::printf("attention params: %zu  GAAM params: %zu  total params: %zu\n", m.attention_param_count(),
              m.gaam_param_count(), m.params().num_scalars());
}

std::vector<EpochMetrics> run_training(GatDecoder<Real>& model, const std::vector<EmbeddingStack>& train_set,
                                       const std::vector<EmbeddingStack>& val_set, const TrainConfig& t, bool verbose) {
  const auto tr = PooledSet<Real>::from(train_set);
  const auto va = PooledSet<Real>::from(val_set);
  const auto t0 = std::chrono::steady_clock::now();
  auto history = fit(model, tr, va, t);
  if (verbose) {
    for (const auto& e : history) {
      std::printf("epoch %3zu  loss %.6f  val_acc %.4f\n", e.epoch, e.train_loss, e.val_accuracy);
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("trained %zu epochs in %.1f s\n", t.epochs, secs);
  }
  return history;
}

std::vector<double> contributions_on(const GatDecoder<Real>& model, const std::vector<EmbeddingStack>& data,
                                     AttentionMap* avg_out = nullptr) {
  const EvalResult r = evaluate(model, data, true);
  if (r.maps.empty()) {
    throw ConfigError(std::string("attention kind ") + to_string(model.config().attention) +
                      " produces no Gaussian attention map");
  }
  AttentionMap avg = average_maps(r.maps);
  const IfMap m = importance_factor(avg);
  if (avg_out) *avg_out = std::move(avg);
  return layer_contribution(m);
}

std::string join_indices(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Gaussian adaptive attention decoders: data, training, evaluation and IF analysis"};
  app.require_subcommand(1);

  std::string spec_path, config_path, data_path, out_path, ckpt_path, metrics_path, pred_path, maps_path,
      labels_path, format = "csv", mode = "both";
  std::size_t k = 1;
  double val_fraction = 0.2;

  auto* gen = app.add_subcommand("generate", "Generate a synthetic regime-switching dataset (GAEB)");
  gen->add_option("--spec", spec_path, "Run config with the dataset keys")->required();
  gen->add_option("--out", out_path, "Output GAEB file")->required();
  gen->add_option("--labels", labels_path, "Also write a sample_id,label CSV");

  auto* train = app.add_subcommand("train", "Train a decoder and write a checkpoint plus metrics CSV");
  train->add_option("--config", config_path, "Run config")->required();
  train->add_option("--data", data_path, "GAEB dataset")->required();
  train->add_option("--out", out_path, "Checkpoint path")->required();
  train->add_option("--metrics", metrics_path, "Metrics CSV (default: <out>.metrics.csv)");

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
  eval->add_option("--checkpoint", ckpt_path)->required();
  eval->add_option("--data", data_path)->required();
  eval->add_option("--predictions", pred_path, "Write sample_id,label,prediction CSV");
  eval->add_option("--maps", maps_path, "Write the averaged attention map as CSV");

  auto* heat = app.add_subcommand("heatmap", "Export importance-factor heatmaps");
  heat->add_option("--checkpoint", ckpt_path)->required();
  heat->add_option("--data", data_path)->required();
  heat->add_option("--out", out_path, "Output prefix")->required();
  heat->add_option("--format", format)->check(CLI::IsMember({"csv", "pgm"}));

  auto* ablate = app.add_subcommand("ablate", "Retrain on the k highest- or lowest-IF layers");
  ablate->add_option("--checkpoint", ckpt_path)->required();
  ablate->add_option("--data", data_path)->required();
  ablate->add_option("--k", k)->required();
  ablate->add_option("--mode", mode)->check(CLI::IsMember({"high", "low", "both"}));
  ablate->add_option("--val-fraction", val_fraction);

  auto* pc = app.add_subcommand("paramcount", "Attention parameter counts for a config");
  pc->add_option("--config", config_path)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  if (*gen) {
    return guarded([&] {
      const RunConfig rc = load_run_config(spec_path);
      rc.require({"num_samples", "N", "T", "d", "num_classes", "seed"});
      const auto samples = generate(rc.regime);
      write_embeddings(samples, out_path);
      if (!labels_path.empty()) write_label_sidecar(samples, labels_path);
      std::printf("wrote %zu samples (N=%zu, T=%zu, d=%zu) to %s\n", samples.size(), rc.regime.layers,
                  rc.regime.steps, rc.regime.dim, out_path.c_str());
      print_histogram(samples);
    });
  }

  if (*train) {
    return guarded([&] {
      const RunConfig rc = load_run_config(config_path);
      const auto data = read_embeddings(data_path);
      check_data(data, rc.decoder, "dataset '" + data_path + "'");
      const auto [tr, va] = split(data, 1.0 - rc.val_fraction, rc.train.seed);
      GatDecoder<Real> model(rc.decoder, rc.train.seed);
      print_banner(model);
      std::printf("train %zu / val %zu samples, %zu epochs, lr %g, loss %s\n", tr.size(), va.size(), rc.train.epochs,
                  rc.train.lr, to_string(rc.train.loss));
      const auto history = run_training(model, tr, va, rc.train, true);
      save_checkpoint(model, rc.train, out_path);
      const std::string mpath = metrics_path.empty() ? out_path + ".metrics.csv" : metrics_path;
      write_metrics_csv(history, mpath);
      std::printf("checkpoint: %s\nmetrics: %s\n", out_path.c_str(), mpath.c_str());
    });
  }

  if (*eval) {
    return guarded([&] {
      const auto loaded = load_checkpoint<Real>(ckpt_path);
      const auto data = read_embeddings(data_path);
      check_data(data, loaded.model.config(), "dataset '" + data_path + "'");
      const EvalResult r = evaluate(loaded.model, data, !maps_path.empty());
      std::size_t hits = 0;
      for (std::size_t i = 0; i < data.size(); ++i) hits += r.predictions[i] == data[i].label;
      std::printf("accuracy %.6f (%zu/%zu)\n", r.accuracy, hits, data.size());
      if (!pred_path.empty()) {
        std::string csv = "sample_id,label,prediction\n";
        for (std::size_t i = 0; i < data.size(); ++i) {
          csv += std::to_string(data[i].source_id) + "," + std::to_string(data[i].label) + "," +
                 std::to_string(r.predictions[i]) + "\n";
        }
        detail::write_file(pred_path, csv);
      }
      if (!maps_path.empty()) {
        if (r.maps.empty()) {
          throw ConfigError(std::string("attention kind ") + to_string(loaded.model.config().attention) +
                            " produces no Gaussian attention map");
        }
        const AttentionMap avg = average_maps(r.maps);
        std::string csv = "row,feature,weight\n";
        char buf[96];
        for (std::size_t i = 0; i < avg.weights.shape()[0]; ++i) {
          for (std::size_t j = 0; j < avg.weights.shape()[1]; ++j) {
            std::snprintf(buf, sizeof buf, "%zu,%zu,%.9g\n", i, j, avg.weights.at(i, j));
            csv += buf;
          }
        }
        detail::write_file(maps_path, csv);
      }
    });
  }

  if (*heat) {
    return guarded([&] {
      const HeatmapFormat fmt = parse_heatmap_format(format);
      const auto loaded = load_checkpoint<Real>(ckpt_path);
      const auto data = read_embeddings(data_path);
      check_data(data, loaded.model.config(), "dataset '" + data_path + "'");
      AttentionMap avg;
      const auto contrib = contributions_on(loaded.model, data, &avg);
      const IfMap m = importance_factor(avg);
      const std::string path = out_path + (fmt == HeatmapFormat::kCsv ? ".csv" : ".pgm");
      export_heatmap(m, path, fmt);
      std::string layers = "layer,contribution\n";
      char buf[64];
      std::printf("layer  IF contribution (%%)\n");
      for (std::size_t l = 0; l < contrib.size(); ++l) {
        std::snprintf(buf, sizeof buf, "%zu,%.6f\n", l, contrib[l]);
        layers += buf;
        std::printf("%5zu  %.3f\n", l, contrib[l]);
      }
      detail::write_file(out_path + ".layers.csv", layers);
      if (m.degenerate) std::printf("warning: attention map is constant; IF is all zeros\n");
      std::printf("heatmap: %s\nlayer contributions: %s.layers.csv\n", path.c_str(), out_path.c_str());
    });
  }

  if (*ablate) {
    return guarded([&] {
      if (!(val_fraction > 0.0 && val_fraction < 1.0)) throw ConfigError("--val-fraction must lie in (0, 1)");
      const auto loaded = load_checkpoint<Real>(ckpt_path);
      const DecoderConfig& base = loaded.model.config();
      if (k < 1 || k > base.layers) {
        throw ConfigError("--k must lie in [1, " + std::to_string(base.layers) + "], got " + std::to_string(k));
      }
      const auto data = read_embeddings(data_path);
      check_data(data, base, "dataset '" + data_path + "'");
      const auto contrib = contributions_on(loaded.model, data);
      std::vector<std::pair<std::string, SelectMode>> runs;
      if (mode != "low") runs.emplace_back("high", SelectMode::kHighest);
      if (mode != "high") runs.emplace_back("low", SelectMode::kLowest);
      std::printf("mode  layers  val_accuracy\n");
      for (const auto& [name, sm] : runs) {
        const auto layers = select_layers(contrib, k, sm);
        const auto subset = select_layer_rows(data, layers);
        const auto [tr, va] = split(subset, 1.0 - val_fraction, loaded.train.seed);
        DecoderConfig cfg = base;
        cfg.layers = k;
        GatDecoder<Real> model(cfg, loaded.train.seed);
        const auto history = run_training(model, tr, va, loaded.train, false);
        std::printf("%-4s  %-6s  %.4f\n", name.c_str(), join_indices(layers).c_str(), history.back().val_accuracy);
      }
    });
  }

  if (*pc) {
    return guarded([&] {
      const RunConfig rc = load_run_config(config_path);
      MechanismDescriptor m = rc.decoder.descriptor();
      std::printf("d=%zu g=%zu num_gaussians=%zu block_layers=%zu q_heads=%zu kv_heads=%zu\n", m.model_dim,
                  m.gaam_heads, m.num_gaussians, m.block_layers, m.query_heads, m.kv_heads);
      std::printf("%-16s %12s\n", "attention", "params");
      std::size_t gqa = 0, gqgaam = 0;
      for (AttentionKind kind : {AttentionKind::kMha, AttentionKind::kGaamV1, AttentionKind::kGaamV2,
                                 AttentionKind::kGqa, AttentionKind::kGqgaam, AttentionKind::kMixture,
                                 AttentionKind::kGaussianBlock, AttentionKind::kGct}) {
        m.kind = kind;
        const std::size_t n = param_count(m);
        if (kind == AttentionKind::kGqa) gqa = n;
        if (kind == AttentionKind::kGqgaam) gqgaam = n;
        std::printf("%-16s %12zu%s\n", to_string(kind), n, kind == rc.decoder.attention ? "  *" : "");
      }
      std::printf("%-16s %12zu\n", "gqgaam-gqa", gqgaam - gqa);
    });
  }
  return kOk;
}

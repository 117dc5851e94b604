// Runs the gaam binary as a subprocess and checks exit codes, output files and printed reports.
#include <sys/wait.h>

#include <chrono>
#include <fstream>
#include <iterator>
#include <sstream>

#include "test_util.hpp"

using namespace gaam;
using namespace gaam::testing;

namespace {

struct Result {
  int code;
  std::string out;
  std::string err;
};

class Cli : public ::testing::Test {
 protected:
  TempDir dir;

  std::string f(const std::string& name) const { return dir.file(name); }

  Result run(const std::string& args) const {
    const std::string cmd = std::string("'") + GAAM_CLI_PATH + "' " + args + " > '" + f("stdout") + "' 2> '" +
                            f("stderr") + "'";
    const int status = std::system(cmd.c_str());
    Result r{WIFEXITED(status) ? WEXITSTATUS(status) : -1, "", ""};
    r.out = detail::read_file(f("stdout"));
    r.err = detail::read_file(f("stderr"));
    return r;
  }

  void write(const std::string& name, const std::string& text) const { detail::write_file(f(name), text); }

  // Small dataset plus a run config that trains on it quickly.
  void tiny_setup(const std::string& extra = "") const {
    write("run.cfg",
          "num_samples = 60\nN = 4\nT = 8\nd = 16\nnum_classes = 3\nseed = 5\ninformative_layers = 2\n"
          "g = 2\nconv_channels = 4\nepochs = 2\nlr = 1e-3\nbatch_size = 8\n" + extra);
    ASSERT_EQ(run("generate --spec " + f("run.cfg") + " --out " + f("data.gaeb")).code, 0);
  }

  void tiny_train(const std::string& ckpt = "model.ckpt") const {
    const Result r = run("train --config " + f("run.cfg") + " --data " + f("data.gaeb") + " --out " + f(ckpt));
    ASSERT_EQ(r.code, 0) << r.err;
  }
};

std::vector<std::vector<std::string>> csv_rows(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(text);
  std::string line;
  std::getline(in, line);  // header
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::istringstream ls(line);
    std::string c;
    while (std::getline(ls, c, ',')) cells.push_back(c);
    rows.push_back(cells);
  }
  return rows;
}

double number_after(const std::string& text, const std::string& key) {
  const auto p = text.find(key);
  if (p == std::string::npos) return -1;
  return std::stod(text.substr(p + key.size()));
}

}  // namespace

TEST_F(Cli, NoSubcommandIsConfigError) {
  EXPECT_EQ(run("").code, 2);
  EXPECT_EQ(run("frobnicate").code, 2);
  EXPECT_EQ(run("--help").code, 0);
}

TEST_F(Cli, GenerateWritesHeaderCountsAndHistogram) {
  write("spec.cfg", "num_samples = 12\nN = 3\nT = 5\nd = 4\nnum_classes = 3\nseed = 1\ninformative_layers = 1\n");
  const Result r = run("generate --spec " + f("spec.cfg") + " --out " + f("d.gaeb") + " --labels " + f("l.csv"));
  ASSERT_EQ(r.code, 0) << r.err;
  const auto data = read_embeddings(f("d.gaeb"));
  ASSERT_EQ(data.size(), 12u);
  EXPECT_EQ(data[0].layers, 3u);
  EXPECT_EQ(data[0].steps, 5u);
  EXPECT_EQ(data[0].dim, 4u);
  EXPECT_NE(r.out.find("12 samples"), std::string::npos);
  EXPECT_NE(r.out.find("0:4 1:4 2:4"), std::string::npos);
  EXPECT_EQ(csv_rows(detail::read_file(f("l.csv"))).size(), 12u);
}

TEST_F(Cli, GenerateIsBitwiseDeterministic) {
  write("spec.cfg", "num_samples = 20\nN = 4\nT = 16\nd = 8\nnum_classes = 4\nseed = 9\n");
  ASSERT_EQ(run("generate --spec " + f("spec.cfg") + " --out " + f("a.gaeb")).code, 0);
  ASSERT_EQ(run("generate --spec " + f("spec.cfg") + " --out " + f("b.gaeb")).code, 0);
  EXPECT_EQ(detail::read_file(f("a.gaeb")), detail::read_file(f("b.gaeb")));
}

TEST_F(Cli, GenerateMissingKeyNamesItAndWritesNothing) {
  write("spec.cfg", "N = 4\nT = 16\nd = 8\nnum_classes = 4\nseed = 9\n");
  const Result r = run("generate --spec " + f("spec.cfg") + " --out " + f("a.gaeb"));
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("num_samples"), std::string::npos);
  EXPECT_FALSE(std::filesystem::exists(f("a.gaeb")));
}

TEST_F(Cli, MissingInputIsIoError) {
  EXPECT_EQ(run("generate --spec " + f("absent.cfg") + " --out " + f("a.gaeb")).code, 3);
  tiny_setup();
  EXPECT_EQ(run("train --config " + f("run.cfg") + " --data " + f("absent.gaeb") + " --out " + f("m")).code, 3);
  write("junk.gaeb", "not a dataset at all, just text");
  EXPECT_EQ(run("train --config " + f("run.cfg") + " --data " + f("junk.gaeb") + " --out " + f("m")).code, 3);
  EXPECT_FALSE(std::filesystem::exists(f("m")));
}

TEST_F(Cli, TrainSmokeRunOnTwoHundredSamples) {
  write("run.cfg",
        "num_samples = 200\nN = 4\nT = 8\nd = 16\nnum_classes = 4\nseed = 3\ninformative_layers = 1\n"
        "conv_channels = 8\nepochs = 1\n");
  ASSERT_EQ(run("generate --spec " + f("run.cfg") + " --out " + f("data.gaeb")).code, 0);
  const auto t0 = std::chrono::steady_clock::now();
  const Result r = run("train --config " + f("run.cfg") + " --data " + f("data.gaeb") + " --out " + f("m.ckpt"));
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_LT(secs, 60.0);
  EXPECT_TRUE(std::filesystem::exists(f("m.ckpt")));
  const auto rows = csv_rows(detail::read_file(f("m.ckpt.metrics.csv")));
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_EQ(rows[0][0], "1");
}

TEST_F(Cli, TrainIsBytewiseReproducible) {
  tiny_setup();
  tiny_train("a.ckpt");
  tiny_train("b.ckpt");
  EXPECT_EQ(detail::read_file(f("a.ckpt.metrics.csv")), detail::read_file(f("b.ckpt.metrics.csv")));
  EXPECT_EQ(detail::read_file(f("a.ckpt")), detail::read_file(f("b.ckpt")));
}

TEST_F(Cli, TrainBannerReportsGaamParams) {
  write("run.cfg",
        "num_samples = 16\nN = 2\nT = 4\nd = 64\nnum_classes = 2\nseed = 1\ninformative_layers = 0\n"
        "attention = gaam_v2\nconv_channels = 2\nepochs = 1\n");
  ASSERT_EQ(run("generate --spec " + f("run.cfg") + " --out " + f("data.gaeb")).code, 0);
  const Result r = run("train --config " + f("run.cfg") + " --data " + f("data.gaeb") + " --out " + f("m.ckpt"));
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("GAAM params: 128"), std::string::npos) << r.out;
}

TEST_F(Cli, TrainConfigErrorsLeaveNoFiles) {
  tiny_setup();
  write("bad.cfg", "N = 4\nd = 16\nnum_classes = 3\nlr = 0\n");
  EXPECT_EQ(run("train --config " + f("bad.cfg") + " --data " + f("data.gaeb") + " --out " + f("m.ckpt")).code, 2);
  write("bad.cfg", "N = 4\nd = 16\nnum_classes = 3\nwidth = 3\n");
  EXPECT_EQ(run("train --config " + f("bad.cfg") + " --data " + f("data.gaeb") + " --out " + f("m.ckpt")).code, 2);
  // Dataset has 3 classes; a 2-class model cannot hold its labels.
  write("bad.cfg", "N = 4\nd = 16\nnum_classes = 2\nconv_channels = 4\n");
  const Result r = run("train --config " + f("bad.cfg") + " --data " + f("data.gaeb") + " --out " + f("m.ckpt"));
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("label 2"), std::string::npos);
  EXPECT_FALSE(std::filesystem::exists(f("m.ckpt")));
  EXPECT_FALSE(std::filesystem::exists(f("m.ckpt.metrics.csv")));
}

TEST_F(Cli, EvalAccuracyMatchesPredictionRecount) {
  tiny_setup();
  tiny_train();
  const Result r = run("eval --checkpoint " + f("model.ckpt") + " --data " + f("data.gaeb") + " --predictions " +
                    f("pred.csv") + " --maps " + f("maps.csv"));
  ASSERT_EQ(r.code, 0) << r.err;
  const double acc = number_after(r.out, "accuracy ");
  EXPECT_GE(acc, 0.0);
  EXPECT_LE(acc, 1.0);
  const auto rows = csv_rows(detail::read_file(f("pred.csv")));
  ASSERT_EQ(rows.size(), 60u);
  std::size_t hits = 0;
  for (const auto& row : rows) hits += row[1] == row[2];
  EXPECT_NEAR(acc, static_cast<double>(hits) / 60.0, 1e-6);
  // Stacked-rows map for N=4, g=2: 8 rows x 16 features.
  EXPECT_EQ(csv_rows(detail::read_file(f("maps.csv"))).size(), 128u);
}

TEST_F(Cli, EvalWrongDimsNamesMismatch) {
  tiny_setup();
  tiny_train();
  write("other.cfg", "num_samples = 6\nN = 4\nT = 8\nd = 12\nnum_classes = 3\nseed = 1\n");
  ASSERT_EQ(run("generate --spec " + f("other.cfg") + " --out " + f("other.gaeb")).code, 0);
  const Result r = run("eval --checkpoint " + f("model.ckpt") + " --data " + f("other.gaeb"));
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("d=12"), std::string::npos) << r.err;
  EXPECT_NE(r.err.find("d=16"), std::string::npos) << r.err;
}

TEST_F(Cli, HeatmapWritesCsvAndPgm) {
  tiny_setup();
  tiny_train();
  ASSERT_EQ(run("heatmap --checkpoint " + f("model.ckpt") + " --data " + f("data.gaeb") + " --out " + f("h")).code,
            0);
  const IfMap m = read_heatmap_csv(f("h.csv"));
  EXPECT_EQ(m.values.shape(), (Shape{8, 16}));
  const auto layers = csv_rows(detail::read_file(f("h.layers.csv")));
  ASSERT_EQ(layers.size(), 4u);
  double total = 0;
  for (const auto& row : layers) total += std::stod(row[1]);
  EXPECT_NEAR(total, 100.0, 1e-4);

  ASSERT_EQ(run("heatmap --checkpoint " + f("model.ckpt") + " --data " + f("data.gaeb") + " --out " + f("p") +
                " --format pgm")
                .code,
            0);
  const std::string pgm = detail::read_file(f("p.pgm"));
  ASSERT_EQ(pgm.substr(0, 12), "P2\n16 8\n255\n");
  std::istringstream px(pgm.substr(12));
  std::vector<int> levels{std::istream_iterator<int>(px), std::istream_iterator<int>()};
  ASSERT_EQ(levels.size(), 128u);
  EXPECT_EQ(*std::min_element(levels.begin(), levels.end()), 0);
  EXPECT_EQ(*std::max_element(levels.begin(), levels.end()), 255);
  EXPECT_EQ(run("heatmap --checkpoint " + f("model.ckpt") + " --data " + f("data.gaeb") + " --out " + f("q") +
                " --format png")
                .code,
            2);
}

TEST_F(Cli, HeatmapNeedsGaussianMap) {
  tiny_setup("attention = mha\nmha_heads = 4\n");
  tiny_train();
  const Result r = run("heatmap --checkpoint " + f("model.ckpt") + " --data " + f("data.gaeb") + " --out " + f("h"));
  EXPECT_EQ(r.code, 2);
  EXPECT_FALSE(std::filesystem::exists(f("h.csv")));
}

TEST_F(Cli, AblateRejectsBadK) {
  tiny_setup();
  tiny_train();
  const std::string base = "ablate --checkpoint " + f("model.ckpt") + " --data " + f("data.gaeb");
  EXPECT_EQ(run(base + " --k 5").code, 2);
  EXPECT_EQ(run(base + " --k 0").code, 2);
  EXPECT_EQ(run(base + " --k 1 --mode sideways").code, 2);
}

TEST_F(Cli, AblateReportsSelectedLayers) {
  tiny_setup();
  tiny_train();
  ASSERT_EQ(run("heatmap --checkpoint " + f("model.ckpt") + " --data " + f("data.gaeb") + " --out " + f("h")).code,
            0);
  std::vector<double> contrib;
  for (const auto& row : csv_rows(detail::read_file(f("h.layers.csv")))) contrib.push_back(std::stod(row[1]));
  const auto hi = select_layers(contrib, 2, SelectMode::kHighest);
  const auto lo = select_layers(contrib, 2, SelectMode::kLowest);

  const Result r = run("ablate --checkpoint " + f("model.ckpt") + " --data " + f("data.gaeb") + " --k 2");
  ASSERT_EQ(r.code, 0) << r.err;
  const std::string hi_txt = std::to_string(hi[0]) + "," + std::to_string(hi[1]);
  const std::string lo_txt = std::to_string(lo[0]) + "," + std::to_string(lo[1]);
  EXPECT_NE(r.out.find("high  " + hi_txt), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("low   " + lo_txt), std::string::npos) << r.out;
}

TEST_F(Cli, AblateAllLayersGivesSameAccuracyBothWays) {
  tiny_setup();
  tiny_train();
  const Result r = run("ablate --checkpoint " + f("model.ckpt") + " --data " + f("data.gaeb") + " --k 4");
  ASSERT_EQ(r.code, 0) << r.err;
  std::istringstream in(r.out);
  std::string line;
  std::vector<std::string> acc;
  while (std::getline(in, line)) {
    if (line.rfind("high", 0) == 0 || line.rfind("low", 0) == 0) acc.push_back(line.substr(line.rfind(' ') + 1));
  }
  ASSERT_EQ(acc.size(), 2u);
  EXPECT_EQ(acc[0], acc[1]);
}

TEST_F(Cli, ParamcountTableValues) {
  write("a.cfg", "attention = gaam_v1\ng = 8\nd = 1024\n");
  Result r = run("paramcount --config " + f("a.cfg"));
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(number_after(r.out, "gaam_v1 "), 16384);
  EXPECT_EQ(number_after(r.out, "gqgaam-gqa "), 16384);
  write("b.cfg", "attention = gaam_v2\nd = 5120\n");
  r = run("paramcount --config " + f("b.cfg"));
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(number_after(r.out, "gaam_v2 "), 10240);
  EXPECT_EQ(number_after(r.out, "gaam_v1 "), 81920);
  EXPECT_EQ(number_after(r.out, "gqgaam-gqa "), 81920);
}

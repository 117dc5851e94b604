#include <fstream>

#include "test_util.hpp"

using namespace gaam;
using namespace gaam::testing;

TEST(AverageMaps, ElementwiseMean) {
  const A a = A::matrix({{1, 2}, {3, 4}}), b = A::matrix({{3, 2}, {1, 0}});
  EXPECT_EQ(average_maps({a, b}), A::matrix({{2, 2}, {2, 2}}));
  EXPECT_THROW(average_maps(std::vector<A>{}), ContractError);
  EXPECT_THROW(average_maps({a, A({2, 3})}), ContractError);
}

TEST(AverageMaps, KeepsLayout) {
  AttentionMap m{A({4, 2}, 1.0), "gaam", 2, 2};
  AttentionMap n = m;
  n.weights.fill(0.0);
  const AttentionMap avg = average_maps(std::vector<AttentionMap>{m, n});
  EXPECT_EQ(avg.num_layers, 2u);
  EXPECT_EQ(avg.num_heads, 2u);
  for (double v : avg.weights.storage()) EXPECT_EQ(v, 0.5);
}

TEST(ImportanceFactor, MinMaxHandValues) {
  const IfMap m = importance_factor(A::matrix({{1, 3}, {2, 5}}));
  EXPECT_FALSE(m.degenerate);
  EXPECT_EQ(m.values, A::matrix({{0, 0.5}, {0.25, 1}}));
  EXPECT_EQ(m.num_layers, 2u);
}

TEST(ImportanceFactor, ConstantMapIsDegenerate) {
  const IfMap m = importance_factor(A({3, 4}, 0.7));
  EXPECT_TRUE(m.degenerate);
  for (double v : m.values.storage()) EXPECT_EQ(v, 0.0);
}

TEST(ImportanceFactor, Errors) {
  A bad({2, 2}, 1.0);
  bad[1] = std::numeric_limits<double>::infinity();
  EXPECT_THROW(importance_factor(bad), NumericError);
  EXPECT_THROW(importance_factor(A({6, 2}), 4, 2), DimensionError);
  EXPECT_THROW(importance_factor(A({4})), DimensionError);
}

TEST(LayerContribution, HeadsAveragedPerLayer) {
  // Rows: (layer 0, head 0), (layer 1, head 0), (layer 0, head 1), (layer 1, head 1).
  IfMap m;
  m.values = A::matrix({{1, 1}, {0, 0}, {1, 0}, {0, 1}});
  m.num_layers = 2;
  m.num_heads = 2;
  const auto c = layer_contribution(m);
  EXPECT_DOUBLE_EQ(c[0], 75.0);
  EXPECT_DOUBLE_EQ(c[1], 25.0);
}

TEST(LayerContribution, ZeroMassRejected) {
  IfMap m;
  m.values = A({2, 3}, 0.0);
  m.num_layers = 2;
  EXPECT_THROW(layer_contribution(m), ContractError);
}

TEST(SelectLayers, HighLowAndTies) {
  const std::vector<double> c{10, 30, 30, 5, 25};
  EXPECT_EQ(select_layers(c, 2, SelectMode::kHighest), (std::vector<std::size_t>{1, 2}));
  EXPECT_EQ(select_layers(c, 2, SelectMode::kLowest), (std::vector<std::size_t>{3, 0}));
  EXPECT_EQ(select_layers(c, 0, SelectMode::kLowest), std::vector<std::size_t>{});
  EXPECT_THROW(select_layers(c, 6, SelectMode::kHighest), ContractError);
  auto all_hi = select_layers(c, 5, SelectMode::kHighest), all_lo = select_layers(c, 5, SelectMode::kLowest);
  std::sort(all_hi.begin(), all_hi.end());
  std::sort(all_lo.begin(), all_lo.end());
  EXPECT_EQ(all_hi, all_lo);
}

TEST(SelectLayers, ModeNames) {
  EXPECT_EQ(parse_select_mode("high"), SelectMode::kHighest);
  EXPECT_EQ(parse_select_mode("lowest"), SelectMode::kLowest);
  EXPECT_THROW(parse_select_mode("middle"), ConfigError);
  EXPECT_EQ(parse_heatmap_format("pgm"), HeatmapFormat::kPgm);
  EXPECT_THROW(parse_heatmap_format("png"), ConfigError);
}

TEST(Heatmap, CsvRoundTrip) {
  TempDir dir;
  const IfMap m = importance_factor(random_array({3, 5}, 1));
  export_heatmap(m, dir.file("h.csv"), HeatmapFormat::kCsv);
  const std::string text = detail::read_file(dir.file("h.csv"));
  EXPECT_EQ(text.substr(0, text.find('\n')), "layer,feature,if");
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 16);
  const IfMap back = read_heatmap_csv(dir.file("h.csv"));
  EXPECT_TRUE(arrays_near(back.values, m.values, 5e-7));
}

TEST(Heatmap, PgmLayout) {
  IfMap m;
  m.values = A::matrix({{0, 0.5, 1}, {1, 0.25, 0}});
  m.num_layers = 2;
  EXPECT_EQ(heatmap_pgm(m), "P2\n3 2\n255\n0 128 255\n255 64 0\n");
}

TEST(Heatmap, UnwritablePathIsIoError) {
  const IfMap m = importance_factor(A::matrix({{0, 1}}));
  EXPECT_THROW(export_heatmap(m, "/nonexistent-dir/x.csv", HeatmapFormat::kCsv), IoError);
  EXPECT_THROW(read_heatmap_csv("/nonexistent-dir/x.csv"), IoError);
}

TEST(Heatmap, MalformedCsvRejected) {
  TempDir dir;
  std::ofstream(dir.file("a.csv")) << "x,y\n";
  EXPECT_THROW(read_heatmap_csv(dir.file("a.csv")), FormatError);
  std::ofstream(dir.file("b.csv")) << "layer,feature,if\n0,0,0.5\n0,1,oops\n";
  EXPECT_THROW(read_heatmap_csv(dir.file("b.csv")), FormatError);
  std::ofstream(dir.file("c.csv")) << "layer,feature,if\n0,0,0.5\n1,1,0.5\n";
  EXPECT_THROW(read_heatmap_csv(dir.file("c.csv")), FormatError);
}

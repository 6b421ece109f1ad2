#include <cmath>
#include <filesystem>
#include <fstream>

#include <gtest/gtest.h>

#include "ilora/analysis.hpp"
#include "ilora/grad_suite.hpp"

using namespace ilora;
namespace fs = std::filesystem;

namespace {

RoutingTrace make_trace(Matrix S, int task) {
  RoutingTrace tr;
  tr.segments = TokenBatch::single_task(Matrix(S.rows(), 1), task).segments;
  tr.task_ids.assign(S.rows(), task);
  tr.S = std::move(S);
  return tr;
}

Matrix random_simplex_rows(std::size_t rows, std::size_t n, Rng& rng) {
  return row_softmax(rng.normal_matrix(rows, n, 0.0, 2.0));
}

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "ilora_analysis_test";
  fs::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST(Similarity, IdenticalHeadsGiveOne) {
  Rng rng(1);
  ILoRALayer l = random_layer(ILoRAConfig{6, 5, 2, 2, 2.0, 0.0}, rng);
  l.B[1] = l.B[0];
  const auto rep = head_similarity({l});
  EXPECT_NEAR(*rep.pairwise[0][1], 1.0, 1e-12);
  EXPECT_NEAR(*rep.mean_offdiag, 1.0, 1e-12);
}

TEST(Similarity, DisjointSupportGivesZero) {
  Rng rng(1);
  ILoRALayer l = random_layer(ILoRAConfig{6, 4, 2, 2, 2.0, 0.0}, rng);
  l.B[0].fill(0.0);
  l.B[1].fill(0.0);
  l.B[0](0, 0) = 3.0;
  l.B[1](2, 1) = -1.5;
  EXPECT_EQ(*head_similarity({l}).pairwise[0][1], 0.0);
}

TEST(Similarity, MatchesDirectFormula) {
  Rng rng(2);
  const ILoRALayer l = random_layer(ILoRAConfig{6, 5, 3, 4, 2.0, 0.0}, rng);
  const auto rep = head_similarity({l});
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_NEAR(*rep.pairwise[i][i], 1.0, 1e-12);
    for (std::size_t j = 0; j < 4; ++j) {
      long double dot = 0, ni = 0, nj = 0;
      for (std::size_t k = 0; k < l.B[i].size(); ++k) {
        dot += (long double)l.B[i][k] * l.B[j][k];
        ni += (long double)l.B[i][k] * l.B[i][k];
        nj += (long double)l.B[j][k] * l.B[j][k];
      }
      EXPECT_NEAR(*rep.pairwise[i][j], double(dot / std::sqrt(ni * nj)), 1e-12);
      EXPECT_EQ(*rep.pairwise[i][j], *rep.pairwise[j][i]);
    }
  }
}

TEST(Similarity, ScaleInvariant) {
  Rng rng(3);
  const ILoRALayer l = random_layer(ILoRAConfig{6, 5, 3, 3, 2.0, 0.0}, rng);
  ILoRALayer scaled = l;
  scaled.B[1] *= 37.5;
  const auto a = head_similarity({l}), b = head_similarity({scaled});
  for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(*a.pairwise[1][j], *b.pairwise[1][j], 1e-12);
}

TEST(Similarity, ZeroHeadIsUndefinedNotNan) {
  Rng rng(4);
  ILoRALayer l = random_layer(ILoRAConfig{6, 5, 3, 3, 2.0, 0.0}, rng);
  l.B[2].fill(0.0);
  const auto rep = head_similarity({l});
  for (std::size_t j = 0; j < 3; ++j) {
    EXPECT_FALSE(rep.pairwise[2][j].has_value());
    EXPECT_FALSE(rep.pairwise[j][2].has_value());
  }
  ASSERT_TRUE(rep.mean_offdiag);
  EXPECT_EQ(*rep.mean_offdiag, *rep.pairwise[0][1]);
}

TEST(Similarity, AveragesAcrossLayers) {
  Rng rng(5);
  const ILoRAConfig c{6, 5, 3, 3, 2.0, 0.0};
  const ILoRALayer a = random_layer(c, rng), b = random_layer(c, rng);
  const auto rep = head_similarity({a, b});
  ASSERT_EQ(rep.per_layer.size(), 2u);
  EXPECT_NEAR(*rep.pairwise[0][2], 0.5 * (*rep.per_layer[0][0][2] + *rep.per_layer[1][0][2]), 1e-15);
  ILoRALayer other = random_layer(ILoRAConfig{6, 5, 3, 2, 2.0, 0.0}, rng);
  EXPECT_THROW(head_similarity({a, other}), ValidationError);
}

TEST(Activation, UniformRouting) {
  const auto rep = activation_stats({make_trace(Matrix(5, 4, 0.25), 0)});
  for (double v : rep.per_head_mean) EXPECT_DOUBLE_EQ(v, 0.25);
  EXPECT_NEAR(rep.entropy_per_task.at(0), std::log(4.0), 1e-12);
}

TEST(Activation, OneHotRoutingHasZeroEntropy) {
  Matrix s(3, 3);
  for (std::size_t t = 0; t < 3; ++t) s(t, 1) = 1.0;
  const auto rep = activation_stats({make_trace(s, 2)});
  EXPECT_EQ(rep.entropy_per_task.at(2), 0.0);
  EXPECT_EQ(rep.per_task.at(2)[1], 1.0);
}

TEST(Activation, MatchesTwoPassMeanOracle) {
  Rng rng(6);
  std::vector<RoutingTrace> traces;
  for (int k = 0; k < 7; ++k) traces.push_back(make_trace(random_simplex_rows(3 + k, 3, rng), k % 3));
  const auto rep = activation_stats(traces);

  // Stack, then average each column; per task, average only that task's rows.
  std::vector<std::vector<double>> rows;
  std::vector<int> tasks;
  for (const auto& tr : traces)
    for (std::size_t t = 0; t < tr.S.rows(); ++t) {
      rows.emplace_back(tr.S.row(t).begin(), tr.S.row(t).end());
      tasks.push_back(tr.task_ids[t]);
    }
  for (std::size_t i = 0; i < 3; ++i) {
    double acc = 0.0;
    for (const auto& r : rows) acc += r[i];
    EXPECT_NEAR(rep.per_head_mean[i], acc / rows.size(), 1e-12);
    for (int task = 0; task < 3; ++task) {
      double ts = 0.0;
      int count = 0;
      for (std::size_t k = 0; k < rows.size(); ++k)
        if (tasks[k] == task) {
          ts += rows[k][i];
          ++count;
        }
      EXPECT_NEAR(rep.per_task.at(task)[i], ts / count, 1e-12);
    }
  }
  double total = 0.0;
  for (double v : rep.per_head_mean) total += v;
  EXPECT_NEAR(total, 1.0, 1e-9);
  EXPECT_EQ(rep.tokens, rows.size());
}

TEST(Activation, EmptyListFails) { EXPECT_THROW(activation_stats({}), ValidationError); }

TEST(Traces, RowCountAndHeader) {
  const fs::path p = scratch("small.csv");
  export_traces({make_trace(Matrix{{0.25, 0.75}, {0.5, 0.5}}, 4)}, p);
  std::ifstream in(p);
  std::string line;
  std::vector<std::string> lines;
  while (std::getline(in, line)) lines.push_back(line);
  ASSERT_EQ(lines.size(), 3u);
  EXPECT_EQ(lines[0], "token_index,task_id,segment_tag,s_0,s_1");
  EXPECT_EQ(lines[1], "0,4,visual,0.25,0.75");
  EXPECT_EQ(lines[2], "1,4,audio,0.5,0.5");
}

TEST(Traces, RoundTripAt17Digits) {
  Rng rng(7);
  std::vector<RoutingTrace> traces{make_trace(random_simplex_rows(6, 3, rng), 0),
                                   make_trace(random_simplex_rows(4, 3, rng), 1)};
  const fs::path p = scratch("rt.csv");
  export_traces(traces, p);
  const RoutingTrace back = import_traces(p);
  ASSERT_EQ(back.S.rows(), 10u);
  for (std::size_t t = 0; t < 6; ++t)
    for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(back.S(t, i), traces[0].S(t, i));
  for (std::size_t t = 0; t < 4; ++t)
    for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(back.S(6 + t, i), traces[1].S(t, i));
  EXPECT_EQ(back.task_ids[7], 1);
  EXPECT_EQ(back.segments[6], Segment::visual);
}

TEST(Traces, ColumnSumsMatchActivationTotals) {
  Rng rng(8);
  std::vector<RoutingTrace> traces{make_trace(random_simplex_rows(5, 4, rng), 0),
                                   make_trace(random_simplex_rows(9, 4, rng), 1)};
  const fs::path p = scratch("sums.csv");
  export_traces(traces, p);
  const RoutingTrace back = import_traces(p);
  const auto rep = activation_stats(traces);
  for (std::size_t i = 0; i < 4; ++i) {
    double col = 0.0;
    for (std::size_t t = 0; t < back.S.rows(); ++t) col += back.S(t, i);
    EXPECT_NEAR(col, rep.per_head_mean[i] * double(rep.tokens), 1e-12);
  }
}

TEST(Traces, MalformedCsvIsRejected) {
  const fs::path p = scratch("bad.csv");
  std::ofstream(p) << "token_index,task_id,segment_tag,s_0\n0,1,visual,zero\n";
  EXPECT_THROW(import_traces(p), ValidationError);
  std::ofstream(p) << "index,task,tag,s_0\n";
  EXPECT_THROW(import_traces(p), ValidationError);
  EXPECT_THROW(import_traces(scratch("missing.csv")), IoError);
}

#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "ilora/adapter.hpp"
#include "ilora/error.hpp"

namespace ilora {

// Symmetric n x n table of cosine similarities; nullopt where a head has zero norm.
using SimilarityTable = std::vector<std::vector<std::optional<double>>>;

struct SimilarityReport {
  SimilarityTable pairwise;              // averaged across layers
  std::optional<double> mean_offdiag;    // mean over i != j of the averaged table
  std::vector<SimilarityTable> per_layer;
  std::vector<std::optional<double>> per_layer_mean_offdiag;
};

struct ActivationReport {
  std::size_t heads = 0;
  std::size_t tokens = 0;
  std::vector<double> per_head_mean;
  std::map<int, std::vector<double>> per_task;
  std::map<int, double> entropy_per_task;
  std::map<int, std::size_t> tokens_per_task;
};

inline double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

inline std::optional<double> mean_offdiagonal(const SimilarityTable& t) {
  double acc = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < t.size(); ++i)
    for (std::size_t j = 0; j < t.size(); ++j)
      if (i != j && t[i][j]) {
        acc += *t[i][j];
        ++count;
      }
  if (count == 0) return std::nullopt;
  return acc / static_cast<double>(count);
}

// Cosine similarity between the flattened B heads of each layer, then the
// entrywise mean across layers.
inline SimilarityReport head_similarity(const std::vector<ILoRALayer>& layers) {
  if (layers.empty()) throw ValidationError("head_similarity: no layers given");
  const std::size_t n = layers.front().B.size();
  SimilarityReport rep;
  std::vector<std::vector<double>> sums(n, std::vector<double>(n, 0.0));
  std::vector<std::vector<std::size_t>> counts(n, std::vector<std::size_t>(n, 0));

  for (const auto& layer : layers) {
    if (layer.B.size() != n) {
      throw ValidationError("head_similarity: layers disagree on head count (" +
                            std::to_string(n) + " vs " + std::to_string(layer.B.size()) + ")");
    }
    std::vector<double> norms(n);
    for (std::size_t i = 0; i < n; ++i) norms[i] = frobenius_norm(layer.B[i]);
    SimilarityTable table(n, std::vector<std::optional<double>>(n));
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = i; j < n; ++j) {
        if (norms[i] == 0.0 || norms[j] == 0.0) continue;
        if (layer.B[i].size() != layer.B[j].size()) {
          throw ValidationError("head_similarity: heads of different sizes");
        }
        const double s = i == j ? 1.0 : cosine_similarity(layer.B[i].data(), layer.B[j].data());
        table[i][j] = s;
        table[j][i] = s;
        sums[i][j] += s;
        ++counts[i][j];
        if (i != j) {
          sums[j][i] += s;
          ++counts[j][i];
        }
      }
    }
    rep.per_layer_mean_offdiag.push_back(mean_offdiagonal(table));
    rep.per_layer.push_back(std::move(table));
  }

  rep.pairwise.assign(n, std::vector<std::optional<double>>(n));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (counts[i][j] > 0) rep.pairwise[i][j] = sums[i][j] / static_cast<double>(counts[i][j]);
  rep.mean_offdiag = mean_offdiagonal(rep.pairwise);
  return rep;
}

inline double shannon_entropy(const std::vector<double>& p) {
  double h = 0.0;
  for (double v : p)
    if (v > 0.0) h -= v * std::log(v);
  return h;
}

inline ActivationReport activation_stats(const std::vector<RoutingTrace>& traces) {
  if (traces.empty()) throw ValidationError("activation_stats: empty trace list");
  const std::size_t n = traces.front().heads();
  ActivationReport rep;
  rep.heads = n;
  std::vector<double> total(n, 0.0);
  std::map<int, std::vector<double>> task_sums;
  for (const auto& tr : traces) {
    if (tr.heads() != n) {
      throw ValidationError("activation_stats: traces disagree on head count (" +
                            std::to_string(n) + " vs " + std::to_string(tr.heads()) + ")");
    }
    if (tr.task_ids.size() != tr.S.rows()) {
      throw ValidationError("activation_stats: trace metadata length does not match S");
    }
    for (std::size_t t = 0; t < tr.S.rows(); ++t) {
      auto& ts = task_sums[tr.task_ids[t]];
      if (ts.empty()) ts.assign(n, 0.0);
      for (std::size_t i = 0; i < n; ++i) {
        total[i] += tr.S(t, i);
        ts[i] += tr.S(t, i);
      }
      ++rep.tokens_per_task[tr.task_ids[t]];
      ++rep.tokens;
    }
  }
  if (rep.tokens == 0) throw ValidationError("activation_stats: traces contain no tokens");
  rep.per_head_mean = total;
  for (auto& v : rep.per_head_mean) v /= static_cast<double>(rep.tokens);
  for (auto& [task, sums] : task_sums) {
    const double count = static_cast<double>(rep.tokens_per_task[task]);
    for (auto& v : sums) v /= count;
    rep.entropy_per_task[task] = shannon_entropy(sums);
    rep.per_task[task] = std::move(sums);
  }
  return rep;
}

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// CSV columns: token_index, task_id, segment_tag, s_0 .. s_{n-1}.
// token_index runs across all traces in order.
inline void export_traces(const std::vector<RoutingTrace>& traces,
                          const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("export_traces: cannot open " + path.string());
  const std::size_t n = traces.empty() ? 0 : traces.front().heads();
  out << "token_index,task_id,segment_tag";
  for (std::size_t i = 0; i < n; ++i) out << ",s_" << i;
  out << '\n';
  std::size_t index = 0;
  for (const auto& tr : traces) {
    if (tr.heads() != n) throw ValidationError("export_traces: traces disagree on head count");
    for (std::size_t t = 0; t < tr.S.rows(); ++t) {
      out << index++ << ',' << tr.task_ids.at(t) << ',' << to_string(tr.segments.at(t));
      for (std::size_t i = 0; i < n; ++i) out << ',' << format_double(tr.S(t, i));
      out << '\n';
    }
  }
  if (!out) throw IoError("export_traces: write failed for " + path.string());
}

// Reads a trace CSV back as a single concatenated trace.
inline RoutingTrace import_traces(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("import_traces: cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw ValidationError("import_traces: missing header");
  std::vector<std::string> header;
  {
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) header.push_back(cell);
  }
  if (header.size() < 4 || header[0] != "token_index" || header[1] != "task_id" ||
      header[2] != "segment_tag") {
    throw ValidationError("import_traces: unexpected header '" + line + "'");
  }
  const std::size_t n = header.size() - 3;
  for (std::size_t i = 0; i < n; ++i) {
    if (header[3 + i] != "s_" + std::to_string(i)) {
      throw ValidationError("import_traces: unexpected column '" + header[3 + i] + "'");
    }
  }
  RoutingTrace tr;
  std::vector<double> values;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    ++row;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() != header.size()) {
      throw ValidationError("import_traces: row " + std::to_string(row) + " has " +
                            std::to_string(cells.size()) + " columns");
    }
    try {
      tr.task_ids.push_back(std::stoi(cells[1]));
      tr.segments.push_back(parse_segment(cells[2]));
      for (std::size_t i = 0; i < n; ++i) {
        std::size_t used = 0;
        values.push_back(std::stod(cells[3 + i], &used));
        if (used != cells[3 + i].size()) throw std::invalid_argument(cells[3 + i]);
      }
    } catch (const ValidationError&) {
      throw;
    } catch (const std::exception&) {
      throw ValidationError("import_traces: unparsable value on row " + std::to_string(row));
    }
  }
  tr.S = Matrix(tr.task_ids.size(), n, std::move(values));
  return tr;
}

}  // namespace ilora

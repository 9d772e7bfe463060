#pragma once

#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "mcqc/core/parallel.hpp"
#include "mcqc/dataset.hpp"
#include "mcqc/model_ops.hpp"

namespace mcqc {

inline int option_gap(int m, int n) {
  if (m < 2 || n < 2) throw PreconditionError("option_gap: counts must be >= 2");
  return m - n;
}

// ---------------------------------------------------------------------------
// Cross-evaluation tables: accuracy of a model trained with m options (rows)
// and tested with n options (columns).

struct CrossEvalTable {
  std::vector<int> train_counts;
  std::vector<int> test_counts;
  std::vector<std::vector<double>> acc;  // acc[row][col]

  void validate() const {
    if (acc.size() != train_counts.size()) throw ConfigError("cross-eval: row count mismatch");
    for (const auto& row : acc) {
      if (row.size() != test_counts.size()) throw ConfigError("cross-eval: incomplete row");
      for (double v : row)
        if (!(v >= 0 && v <= 100)) throw ConfigError("cross-eval: accuracy outside [0, 100]");
    }
    for (int c : train_counts)
      if (c < 2) throw ConfigError("cross-eval: option counts must be >= 2");
    for (int c : test_counts)
      if (c < 2) throw ConfigError("cross-eval: option counts must be >= 2");
  }

  // Header "train,<n1>,<n2>,..." then one "<m>,<acc>,..." row per train count.
  static CrossEvalTable from_csv(std::string_view csv) {
    auto cells = [](const std::string& line) {
      std::vector<std::string> out;
      std::stringstream ss(line);
      std::string cell;
      while (std::getline(ss, cell, ',')) out.push_back(text::trim(cell));
      return out;
    };
    auto number = [](const std::string& s) {
      std::size_t used = 0;
      double v = 0;
      try {
        v = std::stod(s, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != s.size() || s.empty()) throw ConfigError("cross-eval: not a number: '" + s + "'");
      return v;
    };
    CrossEvalTable t;
    bool header = true;
    for (const auto& raw : text::split_lines(csv)) {
      if (text::trim_view(raw).empty() || raw[0] == '#') continue;
      auto c = cells(raw);
      if (c.size() < 2) throw ConfigError("cross-eval: too few columns in '" + raw + "'");
      if (header) {
        for (std::size_t i = 1; i < c.size(); ++i) t.test_counts.push_back(static_cast<int>(number(c[i])));
        header = false;
        continue;
      }
      t.train_counts.push_back(static_cast<int>(number(c[0])));
      std::vector<double> row;
      for (std::size_t i = 1; i < c.size(); ++i) row.push_back(number(c[i]));
      t.acc.push_back(std::move(row));
    }
    if (t.acc.empty()) throw ConfigError("cross-eval: table has no rows");
    t.validate();
    return t;
  }
};

struct ZMatrix {
  std::vector<int> train_counts;
  std::vector<int> test_counts;
  std::vector<std::vector<double>> z;
  std::vector<double> column_mean;
  std::vector<double> column_sd;
  std::vector<bool> degenerate;  // sd == 0; z set to 0
};

// Per test column: z = (A - mean) / sd with the population sd.
inline ZMatrix normalize_scores(const CrossEvalTable& t) {
  t.validate();
  if (t.train_counts.size() < 2) throw PreconditionError("normalize_scores: need >= 2 rows per column");
  ZMatrix out;
  out.train_counts = t.train_counts;
  out.test_counts = t.test_counts;
  const auto rows = t.acc.size();
  out.z.assign(rows, std::vector<double>(t.test_counts.size(), 0.0));
  for (std::size_t c = 0; c < t.test_counts.size(); ++c) {
    double mean = 0;
    for (std::size_t r = 0; r < rows; ++r) mean += t.acc[r][c];
    mean /= static_cast<double>(rows);
    double var = 0;
    for (std::size_t r = 0; r < rows; ++r) var += (t.acc[r][c] - mean) * (t.acc[r][c] - mean);
    double sd = std::sqrt(var / static_cast<double>(rows));
    out.column_mean.push_back(mean);
    out.column_sd.push_back(sd);
    const bool flat = !(sd > 0);
    out.degenerate.push_back(flat);
    if (flat) {
      log::warn("normalize_scores: column n=" + std::to_string(t.test_counts[c]) + " has zero spread");
      continue;
    }
    for (std::size_t r = 0; r < rows; ++r) out.z[r][c] = (t.acc[r][c] - mean) / sd;
  }
  return out;
}

struct GapPoint {
  double mean_z = 0.0;
  std::size_t cells = 0;
};

// Mean z per option-count gap, each cell weighted equally.
inline std::map<int, GapPoint> gap_curve(const ZMatrix& z) {
  std::map<int, GapPoint> sums;
  for (std::size_t r = 0; r < z.train_counts.size(); ++r)
    for (std::size_t c = 0; c < z.test_counts.size(); ++c) {
      auto& p = sums[option_gap(z.train_counts[r], z.test_counts[c])];
      p.mean_z += z.z[r][c];
      ++p.cells;
    }
  for (auto& [d, p] : sums) p.mean_z /= static_cast<double>(p.cells);
  return sums;
}

inline int argmax_gap(const std::map<int, GapPoint>& curve) {
  if (curve.empty()) throw PreconditionError("argmax_gap: empty curve");
  auto best = curve.begin();
  for (auto it = curve.begin(); it != curve.end(); ++it)
    if (it->second.mean_z > best->second.mean_z) best = it;
  return best->first;
}

inline std::string format_double(double v, int precision = 6) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", precision, v);
  return buf;
}

inline std::string z_matrix_csv(const ZMatrix& z) {
  std::string out = "train_count,test_count,gap,z\n";
  for (std::size_t r = 0; r < z.train_counts.size(); ++r)
    for (std::size_t c = 0; c < z.test_counts.size(); ++c)
      out += std::to_string(z.train_counts[r]) + "," + std::to_string(z.test_counts[c]) + "," +
             std::to_string(z.train_counts[r] - z.test_counts[c]) + "," + format_double(z.z[r][c]) + "\n";
  return out;
}

inline std::string gap_curve_csv(const std::map<int, GapPoint>& curve) {
  std::string out = "gap,mean_z,cells\n";
  for (const auto& [d, p] : curve)
    out += std::to_string(d) + "," + format_double(p.mean_z) + "," + std::to_string(p.cells) + "\n";
  return out;
}

inline std::string column_stats_csv(const ZMatrix& z) {
  std::string out = "test_count,mean,sd,degenerate\n";
  for (std::size_t c = 0; c < z.test_counts.size(); ++c)
    out += std::to_string(z.test_counts[c]) + "," + format_double(z.column_mean[c]) + "," +
           format_double(z.column_sd[c]) + "," + (z.degenerate[c] ? "1" : "0") + "\n";
  return out;
}

// ---------------------------------------------------------------------------
// Reward decomposition. A rollout's reasoning is valid with probability
// p_correct_reasoning; valid reasoning still slips to a wrong answer with
// p_slip. Invalid reasoning lands on the correct option with
// (1 - lambda) * s + lambda / n: a systematic preference share plus guessing.

struct RewardMixtureParams {
  int n = 4;
  double lambda = 0.5;
  double s = 0.0;
  double p_correct_reasoning = 0.5;
  double p_slip = 0.0;

  void validate() const {
    if (n < 2) throw PreconditionError("reward params: n must be >= 2");
    auto unit = [](double v) { return v >= 0 && v <= 1; };
    if (!unit(lambda) || !unit(s) || !unit(p_correct_reasoning) || !unit(p_slip))
      throw PreconditionError("reward params: probabilities must lie in [0, 1]");
  }

  double p_correct_given_invalid() const { return (1 - lambda) * s + lambda / static_cast<double>(n); }

  Json to_json() const {
    return Json{{"n", n}, {"lambda", lambda}, {"s", s}, {"p_correct_reasoning", p_correct_reasoning},
                {"p_slip", p_slip}};
  }
};

struct RewardRates {
  double p_reward = 0.0;
  double p_spurious = 0.0;
};

inline RewardRates closed_form_rewards(const RewardMixtureParams& p) {
  p.validate();
  const double invalid = 1 - p.p_correct_reasoning;
  const double q = p.p_correct_given_invalid();
  RewardRates r;
  r.p_spurious = invalid * q;
  r.p_reward = p.p_correct_reasoning * (1 - p.p_slip) + r.p_spurious;
  return r;
}

inline constexpr std::size_t kSimulationShards = 16;

// Each trial consumes exactly two uniforms, so two parameter sets simulated
// with the same seed see the same draws; comparisons across n or s are then
// free of sampling noise in their direction.
inline RewardRates simulate_rewards(const RewardMixtureParams& p, std::size_t trials, std::uint64_t seed,
                                    std::size_t workers = 1) {
  p.validate();
  if (trials < 1) throw PreconditionError("simulate_rewards: trials must be >= 1");
  const double q = p.p_correct_given_invalid();
  std::vector<std::size_t> reward(kSimulationShards), spurious(kSimulationShards);
  parallel_for(kSimulationShards, workers, [&](std::size_t shard) {
    const std::size_t begin = trials * shard / kSimulationShards;
    const std::size_t end = trials * (shard + 1) / kSimulationShards;
    auto rng = rnd::make_rng(rnd::derive(seed, "shard", shard));
    std::size_t r = 0, sp = 0;
    for (std::size_t i = begin; i < end; ++i) {
      const double u_reason = rnd::uniform01(rng);
      const double u_answer = rnd::uniform01(rng);
      if (u_reason < p.p_correct_reasoning) {
        if (u_answer < 1 - p.p_slip) ++r;
      } else if (u_answer < q) {
        ++r;
        ++sp;
      }
    }
    reward[shard] = r;
    spurious[shard] = sp;
  });
  std::size_t r = 0, sp = 0;
  for (std::size_t i = 0; i < kSimulationShards; ++i) {
    r += reward[i];
    sp += spurious[i];
  }
  return {static_cast<double>(r) / static_cast<double>(trials), static_cast<double>(sp) / static_cast<double>(trials)};
}

inline double binomial_tolerance(double p, std::size_t trials, double sigmas = 4.0) {
  return sigmas * std::sqrt(p * (1 - p) / static_cast<double>(trials));
}

// ---------------------------------------------------------------------------
// Option-label distribution of a model's answers.

struct LabelHistogram {
  std::string source;
  std::size_t option_count = 0;
  std::vector<std::size_t> counts;  // per label A..
  std::size_t total = 0;            // parsed answers
  std::size_t parse_failures = 0;

  double share(std::size_t i) const { return total ? static_cast<double>(counts.at(i)) / static_cast<double>(total) : 0.0; }

  Json to_json() const {
    Json c = Json::object();
    Json s = Json::object();
    for (std::size_t i = 0; i < counts.size(); ++i) {
      c[Label::at(i).str()] = counts[i];
      s[Label::at(i).str()] = share(i);
    }
    return Json{{"source", source}, {"option_count", option_count}, {"counts", c},
                {"shares", s},      {"total", total},               {"parse_failures", parse_failures}};
  }
};

inline LabelHistogram label_distribution(const std::vector<McqItem>& items, const Model& model, std::size_t k,
                                         std::uint64_t seed, std::string source = "", std::size_t workers = 1) {
  if (k < 1) throw PreconditionError("label_distribution: k must be >= 1");
  LabelHistogram h;
  h.source = std::move(source);
  for (const auto& it : items) h.option_count = std::max(h.option_count, it.size());
  h.counts.assign(h.option_count, 0);
  std::vector<std::vector<AnswerSample>> samples(items.size());
  parallel_for(items.size(), workers, [&](std::size_t i) {
    samples[i] = sample_answers(items[i], k, model, rnd::derive(seed, "labels", rnd::fnv1a(items[i].id)));
  });
  for (const auto& per_item : samples)
    for (const auto& s : per_item) {
      if (!s.parsed_label) {
        ++h.parse_failures;
        continue;
      }
      ++h.counts[s.parsed_label->index()];
      ++h.total;
    }
  return h;
}

// Histogram of where the correct answer sits, for checking a permutation.
inline LabelHistogram correct_label_histogram(const std::vector<McqItem>& items, std::string source = "") {
  LabelHistogram h;
  h.source = std::move(source);
  for (const auto& it : items) h.option_count = std::max(h.option_count, it.size());
  h.counts.assign(h.option_count, 0);
  for (const auto& it : items) {
    ++h.counts[it.correct];
    ++h.total;
  }
  return h;
}

}  // namespace mcqc

#pragma once

#include <optional>
#include <string>
#include <vector>

#include "mcqc/dataset.hpp"
#include "mcqc/model_ops.hpp"

namespace mcqc {

struct DistractorStrength {
  Label label;
  std::size_t pick_count = 0;
  double strength = 0.0;
};

// Empirical distractor strength from K sampled answers. A distractor's strength
// is its share of the incorrect answers; with no incorrect answers every
// strength is zero. Unparseable samples count toward neither picks nor n_err,
// and never toward the passrate numerator.
struct StrengthProfile {
  std::string item_id;
  std::size_t k = 0;
  std::size_t n_err = 0;
  std::size_t correct_count = 0;
  std::size_t parse_failures = 0;
  double passrate = 0.0;
  std::vector<DistractorStrength> per_distractor;  // ascending label order
  std::vector<AnswerSample> samples;

  bool all_parse_failed() const { return k > 0 && parse_failures == k; }
  bool solved_all() const { return n_err == 0 && parse_failures == 0; }

  std::optional<DistractorStrength> find(Label l) const {
    for (const auto& d : per_distractor)
      if (d.label == l) return d;
    return std::nullopt;
  }

  double strength(Label l) const {
    auto d = find(l);
    return d ? d->strength : 0.0;
  }
};

inline StrengthProfile compute_strength(const McqItem& item, const std::vector<AnswerSample>& samples) {
  StrengthProfile p;
  p.item_id = item.id;
  p.k = samples.size();
  p.samples = samples;
  std::vector<std::size_t> picks(item.size(), 0);
  for (const auto& s : samples) {
    if (!s.parsed_label || !item.has_label(*s.parsed_label)) {
      ++p.parse_failures;
      continue;
    }
    if (s.parsed_label->index() == item.correct) {
      ++p.correct_count;
    } else {
      ++picks[s.parsed_label->index()];
      ++p.n_err;
    }
  }
  for (auto l : item.distractor_labels()) {
    DistractorStrength d{l, picks[l.index()], 0.0};
    if (p.n_err > 0) d.strength = static_cast<double>(d.pick_count) / static_cast<double>(p.n_err);
    p.per_distractor.push_back(d);
  }
  p.passrate = p.k ? static_cast<double>(p.correct_count) / static_cast<double>(p.k) : 0.0;
  return p;
}

inline StrengthProfile estimate_strength(const McqItem& item, const Model& model, std::size_t k,
                                         std::uint64_t seed) {
  if (k < 1) throw PreconditionError("estimate_strength: k must be >= 1");
  auto profile = compute_strength(item, sample_answers(item, k, model, seed));
  if (profile.all_parse_failed())
    log::warn("item '" + item.id + "': all " + std::to_string(k) + " samples failed to parse");
  return profile;
}

enum class SelectionMode { random, strongest, weakest };

inline SelectionMode parse_selection_mode(const std::string& s) {
  if (s == "random") return SelectionMode::random;
  if (s == "strongest" || s == "strong") return SelectionMode::strongest;
  if (s == "weakest" || s == "weak") return SelectionMode::weakest;
  throw ConfigError("unknown selection mode '" + s + "' (random, strongest, weakest)");
}

// Reduces an item to two options: the correct one and a single distractor
// picked by strength (ties go to the lowest label) or uniformly at random. The
// correct answer lands on A or B with equal probability.
inline McqItem select_distractor(const McqItem& item, const StrengthProfile& profile, SelectionMode mode,
                                 std::uint64_t seed) {
  auto labels = item.distractor_labels();
  if (labels.empty()) throw PreconditionError("select_distractor: item has no distractors");
  if (profile.item_id != item.id || profile.per_distractor.size() != labels.size())
    throw PreconditionError("select_distractor: profile does not match item '" + item.id + "'");
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (profile.per_distractor[i].label != labels[i])
      throw PreconditionError("select_distractor: profile labels do not match item '" + item.id + "'");

  auto rng = rnd::make_rng(rnd::derive(seed, "select", rnd::fnv1a(item.id)));
  std::size_t chosen = 0;
  switch (mode) {
    case SelectionMode::random:
      chosen = rnd::uniform_index(rng, labels.size());
      break;
    case SelectionMode::strongest:
      for (std::size_t i = 1; i < labels.size(); ++i)
        if (profile.per_distractor[i].strength > profile.per_distractor[chosen].strength) chosen = i;
      break;
    case SelectionMode::weakest:
      for (std::size_t i = 1; i < labels.size(); ++i)
        if (profile.per_distractor[i].strength < profile.per_distractor[chosen].strength) chosen = i;
      break;
  }
  auto position = rnd::uniform_index(rng, 2);
  return assemble_item(item, item.correct_text(), {item.text(labels[chosen])}, position);
}

inline double solve_all_ratio(const std::vector<StrengthProfile>& profiles) {
  if (profiles.empty()) throw PreconditionError("solve_all_ratio: no profiles");
  std::size_t solved = 0;
  for (const auto& p : profiles)
    if (p.solved_all()) ++solved;
  return static_cast<double>(solved) / static_cast<double>(profiles.size());
}

inline Json to_json(const StrengthProfile& p) {
  Json j;
  j["id"] = p.item_id;
  j["k"] = p.k;
  j["n_err"] = p.n_err;
  Json s = Json::object();
  Json picks = Json::object();
  for (const auto& d : p.per_distractor) {
    s[d.label.str()] = d.strength;
    picks[d.label.str()] = d.pick_count;
  }
  j["strengths"] = std::move(s);
  j["picks"] = std::move(picks);
  j["passrate"] = p.passrate;
  j["parse_failures"] = p.parse_failures;
  return j;
}

}  // namespace mcqc

#pragma once

#include <algorithm>
#include <optional>
#include <string>
#include <unordered_set>
#include <vector>

#include "mcqc/core/parallel.hpp"
#include "mcqc/dataset.hpp"
#include "mcqc/model_ops.hpp"
#include "mcqc/strength.hpp"

namespace mcqc {

struct CurationConfig {
  int max_iterations = 7;                      // T
  std::size_t k_samples = 8;                   // K
  std::optional<std::size_t> target_options;   // N; the item's own count when unset
  bool equivalence_guard = true;
  int early_stop_patience = 0;                 // L; 0 disables early stopping

  void validate() const {
    if (max_iterations < 1) throw ConfigError("curation: max_iterations must be >= 1");
    if (k_samples < 1) throw ConfigError("curation: k_samples must be >= 1");
    if (target_options && (*target_options < 2 || *target_options > kMaxOptions))
      throw ConfigError("curation: target_option_count must be in [2, 26]");
    if (early_stop_patience < 0) throw ConfigError("curation: early_stop_patience must be >= 0");
  }

  Json to_json() const {
    Json j;
    j["max_iterations"] = max_iterations;
    j["k_samples"] = k_samples;
    j["target_option_count"] = target_options ? Json(*target_options) : Json(nullptr);
    j["equivalence_guard"] = equivalence_guard;
    j["early_stop_patience"] = early_stop_patience;
    return j;
  }

  static CurationConfig from_json(const Json& j) {
    CurationConfig c;
    c.max_iterations = j.value("max_iterations", c.max_iterations);
    c.k_samples = j.value("k_samples", c.k_samples);
    if (j.contains("target_option_count") && !j.at("target_option_count").is_null())
      c.target_options = j.at("target_option_count").get<std::size_t>();
    c.equivalence_guard = j.value("equivalence_guard", c.equivalence_guard);
    c.early_stop_patience = j.value("early_stop_patience", c.early_stop_patience);
    c.validate();
    return c;
  }
};

struct CurationModels {
  Model generator;
  Model evaluator;
  Model judge;  // expected greedy
};

struct PoolEntry {
  std::string text;
  double strength = 0.0;  // most recent evaluation
  std::size_t inserted = 0;
  bool original = false;
};

struct Snapshot {
  std::vector<std::string> pool;
  double passrate = 0.0;
};

struct Rejection {
  std::string text;
  std::string reason;  // exact_match | equivalent | duplicate
};

struct IterationTrace {
  int iteration = 0;
  std::string mode;  // fill | replace
  std::vector<std::string> candidates;
  std::vector<std::string> admitted;
  std::vector<Rejection> rejected;
  std::vector<std::string> evaluated;  // distractors of the evaluated set
  std::optional<double> passrate;      // empty when nothing was evaluated
  std::vector<std::string> pool;
  std::vector<double> pool_strengths;
  std::optional<std::string> weak;
  std::optional<double> weak_strength;
  std::optional<double> new_strength;
  bool replaced = false;
  std::string noop_reason;
};

struct CurationState {
  McqItem item;
  std::vector<PoolEntry> pool;
  std::vector<Snapshot> history;
  int iteration = 0;
  std::size_t target_distractors = 0;  // K_d
  std::vector<Rejection> rejected;
  std::vector<std::string> tried;      // every text proposed or original, for exclusion
  std::vector<std::string> spare;      // guard-passing candidates never admitted
  std::vector<IterationTrace> trace;
  std::size_t next_insert = 0;
  int failed_replacements = 0;
  bool stopped_early = false;

  bool full() const { return pool.size() >= target_distractors; }
  double passrate() const { return history.back().passrate; }

  std::vector<std::string> pool_texts() const {
    std::vector<std::string> out;
    for (const auto& e : pool) out.push_back(e.text);
    return out;
  }

  bool done(const CurationConfig& c) const {
    return iteration >= c.max_iterations || stopped_early;
  }
};

namespace detail {

// A candidate set {o*} ∪ distractors with the correct option at a seeded
// position, so evaluation does not always see it under the same label.
inline McqItem candidate_set(const McqItem& base, const std::vector<std::string>& distractors, std::uint64_t seed) {
  auto rng = rnd::make_rng(seed);
  auto pos = rnd::uniform_index(rng, distractors.size() + 1);
  return assemble_item(base, base.correct_text(), distractors, pos);
}

inline double strength_of(const McqItem& set, const StrengthProfile& p, const std::string& text) {
  for (std::size_t i = 0; i < set.size(); ++i)
    if (i != set.correct && set.options[i] == text) return p.strength(Label::at(i));
  return 0.0;
}

inline void push_snapshot(CurationState& s, double passrate) {
  s.history.push_back({s.pool_texts(), passrate});
}

}  // namespace detail

inline CurationState initialize(const McqItem& item, const CurationConfig& config, const CurationModels& models,
                                std::uint64_t seed) {
  config.validate();
  require_valid(item);
  CurationState s;
  s.item = item;
  const std::size_t n = config.target_options.value_or(item.size());
  s.target_distractors = n - 1;

  auto profile = estimate_strength(item, models.evaluator, config.k_samples, rnd::derive(seed, "eval", 0));
  std::vector<PoolEntry> effective;
  for (const auto& d : profile.per_distractor) {
    s.tried.push_back(item.text(d.label));
    if (d.strength > 0) effective.push_back({item.text(d.label), d.strength, 0, true});
  }
  // A target below the original count keeps the strongest originals.
  if (effective.size() > s.target_distractors) {
    std::stable_sort(effective.begin(), effective.end(),
                     [](const PoolEntry& a, const PoolEntry& b) { return a.strength > b.strength; });
    effective.resize(s.target_distractors);
    std::stable_sort(effective.begin(), effective.end(), [&](const PoolEntry& a, const PoolEntry& b) {
      return std::find(item.options.begin(), item.options.end(), a.text) <
             std::find(item.options.begin(), item.options.end(), b.text);
    });
  }
  for (auto& e : effective) {
    e.inserted = s.next_insert++;
    s.pool.push_back(std::move(e));
  }
  detail::push_snapshot(s, profile.passrate);
  return s;
}

namespace detail {

// Screens candidates against the correct answer and the texts already in play.
inline std::vector<std::string> guard(CurationState& s, IterationTrace& tr, const std::vector<std::string>& candidates,
                                      const std::vector<std::string>& in_play, const CurationConfig& config,
                                      const CurationModels& models) {
  const auto correct = text::normalize_ws(s.item.correct_text());
  std::unordered_set<std::string> seen;
  for (const auto& t : in_play) seen.insert(text::normalize_ws(t));
  std::vector<std::string> survivors;
  for (const auto& c : candidates) {
    const auto norm = text::normalize_ws(c);
    std::string reason;
    if (norm == correct) {
      reason = "exact_match";
    } else if (seen.count(norm)) {
      reason = "duplicate";
    } else if (config.equivalence_guard &&
               judge_equivalence(s.item.stem, s.item.correct_text(), c, models.judge, s.item).verdict ==
                   Equivalence::equivalent) {
      reason = "equivalent";
    }
    if (!reason.empty()) {
      tr.rejected.push_back({c, reason});
      s.rejected.push_back({c, reason});
      continue;
    }
    seen.insert(norm);
    survivors.push_back(c);
  }
  return survivors;
}

inline void remember(CurationState& s, const std::vector<std::string>& texts) {
  for (const auto& t : texts)
    if (std::find(s.tried.begin(), s.tried.end(), t) == s.tried.end()) s.tried.push_back(t);
}

// The working item shown to the generator: correct answer first, then the pool.
inline McqItem working_item(const CurationState& s) {
  return assemble_item(s.item, s.item.correct_text(), s.pool_texts(), 0);
}

inline void finish_step(CurationState& s, IterationTrace tr, double passrate) {
  tr.passrate = tr.evaluated.empty() ? std::nullopt : std::optional<double>(passrate);
  tr.pool = s.pool_texts();
  for (const auto& e : s.pool) tr.pool_strengths.push_back(e.strength);
  push_snapshot(s, passrate);
  s.trace.push_back(std::move(tr));
}

inline void fill_step(CurationState& s, IterationTrace& tr, const CurationConfig& config,
                      const CurationModels& models, std::uint64_t seed, double& passrate) {
  tr.mode = "fill";
  const auto need = s.target_distractors - s.pool.size();
  auto work = working_item(s);
  std::vector<Label> slots;
  for (std::size_t i = 0; i < need; ++i) slots.push_back(Label::at(work.size() + i));

  GenerationResult gen;
  try {
    gen = generate_distractors(work, slots, SlotMode::fill, "", models.generator,
                               rnd::derive(seed, "gen", static_cast<std::uint64_t>(s.iteration)), s.tried);
  } catch (const GenerationFailure& e) {
    tr.noop_reason = std::string("generation failed: ") + e.what();
    return;
  }
  for (auto l : slots) tr.candidates.push_back(gen.distractors.at(l));
  remember(s, tr.candidates);

  auto survivors = guard(s, tr, tr.candidates, s.pool_texts(), config, models);
  if (survivors.empty()) {
    tr.noop_reason = "no candidate survived the guard";
    return;
  }
  tr.evaluated = s.pool_texts();
  tr.evaluated.insert(tr.evaluated.end(), survivors.begin(), survivors.end());
  auto eval_seed = rnd::derive(seed, "eval", static_cast<std::uint64_t>(s.iteration));
  auto set = candidate_set(s.item, tr.evaluated, rnd::derive(eval_seed, "order"));
  auto profile = estimate_strength(set, models.evaluator, config.k_samples, eval_seed);
  passrate = profile.passrate;
  for (auto& e : s.pool) e.strength = strength_of(set, profile, e.text);
  for (const auto& c : survivors) {
    double st = strength_of(set, profile, c);
    if (st > 0) {
      s.pool.push_back({c, st, s.next_insert++, false});
      tr.admitted.push_back(c);
    } else {
      s.spare.push_back(c);
    }
  }
}

inline void replace_step(CurationState& s, IterationTrace& tr, const CurationConfig& config,
                         const CurationModels& models, std::uint64_t seed, double& passrate) {
  tr.mode = "replace";
  std::size_t weak = 0;
  for (std::size_t i = 1; i < s.pool.size(); ++i)
    if (s.pool[i].strength < s.pool[weak].strength ||
        (s.pool[i].strength == s.pool[weak].strength && s.pool[i].inserted < s.pool[weak].inserted))
      weak = i;
  const auto weak_entry = s.pool[weak];
  tr.weak = weak_entry.text;
  tr.weak_strength = weak_entry.strength;

  auto work = working_item(s);
  const Label slot = Label::at(weak + 1);
  GenerationResult gen;
  try {
    gen = generate_distractors(work, {slot}, SlotMode::replace, "", models.generator,
                               rnd::derive(seed, "gen", static_cast<std::uint64_t>(s.iteration)), s.tried);
  } catch (const GenerationFailure& e) {
    tr.noop_reason = std::string("generation failed: ") + e.what();
    ++s.failed_replacements;
    return;
  }
  tr.candidates.push_back(gen.distractors.at(slot));
  remember(s, tr.candidates);

  auto survivors = guard(s, tr, tr.candidates, s.pool_texts(), config, models);
  if (survivors.empty()) {
    tr.noop_reason = "no candidate survived the guard";
    ++s.failed_replacements;
    return;
  }
  const auto& cand = survivors.front();
  for (std::size_t i = 0; i < s.pool.size(); ++i)
    if (i != weak) tr.evaluated.push_back(s.pool[i].text);
  tr.evaluated.push_back(cand);
  auto eval_seed = rnd::derive(seed, "eval", static_cast<std::uint64_t>(s.iteration));
  auto set = candidate_set(s.item, tr.evaluated, rnd::derive(eval_seed, "order"));
  auto profile = estimate_strength(set, models.evaluator, config.k_samples, eval_seed);
  passrate = profile.passrate;
  const double st = strength_of(set, profile, cand);
  tr.new_strength = st;
  for (std::size_t i = 0; i < s.pool.size(); ++i)
    if (i != weak) s.pool[i].strength = strength_of(set, profile, s.pool[i].text);

  if (st > weak_entry.strength) {
    s.pool.erase(s.pool.begin() + static_cast<std::ptrdiff_t>(weak));
    s.pool.push_back({cand, st, s.next_insert++, false});
    tr.admitted.push_back(cand);
    tr.replaced = true;
    s.failed_replacements = 0;
  } else {
    s.spare.push_back(cand);
    ++s.failed_replacements;
  }
}

}  // namespace detail

// One IDC iteration: fill when the pool is short, otherwise try to replace the
// weakest member. Every iteration appends a history snapshot, including ones
// that changed nothing (their passrate carries over when nothing was evaluated).
inline void step(CurationState& s, const CurationConfig& config, const CurationModels& models, std::uint64_t seed) {
  if (s.done(config)) throw PreconditionError("step: curation already finished");
  ++s.iteration;
  IterationTrace tr;
  tr.iteration = s.iteration;
  double passrate = s.passrate();
  if (!s.full())
    detail::fill_step(s, tr, config, models, seed, passrate);
  else
    detail::replace_step(s, tr, config, models, seed, passrate);
  detail::finish_step(s, std::move(tr), passrate);
  if (config.early_stop_patience > 0 && s.full() && s.failed_replacements >= config.early_stop_patience)
    s.stopped_early = true;
}

struct CurationOutcome {
  McqItem final_item;
  std::size_t selected_snapshot = 0;
  std::size_t effective_count = 0;
  double final_passrate = 0.0;
  double initial_passrate = 0.0;
  std::vector<std::string> padded_from_original;
  std::vector<std::string> padded_from_generated;
  int iterations = 0;
  bool stopped_early = false;
  std::size_t exact_rejections = 0;
  std::size_t semantic_rejections = 0;
  std::vector<IterationTrace> trace;
};

// Largest pool first, then lowest passrate, then earliest snapshot.
inline std::size_t select_snapshot(const std::vector<Snapshot>& history) {
  if (history.empty()) throw PreconditionError("select_snapshot: empty history");
  std::size_t best = 0;
  for (std::size_t i = 1; i < history.size(); ++i) {
    const auto& h = history[i];
    const auto& b = history[best];
    if (h.pool.size() > b.pool.size() || (h.pool.size() == b.pool.size() && h.passrate < b.passrate)) best = i;
  }
  return best;
}

inline CurationOutcome finalize(const CurationState& s, std::uint64_t seed) {
  CurationOutcome out;
  out.selected_snapshot = select_snapshot(s.history);
  const auto& snap = s.history[out.selected_snapshot];
  out.effective_count = snap.pool.size();
  out.final_passrate = snap.passrate;
  out.initial_passrate = s.history.front().passrate;
  out.iterations = s.iteration;
  out.stopped_early = s.stopped_early;
  out.trace = s.trace;
  for (const auto& r : s.rejected) {
    if (r.reason == "exact_match") ++out.exact_rejections;
    if (r.reason == "equivalent") ++out.semantic_rejections;
  }

  std::vector<std::string> distractors = snap.pool;
  std::unordered_set<std::string> used;
  for (const auto& d : distractors) used.insert(text::normalize_ws(d));
  auto pad = [&](const std::string& t, std::vector<std::string>& record) {
    if (distractors.size() >= s.target_distractors) return;
    if (!used.insert(text::normalize_ws(t)).second) return;
    distractors.push_back(t);
    record.push_back(t);
  };
  for (const auto& t : s.item.distractor_texts()) pad(t, out.padded_from_original);
  for (const auto& t : s.spare) pad(t, out.padded_from_generated);
  if (distractors.size() < s.target_distractors)
    throw GenerationFailure("item '" + s.item.id + "': only " + std::to_string(distractors.size()) + " of " +
                                std::to_string(s.target_distractors) + " distractors available after padding",
                            "", 0);

  auto rng = rnd::make_rng(rnd::derive(seed, "final"));
  out.final_item = assemble_item(s.item, s.item.correct_text(), distractors,
                                 rnd::uniform_index(rng, distractors.size() + 1));
  require_valid(out.final_item);
  return out;
}

inline CurationOutcome curate_item(const McqItem& item, const CurationConfig& config, const CurationModels& models,
                                   std::uint64_t seed) {
  auto s = initialize(item, config, models, seed);
  while (!s.done(config)) step(s, config, models, seed);
  return finalize(s, seed);
}

struct CurationFailure {
  std::string id;
  std::string message;
};

struct CurationReport {
  std::size_t items = 0;
  std::size_t curated = 0;
  std::size_t failed = 0;
  std::size_t generation_rounds = 0;
  std::size_t equivalence_rejections = 0;
  std::size_t exact_match_rejections = 0;
  std::size_t semantic_rejections = 0;
  std::size_t affected_questions = 0;
  std::size_t early_stops = 0;
  double mean_initial_passrate = 0.0;
  double mean_final_passrate = 0.0;
  double mean_effective_count = 0.0;
  std::vector<CurationFailure> errors;

  Json to_json() const {
    Json j;
    j["items"] = items;
    j["curated"] = curated;
    j["failed"] = failed;
    j["generation_rounds"] = generation_rounds;
    j["equivalence_rejections"] = equivalence_rejections;
    j["exact_match_rejections"] = exact_match_rejections;
    j["semantic_rejections"] = semantic_rejections;
    j["affected_questions"] = affected_questions;
    j["early_stops"] = early_stops;
    j["mean_initial_passrate"] = mean_initial_passrate;
    j["mean_final_passrate"] = mean_final_passrate;
    j["mean_effective_count"] = mean_effective_count;
    Json errs = Json::array();
    for (const auto& e : errors) errs.push_back({{"id", e.id}, {"error", e.message}});
    j["errors"] = std::move(errs);
    return j;
  }
};

struct CurationRun {
  std::vector<std::optional<CurationOutcome>> outcomes;  // input order
  CurationReport report;

  std::vector<McqItem> curated_items() const {
    std::vector<McqItem> out;
    for (const auto& o : outcomes)
      if (o) out.push_back(o->final_item);
    return out;
  }
};

inline CurationReport summarize(const std::vector<McqItem>& items,
                                const std::vector<std::optional<CurationOutcome>>& outcomes,
                                const std::vector<std::optional<std::string>>& errors) {
  CurationReport r;
  r.items = items.size();
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (errors[i]) {
      ++r.failed;
      r.errors.push_back({items[i].id, *errors[i]});
      continue;
    }
    const auto& o = *outcomes[i];
    ++r.curated;
    r.generation_rounds += static_cast<std::size_t>(o.iterations);
    r.exact_match_rejections += o.exact_rejections;
    r.semantic_rejections += o.semantic_rejections;
    if (o.exact_rejections + o.semantic_rejections > 0) ++r.affected_questions;
    if (o.stopped_early) ++r.early_stops;
    r.mean_initial_passrate += o.initial_passrate;
    r.mean_final_passrate += o.final_passrate;
    r.mean_effective_count += static_cast<double>(o.effective_count);
  }
  r.equivalence_rejections = r.exact_match_rejections + r.semantic_rejections;
  if (r.curated) {
    const auto n = static_cast<double>(r.curated);
    r.mean_initial_passrate /= n;
    r.mean_final_passrate /= n;
    r.mean_effective_count /= n;
  }
  return r;
}

// Items run independently on up to `workers` threads; per-item seeds derive
// from the item id, so results do not depend on scheduling or input order.
inline CurationRun curate_dataset(const std::vector<McqItem>& items, const CurationConfig& config,
                                  const CurationModels& models, std::uint64_t seed, std::size_t workers = 1) {
  config.validate();
  CurationRun run;
  run.outcomes.resize(items.size());
  std::vector<std::optional<std::string>> errors(items.size());
  parallel_for(items.size(), workers, [&](std::size_t i) {
    try {
      run.outcomes[i] = curate_item(items[i], config, models, rnd::derive(seed, "item", rnd::fnv1a(items[i].id)));
    } catch (const Error& e) {
      errors[i] = e.what();
      log::warn("curation failed for '" + items[i].id + "': " + e.what());
    }
  });
  run.report = summarize(items, run.outcomes, errors);
  return run;
}

inline Json trace_json(const std::string& id, const IterationTrace& t) {
  Json j;
  j["id"] = id;
  j["iteration"] = t.iteration;
  j["mode"] = t.mode;
  j["candidates"] = t.candidates;
  j["admitted"] = t.admitted;
  Json rej = Json::array();
  for (const auto& r : t.rejected) rej.push_back({{"text", r.text}, {"reason", r.reason}});
  j["rejected"] = std::move(rej);
  j["passrate"] = t.passrate ? Json(*t.passrate) : Json(nullptr);
  j["pool"] = t.pool;
  j["pool_strengths"] = t.pool_strengths;
  j["evaluated"] = t.evaluated;
  if (t.weak) {
    j["weak"] = *t.weak;
    j["weak_strength"] = *t.weak_strength;
  }
  if (t.new_strength) j["new_strength"] = *t.new_strength;
  j["replaced"] = t.replaced;
  if (!t.noop_reason.empty()) j["noop_reason"] = t.noop_reason;
  return j;
}

inline std::string trace_jsonl(const std::vector<McqItem>& items, const CurationRun& run) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (!run.outcomes[i]) continue;
    for (const auto& t : run.outcomes[i]->trace)
      out += trace_json(items[i].id, t).dump(-1, ' ', false, Json::error_handler_t::replace) + "\n";
  }
  return out;
}

struct AuditFinding {
  std::string id;
  std::string text;
};

// Re-judges every final distractor against the correct answer.
inline std::vector<AuditFinding> audit_equivalence(const std::vector<McqItem>& curated, const Model& judge) {
  std::vector<AuditFinding> out;
  for (const auto& item : curated)
    for (const auto& d : item.distractor_texts())
      if (judge_equivalence(item, d, judge).verdict == Equivalence::equivalent) out.push_back({item.id, d});
  return out;
}

}  // namespace mcqc

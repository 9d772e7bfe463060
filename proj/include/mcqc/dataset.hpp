#pragma once

#include <algorithm>
#include <cmath>
#include <compare>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "mcqc/core/error.hpp"
#include "mcqc/core/files.hpp"
#include "mcqc/core/random.hpp"
#include "mcqc/core/text.hpp"

namespace mcqc {

using Json = nlohmann::ordered_json;

inline constexpr std::size_t kMaxOptions = 26;

// Option label: one uppercase letter. Labels are positional, A is index 0.
class Label {
 public:
  constexpr Label() = default;
  constexpr explicit Label(char c) : c_(c) {}

  static constexpr Label at(std::size_t index) { return Label(static_cast<char>('A' + index)); }

  static std::optional<Label> parse(std::string_view s) {
    s = text::trim_view(s);
    if (s.size() == 1 && s[0] >= 'A' && s[0] <= 'Z') return Label(s[0]);
    return std::nullopt;
  }

  constexpr char value() const { return c_; }
  constexpr std::size_t index() const { return static_cast<std::size_t>(c_ - 'A'); }
  std::string str() const { return std::string(1, c_); }

  friend constexpr auto operator<=>(Label, Label) = default;

 private:
  char c_ = 'A';
};

struct McqItem {
  std::string id;
  std::string stem;
  std::vector<std::string> options;  // options[i] is labeled Label::at(i)
  std::size_t correct = 0;
  Json meta = Json::object();

  std::size_t size() const { return options.size(); }
  Label correct_label() const { return Label::at(correct); }
  const std::string& correct_text() const { return options.at(correct); }
  bool has_label(Label l) const { return l.value() >= 'A' && l.index() < options.size(); }
  const std::string& text(Label l) const { return options.at(l.index()); }

  std::vector<Label> labels() const {
    std::vector<Label> out;
    for (std::size_t i = 0; i < options.size(); ++i) out.push_back(Label::at(i));
    return out;
  }

  std::vector<Label> distractor_labels() const {
    std::vector<Label> out;
    for (std::size_t i = 0; i < options.size(); ++i)
      if (i != correct) out.push_back(Label::at(i));
    return out;
  }

  std::vector<std::string> distractor_texts() const {
    std::vector<std::string> out;
    for (std::size_t i = 0; i < options.size(); ++i)
      if (i != correct) out.push_back(options[i]);
    return out;
  }

  friend bool operator==(const McqItem&, const McqItem&) = default;
};

// Builds an item whose options are `correct_text` at `correct_position` and the
// distractors in the given order around it.
inline McqItem assemble_item(const McqItem& base, const std::string& correct_text,
                             const std::vector<std::string>& distractors,
                             std::size_t correct_position) {
  McqItem out;
  out.id = base.id;
  out.stem = base.stem;
  out.meta = base.meta;
  correct_position = std::min(correct_position, distractors.size());
  out.options.reserve(distractors.size() + 1);
  out.options.insert(out.options.end(), distractors.begin(),
                     distractors.begin() + static_cast<std::ptrdiff_t>(correct_position));
  out.options.push_back(correct_text);
  out.options.insert(out.options.end(),
                     distractors.begin() + static_cast<std::ptrdiff_t>(correct_position),
                     distractors.end());
  out.correct = correct_position;
  return out;
}

// Returns a description of the first violated invariant, if any.
inline std::optional<std::string> check_item(const McqItem& item) {
  if (item.options.size() < 2) return "fewer than 2 options";
  if (item.options.size() > kMaxOptions) return "more than 26 options";
  if (item.correct >= item.options.size()) return "correct label absent from options";
  std::unordered_set<std::string> seen;
  for (std::size_t i = 0; i < item.options.size(); ++i) {
    auto norm = text::normalize_ws(item.options[i]);
    if (norm.empty()) return "option " + Label::at(i).str() + " is empty";
    if (!seen.insert(norm).second) return "duplicate option text at " + Label::at(i).str();
  }
  return std::nullopt;
}

inline void require_valid(const McqItem& item) {
  if (auto problem = check_item(item)) throw InvalidItem("item '" + item.id + "': " + *problem);
}

// ---------------------------------------------------------------------------
// JSONL schema

// Field names of a source export. Empty id_field means ids are synthesized
// from the line number ("line-<n>").
struct SchemaMapping {
  std::string id_field = "id";
  std::string question_field = "question";
  std::string options_field = "options";
  std::string answer_field = "answer";
  std::string meta_field = "meta";               // copied whole when present
  std::vector<std::string> meta_fields;          // copied individually into meta

  static SchemaMapping canonical() { return {}; }

  // MMLU-Pro rows: question_id, question, options (array), answer (letter).
  static SchemaMapping mmlu_pro() {
    SchemaMapping m;
    m.id_field = "question_id";
    m.meta_field.clear();
    m.meta_fields = {"category", "src"};
    return m;
  }

  // MedQA rows: question, options (object), answer_idx (letter), meta_info.
  static SchemaMapping medqa() {
    SchemaMapping m;
    m.id_field.clear();
    m.answer_field = "answer_idx";
    m.meta_field.clear();
    m.meta_fields = {"meta_info"};
    return m;
  }

  static SchemaMapping preset(const std::string& name) {
    if (name == "canonical") return canonical();
    if (name == "mmlu-pro") return mmlu_pro();
    if (name == "medqa") return medqa();
    throw ConfigError("unknown schema preset '" + name + "' (canonical, mmlu-pro, medqa)");
  }
};

inline Json to_json(const McqItem& item) {
  Json j;
  j["id"] = item.id;
  j["question"] = item.stem;
  Json opts = Json::object();
  for (std::size_t i = 0; i < item.options.size(); ++i) opts[Label::at(i).str()] = item.options[i];
  j["options"] = std::move(opts);
  j["answer"] = item.correct_label().str();
  j["meta"] = item.meta;
  return j;
}

inline std::string options_block(const McqItem& item) {
  std::string out;
  for (std::size_t i = 0; i < item.options.size(); ++i) {
    if (i) out.push_back('\n');
    out += Label::at(i).str() + ". " + item.options[i];
  }
  return out;
}

namespace detail {

inline std::string scalar_to_string(const Json& v) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_number_integer()) return std::to_string(v.get<long long>());
  if (v.is_number_unsigned()) return std::to_string(v.get<unsigned long long>());
  return v.dump();
}

}  // namespace detail

// Maps one decoded source object to an item. Throws InvalidItem on any
// missing field or invariant violation.
inline McqItem item_from_json(const Json& j, const SchemaMapping& m, std::size_t line_no) {
  if (!j.is_object()) throw InvalidItem("line is not a JSON object");
  McqItem item;
  if (m.id_field.empty()) {
    item.id = "line-" + std::to_string(line_no);
  } else {
    auto it = j.find(m.id_field);
    if (it == j.end() || it->is_null()) throw InvalidItem("missing id field '" + m.id_field + "'");
    item.id = detail::scalar_to_string(*it);
  }

  auto q = j.find(m.question_field);
  if (q == j.end() || !q->is_string()) throw InvalidItem("missing stem field '" + m.question_field + "'");
  item.stem = q->get<std::string>();

  auto opts = j.find(m.options_field);
  if (opts == j.end()) throw InvalidItem("missing options field '" + m.options_field + "'");
  if (opts->is_array()) {
    for (const auto& o : *opts) {
      if (!o.is_string()) throw InvalidItem("option is not a string");
      item.options.push_back(o.get<std::string>());
    }
  } else if (opts->is_object()) {
    std::map<char, std::string> by_label;
    for (const auto& [key, value] : opts->items()) {
      auto label = Label::parse(key);
      if (!label || key.size() != 1) throw InvalidItem("option key '" + key + "' is not a label");
      if (!value.is_string()) throw InvalidItem("option " + key + " is not a string");
      by_label[label->value()] = value.get<std::string>();
    }
    char expect = 'A';
    for (const auto& [c, v] : by_label) {
      if (c != expect) throw InvalidItem("option labels are not consecutive from A");
      item.options.push_back(v);
      ++expect;
    }
  } else {
    throw InvalidItem("options field is neither array nor object");
  }

  auto ans = j.find(m.answer_field);
  if (ans == j.end() || ans->is_null()) throw InvalidItem("missing answer field '" + m.answer_field + "'");
  if (ans->is_number_integer()) {
    auto idx = ans->get<long long>();
    if (idx < 0 || static_cast<std::size_t>(idx) >= item.options.size())
      throw InvalidItem("correct label absent");
    item.correct = static_cast<std::size_t>(idx);
  } else if (ans->is_string()) {
    auto label = Label::parse(ans->get<std::string>());
    if (label) {
      if (!item.has_label(*label)) throw InvalidItem("correct label absent");
      item.correct = label->index();
    } else {
      auto s = ans->get<std::string>();
      auto hit = std::find(item.options.begin(), item.options.end(), s);
      if (hit == item.options.end()) throw InvalidItem("correct label absent");
      item.correct = static_cast<std::size_t>(hit - item.options.begin());
    }
  } else {
    throw InvalidItem("answer field has unsupported type");
  }

  if (!m.meta_field.empty()) {
    auto meta = j.find(m.meta_field);
    if (meta != j.end() && meta->is_object()) item.meta = *meta;
  }
  for (const auto& f : m.meta_fields) {
    auto it = j.find(f);
    if (it != j.end()) item.meta[f] = *it;
  }

  require_valid(item);
  return item;
}

struct IngestError {
  std::size_t line = 0;  // 1-based
  std::string message;
};

struct IngestReport {
  std::vector<McqItem> items;
  std::vector<IngestError> errors;
  std::size_t lines_read = 0;  // non-blank lines
};

// Parses a JSONL export. Malformed lines are reported, never silently dropped.
inline IngestReport ingest_jsonl(const std::string& path,
                                 const SchemaMapping& mapping = SchemaMapping::canonical()) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path);
  IngestReport report;
  std::unordered_set<std::string> ids;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (text::trim_view(line).empty()) continue;
    ++report.lines_read;
    try {
      auto j = Json::parse(line);
      auto item = item_from_json(j, mapping, line_no);
      if (!ids.insert(item.id).second) throw InvalidItem("duplicate id '" + item.id + "'");
      report.items.push_back(std::move(item));
    } catch (const Json::exception& e) {
      report.errors.push_back({line_no, std::string("malformed JSON: ") + e.what()});
    } catch (const InvalidItem& e) {
      report.errors.push_back({line_no, e.what()});
    }
  }
  return report;
}

inline std::string to_jsonl(const std::vector<McqItem>& items) {
  std::string out;
  for (const auto& item : items) {
    out += to_json(item).dump(-1, ' ', false, Json::error_handler_t::strict);
    out.push_back('\n');
  }
  return out;
}

inline void emit_jsonl(const std::vector<McqItem>& items, const std::string& path) {
  for (const auto& item : items) require_valid(item);
  files::write_atomic(path, to_jsonl(items));
}

// ---------------------------------------------------------------------------
// Cleaning and splitting

inline std::vector<McqItem> filter_count(const std::vector<McqItem>& items, std::size_t n) {
  std::vector<McqItem> out;
  for (const auto& item : items)
    if (item.size() == n) out.push_back(item);
  return out;
}

// Key: normalized stem plus the sorted multiset of normalized option texts.
inline std::string dedupe_key(const McqItem& item) {
  std::vector<std::string> opts;
  opts.reserve(item.options.size());
  for (const auto& o : item.options) opts.push_back(text::normalize_ws(o));
  std::sort(opts.begin(), opts.end());
  std::string key = text::normalize_ws(item.stem);
  for (const auto& o : opts) {
    key.push_back('\x1f');
    key += o;
  }
  return key;
}

// First occurrence wins; input order is preserved.
inline std::vector<McqItem> dedupe(const std::vector<McqItem>& items) {
  std::unordered_set<std::string> seen;
  std::vector<McqItem> out;
  for (const auto& item : items)
    if (seen.insert(dedupe_key(item)).second) out.push_back(item);
  return out;
}

struct DatasetSplit {
  std::vector<McqItem> train;
  std::vector<McqItem> test;
  std::uint64_t seed = 0;
  double ratio = 0.85;
};

// floor(ratio * N) items go to train, chosen by a seeded shuffle; both sides
// keep input order.
inline DatasetSplit split(const std::vector<McqItem>& items, double ratio, std::uint64_t seed) {
  if (items.empty()) throw PreconditionError("split: empty input");
  if (!(ratio > 0.0 && ratio < 1.0)) throw PreconditionError("split: ratio must be in (0, 1)");
  const std::size_t n = items.size();
  const auto n_train = static_cast<std::size_t>(std::floor(ratio * static_cast<double>(n) + 1e-9));
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  auto rng = rnd::make_rng(rnd::derive(seed, "split"));
  rnd::shuffle(order, rng);
  std::vector<bool> to_train(n, false);
  for (std::size_t i = 0; i < n_train; ++i) to_train[order[i]] = true;
  DatasetSplit out;
  out.seed = seed;
  out.ratio = ratio;
  for (std::size_t i = 0; i < n; ++i) (to_train[i] ? out.train : out.test).push_back(items[i]);
  return out;
}

// ---------------------------------------------------------------------------
// Option-count variants

enum class VariantMode { fixed, mixed };

struct VariantSpec {
  std::size_t target_count = 2;
  VariantMode mode = VariantMode::fixed;
  std::map<std::size_t, double> mixed_proportions;  // count -> fraction
  std::uint64_t seed = 0;

  void validate() const {
    if (mode == VariantMode::fixed) {
      if (target_count < 2 || target_count > 10)
        throw PreconditionError("variant: target_count must be in [2, 10]");
      return;
    }
    if (mixed_proportions.empty()) throw PreconditionError("variant: mixed mode needs proportions");
    double sum = 0;
    for (const auto& [count, p] : mixed_proportions) {
      if (count < 2 || count > 10) throw PreconditionError("variant: mixed count outside [2, 10]");
      if (p < 0) throw PreconditionError("variant: negative proportion");
      sum += p;
    }
    if (std::abs(sum - 1.0) > 1e-9) throw PreconditionError("variant: proportions must sum to 1");
  }

  static VariantSpec fixed(std::size_t count, std::uint64_t seed = 0) {
    VariantSpec s;
    s.target_count = count;
    s.seed = seed;
    return s;
  }

  static VariantSpec mixed(std::map<std::size_t, double> proportions, std::uint64_t seed = 0) {
    VariantSpec s;
    s.mode = VariantMode::mixed;
    s.mixed_proportions = std::move(proportions);
    s.seed = seed;
    return s;
  }
};

// Keeps the correct option and a seeded uniform subset of target_count - 1
// distractors. Survivors keep their original relative order and are relettered
// from A.
inline McqItem make_variant(const McqItem& item, std::size_t target_count, std::uint64_t rng_seed) {
  if (target_count < 2) throw PreconditionError("variant: target_count must be >= 2");
  if (target_count > item.size())
    throw PreconditionError("variant: target_count " + std::to_string(target_count) +
                            " exceeds available options (" + std::to_string(item.size()) + ")");
  auto distractors = item.distractor_labels();
  auto rng = rnd::make_rng(rng_seed);
  auto picked = rnd::sample_without_replacement(rng, distractors.size(), target_count - 1);
  std::vector<bool> keep(item.size(), false);
  keep[item.correct] = true;
  for (auto p : picked) keep[distractors[p].index()] = true;

  McqItem out;
  out.id = item.id;
  out.stem = item.stem;
  out.meta = item.meta;
  for (std::size_t i = 0; i < item.size(); ++i) {
    if (!keep[i]) continue;
    if (i == item.correct) out.correct = out.options.size();
    out.options.push_back(item.options[i]);
  }
  return out;
}

inline McqItem make_variant(const McqItem& item, const VariantSpec& spec, std::uint64_t rng_seed) {
  spec.validate();
  if (spec.mode != VariantMode::fixed)
    throw PreconditionError("make_variant: per-item variants require fixed mode");
  return make_variant(item, spec.target_count, rng_seed);
}

// Per-item option counts for a mixed training set. Quotas use the largest
// remainder method, so each count lands within one item of p * N, and the
// assignment is then shuffled.
inline std::vector<std::size_t> assign_mixed_counts(std::size_t n_items,
                                                    const std::map<std::size_t, double>& proportions,
                                                    std::uint64_t seed) {
  struct Quota {
    std::size_t count;
    std::size_t n;
    double remainder;
  };
  std::vector<Quota> quotas;
  std::size_t assigned = 0;
  for (const auto& [count, p] : proportions) {
    double exact = p * static_cast<double>(n_items);
    auto base = static_cast<std::size_t>(std::floor(exact));
    quotas.push_back({count, base, exact - static_cast<double>(base)});
    assigned += base;
  }
  std::vector<std::size_t> order(quotas.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return quotas[a].remainder > quotas[b].remainder; });
  for (std::size_t i = 0; assigned < n_items && !order.empty(); i = (i + 1) % order.size()) {
    ++quotas[order[i]].n;
    ++assigned;
  }
  std::vector<std::size_t> counts;
  counts.reserve(n_items);
  for (const auto& q : quotas) counts.insert(counts.end(), q.n, q.count);
  auto rng = rnd::make_rng(rnd::derive(seed, "mixed-assign"));
  rnd::shuffle(counts, rng);
  return counts;
}

// Dataset-level variant construction for both fixed and mixed specs.
inline std::vector<McqItem> make_variants(const std::vector<McqItem>& items, const VariantSpec& spec) {
  spec.validate();
  std::vector<std::size_t> counts;
  if (spec.mode == VariantMode::mixed)
    counts = assign_mixed_counts(items.size(), spec.mixed_proportions, spec.seed);
  else
    counts.assign(items.size(), spec.target_count);
  std::vector<McqItem> out;
  out.reserve(items.size());
  for (std::size_t i = 0; i < items.size(); ++i)
    out.push_back(make_variant(items[i], counts[i], rnd::derive(spec.seed, "variant", i)));
  return out;
}

// Moves each item's correct option to a uniformly drawn position; distractors
// keep their relative order.
inline std::vector<McqItem> permute_correct_label(const std::vector<McqItem>& items,
                                                  std::uint64_t rng_seed) {
  if (items.empty()) return {};
  const auto n = items.front().size();
  for (const auto& item : items)
    if (item.size() != n) throw PreconditionError("permute_correct_label: heterogeneous option counts");
  std::vector<McqItem> out;
  out.reserve(items.size());
  for (std::size_t i = 0; i < items.size(); ++i) {
    auto rng = rnd::make_rng(rnd::derive(rng_seed, "permute", i));
    auto pos = rnd::uniform_index(rng, n);
    out.push_back(assemble_item(items[i], items[i].correct_text(), items[i].distractor_texts(), pos));
  }
  return out;
}

}  // namespace mcqc

#pragma once

#include <algorithm>
#include <cctype>
#include <optional>
#include <regex>
#include <set>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "mcqc/backend.hpp"
#include "mcqc/dataset.hpp"
#include "mcqc/prompts.hpp"

namespace mcqc {

// ---------------------------------------------------------------------------
// Answer-label extraction
//
// Priority: (1) the last "answer is X" / "Answer: X" / "FINAL ANSWER: X" style
// phrase, (2) the first standalone delimited letter "(B)", "B.", "B)",
// (3) the whole trimmed response being a single label.

namespace detail {

inline bool is_alnum(char c) { return std::isalnum(static_cast<unsigned char>(c)) != 0; }

inline bool is_valid(char c, const std::vector<Label>& valid) {
  return std::any_of(valid.begin(), valid.end(), [c](Label l) { return l.value() == c; });
}

// Reads a label right after an "answer" keyword, allowing "is", ":", "-",
// whitespace, and one wrapping pair of brackets or markdown emphasis.
inline std::optional<Label> label_after_keyword(std::string_view s, std::size_t pos,
                                                const std::vector<Label>& valid) {
  auto skip = [&](auto pred) {
    while (pos < s.size() && pred(s[pos])) ++pos;
  };
  auto punct = [](char c) { return c == ' ' || c == '\t' || c == '\n' || c == ':' || c == '-' || c == '*'; };
  skip(punct);
  if (pos + 1 < s.size() && (s[pos] == 'i' || s[pos] == 'I') && (s[pos + 1] == 's' || s[pos + 1] == 'S') &&
      (pos + 2 >= s.size() || !is_alnum(s[pos + 2]))) {
    pos += 2;
    skip(punct);
  }
  if (pos < s.size() && (s[pos] == '(' || s[pos] == '[')) ++pos;
  if (pos >= s.size()) return std::nullopt;
  char c = s[pos];
  if (!(c >= 'A' && c <= 'Z') || !is_valid(c, valid)) return std::nullopt;
  if (pos + 1 < s.size() && is_alnum(s[pos + 1])) return std::nullopt;
  return Label(c);
}

}  // namespace detail

inline std::optional<Label> extract_label(std::string_view raw, const std::vector<Label>& valid) {
  // (1) tail patterns: the last matching keyword wins.
  const auto lower = text::to_lower_ascii(raw);
  std::optional<Label> tail;
  for (std::size_t pos = lower.find("answer"); pos != std::string::npos; pos = lower.find("answer", pos + 1)) {
    if (auto l = detail::label_after_keyword(raw, pos + 6, valid)) tail = l;
  }
  if (tail) return tail;

  // (2) first standalone delimited letter.
  for (std::size_t i = 0; i < raw.size(); ++i) {
    char c = raw[i];
    bool left_ok = i == 0 || !detail::is_alnum(raw[i - 1]);
    if (c == '(' && i + 2 < raw.size() && raw[i + 2] == ')' && detail::is_valid(raw[i + 1], valid) &&
        raw[i + 1] >= 'A' && raw[i + 1] <= 'Z')
      return Label(raw[i + 1]);
    if (c >= 'A' && c <= 'Z' && left_ok && i + 1 < raw.size() &&
        (raw[i + 1] == '.' || raw[i + 1] == ')') && (i + 2 >= raw.size() || !detail::is_alnum(raw[i + 2])) &&
        detail::is_valid(c, valid))
      return Label(c);
  }

  // (3) bare label.
  auto t = text::trim_view(raw);
  if (t.size() == 1 && detail::is_valid(t[0], valid)) return Label(t[0]);
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Option prefix stripping: "Option A: x", "A. x", "A) x", "IV. x".

inline std::string strip_option_prefix(std::string_view input) {
  static const std::regex prefix(R"(^(?:[Oo]ption\s+[A-Za-z]\s*:|[A-Z][.)]|[IVXLC]+\.)\s+)");
  std::string s = text::trim(input);
  for (;;) {
    std::smatch m;
    if (!std::regex_search(s, m, prefix)) return s;
    std::string rest = text::trim(std::string_view(s).substr(static_cast<std::size_t>(m.length(0))));
    if (rest.empty()) return s;
    s = std::move(rest);
  }
}

// ---------------------------------------------------------------------------
// JSON extraction from free-form completions

inline std::optional<Json> extract_json_block(std::string_view raw) {
  auto try_parse = [](std::string_view s) -> std::optional<Json> {
    try {
      auto j = Json::parse(s);
      if (j.is_object()) return j;
    } catch (const Json::exception&) {
    }
    return std::nullopt;
  };
  if (auto fence = raw.find("```json"); fence != std::string_view::npos) {
    auto start = fence + 7;
    auto end = raw.find("```", start);
    if (auto j = try_parse(raw.substr(start, end == std::string_view::npos ? end : end - start))) return j;
  }
  auto open = raw.find('{');
  auto close = raw.rfind('}');
  if (open != std::string_view::npos && close != std::string_view::npos && close > open)
    return try_parse(raw.substr(open, close - open + 1));
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Answer sampling

struct AnswerSample {
  std::string raw_text;
  std::optional<Label> parsed_label;
  bool parse_ok() const { return parsed_label.has_value(); }
};

inline std::string evaluation_prompt(const McqItem& item) {
  return prompts::render(prompts::kModelEvaluation,
                         {{"question_text", item.stem}, {"options", options_block(item)}});
}

// Draws k answers; sample i uses sample_index i so that replayed runs map
// one-to-one onto cache records.
inline std::vector<AnswerSample> sample_answers(const McqItem& item, std::size_t k, const Model& model,
                                                std::uint64_t seed) {
  if (k < 1) throw PreconditionError("sample_answers: k must be >= 1");
  const auto prompt = evaluation_prompt(item);
  const auto valid = item.labels();
  RequestContext ctx;
  ctx.item = item;
  std::vector<AnswerSample> out;
  out.reserve(k);
  for (std::size_t i = 0; i < k; ++i) {
    auto raw = model.call(model.request(Role::answer, prompt, i, seed, ctx));
    auto label = extract_label(raw, valid);
    out.push_back({std::move(raw), label});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Distractor generation

enum class SlotMode { replace, fill };
enum class Decision { keep_all, improve };

struct GenerationResult {
  std::map<Label, std::string> distractors;
  std::string reasoning;
  std::optional<Decision> decision;
  std::string raw;
  int attempts = 1;
};

namespace detail {

inline std::optional<Decision> parse_decision(const Json& j) {
  auto it = j.find("decision");
  if (it == j.end() || !it->is_string()) return std::nullopt;
  auto s = it->get<std::string>();
  if (s == "KEEP_ALL") return Decision::keep_all;
  if (s == "IMPROVE") return Decision::improve;
  return std::nullopt;
}

// Validates a {"distractors": {...}} payload against the requested slot keys.
// Returns the violation message or the parsed map.
inline std::variant<std::string, std::map<Label, std::string>> validate_distractor_map(
    const std::optional<Json>& parsed, const std::vector<Label>& slots, const std::string& correct_text,
    Label correct_label) {
  if (!parsed) return std::string("the output did not contain a valid JSON object");
  auto it = parsed->find("distractors");
  if (it == parsed->end() || !it->is_object())
    return std::string("the JSON must contain a \"distractors\" dictionary");
  std::map<Label, std::string> out;
  for (const auto& [key, value] : it->items()) {
    auto l = Label::parse(key);
    if (!l || key.size() != 1) return "invalid option identifier \"" + key + "\"";
    if (*l == correct_label)
      return "do not use the correct option identifier \"" + key + "\" as a key";
    if (std::find(slots.begin(), slots.end(), *l) == slots.end())
      return "unexpected key \"" + key + "\"; only use the keys of the existing distractors";
    if (!value.is_string() || text::trim_view(value.get<std::string>()).empty())
      return "the distractor for key \"" + key + "\" must be a non-empty string";
    auto v = text::trim(value.get<std::string>());
    if (v == correct_text) return "the distractor for key \"" + key + "\" is the same as the correct answer";
    out[*l] = v;
  }
  for (auto s : slots)
    if (!out.count(s)) return "missing key \"" + s.str() + "\"";
  return out;
}

inline std::string labels_json(const std::map<Label, std::string>& m) {
  Json j = Json::object();
  for (const auto& [l, t] : m) j[l.str()] = t;
  return j.dump(-1, ' ', false, Json::error_handler_t::replace);
}

inline std::string exclusion_note(const std::vector<std::string>& exclude) {
  if (exclude.empty()) return "";
  Json arr = exclude;
  return "Do NOT propose any of these options, which are already in use or were already tried: " +
         arr.dump(-1, ' ', false, Json::error_handler_t::replace);
}

}  // namespace detail

// Requests distractor texts for `slots`. In replace mode the slots are existing
// distractor labels of `item`; in fill mode they are fresh labels beyond it.
// Invalid outputs are retried (max_retries) with the violation described in
// the template's feedback slot.
inline GenerationResult generate_distractors(const McqItem& item, const std::vector<Label>& slots, SlotMode mode,
                                             const std::string& failed_feedback, const Model& model,
                                             std::uint64_t seed, const std::vector<std::string>& exclude = {}) {
  if (slots.empty()) throw PreconditionError("generate_distractors: no slots requested");
  std::map<Label, std::string> existing;
  for (auto s : slots) {
    if (s == item.correct_label()) throw PreconditionError("generate_distractors: slot is the correct label");
    if (mode == SlotMode::replace) {
      if (!item.has_label(s)) throw PreconditionError("generate_distractors: slot " + s.str() + " not in item");
      existing[s] = item.text(s);
    } else {
      if (item.has_label(s)) throw PreconditionError("generate_distractors: fill slot " + s.str() + " is taken");
      existing[s] = "";
    }
  }
  if (existing.size() != slots.size()) throw PreconditionError("generate_distractors: duplicate slots");

  RequestContext ctx;
  ctx.item = item;
  ctx.slots = slots;
  ctx.exclude = exclude;

  std::string violation;
  std::string last_raw;
  const int attempts = model.config.max_retries + 1;
  for (int attempt = 0; attempt < attempts; ++attempt) {
    std::vector<std::string> feedback;
    if (!failed_feedback.empty()) feedback.push_back(failed_feedback);
    if (auto note = detail::exclusion_note(exclude); !note.empty()) feedback.push_back(note);
    if (!violation.empty())
      feedback.push_back("Your previous output was rejected: " + violation +
                         ". Follow the output format and requirements exactly.");
    auto prompt = prompts::render(prompts::kDistractorGeneration,
                                  {{"question_text", item.stem},
                                   {"correct_option", item.correct_label().str()},
                                   {"correct_answer", item.correct_text()},
                                   {"num_distractors", std::to_string(slots.size())},
                                   {"existing_distractors", detail::labels_json(existing)},
                                   {"failed_feedback", text::join(feedback, "\n")}});
    last_raw = model.call(model.request(Role::generate_distractors, prompt,
                                        static_cast<std::uint64_t>(attempt), seed, ctx));
    auto parsed = extract_json_block(last_raw);
    auto checked = detail::validate_distractor_map(parsed, slots, item.correct_text(), item.correct_label());
    if (auto* msg = std::get_if<std::string>(&checked)) {
      violation = *msg;
      continue;
    }
    GenerationResult result;
    result.distractors = std::get<1>(std::move(checked));
    result.reasoning = parsed->value("reasoning", std::string());
    result.decision = detail::parse_decision(*parsed);
    result.raw = last_raw;
    result.attempts = attempt + 1;
    return result;
  }
  throw GenerationFailure("distractor generation failed after " + std::to_string(attempts) +
                              " attempts: " + violation,
                          last_raw, attempts);
}

// ---------------------------------------------------------------------------
// Option expansion

inline McqItem expand_options(const McqItem& item, std::size_t target_count, const Model& model,
                              std::uint64_t seed) {
  if (target_count <= item.size())
    throw PreconditionError("expand_options: target count must exceed the current count");
  if (target_count > kMaxOptions) throw PreconditionError("expand_options: target count above 26");
  const auto needed = target_count - item.size();
  const auto prompt = prompts::render(
      prompts::kOptionExpansion, {{"current_num", std::to_string(item.size())},
                                  {"target_num", std::to_string(target_count)},
                                  {"new_options_num", std::to_string(needed)},
                                  {"raw_question", item.stem + "\n" + options_block(item)}});
  RequestContext ctx;
  ctx.item = item;
  ctx.new_options = needed;

  std::string last_raw;
  std::string violation;
  const int attempts = model.config.max_retries + 1;
  for (int attempt = 0; attempt < attempts; ++attempt) {
    last_raw = model.call(model.request(Role::expand_options, prompt, static_cast<std::uint64_t>(attempt), seed, ctx));
    auto parsed = extract_json_block(last_raw);
    if (!parsed || !parsed->contains("new_options") || !(*parsed)["new_options"].is_array()) {
      violation = "no new_options array";
      continue;
    }
    const auto& arr = (*parsed)["new_options"];
    if (arr.size() != needed) {
      violation = "expected " + std::to_string(needed) + " options, got " + std::to_string(arr.size());
      continue;
    }
    std::set<std::string> seen;
    for (const auto& o : item.options) seen.insert(text::normalize_ws(o));
    McqItem out = item;
    violation.clear();
    for (const auto& v : arr) {
      if (!v.is_string()) {
        violation = "non-string option";
        break;
      }
      auto cleaned = strip_option_prefix(v.get<std::string>());
      auto norm = text::normalize_ws(cleaned);
      if (norm.empty() || !seen.insert(norm).second) {
        violation = "empty or duplicate option \"" + cleaned + "\"";
        break;
      }
      out.options.push_back(cleaned);
    }
    if (!violation.empty()) continue;
    return out;
  }
  throw GenerationFailure("option expansion failed after " + std::to_string(attempts) + " attempts: " + violation,
                          last_raw, attempts);
}

// ---------------------------------------------------------------------------
// Semantic equivalence judge

enum class Equivalence { equivalent, not_equivalent };

struct EquivalenceJudgment {
  Equivalence verdict = Equivalence::equivalent;
  bool parsed = false;         // false: verdict fell back to EQUIVALENT
  bool short_circuit = false;  // true: decided without a model call
  std::string raw;
};

// Unparseable verdicts count as EQUIVALENT so the candidate is rejected.
inline std::optional<Equivalence> parse_verdict(std::string_view raw) {
  std::string up(text::trim_view(raw));
  std::transform(up.begin(), up.end(), up.begin(), [](unsigned char c) { return static_cast<char>(std::toupper(c)); });
  if (up.find("NOT_EQUIVALENT") != std::string::npos || up.find("NOT EQUIVALENT") != std::string::npos)
    return Equivalence::not_equivalent;
  if (up.find("EQUIVALENT") != std::string::npos) return Equivalence::equivalent;
  return std::nullopt;
}

inline EquivalenceJudgment judge_equivalence(std::string_view stem, const std::string& correct_text,
                                             const std::string& candidate_text, const Model& model,
                                             const std::optional<McqItem>& item = std::nullopt) {
  EquivalenceJudgment j;
  if (text::normalize_ws(correct_text) == text::normalize_ws(candidate_text)) {
    j.verdict = Equivalence::equivalent;
    j.parsed = true;
    j.short_circuit = true;
    return j;
  }
  auto prompt = prompts::render(prompts::kSemanticEquivalence, {{"question_text", std::string(stem)},
                                                                {"text1", correct_text},
                                                                {"text2", candidate_text}});
  RequestContext ctx;
  ctx.item = item;
  ctx.candidate = candidate_text;
  j.raw = model.call(model.request(Role::judge_equivalence, prompt, 0, 0, ctx));
  if (auto v = parse_verdict(j.raw)) {
    j.verdict = *v;
    j.parsed = true;
  } else {
    log::warn("equivalence verdict unparseable, treating as EQUIVALENT: " + text::normalize_ws(j.raw).substr(0, 80));
  }
  return j;
}

inline EquivalenceJudgment judge_equivalence(const McqItem& item, const std::string& candidate_text,
                                             const Model& model) {
  return judge_equivalence(item.stem, item.correct_text(), candidate_text, model, item);
}

}  // namespace mcqc

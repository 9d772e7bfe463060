#pragma once

#include <optional>
#include <string>
#include <vector>

#include "mcqc/dataset.hpp"
#include "mcqc/model_ops.hpp"

namespace mcqc {

enum class Provenance { direct, filtered, rewritten };

inline std::string_view to_string(Provenance p) {
  switch (p) {
    case Provenance::direct: return "direct";
    case Provenance::filtered: return "filtered";
    case Provenance::rewritten: return "rewritten";
  }
  return "unknown";
}

struct ShortAnswerItem {
  std::string id;
  std::string question;
  std::string answer;
  Provenance provenance = Provenance::direct;
  std::string source_id;

  friend bool operator==(const ShortAnswerItem&, const ShortAnswerItem&) = default;
};

inline Json to_json(const ShortAnswerItem& s) {
  return Json{{"id", s.id},
              {"question", s.question},
              {"answer", s.answer},
              {"provenance", std::string(to_string(s.provenance))},
              {"source_id", s.source_id}};
}

inline std::string to_jsonl(const std::vector<ShortAnswerItem>& items) {
  std::string out;
  for (const auto& s : items) out += to_json(s).dump(-1, ' ', false, Json::error_handler_t::replace) + "\n";
  return out;
}

inline ShortAnswerItem direct_convert(const McqItem& item, Provenance provenance = Provenance::direct) {
  return {item.id, item.stem, item.correct_text(), provenance, item.id};
}

enum class Convertibility { convertible, not_convertible };

struct ConvertibilityJudgment {
  Convertibility verdict = Convertibility::not_convertible;
  bool labeled = false;  // false: no FINAL_LABEL line, verdict fell back
  std::string raw;
};

// Reads the last "FINAL_LABEL:" line. Anything else is NOT_CONVERTIBLE.
inline std::optional<Convertibility> parse_final_label(std::string_view raw) {
  auto lines = text::split_lines(raw);
  for (auto it = lines.rbegin(); it != lines.rend(); ++it) {
    auto line = text::trim_view(*it);
    auto pos = line.find("FINAL_LABEL:");
    if (pos == std::string_view::npos) continue;
    auto value = text::trim_view(line.substr(pos + 12));
    while (!value.empty() && (value.back() == '.' || value.back() == '*')) value.remove_suffix(1);
    while (!value.empty() && value.front() == '*') value.remove_prefix(1);
    if (value == "CONVERTIBLE") return Convertibility::convertible;
    if (value == "NOT_CONVERTIBLE") return Convertibility::not_convertible;
    return std::nullopt;
  }
  return std::nullopt;
}

inline ConvertibilityJudgment filter_convertible(const McqItem& item, const Model& model) {
  auto prompt = prompts::render(prompts::kConvertibilityFilter,
                                {{"question", item.stem}, {"correct_answer", item.correct_text()}});
  RequestContext ctx;
  ctx.item = item;
  ConvertibilityJudgment j;
  j.raw = model.call(model.request(Role::judge_convertibility, prompt, 0, 0, ctx));
  if (auto v = parse_final_label(j.raw)) {
    j.verdict = *v;
    j.labeled = true;
  } else {
    log::warn("item '" + item.id + "': no FINAL_LABEL in convertibility verdict, treating as NOT_CONVERTIBLE");
  }
  return j;
}

namespace detail {

inline std::optional<std::string> tag_content(std::string_view raw, std::string_view tag) {
  const std::string open = "<" + std::string(tag) + ">";
  const std::string close = "</" + std::string(tag) + ">";
  auto a = raw.find(open);
  if (a == std::string_view::npos) return std::nullopt;
  a += open.size();
  auto b = raw.find(close, a);
  if (b == std::string_view::npos) return std::nullopt;
  return text::trim(raw.substr(a, b - a));
}

}  // namespace detail

inline ShortAnswerItem rewrite_item(const McqItem& item, const Model& model, std::uint64_t seed) {
  auto prompt = prompts::render(prompts::kShortAnswerConversion,
                                {{"question", item.stem + "\n" + options_block(item)}, {"answer", item.correct_text()}});
  RequestContext ctx;
  ctx.item = item;
  std::string last_raw;
  const int attempts = model.config.max_retries + 1;
  for (int attempt = 0; attempt < attempts; ++attempt) {
    last_raw = model.call(model.request(Role::rewrite_short_answer, prompt, static_cast<std::uint64_t>(attempt), seed, ctx));
    auto q = detail::tag_content(last_raw, "Question");
    auto a = detail::tag_content(last_raw, "Answer");
    if (q && a && !q->empty() && !a->empty()) return {item.id, *q, *a, Provenance::rewritten, item.id};
  }
  throw GenerationFailure("short-answer rewrite of '" + item.id + "' failed after " + std::to_string(attempts) +
                              " attempts: missing or empty <Question>/<Answer> tags",
                          last_raw, attempts);
}

struct RewriteResult {
  McqItem item;
  Decision decision = Decision::keep_all;
  std::string reasoning;
  int attempts = 1;
};

// One-shot review of all distractors. The correct option and the label set
// are kept; only distractor texts may change.
inline RewriteResult single_round_rewrite(const McqItem& item, const Model& model, std::uint64_t seed) {
  const auto slots = item.distractor_labels();
  if (slots.empty()) throw PreconditionError("single_round_rewrite: item has no distractors");
  std::map<Label, std::string> all;
  for (auto l : item.labels()) all[l] = item.text(l);
  const auto base_prompt = prompts::render(prompts::kDirectRewrite,
                                           {{"question_text", item.stem},
                                            {"correct_option", item.correct_label().str()},
                                            {"correct_answer", item.correct_text()},
                                            {"all_options", detail::labels_json(all)}});
  RequestContext ctx;
  ctx.item = item;
  ctx.slots = slots;

  std::string last_raw;
  std::string violation;
  const int attempts = model.config.max_retries + 1;
  for (int attempt = 0; attempt < attempts; ++attempt) {
    auto prompt = base_prompt;
    if (!violation.empty()) prompt += "\n\nYour previous output was rejected: " + violation + ".";
    last_raw = model.call(model.request(Role::rewrite_distractors, prompt, static_cast<std::uint64_t>(attempt), seed, ctx));
    auto parsed = extract_json_block(last_raw);
    auto decision = parsed ? detail::parse_decision(*parsed) : std::nullopt;
    if (!decision) {
      violation = "decision must be \"KEEP_ALL\" or \"IMPROVE\"";
      continue;
    }
    RewriteResult r;
    r.decision = *decision;
    r.reasoning = parsed->value("reasoning", std::string());
    r.attempts = attempt + 1;
    r.item = item;
    if (*decision == Decision::keep_all) return r;
    auto checked = detail::validate_distractor_map(parsed, slots, item.correct_text(), item.correct_label());
    if (auto* msg = std::get_if<std::string>(&checked)) {
      violation = *msg;
      continue;
    }
    for (const auto& [l, t] : std::get<1>(checked)) r.item.options[l.index()] = t;
    if (auto bad = check_item(r.item)) {
      violation = *bad;
      continue;
    }
    return r;
  }
  throw GenerationFailure("single-round rewrite of '" + item.id + "' failed after " + std::to_string(attempts) +
                              " attempts: " + violation,
                          last_raw, attempts);
}

}  // namespace mcqc

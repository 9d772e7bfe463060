#pragma once

#include <filesystem>
#include <iostream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mcqc/analysis.hpp"
#include "mcqc/backend.hpp"
#include "mcqc/conversion.hpp"
#include "mcqc/core/files.hpp"
#include "mcqc/core/hash.hpp"
#include "mcqc/core/log.hpp"
#include "mcqc/core/parallel.hpp"
#include "mcqc/dataset.hpp"
#include "mcqc/idc.hpp"
#include "mcqc/model_ops.hpp"
#include "mcqc/strength.hpp"

namespace mcqc::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitPartial = 1;
inline constexpr int kExitConfig = 2;

struct Seeds {
  std::uint64_t global = 0;
  std::optional<std::uint64_t> split, variant, shuffle;

  std::uint64_t split_seed() const { return split.value_or(rnd::derive(global, "split")); }
  std::uint64_t variant_seed() const { return variant.value_or(rnd::derive(global, "variant")); }
  std::uint64_t shuffle_seed() const { return shuffle.value_or(rnd::derive(global, "shuffle")); }

  Json to_json() const {
    return Json{{"global", global}, {"split", split_seed()}, {"variant", variant_seed()}, {"shuffle", shuffle_seed()}};
  }
};

struct Paths {
  std::string input, output = "out", cache, reports;
};

// Everything a run needs. Loaded from a JSON file, then overridden by flags.
struct RunConfig {
  std::map<std::string, BackendConfig> backends{{"default", BackendConfig{}}};
  std::map<std::string, std::string> roles{{"generator", "default"}, {"evaluator", "default"}, {"judge", "default"}};
  CurationConfig curation;
  Seeds seeds;
  Paths paths;
  std::size_t concurrency = 1;
  std::string schema = "canonical";

  void validate() const {
    for (const auto& role : {"generator", "evaluator", "judge"}) {
      auto it = roles.find(role);
      if (it == roles.end()) throw ConfigError(std::string("config: role '") + role + "' is not assigned");
      if (!backends.count(it->second))
        throw ConfigError(std::string("config: role '") + role + "' refers to unknown backend '" + it->second + "'");
    }
    for (const auto& [name, b] : backends) {
      try {
        b.validate();
      } catch (const ConfigError& e) {
        throw ConfigError("config: backend '" + name + "': " + e.what());
      }
    }
    curation.validate();
    if (concurrency < 1) throw ConfigError("config: concurrency must be >= 1");
    std::set<std::string> seen;
    for (const auto* p : {&paths.input, &paths.output, &paths.cache, &paths.reports}) {
      if (p->empty()) continue;
      auto norm = std::filesystem::path(*p).lexically_normal().string();
      if (!seen.insert(norm).second) throw ConfigError("config: paths must be distinct ('" + *p + "' repeats)");
    }
    SchemaMapping::preset(schema);
  }

  const BackendConfig& backend_for(const std::string& role) const { return backends.at(roles.at(role)); }

  Json to_json() const {
    Json b = Json::object();
    for (const auto& [name, c] : backends) b[name] = c.to_json();
    Json r = Json::object();
    for (const auto& [k, v] : roles) r[k] = v;
    Json j;
    j["backends"] = std::move(b);
    j["roles"] = std::move(r);
    j["curation"] = curation.to_json();
    j["seeds"] = seeds.to_json();
    j["paths"] = {{"input", paths.input}, {"output", paths.output}, {"cache", paths.cache}, {"reports", paths.reports}};
    j["concurrency"] = concurrency;
    j["schema"] = schema;
    return j;
  }

  static RunConfig from_json(const Json& j) {
    if (!j.is_object()) throw ConfigError("config: top level must be an object");
    RunConfig c;
    try {
      if (j.contains("backends")) {
        c.backends.clear();
        for (const auto& [name, v] : j.at("backends").items()) c.backends[name] = BackendConfig::from_json(v);
      }
      if (j.contains("roles"))
        for (const auto& [k, v] : j.at("roles").items()) c.roles[k] = v.get<std::string>();
      if (j.contains("curation")) c.curation = CurationConfig::from_json(j.at("curation"));
      if (j.contains("seeds")) {
        const auto& s = j.at("seeds");
        c.seeds.global = s.value("global", std::uint64_t{0});
        if (s.contains("split")) c.seeds.split = s.at("split").get<std::uint64_t>();
        if (s.contains("variant")) c.seeds.variant = s.at("variant").get<std::uint64_t>();
        if (s.contains("shuffle")) c.seeds.shuffle = s.at("shuffle").get<std::uint64_t>();
      }
      if (j.contains("paths")) {
        const auto& p = j.at("paths");
        c.paths.input = p.value("input", c.paths.input);
        c.paths.output = p.value("output", c.paths.output);
        c.paths.cache = p.value("cache", c.paths.cache);
        c.paths.reports = p.value("reports", c.paths.reports);
      }
      c.concurrency = j.value("concurrency", c.concurrency);
      c.schema = j.value("schema", c.schema);
    } catch (const Json::exception& e) {
      throw ConfigError(std::string("config: ") + e.what());
    }
    return c;
  }

  static RunConfig load(const std::string& path) {
    std::string content;
    try {
      content = files::read_all(path);
    } catch (const IoError& e) {
      throw ConfigError(e.what());
    }
    try {
      return from_json(Json::parse(content));
    } catch (const Json::parse_error& e) {
      throw ConfigError("config " + path + ": " + e.what());
    }
  }
};

// Provenance record written next to every run's outputs, on success or not.
// Deliberately free of timestamps so reruns compare byte for byte.
class Manifest {
 public:
  explicit Manifest(std::string command) : command_(std::move(command)) {}

  void set_config(const Json& config) { config_ = config; }
  void add_input(const std::string& path) { inputs_.push_back({{"path", path}, {"sha256", sha256_file(path)}}); }
  void count(const std::string& key, Json value) { counts_[key] = std::move(value); }

  void add_output(const std::string& path, const std::string& content, const std::string& location = "output") {
    outputs_.push_back({{"path", std::filesystem::path(path).filename().string()},
                        {"location", location},
                        {"sha256", sha256_hex(content)}});
  }

  Json to_json(const std::string& status, int exit_code, const std::string& error) const {
    Json j;
    j["command"] = command_;
    j["status"] = status;
    j["exit_code"] = exit_code;
    if (!error.empty()) j["error"] = error;
    j["config_hash"] = sha256_hex(config_.dump());
    j["config"] = config_;
    j["inputs"] = inputs_;
    j["outputs"] = outputs_;
    j["counts"] = counts_;
    return j;
  }

 private:
  std::string command_;
  Json config_ = Json::object();
  Json inputs_ = Json::array();
  Json outputs_ = Json::array();
  Json counts_ = Json::object();
};

struct Flags {
  std::string config_path;
  std::string input, output, cache, schema, endpoint, model, synthetic_spec;
  std::uint64_t seed = 0;
  std::size_t workers = 1;
  bool quiet = false;

  // ingest
  std::size_t filter_count = 0;
  double ratio = 0.85;
  bool no_split = false;
  bool no_dedupe = false;
  // variant
  std::size_t count = 0;
  std::vector<std::size_t> mixed;
  bool permute = false;
  // expand
  std::size_t target = 0;
  // strength / analyze-labels
  std::size_t k = 8;
  std::string select;
  std::string source;
  // curate
  int iterations = 7;
  std::size_t samples = 8;
  std::size_t options = 0;
  bool no_guard = false;
  int early_stop = 0;
  // convert
  std::string mode = "direct";
  // simulate
  std::vector<int> n{2, 4, 6, 8, 10};
  double lambda = 0.8, s = 0.1, pc = 0.5, slip = 0.0;
  std::size_t trials = 100000;

  std::map<std::string, std::vector<CLI::Option*>> given;  // one per subcommand
  bool has(const std::string& name) const {
    auto it = given.find(name);
    if (it == given.end()) return false;
    for (auto* o : it->second)
      if (o->count() > 0) return true;
    return false;
  }
};

class Session {
 public:
  Session(RunConfig config, std::string command) : config_(std::move(config)), manifest_(std::move(command)) {}

  RunConfig& config() { return config_; }
  Manifest& manifest() { return manifest_; }

  std::filesystem::path out_dir() const { return config_.paths.output; }
  std::filesystem::path reports_dir() const {
    return config_.paths.reports.empty() ? out_dir() : std::filesystem::path(config_.paths.reports);
  }

  Model model(const std::string& role) {
    auto cfg = config_.backend_for(role);
    if (role == "judge") cfg = cfg.greedy();
    if (!cache_ && !config_.paths.cache.empty()) cache_ = std::make_shared<ReplayCache>(config_.paths.cache);
    auto key = config_.roles.at(role);
    if (!backends_.count(key)) backends_[key] = make_backend(cfg, cache_);
    return {backends_[key], cfg};
  }

  std::vector<McqItem> read_items(std::size_t& failures) {
    if (config_.paths.input.empty()) throw ConfigError("no input file given (--input)");
    if (!std::filesystem::is_regular_file(config_.paths.input))
      throw ConfigError("input file not found: " + config_.paths.input);
    manifest_.add_input(config_.paths.input);
    auto report = ingest_jsonl(config_.paths.input, SchemaMapping::preset(config_.schema));
    for (const auto& e : report.errors) log::warn("line " + std::to_string(e.line) + ": " + e.message);
    failures += report.errors.size();
    manifest_.count("input_items", report.items.size());
    manifest_.count("input_errors", report.errors.size());
    return std::move(report.items);
  }

  // Outputs are staged and only written once the command has succeeded, so a
  // failed run leaves nothing but its manifest behind.
  void stage(const std::string& name, std::string content) { staged_.push_back({name, std::move(content), false}); }
  // Summaries and tables; these go to paths.reports when it is set.
  void stage_report(const std::string& name, std::string content) {
    staged_.push_back({name, std::move(content), true});
  }

  void mark_partial() { partial_ = true; }
  bool partial() const { return partial_; }

  void commit() {
    for (const auto& f : staged_) {
      auto path = ((f.report ? reports_dir() : out_dir()) / f.name).string();
      files::write_atomic(path, f.content);
      manifest_.add_output(path, f.content, f.report && !config_.paths.reports.empty() ? "reports" : "output");
    }
    staged_.clear();
  }

  void write_manifest(const std::string& status, int code, const std::string& error) {
    auto content = manifest_.to_json(status, code, error).dump(2) + "\n";
    files::write_atomic((out_dir() / "manifest.json").string(), content);
  }

 private:
  RunConfig config_;
  Manifest manifest_;
  std::shared_ptr<ReplayCache> cache_;
  std::map<std::string, std::shared_ptr<ModelBackend>> backends_;
  struct Staged {
    std::string name, content;
    bool report;
  };
  std::vector<Staged> staged_;
  bool partial_ = false;
};

inline std::string lines(const std::vector<Json>& rows) {
  std::string out;
  for (const auto& r : rows) out += r.dump(-1, ' ', false, Json::error_handler_t::replace) + "\n";
  return out;
}

inline std::uint64_t item_seed(std::uint64_t base, const std::string& tag, const McqItem& item) {
  return rnd::derive(base, tag, rnd::fnv1a(item.id));
}

// ---------------------------------------------------------------------------
// Subcommands. Each returns an exit code; exceptions escape to run().

inline int cmd_ingest(Session& s, const Flags& f) {
  auto& cfg = s.config();
  if (cfg.paths.input.empty()) throw ConfigError("no input file given (--input)");
  if (!std::filesystem::is_regular_file(cfg.paths.input)) throw ConfigError("input file not found: " + cfg.paths.input);
  s.manifest().add_input(cfg.paths.input);
  auto report = ingest_jsonl(cfg.paths.input, SchemaMapping::preset(cfg.schema));
  std::vector<Json> errs;
  for (const auto& e : report.errors) errs.push_back({{"line", e.line}, {"error", e.message}});
  auto items = std::move(report.items);
  s.manifest().count("lines_read", report.lines_read);
  s.manifest().count("parsed", items.size());
  s.manifest().count("errors", report.errors.size());
  if (f.filter_count > 0) items = filter_count(items, f.filter_count);
  s.manifest().count("after_filter", items.size());
  if (!f.no_dedupe) items = dedupe(items);
  s.manifest().count("kept", items.size());
  s.stage("items.jsonl", to_jsonl(items));
  s.stage("ingest_errors.jsonl", lines(errs));
  if (!f.no_split) {
    auto sp = split(items, f.ratio, cfg.seeds.split_seed());
    s.manifest().count("train", sp.train.size());
    s.manifest().count("test", sp.test.size());
    s.stage("train.jsonl", to_jsonl(sp.train));
    s.stage("test.jsonl", to_jsonl(sp.test));
  }
  return report.errors.empty() ? kExitOk : kExitPartial;
}

inline int cmd_variant(Session& s, const Flags& f) {
  std::size_t failures = 0;
  auto items = s.read_items(failures);
  VariantSpec spec;
  if (!f.mixed.empty()) {
    std::map<std::size_t, double> props;
    for (auto c : f.mixed) props[c] = 1.0 / static_cast<double>(f.mixed.size());
    if (props.size() != f.mixed.size()) throw ConfigError("variant: --mixed counts repeat");
    spec = VariantSpec::mixed(props, s.config().seeds.variant_seed());
  } else if (f.count > 0) {
    spec = VariantSpec::fixed(f.count, s.config().seeds.variant_seed());
  } else {
    throw ConfigError("variant: give --count N or --mixed N,M,...");
  }
  try {
    spec.validate();
  } catch (const PreconditionError& e) {
    throw ConfigError(e.what());
  }
  auto out = make_variants(items, spec);
  if (f.permute) out = permute_correct_label(out, s.config().seeds.shuffle_seed());
  std::map<std::size_t, std::size_t> sizes;
  for (const auto& it : out) ++sizes[it.size()];
  Json dist = Json::object();
  for (const auto& [n, c] : sizes) dist[std::to_string(n)] = c;
  s.manifest().count("variants", out.size());
  s.manifest().count("option_counts", dist);
  s.stage("variants.jsonl", to_jsonl(out));
  return failures ? kExitPartial : kExitOk;
}

// Runs fn per item in parallel, collecting successes in input order and
// per-item failures as error rows.
template <class Fn>
auto per_item(const std::vector<McqItem>& items, std::size_t workers, Fn fn) {
  using R = decltype(fn(items.front()));
  std::vector<std::optional<R>> results(items.size());
  std::vector<std::optional<std::string>> errors(items.size());
  parallel_for(items.size(), workers, [&](std::size_t i) {
    try {
      results[i] = fn(items[i]);
    } catch (const GenerationFailure& e) {
      errors[i] = e.what();
    } catch (const PreconditionError& e) {
      errors[i] = e.what();
    } catch (const InvalidItem& e) {
      errors[i] = e.what();
    }
  });
  std::vector<R> ok;
  std::vector<Json> errs;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (results[i]) ok.push_back(std::move(*results[i]));
    if (errors[i]) errs.push_back({{"id", items[i].id}, {"error", *errors[i]}});
  }
  return std::pair{std::move(ok), std::move(errs)};
}

inline int cmd_expand(Session& s, const Flags& f) {
  std::size_t failures = 0;
  auto items = s.read_items(failures);
  if (f.target < 3 || f.target > kMaxOptions) throw ConfigError("expand: --target must be in [3, 26]");
  auto gen = s.model("generator");
  const auto seed = s.config().seeds.global;
  auto [out, errs] = per_item(items, s.config().concurrency,
                              [&](const McqItem& it) { return expand_options(it, f.target, gen, item_seed(seed, "expand", it)); });
  s.manifest().count("expanded", out.size());
  s.manifest().count("failed", errs.size());
  s.stage("expanded.jsonl", to_jsonl(out));
  s.stage("expand_errors.jsonl", lines(errs));
  return failures + errs.size() ? kExitPartial : kExitOk;
}

inline int cmd_strength(Session& s, const Flags& f) {
  std::size_t failures = 0;
  auto items = s.read_items(failures);
  if (f.k < 1) throw ConfigError("strength: --k must be >= 1");
  std::optional<SelectionMode> mode;
  if (!f.select.empty()) mode = parse_selection_mode(f.select);
  auto eval = s.model("evaluator");
  const auto seed = s.config().seeds.global;
  auto [profiles, errs] = per_item(items, s.config().concurrency,
                                   [&](const McqItem& it) { return estimate_strength(it, eval, f.k, item_seed(seed, "strength", it)); });
  std::vector<Json> rows;
  for (const auto& p : profiles) rows.push_back(to_json(p));
  s.stage_report("strength.jsonl", lines(rows));
  if (!profiles.empty()) s.manifest().count("solve_all_ratio", solve_all_ratio(profiles));
  s.manifest().count("profiles", profiles.size());
  if (mode) {
    std::vector<McqItem> selected;
    std::size_t j = 0;
    for (const auto& it : items) {
      if (j < profiles.size() && profiles[j].item_id == it.id) {
        selected.push_back(select_distractor(it, profiles[j], *mode, item_seed(seed, "select", it)));
        ++j;
      }
    }
    s.stage("selected.jsonl", to_jsonl(selected));
  }
  return failures + errs.size() ? kExitPartial : kExitOk;
}

inline int cmd_curate(Session& s, const Flags&) {
  std::size_t failures = 0;
  auto items = s.read_items(failures);
  CurationModels models{s.model("generator"), s.model("evaluator"), s.model("judge")};
  const auto& cc = s.config().curation;
  auto run = curate_dataset(items, cc, models, rnd::derive(s.config().seeds.global, "curate"), s.config().concurrency);
  auto curated = run.curated_items();
  Json report = run.report.to_json();
  if (cc.equivalence_guard) {
    Json findings = Json::array();
    for (const auto& a : audit_equivalence(curated, models.judge)) findings.push_back({{"id", a.id}, {"text", a.text}});
    report["audit_equivalent_distractors"] = std::move(findings);
  }
  s.stage("curated.jsonl", to_jsonl(curated));
  s.stage("trace.jsonl", trace_jsonl(items, run));
  s.stage_report("report.json", report.dump(2) + "\n");
  s.manifest().count("curated", run.report.curated);
  s.manifest().count("failed", run.report.failed);
  s.manifest().count("generation_rounds", run.report.generation_rounds);
  // per-item failures are tallied in the report and do not change the exit code
  if (failures + run.report.failed) s.mark_partial();
  return kExitOk;
}

inline int cmd_convert(Session& s, const Flags& f) {
  std::size_t failures = 0;
  auto items = s.read_items(failures);
  const auto seed = s.config().seeds.global;
  const auto workers = s.config().concurrency;
  if (f.mode == "direct") {
    std::vector<ShortAnswerItem> out;
    for (const auto& it : items) out.push_back(direct_convert(it));
    s.stage("short_answer.jsonl", to_jsonl(out));
    s.manifest().count("converted", out.size());
  } else if (f.mode == "filter") {
    auto judge = s.model("judge");
    auto [verdicts, errs] = per_item(items, workers, [&](const McqItem& it) { return filter_convertible(it, judge); });
    std::vector<ShortAnswerItem> out;
    std::vector<Json> rows;
    for (std::size_t i = 0; i < verdicts.size(); ++i) {
      const bool ok = verdicts[i].verdict == Convertibility::convertible;
      rows.push_back({{"id", items[i].id},
                      {"verdict", ok ? "CONVERTIBLE" : "NOT_CONVERTIBLE"},
                      {"labeled", verdicts[i].labeled}});
      if (ok) out.push_back(direct_convert(items[i], Provenance::filtered));
    }
    s.stage("short_answer.jsonl", to_jsonl(out));
    s.stage("convertibility.jsonl", lines(rows));
    s.manifest().count("convertible", out.size());
    s.manifest().count("not_convertible", verdicts.size() - out.size());
    failures += errs.size();
  } else if (f.mode == "rewrite") {
    auto gen = s.model("generator");
    auto [out, errs] = per_item(items, workers, [&](const McqItem& it) { return rewrite_item(it, gen, item_seed(seed, "rewrite", it)); });
    s.stage("short_answer.jsonl", to_jsonl(out));
    s.stage("convert_errors.jsonl", lines(errs));
    s.manifest().count("converted", out.size());
    failures += errs.size();
  } else if (f.mode == "single-round") {
    auto gen = s.model("generator");
    auto [out, errs] = per_item(items, workers,
                                [&](const McqItem& it) { return single_round_rewrite(it, gen, item_seed(seed, "single", it)); });
    std::vector<McqItem> rewritten;
    std::size_t kept = 0;
    for (const auto& r : out) {
      rewritten.push_back(r.item);
      if (r.decision == Decision::keep_all) ++kept;
    }
    s.stage("rewritten.jsonl", to_jsonl(rewritten));
    s.stage("convert_errors.jsonl", lines(errs));
    s.manifest().count("rewritten", rewritten.size());
    s.manifest().count("keep_all", kept);
    failures += errs.size();
  } else {
    throw ConfigError("convert: --mode must be direct, filter, rewrite or single-round");
  }
  return failures ? kExitPartial : kExitOk;
}

inline int cmd_analyze_gap(Session& s, const Flags&) {
  const auto& path = s.config().paths.input;
  if (path.empty()) throw ConfigError("analyze-gap: no table given (--input)");
  if (!std::filesystem::is_regular_file(path)) throw ConfigError("table file not found: " + path);
  s.manifest().add_input(path);
  CrossEvalTable table;
  try {
    table = CrossEvalTable::from_csv(files::read_all(path));
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
  auto z = normalize_scores(table);
  auto curve = gap_curve(z);
  Json degenerate = Json::array();
  for (std::size_t c = 0; c < z.test_counts.size(); ++c)
    if (z.degenerate[c]) degenerate.push_back(z.test_counts[c]);
  Json summary{{"argmax_gap", argmax_gap(curve)}, {"degenerate_columns", degenerate}};
  s.stage_report("z_matrix.csv", z_matrix_csv(z));
  s.stage_report("gap_curve.csv", gap_curve_csv(curve));
  s.stage_report("column_stats.csv", column_stats_csv(z));
  s.stage_report("gap_summary.json", summary.dump(2) + "\n");
  s.manifest().count("argmax_gap", argmax_gap(curve));
  return kExitOk;
}

inline int cmd_analyze_labels(Session& s, const Flags& f) {
  std::size_t failures = 0;
  auto items = s.read_items(failures);
  if (f.k < 1) throw ConfigError("analyze-labels: --k must be >= 1");
  if (f.permute) {
    try {
      items = permute_correct_label(items, s.config().seeds.shuffle_seed());
    } catch (const PreconditionError& e) {
      throw ConfigError(e.what());
    }
  }
  auto eval = s.model("evaluator");
  auto h = label_distribution(items, eval, f.k, s.config().seeds.global, f.source, s.config().concurrency);
  Json j{{"answers", h.to_json()}, {"correct_positions", correct_label_histogram(items, f.source).to_json()}};
  s.stage_report("label_histogram.json", j.dump(2) + "\n");
  s.manifest().count("answers", h.total);
  s.manifest().count("parse_failures", h.parse_failures);
  return failures ? kExitPartial : kExitOk;
}

inline int cmd_simulate(Session& s, const Flags& f) {
  if (f.trials < 1) throw ConfigError("simulate: --trials must be >= 1");
  Json rows = Json::array();
  for (int n : f.n) {
    RewardMixtureParams p{n, f.lambda, f.s, f.pc, f.slip};
    try {
      p.validate();
    } catch (const PreconditionError& e) {
      throw ConfigError(e.what());
    }
    auto mc = simulate_rewards(p, f.trials, s.config().seeds.global, s.config().concurrency);
    auto cf = closed_form_rewards(p);
    rows.push_back({{"params", p.to_json()},
                    {"trials", f.trials},
                    {"monte_carlo", {{"p_reward", mc.p_reward}, {"p_spurious", mc.p_spurious}}},
                    {"closed_form", {{"p_reward", cf.p_reward}, {"p_spurious", cf.p_spurious}}}});
  }
  s.stage_report("simulate.json", rows.dump(2) + "\n");
  s.manifest().count("cells", rows.size());
  return kExitOk;
}

// ---------------------------------------------------------------------------

inline void apply_flags(RunConfig& c, const Flags& f, const std::string& command) {
  if (f.has("--input")) c.paths.input = f.input;
  if (f.has("--output")) c.paths.output = f.output;
  if (f.has("--cache")) c.paths.cache = f.cache;
  if (f.has("--schema")) c.schema = f.schema;
  if (f.has("--seed")) c.seeds.global = f.seed;
  if (f.has("--workers")) c.concurrency = f.workers;
  for (auto& [name, b] : c.backends) {
    if (f.has("--endpoint")) b.endpoint_url = f.endpoint;
    if (f.has("--model")) b.model_name = f.model;
    if (f.has("--synthetic-spec")) b.synthetic_spec = f.synthetic_spec;
  }
  if (command == "curate") {
    if (f.has("--iterations")) c.curation.max_iterations = f.iterations;
    if (f.has("--samples")) c.curation.k_samples = f.samples;
    if (f.has("--options")) c.curation.target_options = f.options;
    if (f.has("--no-guard")) c.curation.equivalence_guard = false;
    if (f.has("--early-stop")) c.curation.early_stop_patience = f.early_stop;
  }
}

// Command-specific settings that shape the outputs, recorded for provenance.
inline Json command_options(const Flags& f, const std::string& command) {
  if (command == "ingest")
    return {{"filter_count", f.filter_count}, {"ratio", f.ratio}, {"split", !f.no_split}, {"dedupe", !f.no_dedupe}};
  if (command == "variant") return {{"count", f.count}, {"mixed", f.mixed}, {"permute", f.permute}};
  if (command == "expand") return {{"target", f.target}};
  if (command == "strength") return {{"k", f.k}, {"select", f.select}};
  if (command == "convert") return {{"mode", f.mode}};
  if (command == "analyze-labels") return {{"k", f.k}, {"permute", f.permute}, {"source", f.source}};
  if (command == "simulate")
    return {{"n", f.n}, {"lambda", f.lambda}, {"s", f.s}, {"p_correct_reasoning", f.pc}, {"p_slip", f.slip}, {"trials", f.trials}};
  return Json::object();
}

inline int dispatch(const std::string& command, Session& s, const Flags& f) {
  if (command == "ingest") return cmd_ingest(s, f);
  if (command == "variant") return cmd_variant(s, f);
  if (command == "expand") return cmd_expand(s, f);
  if (command == "strength") return cmd_strength(s, f);
  if (command == "curate") return cmd_curate(s, f);
  if (command == "convert") return cmd_convert(s, f);
  if (command == "analyze-gap") return cmd_analyze_gap(s, f);
  if (command == "analyze-labels") return cmd_analyze_labels(s, f);
  if (command == "simulate") return cmd_simulate(s, f);
  throw ConfigError("unknown command " + command);
}

inline int run(int argc, char** argv) {
  CLI::App app{"mcq-curate: multiple-choice distractor curation toolkit"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "mcq-curate 0.1.0");
  Flags f;

  auto common = [&](CLI::App* sub) {
    f.given["--config"].push_back(sub->add_option("--config", f.config_path, "JSON run configuration"));
    f.given["--input"].push_back(sub->add_option("-i,--input", f.input, "Input file"));
    f.given["--output"].push_back(sub->add_option("-o,--output", f.output, "Output directory (default: out)"));
    f.given["--cache"].push_back(sub->add_option("--cache", f.cache, "Replay cache JSONL (read and appended)"));
    f.given["--schema"].push_back(sub->add_option("--schema", f.schema, "Input schema: canonical, mmlu-pro, medqa"));
    f.given["--seed"].push_back(sub->add_option("--seed", f.seed, "Global seed (default 0)"));
    f.given["--workers"].push_back(sub->add_option("-j,--workers", f.workers, "Items processed concurrently (default 1)"));
    f.given["--endpoint"].push_back(sub->add_option("--endpoint", f.endpoint, "Backend for every role: URL, synthetic, or replay:<path>"));
    f.given["--model"].push_back(sub->add_option("--model", f.model, "Model name sent to the endpoint"));
    f.given["--synthetic-spec"].push_back(sub->add_option("--synthetic-spec", f.synthetic_spec, "Synthetic oracle spec (JSON)"));
    sub->add_flag("-q,--quiet", f.quiet, "Only log errors");
  };

  auto* ingest = app.add_subcommand("ingest", "Ingest, filter, dedupe and split a JSONL dataset");
  common(ingest);
  ingest->add_option("--filter-count", f.filter_count, "Keep only items with exactly this many options");
  ingest->add_option("--ratio", f.ratio, "Train fraction (default 0.85)")->check(CLI::Range(0.0, 1.0));
  ingest->add_flag("--no-split", f.no_split, "Skip the train/test split");
  ingest->add_flag("--no-dedupe", f.no_dedupe, "Skip deduplication");

  auto* variant = app.add_subcommand("variant", "Build option-count variants");
  common(variant);
  variant->add_option("--count", f.count, "Fixed option count");
  variant->add_option("--mixed", f.mixed, "Equal-proportion mix of counts, e.g. 2,4,6,8,10")->delimiter(',');
  variant->add_flag("--permute", f.permute, "Permute the correct label uniformly afterwards");

  auto* expand = app.add_subcommand("expand", "Add generated options up to a target count");
  common(expand);
  expand->add_option("--target", f.target, "Target option count")->required();

  auto* strength = app.add_subcommand("strength", "Estimate distractor strength, optionally reduce to 2-way");
  common(strength);
  strength->add_option("-k,--k", f.k, "Answers sampled per item (default 8)");
  strength->add_option("--select", f.select, "Reduce to 2 options: strongest, weakest, random");

  auto* curate = app.add_subcommand("curate", "Run iterative distractor curation");
  common(curate);
  f.given["--iterations"].push_back(curate->add_option("-T,--iterations", f.iterations, "Iteration budget (default 7)"));
  f.given["--samples"].push_back(curate->add_option("-K,--samples", f.samples, "Answers sampled per evaluation (default 8)"));
  f.given["--options"].push_back(curate->add_option("-N,--options", f.options, "Target option count (default: item's own)"));
  f.given["--no-guard"].push_back(curate->add_flag("--no-guard", f.no_guard, "Disable the equivalence guard"));
  f.given["--early-stop"].push_back(curate->add_option("--early-stop", f.early_stop, "Stop after L failed replacements on a full pool (0: off)"));

  auto* convert = app.add_subcommand("convert", "Short-answer and rewrite baselines");
  common(convert);
  convert->add_option("--mode", f.mode, "direct, filter, rewrite or single-round (default direct)")
      ->check(CLI::IsMember({"direct", "filter", "rewrite", "single-round"}));

  auto* gap = app.add_subcommand("analyze-gap", "z-normalize a cross-evaluation table and bin by option-count gap");
  common(gap);

  auto* labels = app.add_subcommand("analyze-labels", "Histogram of answer labels");
  common(labels);
  labels->add_option("-k,--k", f.k, "Answers sampled per item (default 8)");
  labels->add_flag("--permute", f.permute, "Permute the correct label uniformly first");
  labels->add_option("--source", f.source, "Tag stored with the histogram");

  auto* simulate = app.add_subcommand("simulate", "Monte Carlo and closed-form spurious-reward rates");
  common(simulate);
  simulate->add_option("--n", f.n, "Option counts (repeatable)")->delimiter(',');
  simulate->add_option("--lambda", f.lambda, "Guessing share lambda (default 0.8)");
  simulate->add_option("--s", f.s, "Distractor preference s (default 0.1)");
  simulate->add_option("--pc", f.pc, "Probability of valid reasoning (default 0.5)");
  simulate->add_option("--slip", f.slip, "Slip probability under valid reasoning (default 0)");
  simulate->add_option("--trials", f.trials, "Monte Carlo trials per cell (default 100000)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kExitOk : kExitConfig;
  }

  std::string command = app.get_subcommands().front()->get_name();
  log::set_level(f.quiet ? log::Level::error : log::Level::info);

  RunConfig config;
  std::string output_dir = f.has("--output") ? f.output : "out";
  try {
    if (!f.config_path.empty()) config = RunConfig::load(f.config_path);
    apply_flags(config, f, command);
    output_dir = config.paths.output;
    config.validate();
  } catch (const Error& e) {
    log::error(e.what());
    Session s(config, command);
    s.config().paths.output = output_dir;
    s.write_manifest("error", kExitConfig, e.what());
    return kExitConfig;
  }

  Session s(config, command);
  s.manifest().set_config({{"run", config.to_json()}, {"options", command_options(f, command)}});
  int code = kExitConfig;
  std::string error;
  try {
    code = dispatch(command, s, f);
    s.commit();
  } catch (const Error& e) {
    error = e.what();
  }
  if (!error.empty()) {
    log::error(command + ": " + error);
    code = kExitConfig;
  }
  const char* status = code == kExitConfig ? "error" : code == kExitPartial || s.partial() ? "partial" : "ok";
  try {
    s.write_manifest(status, code, error);
  } catch (const Error& e) {
    log::error(std::string("cannot write manifest: ") + e.what());
    return kExitConfig;
  }
  if (code != kExitConfig) log::info(command + ": " + status + ", outputs in " + s.out_dir().string());
  return code;
}

}  // namespace mcqc::cli

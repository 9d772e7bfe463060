#pragma once

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "mcqc/core/error.hpp"
#include "mcqc/core/files.hpp"
#include "mcqc/core/hash.hpp"
#include "mcqc/core/log.hpp"
#include "mcqc/core/random.hpp"
#include "mcqc/core/text.hpp"
#include "mcqc/dataset.hpp"

namespace mcqc {

// What a request asks the model to do. Remote endpoints only see the prompt;
// the role and context let test doubles answer without parsing prompts.
enum class Role {
  answer,
  generate_distractors,
  expand_options,
  judge_equivalence,
  judge_convertibility,
  rewrite_short_answer,
  rewrite_distractors,
};

inline std::string_view to_string(Role r) {
  switch (r) {
    case Role::answer: return "answer";
    case Role::generate_distractors: return "generate_distractors";
    case Role::expand_options: return "expand_options";
    case Role::judge_equivalence: return "judge_equivalence";
    case Role::judge_convertibility: return "judge_convertibility";
    case Role::rewrite_short_answer: return "rewrite_short_answer";
    case Role::rewrite_distractors: return "rewrite_distractors";
  }
  return "unknown";
}

struct BackendConfig {
  std::string endpoint_url = "synthetic";  // URL, "synthetic", or "replay:<path>"
  std::string model_name = "synthetic";
  double temperature = 0.7;
  double top_p = 1.0;
  int max_tokens = 1024;
  std::string api_key_env = "OPENAI_API_KEY";
  double request_timeout_s = 60.0;
  int max_retries = 3;
  std::string synthetic_spec;  // oracle spec file, synthetic endpoints only

  void validate() const {
    if (!(temperature >= 0)) throw ConfigError("backend: temperature must be >= 0");
    if (!(top_p > 0 && top_p <= 1)) throw ConfigError("backend: top_p must be in (0, 1]");
    if (max_retries < 0) throw ConfigError("backend: max_retries must be >= 0");
    if (max_tokens < 1) throw ConfigError("backend: max_tokens must be >= 1");
    if (!(request_timeout_s > 0)) throw ConfigError("backend: request_timeout must be > 0");
    if (endpoint_url.empty()) throw ConfigError("backend: endpoint_url is empty");
  }

  // Judgments (equivalence, convertibility) decode greedily.
  BackendConfig greedy() const {
    BackendConfig c = *this;
    c.temperature = 0.0;
    return c;
  }

  Json to_json() const {
    Json j;
    j["endpoint_url"] = endpoint_url;
    j["model_name"] = model_name;
    j["temperature"] = temperature;
    j["top_p"] = top_p;
    j["max_tokens"] = max_tokens;
    j["api_key_env"] = api_key_env;
    j["request_timeout_s"] = request_timeout_s;
    j["max_retries"] = max_retries;
    if (!synthetic_spec.empty()) j["synthetic_spec"] = synthetic_spec;
    return j;
  }

  static BackendConfig from_json(const Json& j) {
    BackendConfig c;
    if (!j.is_object()) throw ConfigError("backend config must be an object");
    c.endpoint_url = j.value("endpoint_url", c.endpoint_url);
    c.model_name = j.value("model_name", c.model_name);
    c.temperature = j.value("temperature", c.temperature);
    c.top_p = j.value("top_p", c.top_p);
    c.max_tokens = j.value("max_tokens", c.max_tokens);
    c.api_key_env = j.value("api_key_env", c.api_key_env);
    c.request_timeout_s = j.value("request_timeout_s", c.request_timeout_s);
    c.max_retries = j.value("max_retries", c.max_retries);
    c.synthetic_spec = j.value("synthetic_spec", c.synthetic_spec);
    c.validate();
    return c;
  }
};

struct RequestContext {
  std::optional<McqItem> item;
  std::vector<Label> slots;
  std::vector<std::string> exclude;
  std::string candidate;
  std::size_t new_options = 0;
};

struct ModelRequest {
  Role role = Role::answer;
  std::string prompt;
  std::string model;
  double temperature = 0.7;
  double top_p = 1.0;
  int max_tokens = 1024;
  std::uint64_t sample_index = 0;
  std::uint64_t seed = 0;
  RequestContext context;
};

class ModelBackend {
 public:
  virtual ~ModelBackend() = default;
  // Returns the raw completion text. Implementations must be safe to call
  // from several threads at once.
  virtual std::string complete(const ModelRequest& request) = 0;
};

// A backend bound to its decoding configuration.
struct Model {
  std::shared_ptr<ModelBackend> backend;
  BackendConfig config;

  ModelRequest request(Role role, std::string prompt, std::uint64_t sample_index,
                       std::uint64_t seed, RequestContext context = {}) const {
    ModelRequest r;
    r.role = role;
    r.prompt = std::move(prompt);
    r.model = config.model_name;
    r.temperature = config.temperature;
    r.top_p = config.top_p;
    r.max_tokens = config.max_tokens;
    r.sample_index = sample_index;
    r.seed = seed;
    r.context = std::move(context);
    return r;
  }

  std::string call(const ModelRequest& r) const {
    if (!backend) throw BackendError("model has no backend");
    return backend->complete(r);
  }

  Model greedy() const { return {backend, config.greedy()}; }
};

// ---------------------------------------------------------------------------
// Replay cache

inline std::string cache_key(const ModelRequest& r) {
  Json j;
  j["prompt"] = r.prompt;
  j["model"] = r.model;
  j["temperature"] = r.temperature;
  j["top_p"] = r.top_p;
  j["sample_index"] = r.sample_index;
  j["seed"] = r.seed;
  return sha256_hex(j.dump());
}

inline std::string iso8601_now() {
  auto now = std::chrono::system_clock::now();
  std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// Append-only JSONL store of responses keyed by cache_key(). Each record is
// written as one complete line under a lock.
class ReplayCache {
 public:
  explicit ReplayCache(std::string path) : path_(std::move(path)) {
    std::ifstream in(path_, std::ios::binary);
    std::string line;
    std::size_t line_no = 0;
    while (in && std::getline(in, line)) {
      ++line_no;
      if (text::trim_view(line).empty()) continue;
      try {
        auto j = Json::parse(line);
        entries_[j.at("key").get<std::string>()] = j.at("response").get<std::string>();
      } catch (const std::exception&) {
        log::warn("replay cache " + path_ + ": skipping malformed line " + std::to_string(line_no));
      }
    }
  }

  const std::string& path() const { return path_; }

  std::optional<std::string> lookup(const std::string& key) const {
    std::lock_guard lock(mu_);
    if (auto it = entries_.find(key); it != entries_.end()) return it->second;
    return std::nullopt;
  }

  void record(const std::string& key, const ModelRequest& r, const std::string& response) {
    Json j;
    j["key"] = key;
    j["prompt"] = r.prompt;
    j["params"] = {{"model", r.model},
                   {"temperature", r.temperature},
                   {"top_p", r.top_p},
                   {"max_tokens", r.max_tokens},
                   {"sample_index", r.sample_index},
                   {"seed", r.seed},
                   {"role", std::string(to_string(r.role))}};
    j["response"] = response;
    j["ts"] = iso8601_now();
    std::string line = j.dump() + "\n";
    std::lock_guard lock(mu_);
    if (!out_.is_open()) {
      std::filesystem::path p(path_);
      if (p.has_parent_path()) {
        std::error_code ec;
        std::filesystem::create_directories(p.parent_path(), ec);
      }
      out_.open(path_, std::ios::binary | std::ios::app);
      if (!out_) throw IoError("cannot append to replay cache " + path_);
    }
    out_.write(line.data(), static_cast<std::streamsize>(line.size()));
    out_.flush();
    entries_.emplace(key, response);
  }

  std::size_t size() const {
    std::lock_guard lock(mu_);
    return entries_.size();
  }

 private:
  std::string path_;
  mutable std::mutex mu_;
  std::unordered_map<std::string, std::string> entries_;
  std::ofstream out_;
};

// Serves hits from the cache; misses go to `inner` and are recorded. With no
// inner backend the cache is replay-only and a miss is an error.
class CachedBackend : public ModelBackend {
 public:
  CachedBackend(std::shared_ptr<ModelBackend> inner, std::shared_ptr<ReplayCache> cache)
      : inner_(std::move(inner)), cache_(std::move(cache)) {}

  std::string complete(const ModelRequest& r) override {
    auto key = cache_key(r);
    if (auto hit = cache_->lookup(key)) {
      ++hits_;
      return *hit;
    }
    ++misses_;
    if (!inner_)
      throw BackendError("replay cache miss (" + std::string(to_string(r.role)) + ", key " + key + ")");
    auto response = inner_->complete(r);
    cache_->record(key, r, response);
    return response;
  }

  std::size_t hits() const { return hits_; }
  std::size_t misses() const { return misses_; }

 private:
  std::shared_ptr<ModelBackend> inner_;
  std::shared_ptr<ReplayCache> cache_;
  std::atomic<std::size_t> hits_{0};
  std::atomic<std::size_t> misses_{0};
};

// ---------------------------------------------------------------------------
// OpenAI-compatible chat-completions client

struct Endpoint {
  std::string scheme_host_port;  // e.g. "https://api.example.com:443"
  std::string path;              // e.g. "/v1/chat/completions"
};

inline Endpoint parse_endpoint(const std::string& url) {
  auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos) throw ConfigError("endpoint url lacks a scheme: " + url);
  auto scheme = url.substr(0, scheme_end);
  if (scheme != "http" && scheme != "https") throw ConfigError("unsupported url scheme: " + scheme);
  auto path_start = url.find('/', scheme_end + 3);
  Endpoint e;
  e.scheme_host_port = url.substr(0, path_start);
  std::string path = path_start == std::string::npos ? "" : url.substr(path_start);
  while (!path.empty() && path.back() == '/') path.pop_back();
  constexpr std::string_view suffix = "/chat/completions";
  if (path.size() < suffix.size() || path.compare(path.size() - suffix.size(), suffix.size(), suffix) != 0)
    path += suffix;
  e.path = path;
  return e;
}

inline Json chat_request_body(const ModelRequest& r) {
  Json body;
  body["model"] = r.model;
  body["messages"] = Json::array({{{"role", "user"}, {"content", r.prompt}}});
  body["temperature"] = r.temperature;
  body["top_p"] = r.top_p;
  body["max_tokens"] = r.max_tokens;
  body["seed"] = static_cast<std::int64_t>(rnd::derive(r.seed, {r.sample_index}) & 0x7fffffffULL);
  return body;
}

inline std::string parse_chat_response(const std::string& body) {
  auto j = Json::parse(body);
  const auto& content = j.at("choices").at(0).at("message").at("content");
  if (content.is_null()) return "";
  return content.get<std::string>();
}

class RemoteChatBackend : public ModelBackend {
 public:
  explicit RemoteChatBackend(BackendConfig config, double backoff_base_s = 0.5)
      : config_(std::move(config)), endpoint_(parse_endpoint(config_.endpoint_url)),
        backoff_base_s_(backoff_base_s) {
    config_.validate();
  }

  std::string complete(const ModelRequest& r) override {
    const auto body = chat_request_body(r).dump();
    httplib::Headers headers;
    if (const char* key = std::getenv(config_.api_key_env.c_str()); key && *key)
      headers.emplace("Authorization", std::string("Bearer ") + key);

    std::string last_error;
    for (int attempt = 0; attempt <= config_.max_retries; ++attempt) {
      if (attempt > 0) {
        auto delay = backoff_base_s_ * std::pow(2.0, attempt - 1);
        std::this_thread::sleep_for(std::chrono::duration<double>(std::min(delay, 30.0)));
      }
      httplib::Client client(endpoint_.scheme_host_port);
      auto timeout = std::chrono::duration<double>(config_.request_timeout_s);
      client.set_connection_timeout(std::chrono::duration_cast<std::chrono::microseconds>(timeout));
      client.set_read_timeout(std::chrono::duration_cast<std::chrono::microseconds>(timeout));
      client.set_write_timeout(std::chrono::duration_cast<std::chrono::microseconds>(timeout));
      auto res = client.Post(endpoint_.path, headers, body, "application/json");
      if (!res) {
        last_error = "transport error: " + httplib::to_string(res.error());
        continue;
      }
      if (res->status == 200) {
        try {
          return parse_chat_response(res->body);
        } catch (const std::exception& e) {
          last_error = std::string("unparseable response body: ") + e.what();
          continue;
        }
      }
      last_error = "HTTP " + std::to_string(res->status);
      const bool retryable = res->status == 408 || res->status == 429 || res->status >= 500;
      if (!retryable) break;
    }
    throw BackendError(config_.endpoint_url + ": " + last_error);
  }

 private:
  BackendConfig config_;
  Endpoint endpoint_;
  double backoff_base_s_;
};

// ---------------------------------------------------------------------------
// Test doubles

class FunctionBackend : public ModelBackend {
 public:
  using Fn = std::function<std::string(const ModelRequest&)>;
  explicit FunctionBackend(Fn fn) : fn_(std::move(fn)) {}
  std::string complete(const ModelRequest& r) override {
    ++calls_;
    return fn_(r);
  }
  std::size_t calls() const { return calls_; }

 private:
  Fn fn_;
  std::atomic<std::size_t> calls_{0};
};

struct SyntheticItemSpec {
  std::map<std::string, double> weights;  // option text -> answer preference
  std::vector<std::string> candidates;    // texts the generator may propose
  std::vector<std::string> equivalent;    // texts judged EQUIVALENT to the correct answer
};

struct SyntheticOracleSpec {
  double fallback_weight = 1.0;
  std::map<char, double> label_bias;  // multiplies preference by label position
  double garble_rate = 0.0;           // share of answers with no parseable label
  std::unordered_map<std::string, SyntheticItemSpec> items;

  void validate() const {
    if (!(fallback_weight >= 0)) throw ConfigError("synthetic: fallback_weight must be >= 0");
    if (!(garble_rate >= 0 && garble_rate <= 1)) throw ConfigError("synthetic: garble_rate must be in [0, 1]");
    for (const auto& [l, b] : label_bias)
      if (!(b >= 0)) throw ConfigError("synthetic: label bias must be >= 0");
    for (const auto& [id, s] : items)
      for (const auto& [t, w] : s.weights)
        if (!(w >= 0)) throw ConfigError("synthetic: negative weight for item " + id);
  }

  double weight(const std::string& item_id, const std::string& option_text) const {
    if (auto it = items.find(item_id); it != items.end())
      if (auto w = it->second.weights.find(option_text); w != it->second.weights.end()) return w->second;
    return fallback_weight;
  }

  static SyntheticOracleSpec from_json(const Json& j) {
    SyntheticOracleSpec s;
    s.fallback_weight = j.value("fallback_weight", 1.0);
    s.garble_rate = j.value("garble_rate", 0.0);
    if (j.contains("label_bias"))
      for (const auto& [k, v] : j.at("label_bias").items()) {
        auto l = Label::parse(k);
        if (!l) throw ConfigError("synthetic: bad label_bias key " + k);
        s.label_bias[l->value()] = v.get<double>();
      }
    if (j.contains("items"))
      for (const auto& [id, v] : j.at("items").items()) {
        SyntheticItemSpec is;
        if (v.contains("weights"))
          for (const auto& [t, w] : v.at("weights").items()) is.weights[t] = w.get<double>();
        is.candidates = v.value("candidates", std::vector<std::string>{});
        is.equivalent = v.value("equivalent", std::vector<std::string>{});
        s.items[id] = std::move(is);
      }
    s.validate();
    return s;
  }

  static SyntheticOracleSpec load(const std::string& path) {
    try {
      return from_json(Json::parse(files::read_all(path)));
    } catch (const Json::exception& e) {
      throw ConfigError("synthetic spec " + path + ": " + e.what());
    }
  }
};

// Deterministic stand-in for every model role. Answers are drawn from the
// normalized per-option weights; the generator proposes texts from each item's
// candidate pool; the judge consults the item's equivalence list. Responses
// use the same textual formats a chat model is asked for, so the parsing
// paths are exercised end to end.
class SyntheticOracle : public ModelBackend {
 public:
  explicit SyntheticOracle(SyntheticOracleSpec spec = {}) : spec_(std::move(spec)) { spec_.validate(); }

  const SyntheticOracleSpec& spec() const { return spec_; }

  std::string complete(const ModelRequest& r) override {
    auto rng = rnd::make_rng(rnd::derive(r.seed, {r.sample_index, rnd::fnv1a(r.prompt)}));
    switch (r.role) {
      case Role::answer: return answer(r, rng);
      case Role::generate_distractors: return generate(r, rng);
      case Role::expand_options: return expand(r, rng);
      case Role::judge_equivalence: return judge(r);
      case Role::judge_convertibility: return convertibility(r);
      case Role::rewrite_short_answer: return short_answer(r);
      case Role::rewrite_distractors: return rewrite(r);
    }
    throw BackendError("synthetic: unsupported role");
  }

 private:
  const McqItem& item_of(const ModelRequest& r) const {
    if (!r.context.item) throw BackendError("synthetic: request has no item context");
    return *r.context.item;
  }

  std::string answer(const ModelRequest& r, rnd::Rng& rng) const {
    const auto& item = item_of(r);
    if (spec_.garble_rate > 0 && rnd::uniform01(rng) < spec_.garble_rate)
      return "I am not able to decide on this one.";
    std::vector<double> w(item.size());
    for (std::size_t i = 0; i < item.size(); ++i) {
      double bias = 1.0;
      if (auto b = spec_.label_bias.find(Label::at(i).value()); b != spec_.label_bias.end()) bias = b->second;
      w[i] = spec_.weight(item.id, item.options[i]) * bias;
    }
    auto pick = rnd::weighted_index(rng, w);
    if (pick >= item.size()) pick = rnd::uniform_index(rng, item.size());
    return "The answer is (" + Label::at(pick).str() + ").";
  }

  // Candidate texts not already present in the item or excluded.
  std::vector<std::string> fresh_candidates(const ModelRequest& r) const {
    const auto& item = item_of(r);
    std::unordered_set<std::string> taken;
    for (const auto& o : item.options) taken.insert(text::normalize_ws(o));
    for (const auto& e : r.context.exclude) taken.insert(text::normalize_ws(e));
    std::vector<std::string> out;
    if (auto it = spec_.items.find(item.id); it != spec_.items.end())
      for (const auto& c : it->second.candidates)
        if (!taken.count(text::normalize_ws(c))) out.push_back(c);
    return out;
  }

  std::vector<std::string> draw(const ModelRequest& r, rnd::Rng& rng, std::size_t n) const {
    auto pool = fresh_candidates(r);
    auto idx = rnd::sample_without_replacement(rng, pool.size(), n);
    std::vector<std::string> out;
    for (auto i : idx) out.push_back(pool[i]);
    std::size_t k = 0;
    while (out.size() < n) {
      // Pool exhausted: invent a filler unique to this request.
      auto filler = item_of(r).id + " alternative " + std::to_string(rng() % 100000) + "." + std::to_string(k++);
      out.push_back(filler);
    }
    return out;
  }

  std::string generate(const ModelRequest& r, rnd::Rng& rng) const {
    auto texts = draw(r, rng, r.context.slots.size());
    Json d = Json::object();
    for (std::size_t i = 0; i < r.context.slots.size(); ++i) d[r.context.slots[i].str()] = texts[i];
    Json j{{"distractors", d}, {"reasoning", "synthetic proposal"}};
    return "```json\n" + j.dump(2) + "\n```";
  }

  std::string expand(const ModelRequest& r, rnd::Rng& rng) const {
    auto texts = draw(r, rng, r.context.new_options);
    Json j{{"thinking", "synthetic expansion"}, {"new_options", texts}};
    return "```json\n" + j.dump(2) + "\n```";
  }

  std::string judge(const ModelRequest& r) const {
    const auto& item = item_of(r);
    auto cand = text::normalize_ws(r.context.candidate);
    if (cand == text::normalize_ws(item.correct_text())) return "EQUIVALENT";
    if (auto it = spec_.items.find(item.id); it != spec_.items.end())
      for (const auto& e : it->second.equivalent)
        if (text::normalize_ws(e) == cand) return "EQUIVALENT";
    return "NOT_EQUIVALENT";
  }

  std::string convertibility(const ModelRequest& r) const {
    auto stem = text::to_lower_ascii(item_of(r).stem);
    for (const char* cue : {"which of the following", "except", "not true", "all of the above",
                            "best describes", "best explains"})
      if (stem.find(cue) != std::string::npos)
        return "Analysis: the stem depends on the listed options.\nFINAL_LABEL: NOT_CONVERTIBLE";
    return "Analysis: the stem is self-contained.\nFINAL_LABEL: CONVERTIBLE";
  }

  std::string short_answer(const ModelRequest& r) const {
    const auto& item = item_of(r);
    return "<Question>" + item.stem + "</Question>\n<Answer>" + item.correct_text() + "</Answer>";
  }

  std::string rewrite(const ModelRequest& r) const {
    const auto& item = item_of(r);
    Json d = Json::object();
    for (auto l : item.distractor_labels()) d[l.str()] = item.text(l);
    auto fresh = fresh_candidates(r);
    std::string decision = "KEEP_ALL";
    if (!fresh.empty()) {
      decision = "IMPROVE";
      d[item.distractor_labels().front().str()] = fresh.front();
    }
    Json j{{"decision", decision}, {"distractors", d}, {"reasoning", "synthetic review"}};
    return "```json\n" + j.dump(2) + "\n```";
  }

  SyntheticOracleSpec spec_;
};

// Builds the backend named by config.endpoint_url. When `cache` is given the
// backend records into (and replays from) it.
inline std::shared_ptr<ModelBackend> make_backend(const BackendConfig& config,
                                                  std::shared_ptr<ReplayCache> cache = nullptr) {
  config.validate();
  std::shared_ptr<ModelBackend> inner;
  const auto& url = config.endpoint_url;
  if (url == "synthetic") {
    inner = std::make_shared<SyntheticOracle>(
        config.synthetic_spec.empty() ? SyntheticOracleSpec{} : SyntheticOracleSpec::load(config.synthetic_spec));
  } else if (text::starts_with(url, "replay:")) {
    auto replay = std::make_shared<ReplayCache>(url.substr(7));
    return std::make_shared<CachedBackend>(nullptr, replay);
  } else {
    inner = std::make_shared<RemoteChatBackend>(config);
  }
  if (cache) return std::make_shared<CachedBackend>(inner, cache);
  return inner;
}

}  // namespace mcqc

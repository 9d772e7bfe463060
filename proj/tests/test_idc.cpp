#include <catch2/catch_amalgamated.hpp>

#include <deque>
#include <set>

#include "idc_checks.hpp"
#include "mcqc/idc.hpp"
#include "support.hpp"

using namespace mcqc;
using testing::fenced;
using testing::make_item;

namespace {

// Evaluator whose sample i picks the text chooser(item, i); unknown texts
// fall back to the correct option.
Model evaluator(std::function<std::string(const McqItem&, std::uint64_t)> chooser) {
  auto be = std::make_shared<FunctionBackend>([chooser](const ModelRequest& r) {
    const auto& item = *r.context.item;
    auto want = chooser(item, r.sample_index);
    for (std::size_t i = 0; i < item.size(); ++i)
      if (item.options[i] == want) return "The answer is (" + Label::at(i).str() + ").";
    return "The answer is (" + item.correct_label().str() + ").";
  });
  return testing::scripted(be);
}

// Generator that hands out texts from a queue, one per requested slot.
struct QueueGenerator {
  std::shared_ptr<std::deque<std::string>> queue = std::make_shared<std::deque<std::string>>();
  std::shared_ptr<FunctionBackend> backend;
  QueueGenerator(std::initializer_list<std::string> texts) {
    queue->assign(texts);
    auto q = queue;
    backend = std::make_shared<FunctionBackend>([q](const ModelRequest& r) {
      Json d = Json::object();
      for (auto l : r.context.slots) {
        std::string t = q->empty() ? "spare " + std::to_string(r.sample_index) + l.str() : q->front();
        if (!q->empty()) q->pop_front();
        d[l.str()] = t;
      }
      return fenced({{"distractors", d}, {"reasoning", "queue"}});
    });
  }
  Model model() const { return testing::scripted(backend); }
};

Model alias_judge(std::set<std::string> aliases) {
  return testing::scripted(std::make_shared<FunctionBackend>([aliases](const ModelRequest& r) {
    return std::string(aliases.count(r.context.candidate) ? "EQUIVALENT" : "NOT_EQUIVALENT");
  }));
}

CurationConfig config(int t = 7, std::size_t k = 8) {
  CurationConfig c;
  c.max_iterations = t;
  c.k_samples = k;
  return c;
}

}  // namespace

TEST_CASE("initialize: fully solved item starts with an empty pool") {
  auto item = make_item("i1", "q", {"right", "a", "b", "c"}, 0);
  SyntheticOracleSpec spec;
  spec.items["i1"].weights = {{"right", 1}, {"a", 0}, {"b", 0}, {"c", 0}};
  CurationModels m{testing::synthetic(spec), testing::synthetic(spec), testing::synthetic(spec, 0)};
  auto s = initialize(item, config(), m, 1);
  CHECK(s.pool.empty());
  CHECK(s.history.size() == 1);
  CHECK(s.history[0].passrate == 1.0);
  CHECK(s.target_distractors == 3);
}

TEST_CASE("initialize keeps originals with positive strength") {
  auto item = make_item("i2", "q", {"A-text", "correct", "C-text", "D-text"}, 1);
  auto eval = evaluator([](const McqItem&, std::uint64_t i) {
    return i == 6 ? std::string("A-text") : i == 7 ? std::string("C-text") : std::string("correct");
  });
  CurationModels m{eval, eval, eval};
  auto s = initialize(item, config(), m, 1);
  REQUIRE(s.pool.size() == 2);
  CHECK(s.pool[0].text == "A-text");
  CHECK(s.pool[1].text == "C-text");
  CHECK(s.pool[0].strength == 0.5);
  CHECK(s.history[0].passrate == 0.75);
}

TEST_CASE("initialize with a smaller target keeps the strongest originals") {
  auto item = make_item("i3", "q", {"correct", "w", "x", "y"}, 0);
  auto eval = evaluator([](const McqItem&, std::uint64_t i) {
    const char* picks[] = {"y", "y", "y", "x", "x", "w", "correct", "correct"};
    return std::string(picks[i]);
  });
  auto c = config();
  c.target_options = 3;
  auto s = initialize(item, c, {eval, eval, eval}, 1);
  REQUIRE(s.pool.size() == 2);
  CHECK(s.pool[0].text == "x");
  CHECK(s.pool[1].text == "y");
}

TEST_CASE("fill step admits only candidates with positive strength") {
  auto item = make_item("f1", "q", {"correct", "o1", "o2", "o3"}, 0);
  auto eval = evaluator([](const McqItem&, std::uint64_t i) {
    const char* picks[] = {"n1", "n1", "n2", "correct", "correct", "correct", "correct", "correct"};
    return std::string(picks[i]);
  });
  QueueGenerator gen{"n1", "n2", "n3"};
  CurationModels m{gen.model(), eval, alias_judge({})};
  auto s = initialize(item, config(), m, 1);
  REQUIRE(s.pool.empty());
  step(s, config(), m, 1);
  REQUIRE(s.pool.size() == 2);
  CHECK(s.pool[0].text == "n1");
  CHECK(s.pool[1].text == "n2");
  CHECK(s.trace[0].mode == "fill");
  CHECK(s.trace[0].candidates.size() == 3);
  CHECK(s.history.back().passrate == 5.0 / 8);
  CHECK_FALSE(s.full());
  step(s, config(), m, 1);
  CHECK(s.trace[1].mode == "fill");
  CHECK(s.trace[1].candidates.size() == 1);
}

TEST_CASE("guard rejects an alias of the correct answer and leaves the slot open") {
  auto item = make_item("g1", "Jaw claudication and high ESR?",
                        {"Migraine", "Cluster headache", "Giant cell arteritis", "Trigeminal neuralgia"}, 2);
  auto eval = evaluator([](const McqItem&, std::uint64_t i) {
    if (i < 2) return std::string("Migraine");
    if (i == 2) return std::string("Polymyalgia rheumatica");
    return std::string("Giant cell arteritis");
  });
  QueueGenerator gen{"Temporal arteritis", "Polymyalgia rheumatica"};
  CurationModels m{gen.model(), eval, alias_judge({"Temporal arteritis"})};
  auto s = initialize(item, config(), m, 1);
  REQUIRE(s.pool.size() == 1);
  step(s, config(), m, 1);
  CHECK(s.pool.size() == 2);
  REQUIRE(s.trace[0].rejected.size() == 1);
  CHECK(s.trace[0].rejected[0].text == "Temporal arteritis");
  CHECK(s.trace[0].rejected[0].reason == "equivalent");
  CHECK(std::find(s.trace[0].evaluated.begin(), s.trace[0].evaluated.end(), "Temporal arteritis") ==
        s.trace[0].evaluated.end());
}

TEST_CASE("exact copies of the answer never reach the judge") {
  auto item = make_item("x1", "q", {"the right one", "a", "b"}, 0);
  auto eval = evaluator([](const McqItem&, std::uint64_t) { return std::string("the right one"); });
  int judge_calls = 0;
  auto judge = testing::scripted(std::make_shared<FunctionBackend>([&](const ModelRequest&) {
    ++judge_calls;
    return std::string("NOT_EQUIVALENT");
  }));
  // trimmed copies are refused during generation; inner spacing gets through
  QueueGenerator gen{"the  right   one", "c"};
  CurationModels m{gen.model(), eval, judge};
  auto s = initialize(item, config(), m, 1);
  step(s, config(), m, 1);
  REQUIRE_FALSE(s.trace[0].rejected.empty());
  CHECK(s.trace[0].rejected[0].reason == "exact_match");
  CHECK(judge_calls == 1);
}

TEST_CASE("replacement needs a strictly stronger candidate") {
  auto item = make_item("r1", "q", {"correct", "p", "q", "w"}, 0);
  // p and q each take 3 picks, w takes 1; the newcomer takes 1 too
  auto eval = evaluator([](const McqItem& it, std::uint64_t i) {
    bool has_w = std::find(it.options.begin(), it.options.end(), "w") != it.options.end();
    const char* with_w[] = {"p", "p", "p", "q", "q", "q", "w", "correct"};
    const char* with_new[] = {"p", "p", "p", "q", "q", "q", "new", "correct"};
    return std::string(has_w ? with_w[i] : with_new[i]);
  });
  QueueGenerator gen{"new"};
  CurationModels m{gen.model(), eval, alias_judge({})};
  auto s = initialize(item, config(), m, 1);
  REQUIRE(s.full());
  step(s, config(), m, 1);
  const auto& tr = s.trace[0];
  CHECK(tr.mode == "replace");
  CHECK(*tr.weak == "w");
  CHECK(*tr.new_strength == *tr.weak_strength);
  CHECK_FALSE(tr.replaced);
  CHECK(s.pool_texts() == std::vector<std::string>{"p", "q", "w"});
}

TEST_CASE("replacement swaps in a stronger candidate") {
  auto item = make_item("r2", "q", {"correct", "p", "q", "w"}, 0);
  auto eval = evaluator([](const McqItem& it, std::uint64_t i) {
    bool has_w = std::find(it.options.begin(), it.options.end(), "w") != it.options.end();
    const char* with_w[] = {"p", "p", "q", "q", "w", "correct", "correct", "correct"};
    const char* with_new[] = {"p", "new", "new", "new", "q", "correct", "correct", "correct"};
    return std::string(has_w ? with_w[i] : with_new[i]);
  });
  QueueGenerator gen{"new"};
  CurationModels m{gen.model(), eval, alias_judge({})};
  auto s = initialize(item, config(), m, 1);
  step(s, config(), m, 1);
  CHECK(s.trace[0].replaced);
  CHECK(s.pool_texts() == std::vector<std::string>{"p", "q", "new"});
  CHECK(s.pool[2].strength == 0.6);
}

TEST_CASE("weakest-member ties go to the earliest inserted") {
  auto item = make_item("r3", "q", {"correct", "p", "q", "w"}, 0);
  auto eval = evaluator([](const McqItem&, std::uint64_t i) {
    const char* picks[] = {"p", "q", "w", "correct", "correct", "correct", "correct", "correct"};
    return std::string(picks[i]);
  });
  QueueGenerator gen{"new"};
  CurationModels m{gen.model(), eval, alias_judge({})};
  auto s = initialize(item, config(), m, 1);
  step(s, config(), m, 1);
  CHECK(*s.trace[0].weak == "p");
}

TEST_CASE("generation failure is a recorded no-op") {
  auto item = make_item("n1", "q", {"correct", "a", "b"}, 0);
  auto eval = evaluator([](const McqItem&, std::uint64_t) { return std::string("correct"); });
  auto broken = testing::scripted(std::make_shared<FunctionBackend>([](const ModelRequest&) { return std::string("??"); }), 1);
  CurationModels m{broken, eval, alias_judge({})};
  auto s = initialize(item, config(3), m, 1);
  step(s, config(3), m, 1);
  CHECK(s.iteration == 1);
  CHECK(s.history.size() == 2);
  CHECK(s.history[1].passrate == s.history[0].passrate);
  CHECK(s.trace[0].noop_reason.find("generation failed") != std::string::npos);
  while (!s.done(config(3))) step(s, config(3), m, 1);
  auto o = finalize(s, 1);
  CHECK(o.final_item.size() == 3);
  CHECK(o.padded_from_original.size() == 2);
  CHECK_THROWS_AS(step(s, config(3), m, 1), PreconditionError);
}

TEST_CASE("snapshot selection: largest pool, then lowest passrate, then earliest") {
  auto snap = [](std::size_t n, double p) {
    Snapshot s;
    s.pool.assign(n, "x");
    s.passrate = p;
    return s;
  };
  CHECK(select_snapshot({snap(0, 1.0), snap(2, 0.6), snap(3, 0.5), snap(3, 0.4)}) == 3);
  CHECK(select_snapshot({snap(1, 0.2), snap(3, 0.5), snap(3, 0.5), snap(2, 0.1)}) == 1);
  CHECK(select_snapshot({snap(0, 1.0)}) == 0);
  CHECK_THROWS_AS(select_snapshot({}), PreconditionError);
}

TEST_CASE("finalize pads with originals in label order") {
  CurationState s;
  s.item = make_item("p1", "q", {"o1", "correct", "o2", "o3"}, 1);
  s.target_distractors = 3;
  s.history.push_back({{"g1"}, 0.9});
  s.history.push_back({{"g1", "o2"}, 0.5});
  auto o = finalize(s, 4);
  CHECK(o.selected_snapshot == 1);
  CHECK(o.padded_from_original == std::vector<std::string>{"o1"});
  auto d = o.final_item.distractor_texts();
  CHECK(d == std::vector<std::string>{"g1", "o2", "o1"});
}

TEST_CASE("finalize fails when nothing can fill the target") {
  CurationState s;
  s.item = make_item("p2", "q", {"correct", "o1"}, 0);
  s.target_distractors = 3;
  s.history.push_back({{}, 1.0});
  CHECK_THROWS_AS(finalize(s, 1), GenerationFailure);
}

TEST_CASE("invariants hold across random synthetic items") {
  std::mt19937_64 rng(17);
  for (int t = 0; t < 60; ++t) {
    const auto n = 3 + rng() % 6;
    auto item = testing::random_item(rng, "prop" + std::to_string(t), n);
    SyntheticOracleSpec spec;
    auto& is = spec.items[item.id];
    for (const auto& o : item.options) is.weights[o] = static_cast<double>(rng() % 4);
    is.weights[item.correct_text()] = 1 + static_cast<double>(rng() % 6);
    for (int c = 0; c < 6; ++c) {
      auto text = item.id + " cand " + std::to_string(c);
      is.candidates.push_back(text);
      is.weights[text] = static_cast<double>(rng() % 5);
      if (c == 0) is.equivalent.push_back(text);
    }
    spec.fallback_weight = 0.5;
    auto m = testing::synthetic(spec);
    CurationModels models{m, m, m.greedy()};
    auto c = config(7, 8);
    if (t % 3 == 0) c.target_options = n + 1;
    auto traced = testing::run_traced(item, c, models, static_cast<std::uint64_t>(t));
    auto bad = testing::check_invariants(item, traced);
    INFO(item.id << ": " << bad.value_or(""));
    CHECK_FALSE(bad);
    for (const auto& d : traced.outcome.final_item.distractor_texts())
      CHECK(std::find(is.equivalent.begin(), is.equivalent.end(), d) == is.equivalent.end());
  }
}

TEST_CASE("curate_dataset is deterministic and scheduling-independent") {
  std::mt19937_64 rng(8);
  std::vector<McqItem> items;
  SyntheticOracleSpec spec;
  spec.fallback_weight = 0.4;
  for (int i = 0; i < 12; ++i) {
    items.push_back(testing::random_item(rng, "det" + std::to_string(i), 4));
    spec.items[items.back().id].weights[items.back().correct_text()] = 3;
  }
  auto m = testing::synthetic(spec);
  CurationModels models{m, m, m.greedy()};
  auto a = curate_dataset(items, config(), models, 99, 1);
  auto b = curate_dataset(items, config(), models, 99, 4);
  CHECK(a.curated_items() == b.curated_items());
  CHECK(trace_jsonl(items, a) == trace_jsonl(items, b));
  CHECK(a.report.to_json() == b.report.to_json());
  CHECK(a.report.generation_rounds == 12 * 7);
}

TEST_CASE("curate_dataset isolates per-item failures") {
  auto good = make_item("good", "q", {"a", "b", "c"}, 0);
  auto bad = make_item("bad", "q", {"a", "b", "c"}, 0);
  auto inner = std::make_shared<SyntheticOracle>();
  auto be = std::make_shared<FunctionBackend>([inner](const ModelRequest& r) {
    if (r.context.item && r.context.item->id == "bad") throw BackendError("endpoint down");
    return inner->complete(r);
  });
  Model m = testing::scripted(be);
  auto run = curate_dataset({good, bad}, config(2), {m, m, m}, 1);
  CHECK(run.report.curated == 1);
  CHECK(run.report.failed == 1);
  REQUIRE(run.report.errors.size() == 1);
  CHECK(run.report.errors[0].id == "bad");
  CHECK(run.curated_items().size() == 1);
}

TEST_CASE("early stop after repeated failed replacements") {
  auto item = make_item("es", "q", {"correct", "p", "q", "w"}, 0);
  auto eval = evaluator([](const McqItem& it, std::uint64_t i) {
    const char* picks[] = {"p", "q", "w", "p", "q", "w", "correct", "correct"};
    std::string want = picks[i];
    if (std::find(it.options.begin(), it.options.end(), want) == it.options.end()) return std::string("correct");
    return want;
  });
  QueueGenerator gen{};
  CurationModels m{gen.model(), eval, alias_judge({})};
  auto c = config(7);
  c.early_stop_patience = 3;
  auto t = testing::run_traced(item, c, m, 1);
  CHECK(t.state.stopped_early);
  CHECK(t.state.iteration == 3);
  CHECK(t.outcome.stopped_early);
}

TEST_CASE("curation config validation and JSON") {
  auto c = config();
  c.max_iterations = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = config();
  c.target_options = 1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = config();
  c.target_options = 5;
  auto back = CurationConfig::from_json(c.to_json());
  CHECK(back.target_options == 5u);
  CHECK(back.max_iterations == 7);
}

TEST_CASE("trace rows carry the documented fields") {
  auto item = make_item("tr", "q", {"correct", "a", "b", "c"}, 0);
  auto m = testing::synthetic({});
  auto run = curate_dataset({item}, config(2), {m, m, m}, 3);
  auto lines = text::split_lines(trace_jsonl({item}, run));
  REQUIRE(lines.size() == 3);
  CHECK(lines.back().empty());
  auto j = Json::parse(lines[0]);
  for (const char* k : {"id", "iteration", "mode", "candidates", "admitted", "rejected", "passrate", "pool"})
    CHECK(j.contains(k));
}

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <fstream>
#include <set>

#include "mcqc/dataset.hpp"
#include "support.hpp"

using namespace mcqc;
using testing::make_item;
using testing::TempDir;

static std::string write_lines(const TempDir& dir, const std::string& name, const std::vector<std::string>& lines) {
  auto path = dir.file(name);
  std::ofstream out(path, std::ios::binary);
  for (const auto& l : lines) out << l << "\n";
  return path;
}

TEST_CASE("labels are positional letters") {
  CHECK(Label::at(0).value() == 'A');
  CHECK(Label::at(25).value() == 'Z');
  CHECK(Label('C').index() == 2);
  CHECK(Label::parse(" B ")->value() == 'B');
  CHECK_FALSE(Label::parse("b"));
  CHECK_FALSE(Label::parse("AB"));
  CHECK(Label('A') < Label('B'));
}

TEST_CASE("ingest maps a canonical line") {
  TempDir dir("ingest");
  auto path = write_lines(dir, "a.jsonl", {R"({"question":"2+2=?","options":{"A":"4","B":"5"},"answer":"A","id":"q1"})"});
  auto r = ingest_jsonl(path);
  REQUIRE(r.errors.empty());
  REQUIRE(r.items.size() == 1);
  CHECK(r.items[0].size() == 2);
  CHECK(r.items[0].correct_label() == Label('A'));
  CHECK(r.items[0].correct_text() == "4");
}

TEST_CASE("ingest reports bad lines instead of dropping them") {
  TempDir dir("ingest-bad");
  auto path = write_lines(dir, "a.jsonl",
                          {R"({"id":"ok","question":"q","options":{"A":"x","B":"y"},"answer":"B"})",
                           R"({"id":"z","question":"q","options":{"A":"a","B":"b","C":"c","D":"d"},"answer":"Z"})",
                           "not json",
                           R"({"id":"nostem","options":{"A":"x","B":"y"},"answer":"A"})",
                           R"({"id":"dup-text","question":"q","options":{"A":"x","B":" x "},"answer":"A"})",
                           R"({"id":"gap","question":"q","options":{"A":"x","C":"y"},"answer":"A"})",
                           R"({"id":"ok","question":"q2","options":{"A":"x","B":"y"},"answer":"A"})"});
  auto r = ingest_jsonl(path);
  CHECK(r.items.size() == 1);
  CHECK(r.lines_read == 7);
  REQUIRE(r.errors.size() == 6);
  CHECK(r.errors[0].line == 2);
  CHECK(r.errors[0].message.find("correct label absent") != std::string::npos);
  CHECK(r.errors[5].message.find("duplicate id") != std::string::npos);
}

TEST_CASE("ingest reads the mmlu-pro and medqa layouts") {
  TempDir dir("schemas");
  auto mmlu = write_lines(dir, "m.jsonl",
                          {R"({"question_id":70,"question":"Q?","options":["a","b","c"],"answer":"C","answer_index":2,"category":"law","src":"x"})"});
  auto r = ingest_jsonl(mmlu, SchemaMapping::mmlu_pro());
  REQUIRE(r.items.size() == 1);
  CHECK(r.items[0].id == "70");
  CHECK(r.items[0].correct == 2);
  CHECK(r.items[0].meta["category"] == "law");

  auto medqa = write_lines(dir, "q.jsonl",
                           {R"({"question":"Q?","answer":"b","options":{"A":"a","B":"b"},"meta_info":"step1","answer_idx":"B"})"});
  auto r2 = ingest_jsonl(medqa, SchemaMapping::medqa());
  REQUIRE(r2.items.size() == 1);
  CHECK(r2.items[0].id == "line-1");
  CHECK(r2.items[0].correct_label() == Label('B'));
}

TEST_CASE("unreadable file raises IoError") {
  CHECK_THROWS_AS(ingest_jsonl("/nonexistent/file.jsonl"), IoError);
}

TEST_CASE("emit then ingest is the identity") {
  TempDir dir("roundtrip");
  std::vector<McqItem> items;
  items.push_back(make_item("u1", "Quelle est la capitale? \xE2\x80\x94 \xE6\x97\xA5\xE6\x9C\xAC", {"Paris", "Lyon", "Nice"}, 0));
  items.back().meta = Json{{"source", "t"}, {"n", 3}};
  items.push_back(make_item("u2", "  padded stem  ", {"a", "b"}, 1));
  std::mt19937_64 rng(5);
  for (int i = 0; i < 50; ++i) items.push_back(testing::random_item(rng, "r" + std::to_string(i), 2 + i % 9));
  auto path = dir.file("out.jsonl");
  emit_jsonl(items, path);
  auto back = ingest_jsonl(path);
  CHECK(back.errors.empty());
  CHECK(back.items == items);

  emit_jsonl({}, dir.file("empty.jsonl"));
  CHECK(testing::file_bytes(dir.file("empty.jsonl")).empty());
  CHECK(ingest_jsonl(dir.file("empty.jsonl")).items.empty());
}

TEST_CASE("emit refuses invalid items") {
  TempDir dir("emit-bad");
  auto bad = make_item("x", "q", {"a"}, 0);
  CHECK_THROWS_AS(emit_jsonl({bad}, dir.file("x.jsonl")), InvalidItem);
}

TEST_CASE("dedupe keys on normalized stem and option multiset") {
  auto a = make_item("1", "What  is x?", {"p", "q", "r"}, 0);
  auto b = make_item("2", "What is x? ", {"r", " p", "q"}, 1);
  auto c = make_item("3", "What is x?", {"p", "q", "s"}, 0);
  auto d = make_item("4", "what is x?", {"p", "q", "r"}, 0);
  auto out = dedupe({a, b, c, d, a});
  REQUIRE(out.size() == 3);
  CHECK(out[0].id == "1");
  CHECK(out[1].id == "3");
  CHECK(out[2].id == "4");
}

TEST_CASE("split sizes and partition") {
  std::mt19937_64 rng(1);
  std::vector<McqItem> items;
  for (int i = 0; i < 9417; ++i) items.push_back(testing::random_item(rng, "i" + std::to_string(i), 4));
  auto s = split(items, 0.85, 42);
  CHECK(s.train.size() == 8004);
  CHECK(s.test.size() == 1413);
  std::set<std::string> ids;
  for (const auto& it : s.train) ids.insert(it.id);
  for (const auto& it : s.test) CHECK(ids.insert(it.id).second);
  CHECK(ids.size() == items.size());

  auto again = split(items, 0.85, 42);
  CHECK(again.train == s.train);
  auto other = split(items, 0.85, 43);
  CHECK_FALSE(other.train == s.train);

  std::vector<McqItem> two(items.begin(), items.begin() + 2);
  auto s2 = split(two, 0.5, 0);
  CHECK(s2.train.size() == 1);
  CHECK(s2.test.size() == 1);

  CHECK_THROWS_AS(split({}, 0.5, 0), PreconditionError);
  CHECK_THROWS_AS(split(items, 1.0, 0), PreconditionError);
  CHECK_THROWS_AS(split(items, 0.0, 0), PreconditionError);
}

TEST_CASE("split ratio stays within one item for many sizes") {
  std::mt19937_64 rng(2);
  for (std::size_t n : {1u, 3u, 7u, 10u, 99u, 101u}) {
    std::vector<McqItem> items;
    for (std::size_t i = 0; i < n; ++i) items.push_back(testing::random_item(rng, "s" + std::to_string(i), 2));
    for (double ratio : {0.1, 0.5, 0.85, 0.99}) {
      auto s = split(items, ratio, 9);
      CHECK(s.train.size() + s.test.size() == n);
      CHECK(std::abs(static_cast<double>(s.train.size()) - ratio * static_cast<double>(n)) <= 1.0);
    }
  }
}

TEST_CASE("make_variant keeps the correct text exactly once") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 300; ++trial) {
    auto item = testing::random_item(rng, "v" + std::to_string(trial), 10);
    for (std::size_t n = 2; n <= 10; ++n) {
      auto v = make_variant(item, n, static_cast<std::uint64_t>(trial * 31 + n));
      REQUIRE_FALSE(check_item(v));
      CHECK(v.size() == n);
      CHECK(v.correct_text() == item.correct_text());
      CHECK(std::count(v.options.begin(), v.options.end(), item.correct_text()) == 1);
      CHECK(v.stem == item.stem);
      // survivors keep their relative order
      std::size_t last = 0;
      for (const auto& o : v.options) {
        auto pos = static_cast<std::size_t>(std::find(item.options.begin(), item.options.end(), o) - item.options.begin());
        CHECK(pos >= last);
        last = pos;
      }
    }
  }
}

TEST_CASE("make_variant edge cases") {
  auto item = make_item("x", "q", {"a", "b", "c", "d", "e", "f", "g", "h", "i", "j"}, 4);
  auto same = make_variant(item, 10, 1);
  CHECK(same == item);
  auto two = make_variant(item, 2, 1);
  CHECK(two.size() == 2);
  CHECK_THROWS_AS(make_variant(make_item("y", "q", {"a", "b", "c"}, 0), 4, 1), PreconditionError);
  CHECK_THROWS_AS(make_variant(item, VariantSpec::mixed({{2, 1.0}}), 1), PreconditionError);
}

TEST_CASE("make_variant draws distractors uniformly") {
  auto item = make_item("u", "q", {"c", "d1", "d2", "d3", "d4"}, 0);
  std::map<std::string, int> kept;
  const int trials = 20000;
  for (int s = 0; s < trials; ++s) ++kept[make_variant(item, 2, static_cast<std::uint64_t>(s)).distractor_texts()[0]];
  const double p = 0.25, sigma = std::sqrt(trials * p * (1 - p));
  for (const auto& [t, c] : kept) CHECK(std::abs(c - trials * p) < 4 * sigma);
}

TEST_CASE("mixed variants hit each count within one of its quota") {
  std::mt19937_64 rng(4);
  std::vector<McqItem> items;
  for (int i = 0; i < 8004; ++i) items.push_back(testing::random_item(rng, "m" + std::to_string(i), 10));
  auto spec = VariantSpec::mixed({{2, 0.2}, {4, 0.2}, {6, 0.2}, {8, 0.2}, {10, 0.2}}, 11);
  auto out = make_variants(items, spec);
  std::map<std::size_t, int> sizes;
  for (const auto& it : out) ++sizes[it.size()];
  REQUIRE(sizes.size() == 5);
  for (const auto& [n, c] : sizes) CHECK(std::abs(c - 1600.8) <= 1.0);
  CHECK(make_variants(items, spec) == out);
}

TEST_CASE("variant spec validation") {
  CHECK_THROWS_AS(VariantSpec::fixed(1).validate(), PreconditionError);
  CHECK_THROWS_AS(VariantSpec::fixed(11).validate(), PreconditionError);
  CHECK_THROWS_AS(VariantSpec::mixed({{2, 0.5}, {4, 0.4}}).validate(), PreconditionError);
  CHECK_NOTHROW(VariantSpec::mixed({{2, 0.5}, {4, 0.5}}).validate());
}

TEST_CASE("permute_correct_label preserves texts and spreads the answer") {
  std::mt19937_64 rng(6);
  std::vector<McqItem> items;
  for (int i = 0; i < 10000; ++i) items.push_back(testing::random_item(rng, "p" + std::to_string(i), 10));
  auto out = permute_correct_label(items, 77);
  std::vector<int> counts(10, 0);
  for (std::size_t i = 0; i < items.size(); ++i) {
    auto a = items[i].options, b = out[i].options;
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    REQUIRE(a == b);
    REQUIRE(out[i].correct_text() == items[i].correct_text());
    CHECK(out[i].distractor_texts() == items[i].distractor_texts());
    ++counts[out[i].correct];
  }
  const double sigma = std::sqrt(10000 * 0.1 * 0.9);
  for (int c : counts) CHECK(std::abs(c - 1000) <= 3 * sigma);

  CHECK_THROWS_AS(permute_correct_label({items[0], testing::random_item(rng, "odd", 3)}, 1), PreconditionError);
}

TEST_CASE("permute_correct_label on one item is uniform across seeds") {
  auto item = make_item("one", "q", {"a", "b", "c", "d"}, 0);
  std::vector<int> counts(4, 0);
  for (std::uint64_t s = 0; s < 1000; ++s) ++counts[permute_correct_label({item}, s)[0].correct];
  const double sigma = std::sqrt(1000 * 0.25 * 0.75);
  for (int c : counts) CHECK(std::abs(c - 250) <= 3 * sigma);

  auto two = make_item("two", "q", {"right", "wrong"}, 0);
  bool swapped = false;
  for (std::uint64_t s = 0; s < 20 && !swapped; ++s) {
    auto p = permute_correct_label({two}, s)[0];
    if (p.correct == 1) {
      swapped = true;
      CHECK(p.options == std::vector<std::string>{"wrong", "right"});
    }
  }
  CHECK(swapped);
}

TEST_CASE("filter_count keeps exact sizes") {
  std::vector<McqItem> items{make_item("a", "q", {"1", "2"}, 0), make_item("b", "q", {"1", "2", "3"}, 0)};
  CHECK(filter_count(items, 3).size() == 1);
  CHECK(filter_count(items, 3)[0].id == "b");
}

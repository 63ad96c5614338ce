#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "misuse/corpus.hpp"
#include "misuse/error.hpp"

using namespace misuse;

namespace {

SessionDataset make(const std::vector<std::vector<std::string>>& sessions) {
  DatasetBuilder b;
  for (std::size_t i = 0; i < sessions.size(); ++i) b.add("s" + std::to_string(i), sessions[i]);
  return std::move(b).build();
}

SessionDataset of_lengths(const std::vector<std::size_t>& lengths) {
  std::vector<std::vector<std::string>> s;
  for (std::size_t n : lengths) {
    std::vector<std::string> a;
    for (std::size_t i = 0; i < n; ++i) a.push_back(i % 2 ? "B" : "A");
    s.push_back(a);
  }
  return make(s);
}

}  // namespace

TEST_CASE("jsonl ingest builds the vocabulary in first-seen order") {
  std::istringstream in(
      R"({"session_id":"a","actions":["A","B"]})"
      "\n"
      R"({"session_id":"b","actions":["B","C"],"user":"u1"})"
      "\n"
      R"({"session_id":"c","actions":["A"]})"
      "\n");
  const auto ds = ingest_jsonl(in);
  CHECK(ds.size() == 3);
  CHECK(ds.vocabulary().size() == 3);
  CHECK(ds.vocabulary().names() == std::vector<std::string>{"A", "B", "C"});
  CHECK(ds[1].user == std::optional<std::string>("u1"));
  CHECK(ds[2].actions == std::vector<ActionId>{0});
}

TEST_CASE("jsonl ingest errors name the line") {
  std::istringstream empty_session(
      R"({"session_id":"a","actions":["A"]})"
      "\n"
      R"({"session_id":"b","actions":[]})"
      "\n");
  CHECK_THROWS_WITH_AS(ingest_jsonl(empty_session), "empty session at line 2", FormatError);

  std::istringstream broken("{\"session_id\":\"a\",\"actions\":[\"A\"]}\n{nope\n");
  try {
    ingest_jsonl(broken);
    FAIL("expected a format error");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("line 2") != std::string::npos);
  }

  std::istringstream nothing("");
  CHECK_THROWS_AS(ingest_jsonl(nothing), FormatError);
}

TEST_CASE("csv ingest orders by ordinal and matches jsonl") {
  std::istringstream csv(
      "session_id,action,ordinal\n"
      "a,B,1\n"
      "a,A,0\n"
      "b,\"C\",0\n");
  const auto ds = ingest_csv(csv);
  REQUIRE(ds.size() == 2);
  CHECK(ds.vocabulary().name(ds[0].actions[0]) == "A");
  CHECK(ds.vocabulary().name(ds[0].actions[1]) == "B");

  std::istringstream ungrouped(
      "session_id,action,ordinal\n"
      "a,A,0\n"
      "b,B,0\n"
      "a,C,1\n");
  CHECK_THROWS_AS(ingest_csv(ungrouped), FormatError);
}

TEST_CASE("jsonl emit and ingest round-trip") {
  const auto corpus = generate_synthetic(make_persona_config(std::vector<std::size_t>{20, 30}, 5, 0.2,
                                                             LengthModel{}, 3));
  std::stringstream buf;
  emit_jsonl(corpus.dataset, buf);
  const auto back = ingest_jsonl(buf);
  CHECK(back == corpus.dataset);
  CHECK(back.fingerprint() == corpus.dataset.fingerprint());
}

TEST_CASE("filter_short") {
  const auto r = filter_short(of_lengths({1, 2, 5, 1}));
  CHECK(r.removed == 2);
  REQUIRE(r.dataset.size() == 2);
  CHECK(r.dataset[0].length() == 2);
  CHECK(r.dataset[1].length() == 5);

  const auto again = filter_short(r.dataset);
  CHECK(again.removed == 0);
  CHECK(again.dataset == r.dataset);
}

TEST_CASE("length statistics") {
  const auto ls = length_stats(of_lengths({1, 2, 3}));
  CHECK(ls.mean() == doctest::Approx(2.0));
  CHECK(ls.max() == 3);
  CHECK(ls.percentile(50) == 2);
  CHECK(ls.percentile(100) == 3);

  const auto flat = length_stats(of_lengths(std::vector<std::size_t>(100, 5)));
  CHECK(flat.percentile(98) == 5);

  // nearest rank over 1..10: ceil(0.9 * 10) = 9th smallest
  std::vector<std::size_t> ten(10);
  for (std::size_t i = 0; i < 10; ++i) ten[i] = 10 - i;
  CHECK(length_stats(of_lengths(ten)).percentile(90) == 9);
  CHECK(length_stats(of_lengths(ten)).percentile(1) == 1);

  CHECK_THROWS_AS(length_stats(SessionDataset{}), InvalidArgument);
}

TEST_CASE("split counts and labels") {
  auto c = split_counts(100, SplitRatios{});
  CHECK(c.train == 70);
  CHECK(c.validation == 15);
  CHECK(c.test == 15);
  c = split_counts(10, SplitRatios{});
  CHECK(c.train == 8);
  CHECK(c.validation == 1);
  CHECK(c.test == 1);

  const auto ds = of_lengths(std::vector<std::size_t>(100, 3));
  const auto a = split(ds, SplitRatios{}, 7);
  const auto b = split(ds, SplitRatios{}, 7);
  CHECK(a.splits() == b.splits());
  CHECK(a.subset(Split::kTrain).size() == 70);
  CHECK(a.subset(Split::kValidation).size() == 15);
  CHECK(a.subset(Split::kTest).size() == 15);
  CHECK(split(ds, SplitRatios{}, 8).splits() != a.splits());

  CHECK_THROWS_AS(split(ds, SplitRatios{0.5, 0.5, 0.5}, 1), InvalidArgument);
}

TEST_CASE("markov walk follows a deterministic cycle") {
  Persona p;
  p.actions = {0, 1, 2};
  p.transition = {{0, 1, 0}, {0, 0, 1}, {1, 0, 0}};
  p.start = {1, 0, 0};
  Rng rng(1);
  CHECK(markov_walk(p, 6, rng, ActionId{0}) == std::vector<ActionId>{0, 1, 2, 0, 1, 2});
}

TEST_CASE("non-stochastic transition rows are rejected") {
  auto cfg = cycle_config(3, 10, LengthModel{}, 1);
  cfg.personas[0].transition[1] = {0.2, 0.2, 0.2};
  CHECK_THROWS_AS(generate_synthetic(cfg), InvalidArgument);
}

TEST_CASE("disjoint personas never mix actions") {
  const auto cfg = make_persona_config(std::vector<std::size_t>{500, 500}, 5, 0.0, LengthModel{}, 11);
  const auto corpus = generate_synthetic(cfg);
  REQUIRE(corpus.dataset.size() == 1000);
  for (std::size_t i = 0; i < corpus.dataset.size(); ++i) {
    std::set<std::string> own;
    for (ActionId a : cfg.personas[static_cast<std::size_t>(corpus.persona[i])].actions)
      own.insert(cfg.action_names[static_cast<std::size_t>(a)]);
    for (ActionId a : corpus.dataset[i].actions) REQUIRE(own.contains(corpus.dataset.vocabulary().name(a)));
  }
}

TEST_CASE("default corpus persona sizes and length profile") {
  const auto cfg = default_synthetic_config(1);
  REQUIRE(cfg.personas.size() == 13);
  CHECK(cfg.personas.front().session_count == 177);
  CHECK(cfg.personas.back().session_count == 3500);
  const auto corpus = generate_synthetic(cfg);
  std::map<int, std::size_t> tally;
  for (int p : corpus.persona) ++tally[p];
  for (std::size_t p = 0; p < cfg.personas.size(); ++p) {
    const auto want = static_cast<long>(cfg.personas[p].session_count);
    CHECK(std::labs(static_cast<long>(tally[static_cast<int>(p)]) - want) <= 1);
  }
  const auto ls = length_stats(corpus.dataset);
  CHECK(ls.mean() > 13.0);
  CHECK(ls.mean() < 17.0);
  CHECK(ls.percentile(98) > 60);
  CHECK(ls.max() > 800);
}

TEST_CASE("ground truth sidecar round-trip") {
  const auto corpus = generate_synthetic(cycle_config(3, 12, LengthModel{}, 2));
  const auto path = std::filesystem::temp_directory_path() / "misuse_gt_test.jsonl";
  write_ground_truth(corpus, path);
  CHECK(read_ground_truth(corpus.dataset, path) == corpus.persona);
  std::filesystem::remove(path);
}

TEST_CASE("fingerprint tracks content") {
  const auto a = make({{"A", "B"}, {"B"}});
  const auto b = make({{"A", "B"}, {"B"}});
  const auto c = make({{"A", "B"}, {"A"}});
  CHECK(a.fingerprint() == b.fingerprint());
  CHECK(a.fingerprint() != c.fingerprint());
  CHECK(a.fingerprint().size() == 16);
}

// ---------------------------------------------------------------------------
// Frequent action sets against brute-force subset enumeration.

namespace {

std::map<std::vector<std::string>, double> brute_force_itemsets(const SessionDataset& ds, double min_support) {
  const auto& names = ds.vocabulary().names();
  const std::size_t d = names.size();
  std::map<std::vector<std::string>, double> out;
  for (std::size_t mask = 1; mask < (std::size_t{1} << d); ++mask) {
    std::size_t count = 0;
    for (const auto& s : ds.sessions()) {
      std::set<ActionId> have(s.actions.begin(), s.actions.end());
      bool all = true;
      for (std::size_t a = 0; a < d; ++a)
        if ((mask >> a) & 1 && !have.contains(static_cast<ActionId>(a))) all = false;
      count += all;
    }
    const double support = static_cast<double>(count) / static_cast<double>(ds.size());
    if (count > 0 && support >= min_support - 1e-12) {
      std::vector<std::string> set;
      for (std::size_t a = 0; a < d; ++a)
        if ((mask >> a) & 1) set.push_back(names[a]);
      std::sort(set.begin(), set.end());
      out[set] = support;
    }
  }
  return out;
}

}  // namespace

TEST_CASE("frequent action sets: worked example") {
  const auto ds = make({{"A", "B"}, {"A", "B"}, {"A", "C"}});
  const auto got = mine_frequent_actionsets(ds, 0.6);
  REQUIRE(got.size() == 3);
  CHECK(got[0].actions == std::vector<std::string>{"A"});
  CHECK(got[0].support == doctest::Approx(1.0));
  CHECK(got[1].actions == std::vector<std::string>{"A", "B"});
  CHECK(got[1].support == doctest::Approx(2.0 / 3.0));
  CHECK(got[2].actions == std::vector<std::string>{"B"});
  CHECK(got[2].count == 2);

  const auto only_a = mine_frequent_actionsets(make({{"A", "B"}, {"A", "C"}, {"A"}}), 1.0);
  REQUIRE(only_a.size() == 1);
  CHECK(only_a[0].actions == std::vector<std::string>{"A"});
}

TEST_CASE("frequent action sets match brute force on random corpora") {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    Rng rng(seed);
    std::vector<std::vector<std::string>> sessions;
    for (int i = 0; i < 40; ++i) {
      std::vector<std::string> s;
      const auto n = rng.between(1, 6);
      for (int j = 0; j < n; ++j) s.push_back(std::string(1, static_cast<char>('A' + rng.below(7))));
      sessions.push_back(s);
    }
    const auto ds = make(sessions);
    for (double ms : {0.05, 0.2, 0.5}) {
      const auto oracle = brute_force_itemsets(ds, ms);
      const auto got = mine_frequent_actionsets(ds, ms);
      REQUIRE(got.size() == oracle.size());
      for (const auto& f : got) {
        REQUIRE(oracle.contains(f.actions));
        CHECK(f.support == doctest::Approx(oracle.at(f.actions)).epsilon(1e-12));
      }
      for (std::size_t i = 1; i < got.size(); ++i) CHECK(got[i - 1].support >= got[i].support);
    }
  }
}

#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "fixtures.hpp"
#include "misuse/error.hpp"
#include "misuse/scoring.hpp"

using namespace misuse;

namespace {

std::vector<std::string> names_of(const misuse::SyntheticConfig& cfg, const std::vector<ActionId>& walk) {
  std::vector<std::string> out;
  for (ActionId a : walk) out.push_back(cfg.action_names[static_cast<std::size_t>(a)]);
  return out;
}

std::vector<std::string> names_of(const Vocabulary& v, std::span<const ActionId> s) {
  std::vector<std::string> out;
  for (ActionId a : s) out.push_back(v.name(a));
  return out;
}

}  // namespace

TEST_CASE("uniform model identities") {
  for (std::size_t d : {2u, 5u, 17u}) {
    const LstmModel m(LstmShape{d, 4, 0.4});
    Rng rng(d);
    for (int k = 0; k < 10; ++k) {
      std::vector<ActionId> s(2 + rng.below(40));
      for (auto& a : s) a = static_cast<ActionId>(rng.below(d));
      const auto sc = score_session(m, s);
      CHECK(std::abs(sc.likelihood - 1.0 / static_cast<double>(d)) <= 1e-9);
      CHECK(std::abs(sc.loss - std::log(static_cast<double>(d))) <= 1e-9);
      CHECK(std::abs(sc.perplexity - static_cast<double>(d)) <= 1e-9);
      CHECK(sc.predictions == s.size() - 1);
    }
  }
  const LstmModel m(LstmShape{3, 2, 0.0});
  CHECK_THROWS_AS(session_likelihood(m, std::vector<ActionId>{1}), InvalidArgument);
  CHECK_THROWS_AS(session_loss(m, std::vector<ActionId>{}), InvalidArgument);
  CHECK_THROWS_AS(perplexity(m, std::vector<ActionId>{0}), InvalidArgument);
}

TEST_CASE("perfect predictor has perplexity one") {
  LstmModel m(LstmShape{3, 2, 0.0});
  m.dense_bias()[1] = 60.0;
  const std::vector<ActionId> s{0, 1, 1, 1, 1};
  CHECK(perplexity(m, s) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(session_loss(m, s) < 1e-20);
}

TEST_CASE("loss, likelihood and perplexity identities on trained models") {
  const auto& fx = fixture::small();
  const auto& model = fx.trained.clusters[0].lm.model;
  const auto& test = fx.trained.splits[0].test;
  std::vector<std::pair<double, double>> pairs;
  for (const auto& s : test.sessions()) {
    const auto p = action_probabilities(model, s.actions);
    REQUIRE(p.size() == s.length() - 1);
    double log_sum = 0.0, sum = 0.0;
    for (double x : p) {
      log_sum += std::log(x);
      sum += x;
    }
    const auto sc = score_session(model, s.actions);
    const double geo = std::exp(log_sum / static_cast<double>(p.size()));
    CHECK(std::abs(sc.loss + std::log(geo)) <= 1e-9);
    CHECK(std::abs(std::log(sc.perplexity) - sc.loss) <= 1e-9);
    CHECK(std::abs(sc.likelihood - sum / static_cast<double>(p.size())) <= 1e-12);
    pairs.emplace_back(sc.loss, sc.perplexity);
  }
  std::sort(pairs.begin(), pairs.end());
  for (std::size_t i = 1; i < pairs.size(); ++i) CHECK(pairs[i - 1].second <= pairs[i].second);

  const auto batch = score_sessions(model, test);
  REQUIRE(batch.size() == test.size());
  for (std::size_t i = 0; i < test.size(); ++i) {
    const auto one = score_session(model, test[i].actions);
    CHECK(batch[i].likelihood == doctest::Approx(one.likelihood).epsilon(1e-12));
    CHECK(batch[i].loss == doctest::Approx(one.loss).epsilon(1e-12));
  }
}

TEST_CASE("random sessions") {
  Vocabulary v({"a", "b", "c", "d", "e", "f", "g", "h"});
  const auto r = generate_random_sessions(1000, v, 3);
  CHECK(r.size() == 1000);
  std::vector<double> freq(8, 0.0);
  double total = 0.0;
  for (const auto& s : r.sessions()) {
    CHECK(s.length() >= 5);
    CHECK(s.length() <= 25);
    total += static_cast<double>(s.length());
    for (ActionId a : s.actions) freq[static_cast<std::size_t>(a)] += 1;
  }
  const double mean = total / 1000.0;
  CHECK(mean >= 13.0);
  CHECK(mean <= 17.0);
  const double p = 1.0 / 8.0, sigma = std::sqrt(total * p * (1 - p));
  for (double f : freq) CHECK(std::abs(f - total * p) <= 3.0 * sigma);
  CHECK(generate_random_sessions(1000, v, 3) == r);
  CHECK(generate_random_sessions(1000, v, 4) != r);
  CHECK_THROWS_AS(generate_random_sessions(10, v, 1, 1, 5), InvalidArgument);
}

TEST_CASE("random sessions score below held-out sessions") {
  const auto& fx = fixture::small();
  const auto d = fx.trained.vocabulary.size();
  const auto rnd = generate_random_sessions(300, fx.trained.vocabulary, 8);
  for (const auto& c : fx.trained.clusters) {
    const auto own = score_sessions(c.lm.model, fx.trained.splits[static_cast<std::size_t>(c.id)].test);
    const auto r = score_sessions(c.lm.model, rnd);
    double own_l = 0, rnd_l = 0;
    for (const auto& s : own) own_l += s.likelihood / static_cast<double>(own.size());
    for (const auto& s : r) rnd_l += s.likelihood / static_cast<double>(r.size());
    CHECK(rnd_l < own_l);
    CHECK(rnd_l <= 2.0 / static_cast<double>(d));
  }
}

TEST_CASE("monitor trace bookkeeping") {
  const auto& fx = fixture::small();
  const auto bundle = fx.trained.bundle();
  const auto& v = fx.corpus.dataset.vocabulary();
  const auto& test = fx.trained.splits[1].test;
  for (const auto& s : test.sessions()) {
    const auto actions = names_of(v, s.actions);
    const auto trace = monitor_session(bundle, actions, MonitorConfig{}, s.id);
    REQUIRE(trace.records.size() == s.length() - 1);
    double sum_p = 0, sum_l = 0;
    for (std::size_t i = 0; i < trace.records.size(); ++i) {
      const auto& r = trace.records[i];
      CHECK(r.t == i + 2);
      CHECK(r.action == actions[i + 1]);
      sum_p += r.p;
      sum_l += r.loss;
      CHECK(r.mean_likelihood == doctest::Approx(sum_p / static_cast<double>(i + 1)).epsilon(1e-12));
      CHECK(r.mean_loss == doctest::Approx(sum_l / static_cast<double>(i + 1)).epsilon(1e-12));
      CHECK(r.threshold == doctest::Approx(0.1 * bundle.validation_likelihood.at(r.voted)));
    }
    // the batch score of the session under a fixed cluster agrees once the vote is settled
    if (!trace.records.empty() && trace.records.front().voted == trace.records.back().voted) {
      const auto sc = score_session(bundle.model(trace.records.back().voted), s.actions);
      CHECK(trace.records.back().mean_likelihood == doctest::Approx(sc.likelihood).epsilon(1e-9));
    }

    // lowering the threshold never adds alarms
    std::size_t prev = count_alarms(trace, 1.0, 5);
    for (double th : {0.5, 0.3, 0.1, 0.05, 0.01, 0.0}) {
      const auto n = count_alarms(trace, th, 5);
      CHECK(n <= prev);
      prev = n;
    }
    CHECK(count_alarms(trace, 0.0, 5) == 0);
  }

  const std::vector<std::string> one{v.name(0)};
  const auto single = monitor_session(bundle, one, MonitorConfig{});
  CHECK(single.records.empty());
  CHECK(single.alarms.empty());
}

TEST_CASE("in-grammar sessions raise no alarm, drift does") {
  const auto& fx = fixture::small();
  const auto bundle = fx.trained.bundle();
  Rng rng(77);
  std::size_t clean_alarms = 0;
  for (int k = 0; k < 20; ++k) {
    const auto walk = markov_walk(fx.config.personas[0], 40, rng);
    clean_alarms += monitor_session(bundle, names_of(fx.config, walk), MonitorConfig{}).alarms.size();
  }
  CHECK(clean_alarms == 0);

  for (int k = 0; k < 10; ++k) {
    auto walk = markov_walk(fx.config.personas[0], 30, rng);
    const auto tail = markov_walk(fx.config.personas[1], 30, rng);
    walk.insert(walk.end(), tail.begin(), tail.end());
    const auto trace = monitor_session(bundle, names_of(fx.config, walk), MonitorConfig{});
    REQUIRE_FALSE(trace.alarms.empty());
    CHECK(trace.alarms.front().t > 30);
    CHECK(trace.alarms.front().t <= 45);
    CHECK(trace.alarms.front().reason == "low_likelihood");
  }
}

TEST_CASE("out-of-vocabulary actions are flagged in-band") {
  const auto& fx = fixture::small();
  const auto bundle = fx.trained.bundle();
  const auto& v = fx.corpus.dataset.vocabulary();
  const std::vector<std::string> actions{v.name(0), "XYZ", v.name(1), v.name(2)};
  SessionMonitor mon(bundle, MonitorConfig{}, "live");
  CHECK_FALSE(mon.push(actions[0]).has_value());
  const auto oov = mon.push(actions[1]);
  REQUIRE(oov.has_value());
  CHECK(oov->oov);
  CHECK(oov->t == 2);
  CHECK(std::isnan(oov->p));
  const auto next = mon.push(actions[2]);
  REQUIRE(next.has_value());
  CHECK(next->t == 3);
  CHECK(next->mean_likelihood == doctest::Approx(next->p));
  CHECK(mon.trace().alarms.front().reason == "oov");

  const auto j = nlohmann::json::parse(record_to_json(*oov, "live"));
  CHECK(j["oov"] == true);
  CHECK(j["p"].is_null());
  CHECK(j["session_id"] == "live");

  std::ostringstream os;
  write_trace_jsonl(mon.trace(), os);
  std::size_t lines = 0;
  std::istringstream is(os.str());
  for (std::string line; std::getline(is, line);) {
    CHECK(nlohmann::json::parse(line).is_object());
    ++lines;
  }
  CHECK(lines == mon.trace().records.size());
}

TEST_CASE("normality report") {
  const auto& fx = fixture::small();
  const auto bundle = fx.trained.bundle();
  const auto& test = fx.trained.splits[0].test;
  const auto rep = normality_report(bundle, test);
  REQUIRE(rep.sessions.size() == test.size());
  std::vector<double> l;
  for (const auto& s : rep.sessions) {
    CHECK(std::abs(s.score.perplexity - std::exp(s.score.loss)) <= 1e-9 * s.score.perplexity);
    l.push_back(s.score.likelihood);
  }
  const auto sum = summarize(l);
  CHECK(rep.likelihood.mean == doctest::Approx(sum.mean));
  CHECK(rep.likelihood.variance == doctest::Approx(sum.variance));
  const auto j = nlohmann::json::parse(report_to_json(rep));
  CHECK(j["version"] == 1);
  CHECK(j["sessions"].size() == test.size());

  const std::vector<double> xs{1.0, 2.0, 3.0, 4.0};
  CHECK(summarize(xs).mean == doctest::Approx(2.5));
  CHECK(summarize(xs).variance == doctest::Approx(1.25));

  ModelBundle empty;
  CHECK_THROWS_AS(empty.validate(), MissingArtifact);
}

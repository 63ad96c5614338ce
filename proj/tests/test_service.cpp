#include "doctest.h"

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "misuse/corpus.hpp"
#include "misuse/error.hpp"
#include "misuse/lda.hpp"
#include "misuse/pipeline.hpp"
#include "misuse/scoring.hpp"
#include "misuse/service.hpp"

#include <httplib.h>

using namespace misuse;
using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Reply {
  int status = 0;
  json body;
  std::string raw;
};

Reply unpack(const httplib::Result& r) {
  REQUIRE(r);
  Reply out{r->status, json(), r->body};
  out.body = json::parse(r->body, nullptr, false);
  return out;
}

Reply get(httplib::Client& c, const std::string& path) { return unpack(c.Get(path)); }
Reply post(httplib::Client& c, const std::string& path, const json& body) {
  return unpack(c.Post(path, body.dump(), "application/json"));
}

Reply wait_job(httplib::Client& c, Service& s, const std::string& id) {
  s.wait_for_jobs();
  return get(c, "/api/jobs/" + id);
}

fs::path make_workdir(SyntheticCorpus* keep = nullptr) {
  const auto dir = fs::temp_directory_path() / "misuse_service_test";
  fs::remove_all(dir);
  fs::create_directories(dir);
  auto corpus = generate_synthetic(make_persona_config(std::vector<std::size_t>{120, 120}, 5, 0.0, LengthModel{}, 17));
  corpus.dataset = filter_short(corpus.dataset).dataset;
  emit_jsonl(corpus.dataset, Workdir(dir).dataset());
  if (keep) *keep = corpus;
  return dir;
}

ServiceConfig test_config(const fs::path& dir) {
  ServiceConfig cfg;
  cfg.workdir = dir;
  cfg.port = 0;
  cfg.train.hidden = 8;
  cfg.train.lm.max_epochs = 4;
  return cfg;
}

}  // namespace

TEST_CASE("service end to end") {
  SyntheticCorpus corpus;
  const auto dir = make_workdir(&corpus);
  Service service(test_config(dir));
  const int port = service.start();
  httplib::Client c("127.0.0.1", port);
  c.set_read_timeout(120, 0);

  auto st = get(c, "/api/status");
  CHECK(st.status == 200);
  CHECK(st.body["dataset"] == true);
  CHECK(st.body["ensemble"] == false);

  // nothing fitted yet
  auto r = get(c, "/api/ensemble");
  CHECK(r.status == 409);
  CHECK(r.body["error"] == "no_ensemble");
  CHECK(get(c, "/api/chord").status == 409);
  CHECK(get(c, "/api/projection").status == 409);
  r = post(c, "/api/score", {{"actions", {"Action000", "Action001"}}});
  CHECK(r.status == 409);
  CHECK(r.body["error"] == "untrained");
  r = post(c, "/api/train", json::object());
  CHECK(r.status == 409);
  CHECK(r.body["error"] == "no_assignment");
  CHECK(post(c, "/api/monitor/open", json::object()).status == 409);

  // unknown fields are rejected with their path
  r = post(c, "/api/lda", {{"topic_counts", {2}}, {"bogus", 1}});
  CHECK(r.status == 400);
  CHECK(r.body["error"] == "unknown_field");
  CHECK(r.body["path"] == "$.bogus");
  r = post(c, "/api/clusters", {{"selections", {{{"id", 0}, {"topics", {{{"run", 0}, {"topic", 0}, {"x", 1}}}}}}}});
  CHECK(r.status == 400);
  CHECK(r.body["path"] == "$.selections[0].topics[0].x");
  CHECK(unpack(c.Post("/api/lda", "{not json", "application/json")).status == 400);

  // LDA job; a second job is refused while it runs
  r = post(c, "/api/lda", {{"topic_counts", {2}}, {"seeds_per_k", 2}, {"iterations", 4000}, {"seed", 3}});
  REQUIRE(r.status == 202);
  const std::string lda_job = r.body["job_id"];
  auto busy = post(c, "/api/lda", {{"topic_counts", {2}}, {"iterations", 10}});
  CHECK(busy.status == 409);
  CHECK(busy.body["error"] == "job_running");
  auto job = wait_job(c, service, lda_job);
  CHECK(job.body["state"] == "done");
  CHECK(job.body["kind"] == "lda");
  CHECK(job.body["progress"] == 1.0);
  CHECK(get(c, "/api/jobs/job-999").status == 404);

  // ensemble payload mirrors the saved artifact to full precision
  const auto ens = load_ensemble(Workdir(dir).ensemble());
  r = get(c, "/api/ensemble");
  REQUIRE(r.status == 200);
  REQUIRE(r.body["topics"].size() == 4);
  for (const auto& t : r.body["topics"]) {
    double top = 0.0;
    for (const auto& a : t["top_actions"]) top += a["probability"].get<double>();
    CHECK(top <= 1.0 + 1e-12);
    const auto phi = ens.phi({t["run"].get<std::size_t>(), t["topic"].get<std::size_t>()});
    REQUIRE(t["phi"].size() == phi.size());
    for (std::size_t a = 0; a < phi.size(); ++a) CHECK(t["phi"][a].get<double>() == phi[a]);
  }

  r = get(c, "/api/chord?threshold=0.05");
  REQUIRE(r.status == 200);
  const auto& m = r.body["matrix"];
  for (std::size_t i = 0; i < m.size(); ++i) {
    CHECK(m[i][i] == r.body["fan_sizes"][i]);
    for (std::size_t j = 0; j < m.size(); ++j) CHECK(m[i][j] == m[j][i]);
  }
  r = get(c, "/api/chord?threshold=1.0");
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j)
      if (i != j) CHECK(r.body["matrix"][i][j] == 0);
  CHECK(get(c, "/api/chord?threshold=0").status == 422);
  CHECK(get(c, "/api/chord?threshold=abc").status == 400);

  r = get(c, "/api/projection");
  REQUIRE(r.status == 200);
  CHECK(r.body["points"].size() == 4);

  // cluster submission
  const auto sel = [](std::vector<std::vector<int>> topics) {
    json list = json::array();
    for (std::size_t k = 0; k < topics.size(); ++k) {
      json t = json::array();
      for (int topic : topics[k]) t.push_back({{"run", topic / 10}, {"topic", topic % 10}});
      list.push_back({{"id", k}, {"name", "c" + std::to_string(k)}, {"topics", t}});
    }
    return json{{"selections", list}};
  };
  r = post(c, "/api/clusters", sel({{0}, {0, 1}}));
  CHECK(r.status == 422);
  r = post(c, "/api/clusters", sel({{0, 1}, {10}}));
  CHECK(r.status == 422);
  CHECK(r.body["error"] == "empty_cluster");
  CHECK(r.body["clusters"] == json::array({1}));
  r = post(c, "/api/clusters", sel({{0}, {1}}));
  REQUIRE(r.status == 200);
  CHECK(r.body["total"] == corpus.dataset.size());
  CHECK(r.body["clusters"][0]["size"].get<std::size_t>() + r.body["clusters"][1]["size"].get<std::size_t>() ==
        corpus.dataset.size());
  CHECK(fs::exists(Workdir(dir).assignment()));

  // training
  r = post(c, "/api/train", {{"hidden", 8}, {"epochs", 4}, {"baselines", false}, {"seed", 2}});
  REQUIRE(r.status == 202);
  job = wait_job(c, service, r.body["job_id"]);
  CHECK(job.body["state"] == "done");
  CHECK(job.body["progress"] == 1.0);
  CHECK(get(c, "/api/status").body["trained"] == true);

  // scoring: a real session beats random ones
  const auto& v = corpus.dataset.vocabulary();
  json real = json::array();
  for (ActionId a : corpus.dataset[0].actions) real.push_back(v.name(a));
  if (real.size() < 2) real.push_back(real[0]);
  real.push_back("XYZ");
  r = post(c, "/api/score", {{"actions", real}, {"session_id", "probe"}});
  REQUIRE(r.status == 200);
  CHECK(r.body["oov"] == json::array({"XYZ"}));
  const double real_l = r.body["sessions"][0]["likelihood"];
  const auto rnd = generate_random_sessions(100, v, 5);
  double rnd_mean = 0.0;
  for (const auto& s : rnd.sessions()) {
    json names = json::array();
    for (ActionId a : s.actions) names.push_back(v.name(a));
    rnd_mean += post(c, "/api/score", {{"actions", names}}).body["likelihood"]["mean"].get<double>() / 100.0;
  }
  CHECK(real_l > rnd_mean);
  CHECK(post(c, "/api/score", {{"actions", {"Action000", "XYZ"}}}).status == 422);
  CHECK(post(c, "/api/score", {{"actions", "Action000"}}).status == 400);

  // monitor channel
  r = post(c, "/api/monitor/open", {{"session_id", "live-1"}});
  REQUIRE(r.status == 200);
  CHECK(r.body["framing"] == "ndjson");
  const std::string ch = r.body["channel"];
  const auto lines = unpack(c.Post("/api/monitor/" + ch, "\"Action000\"\n{\"action\":\"Action001\"}\n\"Action002\"\n",
                                   "application/x-ndjson"));
  REQUIRE(lines.status == 200);
  std::vector<json> recs;
  std::istringstream in(lines.raw);
  for (std::string line; std::getline(in, line);) recs.push_back(json::parse(line));
  REQUIRE(recs.size() == 2);
  CHECK(recs[0]["t"] == 2);
  CHECK(recs[1]["t"] == 3);
  CHECK(recs[0]["session_id"] == "live-1");
  const auto more = unpack(c.Post("/api/monitor/" + ch, "\"XYZ\"\n", "application/x-ndjson"));
  const auto oov = json::parse(more.raw);
  CHECK(oov["t"] == 4);
  CHECK(oov["oov"] == true);
  CHECK(unpack(c.Post("/api/monitor/" + ch, "42\n", "application/x-ndjson")).status == 400);
  r = unpack(c.Delete("/api/monitor/" + ch));
  CHECK(r.status == 200);
  CHECK(r.body["records"] == 3);
  CHECK(unpack(c.Post("/api/monitor/" + ch, "\"Action000\"\n", "application/x-ndjson")).status == 404);

  // evaluation job writes the figure tables
  r = post(c, "/api/eval", {{"seed", 4}});
  REQUIRE(r.status == 202);
  job = wait_job(c, service, r.body["job_id"]);
  CHECK(job.body["state"] == "done");
  CHECK(job.body["kind"] == "eval");
  CHECK(fs::exists(Workdir(dir).eval() / "cluster_vs_global.csv"));

  service.stop();

  // a restarted service picks the artifacts back up
  Service again(test_config(dir));
  httplib::Client c2("127.0.0.1", again.start());
  st = get(c2, "/api/status");
  CHECK(st.body["ensemble"] == true);
  CHECK(st.body["assignment"] == true);
  CHECK(st.body["trained"] == true);
  CHECK(post(c2, "/api/score", {{"actions", real}}).status == 200);
  again.stop();
  fs::remove_all(dir);
}

TEST_CASE("failed jobs report their error") {
  const auto dir = make_workdir();
  Service service(test_config(dir));
  httplib::Client c("127.0.0.1", service.start());
  auto r = post(c, "/api/lda", {{"topic_counts", {0}}});
  REQUIRE(r.status == 202);
  const auto job = wait_job(c, service, r.body["job_id"]);
  CHECK(job.body["state"] == "failed");
  CHECK_FALSE(job.body["message"].get<std::string>().empty());
  service.stop();
  fs::remove_all(dir);
}

TEST_CASE("config file and environment layering") {
  const auto path = fs::temp_directory_path() / "misuse_config_test.json";
  {
    std::ofstream out(path);
    out << R"({"workdir":"from-file","port":9001,"train":{"hidden":32,"epochs":7},"lda":{"topic_counts":[3,4]},)"
        << R"("monitor":{"alarm_patience":3}})";
  }
  ServiceConfig cfg;
  apply_config_file(cfg, path);
  CHECK(cfg.workdir == "from-file");
  CHECK(cfg.port == 9001);
  CHECK(cfg.train.hidden == 32);
  CHECK(cfg.train.lm.max_epochs == 7);
  CHECK(cfg.lda.topic_counts == std::vector<std::size_t>{3, 4});
  CHECK(cfg.monitor.alarm_patience == 3);
  CHECK(cfg.host == "127.0.0.1");

  setenv("MISUSE_WORKDIR", "from-env", 1);
  setenv("MISUSE_HIDDEN", "48", 1);
  apply_environment(cfg);
  unsetenv("MISUSE_WORKDIR");
  unsetenv("MISUSE_HIDDEN");
  CHECK(cfg.workdir == "from-env");
  CHECK(cfg.train.hidden == 48);
  CHECK(cfg.port == 9001);

  {
    std::ofstream out(path);
    out << R"({"prot":1})";
  }
  CHECK_THROWS_AS(apply_config_file(cfg, path), FormatError);
  fs::remove(path);

  CHECK(to_string(JobKind::kTrain) == "train");
  CHECK(to_string(JobState::kRunning) == "running");
}

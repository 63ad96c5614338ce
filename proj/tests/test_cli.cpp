#include "doctest.h"

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "misuse/corpus.hpp"
#include "misuse/pipeline.hpp"

using namespace misuse;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string out, err;
};

// Runs the CLI through the shell with stdout and stderr captured.
Run cli(const std::string& args, const std::string& env = "") {
  const auto dir = fs::temp_directory_path();
  const auto out = dir / "misuse_cli_out.txt", err = dir / "misuse_cli_err.txt";
  const std::string cmd = env + " '" MISUSE_CLI "' " + args + " >'" + out.string() + "' 2>'" + err.string() + "'";
  const int status = std::system(cmd.c_str());
  Run r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = read_file(out);
  r.err = read_file(err);
  return r;
}

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("misuse_cli_" + name);
  fs::remove_all(p);
  return p;
}

std::map<std::string, std::string> key_values(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream in(text);
  for (std::string k, v; in >> k >> v;) kv[k] = v;
  return kv;
}

}  // namespace

TEST_CASE("usage errors exit with 1") {
  CHECK(cli("--no-such-flag synth").code == 1);
  CHECK(cli("").code == 1);
  CHECK(cli("synth --preset nope").code == 1);
  CHECK(cli("--help").code == 0);
}

TEST_CASE("runtime errors exit with 2") {
  const auto w = scratch("untrained");
  const auto sessions = fs::temp_directory_path() / "misuse_cli_sessions.jsonl";
  {
    std::ofstream out(sessions);
    out << R"({"session_id":"s","actions":["A","B"]})" << "\n";
  }
  auto r = cli("-w " + w.string() + " score --session-file " + sessions.string());
  CHECK(r.code == 2);
  CHECK(r.err.find("error: no trained models") != std::string::npos);
  r = cli("-w " + w.string() + " stats");
  CHECK(r.code == 2);
  CHECK(r.err.find("no dataset") != std::string::npos);
  fs::remove_all(w);
  fs::remove(sessions);
}

TEST_CASE("stats agree with the library") {
  const auto w = scratch("stats");
  REQUIRE(cli("-w " + w.string() + " synth --preset cycle --sessions 80 --seed 4").code == 0);
  const auto r = cli("-w " + w.string() + " stats -p 50 -p 98 --min-support 0.9");
  REQUIRE(r.code == 0);
  const auto ls = length_stats(ingest(Workdir(w).dataset(), LogFormat::kJsonl));
  const auto kv = key_values(r.out.substr(0, r.out.find("itemsets")));
  CHECK(kv.at("sessions") == "80");
  CHECK(kv.at("actions") == "3");
  CHECK(kv.at("max") == std::to_string(ls.max()));
  CHECK(kv.at("p50") == std::to_string(ls.percentile(50)));
  CHECK(kv.at("p98") == std::to_string(ls.percentile(98)));
  CHECK(r.out.find("itemsets corpus (80 sessions)") != std::string::npos);
  fs::remove_all(w);
}

TEST_CASE("flags beat environment beats config file") {
  const auto file_dir = scratch("from_file"), env_dir = scratch("from_env"), flag_dir = scratch("from_flag");
  const auto config = fs::temp_directory_path() / "misuse_cli_config.json";
  {
    std::ofstream out(config);
    out << "{\"workdir\": \"" << file_dir.string() << "\"}\n";
  }
  const std::string synth = " synth --preset cycle --sessions 10";
  REQUIRE(cli("-c " + config.string() + synth).code == 0);
  CHECK(fs::exists(Workdir(file_dir).dataset()));

  REQUIRE(cli("-c " + config.string() + synth, "MISUSE_WORKDIR=" + env_dir.string()).code == 0);
  CHECK(fs::exists(Workdir(env_dir).dataset()));

  REQUIRE(cli("-c " + config.string() + " -w " + flag_dir.string() + synth, "MISUSE_WORKDIR=" + env_dir.string())
              .code == 0);
  CHECK(fs::exists(Workdir(flag_dir).dataset()));

  {
    std::ofstream out(config);
    out << "{\"wrokdir\": \"x\"}\n";
  }
  const auto bad = cli("-c " + config.string() + synth);
  CHECK(bad.code == 2);
  CHECK(bad.err.find("unknown key $.wrokdir") != std::string::npos);

  for (const auto& d : {file_dir, env_dir, flag_dir}) fs::remove_all(d);
  fs::remove(config);
}

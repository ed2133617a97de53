#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#ifndef DSPK_CLI_PATH
#error "DSPK_CLI_PATH must point at the dspk binary"
#endif

namespace fs = std::filesystem;

namespace {

int run(const std::string& args) {
  std::string cmd = std::string(DSPK_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  int rc = std::system(cmd.c_str());
  return WEXITSTATUS(rc);
}

fs::path scratch() {
  fs::path dir = fs::temp_directory_path() / "dspk_cli_test";
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

void write_config(const fs::path& path, const nlohmann::json& extra) {
  nlohmann::json j = {
      {"seed", 3},
      {"model", "scf"},
      {"recognition", "ds-f"},
      {"simulate", {{"n_train", 2}, {"n_val", 0}, {"n_test", 1}, {"length", 900}}},
      {"architecture",
       {{"hidden_layers", 1}, {"filters", 4}, {"kernel", 5}, {"out_bias", -4.0}}},
      {"trainer",
       {{"samples", 4},
        {"batch_chunks", 1},
        {"chunk_len", 64},
        {"chunk_stride", 64},
        {"max_steps", 20},
        {"eval_interval", 10}}},
      {"eval", {{"n_samples", 3}}},
  };
  for (auto it = extra.begin(); it != extra.end(); ++it) j[it.key()] = it.value();
  std::ofstream(path) << j.dump(2);
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("simulate is byte-deterministic per seed") {
  fs::path dir = scratch();
  write_config(dir / "cfg.json", {});
  REQUIRE(run("simulate --config " + (dir / "cfg.json").string() + " --out " +
              (dir / "a").string()) == 0);
  REQUIRE(run("simulate --config " + (dir / "cfg.json").string() + " --out " +
              (dir / "b").string()) == 0);
  for (auto& entry : fs::recursive_directory_iterator(dir / "a")) {
    if (!entry.is_regular_file()) continue;
    fs::path rel = fs::relative(entry.path(), dir / "a");
    CHECK(slurp(entry.path()) == slurp(dir / "b" / rel));
  }
  fs::remove_all(dir);
}

TEST_CASE("unknown config keys fail fast with exit code 2") {
  fs::path dir = scratch();
  write_config(dir / "cfg.json", {{"not_a_key", 1}});
  CHECK(run("simulate --config " + (dir / "cfg.json").string() + " --out " +
            (dir / "out").string()) == 2);

  write_config(dir / "cfg2.json", {});
  CHECK(run("simulate --config " + (dir / "cfg2.json").string() + " --out " +
            (dir / "out2").string() + " --set trainer.typo_key=5") == 2);
  fs::remove_all(dir);
}

TEST_CASE("missing data files exit with code 3") {
  fs::path dir = scratch();
  write_config(dir / "cfg.json",
               {{"data", {{"train_manifest", (dir / "nope.json").string()}}}});
  CHECK(run("train --config " + (dir / "cfg.json").string() + " --out " +
            (dir / "out").string()) == 3);
  fs::remove_all(dir);
}

TEST_CASE("full pipeline: simulate, train, infer on untrained and trained snapshots, eval") {
  fs::path dir = scratch();
  fs::path sim = dir / "sim";
  write_config(dir / "cfg.json",
               {{"data",
                 {{"train_manifest", (sim / "train" / "manifest.json").string()},
                  {"test_manifest", (sim / "test" / "manifest.json").string()}}}});
  std::string cfg = (dir / "cfg.json").string();

  REQUIRE(run("simulate --config " + cfg + " --out " + sim.string()) == 0);

  // inference works without any snapshot (fresh weights) and emits valid probabilities
  REQUIRE(run("infer --config " + cfg + " --out " + (dir / "infer0").string()) == 0);
  {
    bool found = false;
    for (auto& entry : fs::directory_iterator(dir / "infer0" / "rates")) {
      found = true;
      std::ifstream in(entry.path());
      std::string line;
      std::getline(in, line);
      CHECK(line == "bin,rate");
      while (std::getline(in, line)) {
        double rate = std::stod(line.substr(line.find(',') + 1));
        CHECK(rate >= 0.0);
        CHECK(rate <= 1.0);
      }
    }
    CHECK(found);
  }

  REQUIRE(run("train --config " + cfg + " --out " + (dir / "run").string()) == 0);
  CHECK(fs::exists(dir / "run" / "snapshot.bin"));
  CHECK(fs::exists(dir / "run" / "training_log.csv"));
  CHECK(fs::exists(dir / "run" / "config.json"));

  REQUIRE(run("eval --config " + cfg + " --out " + (dir / "eval").string() + " --snapshot " +
              (dir / "run" / "snapshot.bin").string()) == 0);
  auto report = nlohmann::json::parse(slurp(dir / "eval" / "report.json"));
  CHECK(report.at("n_correlated_cells").get<int>() == 1);
  CHECK(fs::exists(dir / "eval" / "rates_overlay.csv"));
  CHECK(fs::exists(dir / "eval" / "histogram.csv"));
  CHECK(fs::exists(dir / "eval" / "scatter.csv"));
  fs::remove_all(dir);
}

TEST_CASE("eval without ground truth reports timings only") {
  fs::path dir = scratch();
  fs::path sim = dir / "sim";
  write_config(dir / "cfg.json", {});
  REQUIRE(run("simulate --config " + (dir / "cfg.json").string() + " --out " + sim.string()) ==
          0);
  // strip the spike annotations from the test manifest
  auto manifest = nlohmann::json::parse(slurp(sim / "test" / "manifest.json"));
  for (auto& cell : manifest.at("cells")) cell.erase("spikes");
  std::ofstream(sim / "test" / "manifest.json") << manifest.dump(2);

  write_config(dir / "cfg2.json",
               {{"data", {{"test_manifest", (sim / "test" / "manifest.json").string()}}}});
  REQUIRE(run("eval --config " + (dir / "cfg2.json").string() + " --out " +
              (dir / "eval").string()) == 0);
  auto report = nlohmann::json::parse(slurp(dir / "eval" / "report.json"));
  CHECK(report.at("n_correlated_cells").get<int>() == 0);
  CHECK(report.at("mean_correlation").is_null());
  CHECK(report.at("seconds_per_trace").get<double>() > 0.0);
  CHECK(report.contains("note"));
  fs::remove_all(dir);
}

TEST_CASE("train --resume continues the step counter") {
  fs::path dir = scratch();
  fs::path sim = dir / "sim";
  write_config(dir / "cfg.json",
               {{"data", {{"train_manifest", (sim / "train" / "manifest.json").string()}}}});
  std::string cfg = (dir / "cfg.json").string();
  REQUIRE(run("simulate --config " + cfg + " --out " + sim.string()) == 0);
  REQUIRE(run("train --config " + cfg + " --out " + (dir / "run").string()) == 0);
  auto st1 = nlohmann::json::parse(slurp(dir / "run" / "state.json"));
  REQUIRE(st1.at("steps_run").get<int>() == 20);

  REQUIRE(run("train --config " + cfg + " --out " + (dir / "run").string() +
              " --resume --set trainer.max_steps=35") == 0);
  auto st2 = nlohmann::json::parse(slurp(dir / "run" / "state.json"));
  CHECK(st2.at("steps_run").get<int>() == 35);

  // the log is contiguous across the resume
  std::ifstream log(dir / "run" / "training_log.csv");
  std::string line;
  std::getline(log, line);
  int expected = 1;
  while (std::getline(log, line)) {
    CHECK(std::stoi(line.substr(0, line.find(','))) == expected);
    ++expected;
  }
  CHECK(expected == 36);
  fs::remove_all(dir);
}

TEST_CASE("bench command writes a result") {
  fs::path dir = scratch();
  write_config(dir / "cfg.json", {{"bench", {{"trace_length", 1500}, {"repeats", 5}}}});
  REQUIRE(run("bench --config " + (dir / "cfg.json").string() + " --out " +
              (dir / "out").string()) == 0);
  auto j = nlohmann::json::parse(slurp(dir / "out" / "bench.json"));
  CHECK(j.at("seconds_per_trace").get<double>() > 0.0);
  CHECK(j.at("family").get<std::string>() == "ds-f");
  fs::remove_all(dir);
}

// dspk: simulate | preprocess | train | infer | eval | bench
//
// Every command takes --config and --out; all outputs land in the run
// directory. Exit codes: 0 ok, 2 config error, 3 data error, 4 numerical
// failure.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "dspk/config.hpp"
#include "dspk/dendritic.hpp"
#include "dspk/evaluation.hpp"
#include "dspk/serialize.hpp"
#include "dspk/simulate.hpp"
#include "dspk/trainer.hpp"

namespace fs = std::filesystem;
using namespace dspk;

namespace {

struct CommonArgs {
  std::string config_path;
  std::string out_dir;
  std::vector<std::string> overrides;
  std::size_t threads = 0;
};

RunConfig load_run_config(const CommonArgs& args) {
  nlohmann::json j = load_json_file(args.config_path);
  for (const std::string& o : args.overrides) apply_override(j, o);
  RunConfig cfg = parse_config(j);
  cfg.raw = j;
  if (args.threads) cfg.threads = args.threads;
  return cfg;
}

void prepare_run_dir(const RunConfig& cfg, const std::string& out) {
  fs::create_directories(out);
  std::ofstream(fs::path(out) / "config.json") << cfg.raw.dump(2) << '\n';
  nlohmann::json seeds;
  seeds["root_seed"] = cfg.seed;
  std::ofstream(fs::path(out) / "seeds.json") << seeds.dump(2) << '\n';
}

std::string rate_tag(double hz) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "r%.2f", hz);
  return buf;
}

void write_split(const CellDataset& ds, const SimProtocol& proto, const fs::path& dir) {
  fs::create_directories(dir);
  std::vector<std::string> ids;
  std::vector<std::vector<std::string>> traces, spikes;
  for (const CellRecord& cell : ds.cells) {
    ids.push_back(cell.id);
    std::vector<std::string> tp, sp;
    for (std::size_t r = 0; r < cell.traces.size(); ++r) {
      std::string name = cell.id + "_" + rate_tag(proto.rates_hz[r]) + ".csv";
      write_trace_csv((dir / name).string(), cell.traces[r].values, &cell.spikes[r]->bits);
      tp.push_back(name);
      sp.push_back(name);  // spike column rides in the same file
    }
    traces.push_back(tp);
    spikes.push_back(sp);
  }
  write_manifest((dir / "manifest.json").string(), ds.dt, ids, traces, spikes);
}

int cmd_simulate(const CommonArgs& args) {
  RunConfig cfg = load_run_config(args);
  prepare_run_dir(cfg, args.out_dir);
  fs::path out(args.out_dir);
  fs::create_directories(out / "params");

  if (cfg.model == ModelKind::Dendritic) {
    auto ds = simulate_dendritic_dataset(cfg.den_sim, Rng(cfg.seed));
    fs::path dir = out / "dendritic";
    fs::create_directories(dir);
    std::vector<std::vector<std::string>> paths(ds.cells.size());
    for (std::size_t c = 0; c < ds.cells.size(); ++c) {
      for (std::size_t ch = 0; ch < ds.cells[c].traces.size(); ++ch) {
        std::string name = ds.cells[c].id + "_ch" + std::to_string(ch) + ".csv";
        write_trace_csv((dir / name).string(), ds.cells[c].traces[ch].values,
                        &ds.cells[c].events[ch].bits);
        paths[c].push_back(name);
      }
      std::ofstream(out / "params" / (ds.cells[c].id + ".json"))
          << params_to_json(ds.cells[c].truth).dump(2) << '\n';
      std::cout << ds.cells[c].id << ": " << params_to_json(ds.cells[c].truth).dump() << '\n';
    }
    write_dendritic_manifest((dir / "manifest.json").string(), ds, paths);
    std::cout << "wrote " << ds.cells.size() << " dendritic cells to " << dir << '\n';
    return 0;
  }

  GenParams base = resolve_base_params(cfg);
  auto splits = simulate_protocol(cfg.sim, base);
  struct SplitRef {
    const char* name;
    const CellDataset* ds;
  };
  for (SplitRef s : {SplitRef{"train", &splits.train}, SplitRef{"val", &splits.val},
                     SplitRef{"test", &splits.test}}) {
    if (s.ds->cells.empty()) continue;
    write_split(*s.ds, cfg.sim, out / s.name);
    std::cout << s.name << ": " << s.ds->cells.size() << " cells x "
              << cfg.sim.rates_hz.size() << " traces, T=" << cfg.sim.length << '\n';
  }
  for (const auto& [id, params] : splits.cell_params) {
    std::ofstream(out / "params" / (id + ".json")) << params_to_json(params).dump(2) << '\n';
    std::cout << id << ": " << params_to_json(params).dump() << '\n';
  }
  return 0;
}

int cmd_preprocess(const CommonArgs& args) {
  RunConfig cfg = load_run_config(args);
  prepare_run_dir(cfg, args.out_dir);
  fs::path out(args.out_dir);
  struct SplitRef {
    const char* name;
    const std::string* manifest;
  };
  bool any = false;
  for (SplitRef s : {SplitRef{"train", &cfg.data.train_manifest},
                     SplitRef{"val", &cfg.data.val_manifest},
                     SplitRef{"test", &cfg.data.test_manifest}}) {
    if (s.manifest->empty()) continue;
    any = true;
    CellDataset ds = load_dataset(*s.manifest, s.name);
    fs::path dir = out / s.name;
    fs::create_directories(dir);
    std::vector<std::string> ids;
    std::vector<std::vector<std::string>> traces, spikes;
    for (CellRecord& cell : ds.cells) {
      ids.push_back(cell.id);
      std::vector<std::string> tp;
      for (std::size_t ti = 0; ti < cell.traces.size(); ++ti) {
        auto baseline = rolling_percentile_baseline(cell.traces[ti].values,
                                                    cfg.preprocess.window,
                                                    cfg.preprocess.percentile);
        FluorescenceTrace scaled = dff(cell.traces[ti], baseline);
        std::string name = cell.id + "_t" + std::to_string(ti) + ".csv";
        const std::vector<std::uint8_t>* bits =
            cell.spikes[ti] ? &cell.spikes[ti]->bits : nullptr;
        write_trace_csv((dir / name).string(), scaled.values, bits);
        tp.push_back(name);
      }
      traces.push_back(tp);
      spikes.push_back(tp);  // spike columns carried through when present
    }
    write_manifest((dir / "manifest.json").string(), ds.dt, ids, traces, spikes);
    std::cout << "preprocessed " << ds.cells.size() << " cells into " << dir << '\n';
  }
  if (!any) throw config_error("preprocess: no manifests listed under data{}");
  return 0;
}

void save_recognition(Recognition& recog, const std::string& path) {
  std::vector<const Parameter*> params;
  for (Parameter* p : recog.parameters()) params.push_back(p);
  save_parameters(path, params);
}

int cmd_train(const CommonArgs& args, bool resume) {
  RunConfig cfg = load_run_config(args);
  prepare_run_dir(cfg, args.out_dir);
  fs::path out(args.out_dir);

  if (cfg.model == ModelKind::Dendritic) {
    if (cfg.data.train_manifest.empty())
      throw config_error("train: data.train_manifest is required");
    DendriticDataset ds = load_dendritic_dataset(cfg.data.train_manifest);
    DemixConfig dc;
    dc.trainer = cfg.trainer;
    dc.net = cfg.cnn;
    dc.shared_weights = cfg.shared_spine_weights;
    auto result = demix(ds, dc);
    write_train_log((out / "training_log.csv").string(), result.log);
    fs::create_directories(out / "rates");
    nlohmann::json j;
    j["soma_mean_correlation"] = result.soma_mean;
    j["spine_mean_correlation"] = result.spine_mean;
    j["cells"] = nlohmann::json::array();
    for (const auto& cell : result.cells) {
      nlohmann::json jc;
      jc["id"] = cell.id;
      jc["soma_correlation"] = cell.soma_correlation;
      jc["spine_correlation"] = cell.spine_correlation;
      j["cells"].push_back(jc);
      for (std::size_t ch = 0; ch < cell.rates.size(); ++ch) {
        std::ofstream rates(out / "rates" / (cell.id + "_ch" + std::to_string(ch) + ".csv"));
        rates << "bin,rate\n";
        for (std::size_t t = 0; t < cell.rates[ch].size(); ++t)
          rates << t << ',' << cell.rates[ch][t] << '\n';
      }
    }
    std::ofstream(out / "report.json") << j.dump(2) << '\n';
    std::cout << "demix: soma=" << result.soma_mean << " spine=" << result.spine_mean << '\n';
    return 0;
  }

  if (cfg.data.train_manifest.empty())
    throw config_error("train: data.train_manifest is required");
  CellDataset train_ds = load_dataset(cfg.data.train_manifest, "train");
  std::optional<CellDataset> val_ds;
  if (!cfg.data.val_manifest.empty()) val_ds = load_dataset(cfg.data.val_manifest, "val");

  Recognition recog = build_recognition(cfg, Rng(cfg.seed).child(42));
  PerCellStore store;
  TrainerConfig tcfg = cfg.trainer;
  AdamState adam_phi;
  double prev_best = std::numeric_limits<double>::quiet_NaN();
  std::vector<TrainLogRow> history;

  if (resume) {
    fs::path last = out / "last.bin";
    if (!fs::exists(last)) throw data_error("resume: no previous run in " + args.out_dir);
    load_into(last.string(), recog.parameters());
    adam_phi = load_adam_state((out / "optimizer.bin").string());
    nlohmann::json st = load_json_file((out / "state.json").string());
    tcfg.step_offset = st.at("steps_run").get<std::size_t>();
    if (st.contains("best_val") && !st.at("best_val").is_null())
      prev_best = st.at("best_val").get<double>();
    for (const CellRecord& cell : train_ds.cells) {
      fs::path tbin = out / "params" / (cell.id + ".theta.bin");
      if (!fs::exists(tbin)) continue;
      GenParams g = params_from_json(load_json_file((out / "params" / (cell.id + ".json")).string()));
      std::vector<Parameter*> ptrs;
      for (Parameter& p : g.values) ptrs.push_back(&p);
      load_into(tbin.string(), ptrs);  // exact free-space values
      store.params.emplace(cell.id, std::move(g));
      store.adam.emplace(cell.id,
                         load_adam_state((out / "params" / (cell.id + ".adam.bin")).string()));
    }
    // previous log rows are kept so the CSV stays contiguous
    std::ifstream prev_log(out / "training_log.csv");
    std::string line;
    std::getline(prev_log, line);
    while (std::getline(prev_log, line)) {
      TrainLogRow row;
      if (std::sscanf(line.c_str(), "%zu,", &row.step) == 1) {
        auto first = line.find(',');
        auto second = line.find(',', first + 1);
        row.cell = line.substr(first + 1, second - first - 1);
        std::sscanf(line.c_str() + second + 1, "%lf,%lf", &row.bound, &row.grad_norm_phi);
        auto last_comma = line.rfind(',');
        std::string tail = line.substr(last_comma + 1);
        row.val_correlation =
            tail.empty() ? std::numeric_limits<double>::quiet_NaN() : std::stod(tail);
        history.push_back(row);
      }
    }
  }

  auto result = train(train_ds, val_ds ? &*val_ds : nullptr, recog, store, cfg.model,
                      cfg.ar_order, tcfg, &adam_phi);

  history.insert(history.end(), result.log.begin(), result.log.end());
  write_train_log((out / "training_log.csv").string(), history);

  // best weights for inference; last weights + optimizer state for resume
  bool new_best = std::isnan(prev_best) ||
                  (!std::isnan(result.best_val) && result.best_val >= prev_best);
  if (new_best) save_recognition(recog, (out / "snapshot.bin").string());
  {
    auto params = recog.parameters();
    std::vector<Tensor> best;
    for (Parameter* p : params) best.push_back(p->value);
    for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = result.final_phi[i];
    save_recognition(recog, (out / "last.bin").string());
    for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = best[i];
  }
  save_adam_state((out / "optimizer.bin").string(), adam_phi);

  fs::create_directories(out / "params");
  for (auto& [id, params] : store.params) {
    std::ofstream(out / "params" / (id + ".json")) << params_to_json(params).dump(2) << '\n';
    std::vector<const Parameter*> ptrs;
    for (const Parameter& p : params.values) ptrs.push_back(&p);
    save_parameters((out / "params" / (id + ".theta.bin")).string(), ptrs);
    save_adam_state((out / "params" / (id + ".adam.bin")).string(), store.adam.at(id));
  }

  nlohmann::json st;
  st["steps_run"] = result.steps_run;
  st["best_step"] = result.best_step;
  st["best_val"] =
      std::isnan(result.best_val) ? nlohmann::json() : nlohmann::json(result.best_val);
  st["skipped_steps"] = result.skipped_steps;
  std::ofstream(out / "state.json") << st.dump(2) << '\n';

  std::cout << "trained " << result.steps_run << " steps; best validation correlation "
            << result.best_val << " at step " << result.best_step << '\n';
  return 0;
}

Recognition recognition_from_snapshot(const RunConfig& cfg, const std::string& snapshot) {
  Recognition recog = build_recognition(cfg, Rng(cfg.seed).child(42));
  if (!snapshot.empty()) load_into(snapshot, recog.parameters());
  return recog;
}

int cmd_infer(const CommonArgs& args, const std::string& snapshot) {
  RunConfig cfg = load_run_config(args);
  if (cfg.model == ModelKind::Dendritic)
    throw config_error("infer: the dendritic pipeline is non-amortized; use `dspk train`");
  prepare_run_dir(cfg, args.out_dir);
  fs::path out(args.out_dir);
  if (cfg.data.test_manifest.empty())
    throw config_error("infer: data.test_manifest is required");
  CellDataset ds = load_dataset(cfg.data.test_manifest, "test");
  Recognition recog = recognition_from_snapshot(cfg, snapshot);

  fs::create_directories(out / "rates");
  Rng rng = Rng(cfg.seed).child(1009);
  double seconds = 0.0;
  std::size_t n = 0;
  for (std::size_t ci = 0; ci < ds.cells.size(); ++ci) {
    for (std::size_t ti = 0; ti < ds.cells[ci].traces.size(); ++ti) {
      std::vector<const FluorescenceTrace*> one = {&ds.cells[ci].traces[ti]};
      auto inf = infer(recog, one, cfg.eval.n_samples, rng.child(ci, ti), false);
      seconds += inf.seconds_per_trace;
      ++n;
      std::ofstream rates(out / "rates" /
                          (ds.cells[ci].id + "_t" + std::to_string(ti) + ".csv"));
      rates << "bin,rate\n";
      for (std::size_t t = 0; t < inf.rates[0].size(); ++t)
        rates << t << ',' << inf.rates[0][t] << '\n';
    }
  }
  nlohmann::json j;
  j["n_traces"] = n;
  j["seconds_per_trace"] = n ? seconds / double(n) : 0.0;
  j["n_samples"] = cfg.eval.n_samples;
  std::ofstream(out / "infer.json") << j.dump(2) << '\n';
  std::cout << "inferred " << n << " traces, " << (n ? seconds / double(n) : 0.0)
            << " s/trace\n";
  return 0;
}

int cmd_eval(const CommonArgs& args, const std::string& snapshot) {
  RunConfig cfg = load_run_config(args);
  if (cfg.model == ModelKind::Dendritic)
    throw config_error("eval: dendritic evaluation is reported by `dspk train`");
  prepare_run_dir(cfg, args.out_dir);
  fs::path out(args.out_dir);
  if (cfg.data.test_manifest.empty())
    throw config_error("eval: data.test_manifest is required");
  CellDataset ds = load_dataset(cfg.data.test_manifest, "test");
  Recognition recog = recognition_from_snapshot(cfg, snapshot);

  std::size_t bin_factor = cfg.eval.bin_factor;
  if (cfg.eval.target_bin_seconds)
    bin_factor = rebin_factor_for(ds.dt, *cfg.eval.target_bin_seconds);
  auto report = evaluate(recog, ds, cfg.eval.n_samples, bin_factor, cfg.eval.hist_window,
                         Rng(cfg.seed).child(2027), cfg.threads);
  bool any_truth = false;
  for (const auto& c : report.cells) any_truth |= c.has_truth;
  if (!any_truth) report.note = "no ground truth in manifest; correlations unavailable";

  std::ofstream(out / "report.json") << report_to_json(report).dump(2) << '\n';
  if (!ds.cells.empty() && !ds.cells[0].traces.empty()) {
    std::vector<const FluorescenceTrace*> one = {&ds.cells[0].traces[0]};
    auto inf = infer(recog, one, cfg.eval.n_samples, Rng(cfg.seed).child(2027, 0, 0), false);
    const SpikeTrain* truth =
        ds.cells[0].spikes[0] ? &*ds.cells[0].spikes[0] : nullptr;
    write_rates_overlay_csv((out / "rates_overlay.csv").string(), ds.cells[0].traces[0], truth,
                            inf.rates[0]);
  }
  write_histogram_csv((out / "histogram.csv").string(), report.histogram);
  write_scatter_csv((out / "scatter.csv").string(), report);
  if (report.n_correlated)
    std::cout << "mean correlation " << report.mean_correlation << " +- "
              << report.se_correlation << " over " << report.n_correlated << " cells\n";
  else
    std::cout << "correlations unavailable (no ground truth); timings only\n";
  std::cout << "seconds per trace: " << report.seconds_per_trace << '\n';
  return 0;
}

int cmd_bench(const CommonArgs& args, const std::string& snapshot) {
  RunConfig cfg = load_run_config(args);
  if (cfg.model == ModelKind::Dendritic)
    throw config_error("bench: benchmark covers the somatic recognition models");
  prepare_run_dir(cfg, args.out_dir);
  Recognition recog = recognition_from_snapshot(cfg, snapshot);
  std::size_t n_samples =
      recog.kind() == RecogKind::Factorized ? 1 : cfg.bench.n_samples;
  auto result = bench(recog, cfg.bench.trace_length, cfg.bench.repeats, n_samples,
                      Rng(cfg.seed).child(3001));
  nlohmann::json j;
  j["trace_length"] = result.trace_length;
  j["seconds_per_trace"] = result.seconds_per_trace;
  j["traces_per_second"] = result.traces_per_second;
  j["family"] = result.family;
  j["samples"] = result.samples;
  j["machine"] = result.machine;
  std::ofstream(fs::path(args.out_dir) / "bench.json") << j.dump(2) << '\n';
  std::cout << result.family << ": " << result.seconds_per_trace << " s/trace on "
            << result.trace_length << " bins (" << result.machine << ")\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"amortized variational spike inference"};
  app.require_subcommand(1);

  CommonArgs args;
  std::string snapshot;
  bool resume = false;

  auto add_common = [&](CLI::App* cmd, bool needs_out = true) {
    cmd->add_option("--config", args.config_path, "run configuration (JSON)")->required();
    auto* out = cmd->add_option("--out", args.out_dir, "run directory");
    if (needs_out) out->required();
    cmd->add_option("--set", args.overrides, "override config keys: a.b.c=value");
    cmd->add_option("--threads", args.threads, "parallelism degree (default 1)");
  };

  CLI::App* simulate = app.add_subcommand("simulate", "write a simulated dataset");
  add_common(simulate);
  CLI::App* preprocess = app.add_subcommand("preprocess", "baseline removal and dF/F");
  add_common(preprocess);
  CLI::App* train_cmd = app.add_subcommand("train", "fit recognition + generative models");
  add_common(train_cmd);
  train_cmd->add_flag("--resume", resume, "continue from the run directory state");
  CLI::App* infer_cmd = app.add_subcommand("infer", "marginal rates for a test manifest");
  add_common(infer_cmd);
  infer_cmd->add_option("--snapshot", snapshot, "recognition weights (DSPK1 container)");
  CLI::App* eval_cmd = app.add_subcommand("eval", "metrics against ground truth");
  add_common(eval_cmd);
  eval_cmd->add_option("--snapshot", snapshot, "recognition weights (DSPK1 container)");
  CLI::App* bench_cmd = app.add_subcommand("bench", "inference timing benchmark");
  add_common(bench_cmd);
  bench_cmd->add_option("--snapshot", snapshot, "recognition weights (DSPK1 container)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (simulate->parsed()) return cmd_simulate(args);
    if (preprocess->parsed()) return cmd_preprocess(args);
    if (train_cmd->parsed()) return cmd_train(args, resume);
    if (infer_cmd->parsed()) return cmd_infer(args, snapshot);
    if (eval_cmd->parsed()) return cmd_eval(args, snapshot);
    if (bench_cmd->parsed()) return cmd_bench(args, snapshot);
  } catch (const config_error& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const data_error& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 3;
  } catch (const numeric_error& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}

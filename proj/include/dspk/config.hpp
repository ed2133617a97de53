#pragma once

#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "dspk/dendritic.hpp"
#include "dspk/errors.hpp"
#include "dspk/generative.hpp"
#include "dspk/recognition.hpp"
#include "dspk/simulate.hpp"
#include "dspk/trainer.hpp"

namespace dspk {

// Run configuration. Unknown keys anywhere are hard errors so hyperparameter
// typos cannot silently fall back to defaults.
struct RunConfig {
  std::uint64_t seed = 1;
  ModelKind model = ModelKind::Scf;
  RecogKind recognition = RecogKind::Factorized;
  std::size_t ar_order = 1;
  std::size_t threads = 1;

  SimProtocol sim;
  DendriticSimConfig den_sim;
  std::optional<nlohmann::json> base_params;  // per-model override for simulation

  struct Preprocess {
    std::size_t window = 6000;
    double percentile = 0.05;
  } preprocess;

  CnnConfig cnn;
  std::size_t rnn_hidden = 64;
  bool shared_spine_weights = true;

  TrainerConfig trainer;

  struct Eval {
    std::size_t n_samples = 30;
    std::size_t bin_factor = 1;
    std::optional<double> target_bin_seconds;  // overrides bin_factor when set
    std::size_t hist_window = 3;
  } eval;

  struct Data {
    std::string train_manifest;
    std::string val_manifest;
    std::string test_manifest;
  } data;

  struct Bench {
    std::size_t trace_length = 10000;
    std::size_t repeats = 7;
    std::size_t n_samples = 30;
  } bench;

  nlohmann::json raw;  // canonical post-override document
};

namespace detail {

inline void check_keys(const nlohmann::json& j, const std::set<std::string>& allowed,
                       const std::string& scope) {
  if (!j.is_object()) throw config_error("config section `" + scope + "` must be an object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!allowed.count(it.key()))
      throw config_error("unknown config key `" + scope + it.key() + "`");
}

template <typename T>
void maybe(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace detail

inline RunConfig parse_config(const nlohmann::json& j) {
  using detail::check_keys;
  using detail::maybe;
  RunConfig cfg;
  cfg.raw = j;
  check_keys(j, {"seed", "model", "recognition", "ar_order", "threads", "simulate",
                 "preprocess", "architecture", "trainer", "eval", "data", "bench"},
             "");
  maybe(j, "seed", cfg.seed);
  if (j.contains("model")) cfg.model = model_from_name(j.at("model").get<std::string>());
  if (j.contains("recognition"))
    cfg.recognition = recog_from_name(j.at("recognition").get<std::string>());
  maybe(j, "ar_order", cfg.ar_order);
  maybe(j, "threads", cfg.threads);
  if (cfg.ar_order < 1) throw config_error("ar_order must be >= 1");

  if (j.contains("simulate")) {
    const auto& s = j.at("simulate");
    check_keys(s,
               {"n_train", "n_val", "n_test", "length", "dt", "rates_hz", "heterogeneity",
                "params", "n_cells", "n_spines", "sigma_lo", "bap_lo", "bap_hi",
                "soma_rate_lo", "soma_rate_hi", "spine_rate_lo", "spine_rate_hi"},
               "simulate.");
    maybe(s, "n_train", cfg.sim.n_train);
    maybe(s, "n_val", cfg.sim.n_val);
    maybe(s, "n_test", cfg.sim.n_test);
    maybe(s, "length", cfg.sim.length);
    maybe(s, "dt", cfg.sim.dt);
    maybe(s, "rates_hz", cfg.sim.rates_hz);
    maybe(s, "heterogeneity", cfg.sim.heterogeneity);
    if (s.contains("params")) cfg.base_params = s.at("params");
    // dendritic protocol
    maybe(s, "n_cells", cfg.den_sim.n_cells);
    maybe(s, "n_spines", cfg.den_sim.n_spines);
    maybe(s, "length", cfg.den_sim.length);
    maybe(s, "dt", cfg.den_sim.dt);
    maybe(s, "sigma_lo", cfg.den_sim.sigma_lo);
    maybe(s, "bap_lo", cfg.den_sim.bap_lo);
    maybe(s, "bap_hi", cfg.den_sim.bap_hi);
    maybe(s, "soma_rate_lo", cfg.den_sim.soma_rate_lo);
    maybe(s, "soma_rate_hi", cfg.den_sim.soma_rate_hi);
    maybe(s, "spine_rate_lo", cfg.den_sim.spine_rate_lo);
    maybe(s, "spine_rate_hi", cfg.den_sim.spine_rate_hi);
    cfg.sim.model = cfg.model;
    cfg.sim.seed = cfg.seed;
  }

  if (j.contains("preprocess")) {
    const auto& p = j.at("preprocess");
    check_keys(p, {"window", "percentile"}, "preprocess.");
    maybe(p, "window", cfg.preprocess.window);
    maybe(p, "percentile", cfg.preprocess.percentile);
  }

  if (j.contains("architecture")) {
    const auto& a = j.at("architecture");
    check_keys(a,
               {"hidden_layers", "filters", "kernel", "leaky_slope", "out_bias",
                "hidden_units", "shared_spine_weights"},
               "architecture.");
    maybe(a, "hidden_layers", cfg.cnn.hidden_layers);
    maybe(a, "filters", cfg.cnn.filters);
    maybe(a, "kernel", cfg.cnn.kernel);
    maybe(a, "leaky_slope", cfg.cnn.leaky_slope);
    maybe(a, "out_bias", cfg.cnn.out_bias);
    maybe(a, "hidden_units", cfg.rnn_hidden);
    maybe(a, "shared_spine_weights", cfg.shared_spine_weights);
    if (cfg.cnn.hidden_layers > 5)
      throw config_error("architecture.hidden_layers is limited to 5");
  }

  if (j.contains("trainer")) {
    const auto& t = j.at("trainer");
    check_keys(t,
               {"samples", "lr_phi", "lr_theta", "clip_threshold", "clip_theta", "chunk_len",
                "chunk_stride", "batch_chunks", "max_steps", "eval_interval", "patience",
                "burn_in", "val_samples", "eval_bin_factor", "prior_rate_hz", "learn_prior"},
               "trainer.");
    maybe(t, "samples", cfg.trainer.samples);
    maybe(t, "lr_phi", cfg.trainer.lr_phi);
    maybe(t, "lr_theta", cfg.trainer.lr_theta);
    maybe(t, "clip_threshold", cfg.trainer.clip_threshold);
    maybe(t, "clip_theta", cfg.trainer.clip_theta);
    maybe(t, "chunk_len", cfg.trainer.chunk_len);
    maybe(t, "chunk_stride", cfg.trainer.chunk_stride);
    maybe(t, "batch_chunks", cfg.trainer.batch_chunks);
    maybe(t, "max_steps", cfg.trainer.max_steps);
    maybe(t, "eval_interval", cfg.trainer.eval_interval);
    maybe(t, "patience", cfg.trainer.patience);
    maybe(t, "burn_in", cfg.trainer.burn_in);
    maybe(t, "val_samples", cfg.trainer.val_samples);
    maybe(t, "eval_bin_factor", cfg.trainer.eval_bin_factor);
    maybe(t, "prior_rate_hz", cfg.trainer.prior_rate_hz);
    maybe(t, "learn_prior", cfg.trainer.learn_prior);
    cfg.trainer.seed = cfg.seed;
  }

  if (j.contains("eval")) {
    const auto& e = j.at("eval");
    check_keys(e, {"n_samples", "bin_factor", "target_bin_seconds", "hist_window"}, "eval.");
    maybe(e, "n_samples", cfg.eval.n_samples);
    maybe(e, "bin_factor", cfg.eval.bin_factor);
    if (e.contains("target_bin_seconds") && !e.at("target_bin_seconds").is_null())
      cfg.eval.target_bin_seconds = e.at("target_bin_seconds").get<double>();
    maybe(e, "hist_window", cfg.eval.hist_window);
  }

  if (j.contains("data")) {
    const auto& d = j.at("data");
    check_keys(d, {"train_manifest", "val_manifest", "test_manifest"}, "data.");
    maybe(d, "train_manifest", cfg.data.train_manifest);
    maybe(d, "val_manifest", cfg.data.val_manifest);
    maybe(d, "test_manifest", cfg.data.test_manifest);
  }

  if (j.contains("bench")) {
    const auto& b = j.at("bench");
    check_keys(b, {"trace_length", "repeats", "n_samples"}, "bench.");
    maybe(b, "trace_length", cfg.bench.trace_length);
    maybe(b, "repeats", cfg.bench.repeats);
    maybe(b, "n_samples", cfg.bench.n_samples);
  }
  return cfg;
}

inline nlohmann::json load_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw config_error("cannot open config: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw config_error(std::string("config parse error: ") + e.what());
  }
  return j;
}

// `--set a.b.c=value` overrides; values parse as JSON scalars, falling back
// to strings.
inline void apply_override(nlohmann::json& j, const std::string& assignment) {
  auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0)
    throw config_error("override must look like key.path=value: " + assignment);
  std::string path = assignment.substr(0, eq);
  std::string value = assignment.substr(eq + 1);
  nlohmann::json parsed;
  try {
    parsed = nlohmann::json::parse(value);
  } catch (...) {
    parsed = value;
  }
  nlohmann::json* cur = &j;
  std::size_t pos = 0;
  while (true) {
    auto dot = path.find('.', pos);
    std::string key = path.substr(pos, dot == std::string::npos ? dot : dot - pos);
    if (key.empty()) throw config_error("bad override path: " + path);
    if (dot == std::string::npos) {
      (*cur)[key] = parsed;
      break;
    }
    cur = &(*cur)[key];
    pos = dot + 1;
  }
}

inline GenParams resolve_base_params(const RunConfig& cfg) {
  if (cfg.base_params) {
    nlohmann::json p = *cfg.base_params;
    if (!p.contains("model")) p["model"] = model_name(cfg.model);
    return params_from_json(p);
  }
  return default_base_params(cfg.model);
}

inline Recognition build_recognition(const RunConfig& cfg, Rng rng) {
  if (cfg.recognition == RecogKind::Factorized)
    return Recognition(CnnPosterior(cfg.cnn, 1, 1, rng));
  RnnConfig rc;
  rc.features = cfg.cnn;
  rc.features.out_bias = 0.0;
  rc.hidden = cfg.rnn_hidden;
  rc.out_bias = cfg.cnn.out_bias;
  return Recognition(RnnPosterior(rc, rng));
}

}  // namespace dspk

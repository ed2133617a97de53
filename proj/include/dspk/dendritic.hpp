#pragma once

#include <cmath>
#include <string>
#include <vector>

#include <json.hpp>

#include "dspk/evaluation.hpp"
#include "dspk/generative.hpp"
#include "dspk/recognition.hpp"
#include "dspk/signal.hpp"
#include "dspk/trainer.hpp"

namespace dspk {

// ---------------------------------------------------------------------------
// Joint soma + spine dataset. Channel 0 is always the soma.
// ---------------------------------------------------------------------------
struct DendriticDataset {
  struct Cell {
    std::string id;
    std::vector<FluorescenceTrace> traces;  // one per channel
    std::vector<SpikeTrain> events;         // ground truth per channel
    std::vector<double> rates_hz;           // per channel, as simulated
    GenParams truth;                        // generating parameters (logged)
  };
  double dt = 1.0 / 60.0;
  std::vector<Cell> cells;

  void validate() const {
    for (const Cell& c : cells) {
      if (c.traces.empty() || c.traces.size() != c.events.size())
        throw data_error("dendritic cell " + c.id + ": channel mismatch");
      for (const auto& tr : c.traces)
        if (tr.size() != c.traces[0].size())
          throw data_error("dendritic cell " + c.id + ": channel lengths differ");
    }
  }
};

struct DendriticSimConfig {
  std::size_t n_cells = 15;
  std::size_t n_spines = 10;
  std::size_t length = 10000;
  double dt = 1.0 / 60.0;
  double soma_rate_lo = 0.6, soma_rate_hi = 1.1;    // Hz
  double spine_rate_lo = 0.3, spine_rate_hi = 1.5;  // Hz
  double sigma_lo = 0.06;                            // per-channel noise sd, hi = 3x lo
  double bap_lo = 0.4, bap_hi = 0.9;                 // bAP amplitude range
  double heterogeneity = 0.1;
};

// Soma spikes and spine synaptic events are i.i.d. Bernoulli at per-cell
// rates; traces come from the joint generative model with per-channel noise.
inline DendriticDataset simulate_dendritic_dataset(const DendriticSimConfig& cfg, Rng rng) {
  if (cfg.n_cells < 1 || cfg.n_spines < 1) throw config_error("dendritic sim: positive counts");
  DendriticDataset ds;
  ds.dt = cfg.dt;
  for (std::size_t c = 0; c < cfg.n_cells; ++c) {
    Rng cell_rng = rng.child(c);
    DendriticDataset::Cell cell;
    cell.id = "den" + std::to_string(c);

    std::vector<double> gamma_spine, delta_spine, bap, alpha_spine, beta_spine, sigma2_spine;
    for (std::size_t s = 0; s < cfg.n_spines; ++s) {
      gamma_spine.push_back(0.90);
      delta_spine.push_back(1.0);
      bap.push_back(cell_rng.uniform(cfg.bap_lo, cfg.bap_hi));
      alpha_spine.push_back(1.0);
      beta_spine.push_back(0.2);
      double sd = cell_rng.uniform(cfg.sigma_lo, 3.0 * cfg.sigma_lo);
      sigma2_spine.push_back(sd * sd);
    }
    double soma_sd = cell_rng.uniform(cfg.sigma_lo, 3.0 * cfg.sigma_lo);
    cell.truth = dendritic_params(cfg.n_spines, {0.95}, 1.0, 1.0, 0.3, soma_sd * soma_sd,
                                  gamma_spine, delta_spine, bap, alpha_spine, beta_spine,
                                  sigma2_spine, 0.12, 0.12, 1.2, 4.0);
    Rng perturb_rng = cell_rng.child(1);
    perturb_params(cell.truth, perturb_rng, cfg.heterogeneity);

    cell.rates_hz.push_back(cell_rng.uniform(cfg.soma_rate_lo, cfg.soma_rate_hi));
    for (std::size_t s = 0; s < cfg.n_spines; ++s)
      cell.rates_hz.push_back(cell_rng.uniform(cfg.spine_rate_lo, cfg.spine_rate_hi));

    Rng spikes_rng = cell_rng.child(2);
    for (std::size_t ch = 0; ch < cfg.n_spines + 1; ++ch) {
      SpikeTrain s;
      s.dt = cfg.dt;
      s.bits.resize(cfg.length);
      double p = cell.rates_hz[ch] * cfg.dt;
      Rng ch_rng = spikes_rng.child(ch);
      for (std::size_t t = 0; t < cfg.length; ++t) s.bits[t] = ch_rng.bernoulli(p) ? 1 : 0;
      cell.events.push_back(std::move(s));
    }
    Rng noise_rng = cell_rng.child(3);
    cell.traces = simulate_dendritic(cell.truth, cell.events, noise_rng);
    for (std::size_t ch = 0; ch < cell.traces.size(); ++ch) {
      cell.traces[ch].cell_id = cell.id;
      cell.traces[ch].dt = cfg.dt;
    }
    ds.cells.push_back(std::move(cell));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Moment initialization for the joint model, channel by channel.
// ---------------------------------------------------------------------------
inline GenParams init_dendritic_from_traces(const std::vector<FluorescenceTrace>& traces,
                                            std::size_t n_spines) {
  if (traces.size() != n_spines + 1) throw data_error("init: channel count mismatch");
  auto stats = [](const std::vector<double>& f) {
    std::vector<double> sorted = f;
    std::sort(sorted.begin(), sorted.end());
    double beta = sorted[sorted.size() / 10];
    double amp = std::max(sorted[std::size_t(0.99 * double(sorted.size()))] - beta, 1e-3);
    std::vector<double> diffs(f.size() - 1);
    for (std::size_t t = 0; t + 1 < f.size(); ++t) diffs[t] = std::abs(f[t + 1] - f[t]);
    std::nth_element(diffs.begin(), diffs.begin() + diffs.size() / 2, diffs.end());
    double sigma = std::max(1.4826 * diffs[diffs.size() / 2] / std::sqrt(2.0), 1e-3);
    return std::array<double, 3>{beta, amp, sigma};
  };
  // alpha maps the saturated dye range (~dtot) onto the observed amplitude
  // range, biased low so early event samples stay plausible
  auto soma = stats(traces[0].values);
  std::vector<double> gs, dsn, db, as, bs, s2;
  for (std::size_t s = 0; s < n_spines; ++s) {
    auto sp = stats(traces[s + 1].values);
    gs.push_back(0.9);
    dsn.push_back(1.0);
    db.push_back(0.5);
    as.push_back(sp[1] / 3.0);
    bs.push_back(sp[0]);
    s2.push_back(sp[2] * sp[2]);
  }
  return dendritic_params(n_spines, {0.93}, 1.0, soma[1] / 3.0, soma[0], soma[2] * soma[2], gs,
                          dsn, db, as, bs, s2, 0.12, 0.12, 1.2, 4.0);
}

// ---------------------------------------------------------------------------
// Demixing: per cell, train the multi-channel factorized posterior jointly
// with the generative parameters (non-amortized), then report soma and spine
// correlations separately.
// ---------------------------------------------------------------------------
struct DemixConfig {
  TrainerConfig trainer;
  CnnConfig net;
  bool shared_weights = true;
  double prior_soma_hz = 0.85;
  double prior_spine_hz = 0.9;

  DemixConfig() {
    trainer.samples = 32;
    trainer.max_steps = 1200;
    net.hidden_layers = 3;
    net.filters = 16;
    net.kernel = 13;
  }
};

struct DemixResult {
  struct PerCell {
    std::string id;
    std::vector<std::vector<double>> rates;  // per channel marginal tracks
    double soma_correlation = 0.0;
    double spine_correlation = 0.0;  // mean over spines
    bool defined = false;
  };
  std::vector<PerCell> cells;
  double soma_mean = 0.0;
  double spine_mean = 0.0;
  std::vector<TrainLogRow> log;
};

namespace detail {

inline double dendritic_eval_corr(DendriticCnnPosterior& net, const DendriticDataset::Cell& cell,
                                  std::size_t bin_factor, double* soma_out, double* spine_out) {
  std::vector<std::vector<double>> traces;
  for (const auto& tr : cell.traces) traces.push_back(tr.values);
  auto tracks = net.probs(traces);
  double soma = 0.0, spine = 0.0;
  std::size_t n_spine = 0;
  auto c0 = cross_correlation(tracks[0], cell.events[0], bin_factor);
  soma = c0.defined ? c0.value : 0.0;
  for (std::size_t s = 1; s < tracks.size(); ++s) {
    auto cs = cross_correlation(tracks[s], cell.events[s], bin_factor);
    if (cs.defined) {
      spine += cs.value;
      ++n_spine;
    }
  }
  if (n_spine) spine /= double(n_spine);
  if (soma_out) *soma_out = soma;
  if (spine_out) *spine_out = spine;
  return 0.5 * (soma + spine);
}

}  // namespace detail

inline DemixResult demix(const DendriticDataset& ds, const DemixConfig& cfg) {
  cfg.trainer.validate();
  ds.validate();
  DemixResult result;

  for (std::size_t ci = 0; ci < ds.cells.size(); ++ci) {
    const auto& cell = ds.cells[ci];
    std::size_t n_spines = cell.traces.size() - 1;
    std::size_t T = cell.traces[0].size();
    Rng root = Rng(cfg.trainer.seed).child(ci);

    DendriticCnnPosterior net(cfg.net, n_spines, cfg.shared_weights, root.child(1));
    GenParams theta = init_dendritic_from_traces(cell.traces, n_spines);
    std::vector<SpikePrior> priors;
    priors.push_back({cfg.prior_soma_hz, ds.dt});
    for (std::size_t s = 0; s < n_spines; ++s) priors.push_back({cfg.prior_spine_hz, ds.dt});

    AdamState adam_phi;
    AdamState adam_theta;
    double lr_phi = cfg.trainer.lr_phi, lr_theta = cfg.trainer.lr_theta;
    std::size_t consecutive_failures = 0, evals_since_best = 0;
    double best = -2.0;
    std::vector<Tensor> best_phi;
    bool stop = false;

    if (cfg.trainer.chunk_len > T)
      throw data_error("demix: chunk length exceeds trace length for cell " + cell.id);
    std::vector<std::size_t> starts;
    for (std::size_t s = 0; s + cfg.trainer.chunk_len <= T; s += cfg.trainer.chunk_stride)
      starts.push_back(s);
    if (starts.back() + cfg.trainer.chunk_len < T) starts.push_back(T - cfg.trainer.chunk_len);

    for (std::size_t step = 1; step <= cfg.trainer.max_steps && !stop; ++step) {
      Rng step_rng = root.child(100, step);
      net.zero_grad();
      theta.zero_grad();
      TrainLogRow row;
      row.step = step;
      row.cell = cell.id;
      bool ok = true;
      double bound_sum = 0.0;
      try {
        for (std::size_t b = 0; b < cfg.trainer.batch_chunks; ++b) {
          std::size_t start = starts[step_rng.child(b).index(starts.size())];
          std::vector<std::vector<double>> f;
          for (const auto& tr : cell.traces)
            f.emplace_back(tr.values.begin() + start,
                           tr.values.begin() + start + cfg.trainer.chunk_len);
          auto joint = net.sample(f, cfg.trainer.samples, step_rng.child(50, b));
          std::vector<Tensor> S;
          for (std::size_t ch = 0; ch <= n_spines; ++ch) {
            Tensor m({joint.size(), cfg.trainer.chunk_len});
            for (std::size_t k = 0; k < joint.size(); ++k)
              for (std::size_t t = 0; t < cfg.trainer.chunk_len; ++t)
                m.at(k, t) = joint[k].channels[ch].bits[t];
            S.push_back(std::move(m));
          }
          Tape tape;
          Var lq = net.logq_graph(tape, f, S);
          Var lp = build_log_joint_dendritic(tape, theta, S, f, priors, cfg.trainer.burn_in);
          std::vector<double> log_w(joint.size());
          for (std::size_t k = 0; k < joint.size(); ++k)
            log_w[k] = tape.val(lp).data[k] - tape.val(lq).data[k];
          auto bound = bound_from_log_weights(log_w);
          auto sig = vimco_signals(log_w);
          Tensor a({joint.size()}), w({joint.size()});
          for (std::size_t k = 0; k < joint.size(); ++k) {
            a.data[k] = sig.learning[k] - sig.weights[k];
            w.data[k] = sig.weights[k];
          }
          Var surrogate = tape.add(tape.dot(tape.constant(a), lq),
                                   tape.dot(tape.constant(w), lp));
          tape.backward(surrogate, 1.0 / double(cfg.trainer.batch_chunks));
          bound_sum += bound.value;
        }
      } catch (const numeric_error&) {
        ok = false;
      }

      if (!ok) {
        if (++consecutive_failures >= 3) {
          lr_phi *= 0.5;
          lr_theta *= 0.5;
          consecutive_failures = 0;
        }
        net.zero_grad();
        theta.zero_grad();
        row.bound = std::numeric_limits<double>::quiet_NaN();
        result.log.push_back(row);
        continue;
      }
      consecutive_failures = 0;
      row.bound = bound_sum / double(cfg.trainer.batch_chunks);
      row.grad_norm_phi = clip_by_global_norm(net.parameters(), cfg.trainer.clip_threshold);
      if (cfg.trainer.clip_theta)
        clip_by_global_norm(theta.trainable(), cfg.trainer.clip_threshold);
      auto phi = net.parameters();
      adam_step(phi, adam_phi, lr_phi);
      auto th = theta.trainable();
      adam_step(th, adam_theta, lr_theta);

      if (step % cfg.trainer.eval_interval == 0) {
        double corr = detail::dendritic_eval_corr(net, cell, cfg.trainer.eval_bin_factor,
                                                  nullptr, nullptr);
        row.val_correlation = corr;
        if (corr > best) {
          best = corr;
          best_phi.clear();
          for (Parameter* p : net.parameters()) best_phi.push_back(p->value);
          evals_since_best = 0;
        } else if (++evals_since_best >= cfg.trainer.patience) {
          stop = true;
        }
      }
      result.log.push_back(row);
    }

    if (!best_phi.empty()) {
      auto params = net.parameters();
      for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = best_phi[i];
    }

    DemixResult::PerCell out;
    out.id = cell.id;
    std::vector<std::vector<double>> traces;
    for (const auto& tr : cell.traces) traces.push_back(tr.values);
    out.rates = net.probs(traces);
    detail::dendritic_eval_corr(net, cell, cfg.trainer.eval_bin_factor, &out.soma_correlation,
                                &out.spine_correlation);
    out.defined = true;
    result.cells.push_back(std::move(out));
  }

  double soma = 0.0, spine = 0.0;
  for (const auto& c : result.cells) {
    soma += c.soma_correlation;
    spine += c.spine_correlation;
  }
  if (!result.cells.empty()) {
    result.soma_mean = soma / double(result.cells.size());
    result.spine_mean = spine / double(result.cells.size());
  }
  return result;
}

// ---------------------------------------------------------------------------
// Dendritic manifest: the dataset manifest extended with per-cell channel
// arrays. Channel 0 is the soma.
//   { "dt": s, "cells": [ { "id", "channels":
//       [ { "trace": path, "events": path|null } ] } ] }
// ---------------------------------------------------------------------------
inline void write_dendritic_manifest(const std::string& path, const DendriticDataset& ds,
                                     const std::vector<std::vector<std::string>>& trace_paths) {
  nlohmann::json j;
  j["dt"] = ds.dt;
  j["cells"] = nlohmann::json::array();
  for (std::size_t c = 0; c < ds.cells.size(); ++c) {
    nlohmann::json jc;
    jc["id"] = ds.cells[c].id;
    jc["channels"] = nlohmann::json::array();
    for (std::size_t ch = 0; ch < trace_paths[c].size(); ++ch) {
      nlohmann::json jch;
      jch["trace"] = trace_paths[c][ch];
      jch["events"] = trace_paths[c][ch];  // events ride in the spike column
      jc["channels"].push_back(jch);
    }
    j["cells"].push_back(jc);
  }
  std::ofstream out(path);
  if (!out) throw data_error("cannot write manifest: " + path);
  out << j.dump(2) << '\n';
}

inline DendriticDataset load_dendritic_dataset(const std::string& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) throw data_error("cannot open manifest: " + manifest_path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw data_error("manifest " + manifest_path + ": " + e.what());
  }
  if (!j.contains("dt") || !j.contains("cells"))
    throw data_error("dendritic manifest must contain `dt` and `cells`");
  std::filesystem::path base = std::filesystem::path(manifest_path).parent_path();
  DendriticDataset ds;
  ds.dt = j.at("dt").get<double>();
  for (const auto& jc : j.at("cells")) {
    DendriticDataset::Cell cell;
    cell.id = jc.at("id").get<std::string>();
    for (const auto& jch : jc.at("channels")) {
      std::string tpath = (base / jch.at("trace").get<std::string>()).string();
      TraceFile tf = read_trace_csv(tpath);
      FluorescenceTrace tr;
      tr.values = std::move(tf.f);
      tr.dt = ds.dt;
      tr.cell_id = cell.id;
      tr.channel = static_cast<int>(cell.traces.size());
      cell.traces.push_back(std::move(tr));
      SpikeTrain ev;
      ev.dt = ds.dt;
      if (jch.contains("events") && !jch.at("events").is_null()) {
        std::string epath = (base / jch.at("events").get<std::string>()).string();
        TraceFile ef = epath == tpath ? std::move(tf) : read_trace_csv(epath);
        if (!ef.spike) throw data_error("events file " + epath + " has no `spike` column");
        ev.bits = std::move(*ef.spike);
      } else {
        ev.bits.assign(cell.traces.back().size(), 0);
      }
      cell.events.push_back(std::move(ev));
    }
    // placeholder truth; loaded datasets carry no generating parameters
    cell.truth = GenParams{};
    ds.cells.push_back(std::move(cell));
  }
  ds.validate();
  return ds;
}

}  // namespace dspk

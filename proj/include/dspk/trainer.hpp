#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "dspk/autodiff.hpp"
#include "dspk/errors.hpp"
#include "dspk/evaluation.hpp"
#include "dspk/generative.hpp"
#include "dspk/recognition.hpp"
#include "dspk/rng.hpp"
#include "dspk/serialize.hpp"
#include "dspk/signal.hpp"

namespace dspk {

struct TrainerConfig {
  std::size_t samples = 64;  // K; >= 2 for the leave-one-out baselines
  double lr_phi = 1e-3;
  double lr_theta = 1e-2;
  double clip_threshold = 0.02;
  bool clip_theta = false;  // gradients acting on the recognition model are always clipped
  std::size_t chunk_len = 256;
  std::size_t chunk_stride = 192;
  std::size_t batch_chunks = 8;
  std::size_t max_steps = 2000;
  std::size_t eval_interval = 100;
  std::size_t patience = 10;  // evaluations without improvement
  std::size_t burn_in = 8;    // bins dropped from the chunk likelihood
  std::size_t val_samples = 10;
  std::size_t eval_bin_factor = 1;
  double prior_rate_hz = 1.0;
  bool learn_prior = false;
  std::uint64_t seed = 1;
  std::size_t step_offset = 0;  // resume support: steps already taken

  void validate() const {
    if (samples < 2) throw config_error("trainer: K must be >= 2");
    if (clip_threshold <= 0.0) throw config_error("trainer: clip threshold must be positive");
    if (batch_chunks < 1 || chunk_len < 1) throw config_error("trainer: bad batch geometry");
    if (burn_in >= chunk_len) throw config_error("trainer: burn-in must be below chunk length");
  }
};

// ---------------------------------------------------------------------------
// Multi-sample bound
// ---------------------------------------------------------------------------
struct BoundEstimate {
  double value = 0.0;
  std::vector<double> log_weights;
};

inline BoundEstimate bound_from_log_weights(std::vector<double> log_w) {
  for (double w : log_w)
    if (!std::isfinite(w)) throw numeric_error("bound: non-finite importance weight");
  BoundEstimate out;
  out.value = logsumexp(log_w) - std::log(double(log_w.size()));
  out.log_weights = std::move(log_w);
  return out;
}

// Draws K posterior samples and evaluates log w_k = log p(s^k,f) - log q(s^k|f).
inline BoundEstimate iwae_bound(const std::vector<double>& f, const GenParams& theta,
                                const Recognition& recog, const SpikePrior& prior,
                                std::size_t K, Rng rng) {
  if (K < 1) throw config_error("iwae_bound: K must be >= 1");
  auto samples = recog.sample(f, K, rng);
  std::vector<double> log_w(K);
  for (std::size_t k = 0; k < K; ++k) {
    SpikeTrain s = samples[k].spikes;
    s.dt = prior.dt;
    log_w[k] = log_joint(theta, s, f, prior) - samples[k].log_q;
  }
  return bound_from_log_weights(std::move(log_w));
}

// ---------------------------------------------------------------------------
// VIMCO learning signals: w~ = softmax(log w); the per-sample signal replaces
// log w_k by the mean of the others inside the bound,
//   L^_k = logsumexp(log w) - logsumexp(log w with log w_k <- mean_{j!=k} log w_j)
// (the -log K terms cancel).
// ---------------------------------------------------------------------------
struct VimcoSignals {
  std::vector<double> learning;  // L^_k
  std::vector<double> weights;   // w~_k, sums to 1
};

inline VimcoSignals vimco_signals(const std::vector<double>& log_w) {
  std::size_t K = log_w.size();
  if (K < 2) throw config_error("vimco_signals: K must be >= 2");
  double total = logsumexp(log_w);
  double sum = 0.0;
  for (double w : log_w) sum += w;

  VimcoSignals out;
  out.weights.resize(K);
  out.learning.resize(K);
  for (std::size_t k = 0; k < K; ++k) out.weights[k] = std::exp(log_w[k] - total);
  std::vector<double> replaced(log_w);
  for (std::size_t k = 0; k < K; ++k) {
    double mean_rest = (sum - log_w[k]) / double(K - 1);
    replaced[k] = mean_rest;
    out.learning[k] = total - logsumexp(replaced);
    replaced[k] = log_w[k];
    if (!std::isfinite(out.learning[k])) throw numeric_error("vimco: non-finite signal");
  }
  return out;
}

// ---------------------------------------------------------------------------
// One chunk's VIMCO surrogate. backward(seed) on `surrogate` accumulates
//   phi:   sum_k (L^_k - w~_k) d log q(s^k|f)
//   theta: sum_k w~_k d log p(s^k, f)
// into the parameter gradients (seed scales both, for batch averaging).
// ---------------------------------------------------------------------------
struct ChunkObjective {
  BoundEstimate bound;
  Var surrogate;
  Var log_q;  // [K]
  Var log_p;  // [K]
};

inline ChunkObjective build_vimco_objective(Tape& tape, const std::vector<double>& f,
                                            GenParams& theta, Recognition& recog,
                                            const SpikePrior& prior, const Tensor& spikes,
                                            std::size_t burn_in = 0) {
  std::size_t K = spikes.dim(0);
  ChunkObjective out;
  out.log_q = recog.logq_graph(tape, f, spikes);
  out.log_p = build_log_joint(tape, theta, spikes, f, prior, burn_in);

  std::vector<double> log_w(K);
  for (std::size_t k = 0; k < K; ++k)
    log_w[k] = tape.val(out.log_p).data[k] - tape.val(out.log_q).data[k];
  out.bound = bound_from_log_weights(log_w);

  VimcoSignals sig = vimco_signals(log_w);
  Tensor a({K}), w({K});
  for (std::size_t k = 0; k < K; ++k) {
    a.data[k] = sig.learning[k] - sig.weights[k];
    w.data[k] = sig.weights[k];
  }
  out.surrogate = tape.add(tape.dot(tape.constant(a), out.log_q),
                           tape.dot(tape.constant(w), out.log_p));
  return out;
}

inline Tensor spikes_to_rows(const std::vector<PosteriorSample>& samples) {
  std::size_t K = samples.size(), T = samples[0].spikes.size();
  Tensor S({K, T});
  for (std::size_t k = 0; k < K; ++k)
    for (std::size_t t = 0; t < T; ++t) S.at(k, t) = samples[k].spikes.bits[t];
  return S;
}

inline std::vector<double> flatten_grads(const std::vector<Parameter*>& params) {
  std::vector<double> out;
  for (const Parameter* p : params)
    out.insert(out.end(), p->grad.data.begin(), p->grad.data.end());
  return out;
}

// Score-function gradient of the bound with respect to the recognition
// weights, K weighted backward passes through log q fused into one sweep.
inline std::vector<double> grad_phi_vimco(const std::vector<double>& f, GenParams& theta,
                                          Recognition& recog, const SpikePrior& prior,
                                          std::size_t K, Rng rng) {
  if (K < 2) throw config_error("grad_phi_vimco: K must be >= 2");
  recog.zero_grad();
  theta.zero_grad();
  Tape tape;
  auto obj = build_vimco_objective(tape, f, theta, recog, prior, spikes_to_rows(recog.sample(f, K, rng)));
  tape.backward(obj.surrogate);
  return flatten_grads(recog.parameters());
}

// Importance-weighted gradient with respect to the unconstrained generative
// parameters: sum_k w~_k d log p(s^k, f).
inline std::vector<double> grad_theta(const std::vector<double>& f, GenParams& theta,
                                      Recognition& recog, const SpikePrior& prior,
                                      std::size_t K, Rng rng) {
  if (K < 1) throw config_error("grad_theta: K must be >= 1");
  recog.zero_grad();
  theta.zero_grad();
  auto samples = recog.sample(f, K, rng);
  Tape tape;
  Var log_p = build_log_joint(tape, theta, spikes_to_rows(samples), f, prior);
  std::vector<double> log_w(K);
  for (std::size_t k = 0; k < K; ++k)
    log_w[k] = tape.val(log_p).data[k] - samples[k].log_q;
  double total = logsumexp(log_w);
  Tensor w({K});
  for (std::size_t k = 0; k < K; ++k) w.data[k] = std::exp(log_w[k] - total);
  tape.backward(tape.dot(tape.constant(w), log_p));
  return flatten_grads(theta.trainable());
}

// ---------------------------------------------------------------------------
// Norm clipping: if the global l2 norm exceeds the threshold, rescale so the
// norm equals the threshold; direction is preserved. Returns the pre-clip norm.
// ---------------------------------------------------------------------------
inline double clip_by_global_norm(const std::vector<Parameter*>& params, double threshold) {
  if (threshold <= 0.0) throw config_error("clip threshold must be positive");
  double sq = 0.0;
  for (const Parameter* p : params)
    for (double g : p->grad.data) sq += g * g;
  double norm = std::sqrt(sq);
  if (norm > threshold && norm > 0.0) {
    double scale = threshold / norm;
    for (Parameter* p : params)
      for (double& g : p->grad.data) g *= scale;
  }
  return norm;
}

// ---------------------------------------------------------------------------
// Adam (ascent form: parameters move along the gradient of the bound).
// ---------------------------------------------------------------------------
struct AdamState {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  std::size_t step = 0;
  std::vector<Tensor> m, v;

  void ensure(const std::vector<Parameter*>& params) {
    if (!m.empty()) {
      if (m.size() != params.size()) throw config_error("adam: parameter set changed");
      return;
    }
    for (const Parameter* p : params) {
      m.push_back(Tensor::zeros(p->value.shape));
      v.push_back(Tensor::zeros(p->value.shape));
    }
  }
};

inline void adam_step(const std::vector<Parameter*>& params, AdamState& st, double lr) {
  st.ensure(params);
  ++st.step;
  double b1t = 1.0 - std::pow(st.beta1, double(st.step));
  double b2t = 1.0 - std::pow(st.beta2, double(st.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter& p = *params[i];
    if (p.grad.numel() != st.m[i].numel()) throw config_error("adam: shape drift");
    for (std::size_t j = 0; j < p.grad.numel(); ++j) {
      double g = p.grad.data[j];
      st.m[i].data[j] = st.beta1 * st.m[i].data[j] + (1.0 - st.beta1) * g;
      st.v[i].data[j] = st.beta2 * st.v[i].data[j] + (1.0 - st.beta2) * g * g;
      double mhat = st.m[i].data[j] / b1t;
      double vhat = st.v[i].data[j] / b2t;
      p.value.data[j] += lr * mhat / (std::sqrt(vhat) + st.eps);
    }
  }
}

// ---------------------------------------------------------------------------
// Per-cell store: generative parameters and their optimizer state, swapped in
// at each iteration. The recognition model is shared and lives outside.
// ---------------------------------------------------------------------------
struct PerCellStore {
  std::map<std::string, GenParams> params;
  std::map<std::string, AdamState> adam;

  bool has(const std::string& cell) const { return params.count(cell) != 0; }
};

struct TrainLogRow {
  std::size_t step = 0;
  std::string cell;
  double bound = 0.0;
  double grad_norm_phi = 0.0;
  double val_correlation = std::numeric_limits<double>::quiet_NaN();
};

struct TrainResult {
  std::vector<TrainLogRow> log;
  double best_val = std::numeric_limits<double>::quiet_NaN();
  std::size_t best_step = 0;
  std::size_t steps_run = 0;
  std::size_t skipped_steps = 0;
  std::vector<Tensor> final_phi;  // weights before the best-snapshot restore
};

inline void write_train_log(const std::string& path, const std::vector<TrainLogRow>& rows) {
  std::ofstream out(path);
  if (!out) throw data_error("cannot write training log: " + path);
  out << "step,cell,bound,grad_norm_phi,val_correlation\n";
  for (const TrainLogRow& r : rows) {
    out << r.step << ',' << r.cell << ',' << r.bound << ',' << r.grad_norm_phi << ',';
    if (std::isnan(r.val_correlation))
      out << "";
    else
      out << r.val_correlation;
    out << '\n';
  }
}

// Mean correlation between marginal probability tracks and ground truth over
// the evaluation dataset (first trace per cell; cells without truth skipped).
inline double validation_correlation(Recognition& recog, const CellDataset& ds,
                                     std::size_t n_samples, std::size_t bin_factor, Rng rng) {
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t ci = 0; ci < ds.cells.size(); ++ci) {
    const CellRecord& cell = ds.cells[ci];
    if (cell.traces.empty() || !cell.spikes[0]) continue;
    auto probs = recog.marginal_probs(cell.traces[0].values, n_samples, rng.child(ci));
    auto corr = cross_correlation(probs, *cell.spikes[0], bin_factor);
    if (corr.defined) {
      sum += corr.value;
      ++n;
    }
  }
  return n ? sum / double(n) : std::numeric_limits<double>::quiet_NaN();
}

// ---------------------------------------------------------------------------
// Training loop. Per step: pick a cell round-robin, load its parameters and
// optimizer state, run a batch of chunks through the VIMCO surrogate, clip
// the recognition gradients, update, store back. Every eval_interval steps
// the validation correlation decides early stopping (best snapshot kept).
// ---------------------------------------------------------------------------
inline TrainResult train(const CellDataset& train_ds, const CellDataset* val_ds,
                         Recognition& recog, PerCellStore& store, ModelKind kind,
                         std::size_t ar_order, const TrainerConfig& cfg,
                         AdamState* adam_phi_io = nullptr) {
  cfg.validate();
  if (train_ds.cells.empty()) throw data_error("train: empty dataset");
  train_ds.validate();

  // per-cell chunk pools
  std::vector<std::vector<Chunk>> pools(train_ds.cells.size());
  for (std::size_t ci = 0; ci < train_ds.cells.size(); ++ci) {
    CellDataset one;
    one.dt = train_ds.dt;
    one.cells.push_back(train_ds.cells[ci]);
    auto chunks = make_chunks(one, cfg.chunk_len, cfg.chunk_stride);
    for (Chunk& c : chunks) c.cell = ci;
    pools[ci] = std::move(chunks);
  }

  // generative parameters: moment initialization where the store is empty
  for (const CellRecord& cell : train_ds.cells) {
    if (!store.has(cell.id)) {
      GenParams g = init_params_from_trace(kind, cell.traces.at(0).values, ar_order);
      if (cfg.learn_prior) enable_learnable_prior(g, cfg.prior_rate_hz);
      store.params.emplace(cell.id, std::move(g));
      store.adam.emplace(cell.id, AdamState{});
    }
  }

  SpikePrior prior{cfg.prior_rate_hz, train_ds.dt};
  AdamState local_adam_phi;
  AdamState& adam_phi = adam_phi_io ? *adam_phi_io : local_adam_phi;
  Rng root(cfg.seed);
  const CellDataset& eval_ds = val_ds ? *val_ds : train_ds;

  TrainResult result;
  result.steps_run = cfg.step_offset;
  std::vector<Tensor> best_phi;
  double lr_phi = cfg.lr_phi, lr_theta = cfg.lr_theta;
  std::size_t consecutive_failures = 0, evals_since_best = 0;
  bool stop = false;

  for (std::size_t step = cfg.step_offset + 1; step <= cfg.max_steps && !stop; ++step) {
    std::size_t ci = (step - 1) % train_ds.cells.size();
    const CellRecord& cell = train_ds.cells[ci];
    GenParams& theta = store.params.at(cell.id);
    AdamState& adam_theta = store.adam.at(cell.id);

    Rng step_rng = root.child(step);
    recog.zero_grad();
    theta.zero_grad();

    TrainLogRow row;
    row.step = step;
    row.cell = cell.id;
    bool ok = true;
    double bound_sum = 0.0;
    try {
      for (std::size_t b = 0; b < cfg.batch_chunks; ++b) {
        const Chunk& ch = pools[ci][step_rng.child(17, b).index(pools[ci].size())];
        const auto& tr = cell.traces[ch.trace].values;
        std::vector<double> f(tr.begin() + ch.start, tr.begin() + ch.start + ch.length);
        auto samples = recog.sample(f, cfg.samples, step_rng.child(29, b));
        Tape tape;
        auto obj = build_vimco_objective(tape, f, theta, recog, prior, spikes_to_rows(samples),
                                         cfg.burn_in);
        tape.backward(obj.surrogate, 1.0 / double(cfg.batch_chunks));
        bound_sum += obj.bound.value;
      }
    } catch (const numeric_error&) {
      ok = false;
    }

    if (!ok) {
      ++result.skipped_steps;
      if (++consecutive_failures >= 3) {
        lr_phi *= 0.5;
        lr_theta *= 0.5;
        consecutive_failures = 0;
      }
      recog.zero_grad();
      theta.zero_grad();
      row.bound = std::numeric_limits<double>::quiet_NaN();
      result.log.push_back(row);
      result.steps_run = step;
      continue;
    }
    consecutive_failures = 0;

    row.bound = bound_sum / double(cfg.batch_chunks);
    row.grad_norm_phi = clip_by_global_norm(recog.parameters(), cfg.clip_threshold);
    if (cfg.clip_theta) clip_by_global_norm(theta.trainable(), cfg.clip_threshold);
    auto phi_params = recog.parameters();
    adam_step(phi_params, adam_phi, lr_phi);
    auto theta_params = theta.trainable();
    adam_step(theta_params, adam_theta, lr_theta);

    if (step % cfg.eval_interval == 0) {
      double corr = validation_correlation(recog, eval_ds, cfg.val_samples,
                                           cfg.eval_bin_factor, root.child(777, step));
      row.val_correlation = corr;
      if (!std::isnan(corr) && (std::isnan(result.best_val) || corr > result.best_val)) {
        result.best_val = corr;
        result.best_step = step;
        best_phi.clear();
        for (Parameter* p : recog.parameters()) best_phi.push_back(p->value);
        evals_since_best = 0;
      } else if (!std::isnan(corr)) {
        if (++evals_since_best >= cfg.patience) stop = true;
      }
    }
    result.log.push_back(row);
    result.steps_run = step;
  }

  for (Parameter* p : recog.parameters()) result.final_phi.push_back(p->value);
  if (!best_phi.empty()) {
    auto params = recog.parameters();
    for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = best_phi[i];
  }
  return result;
}

// Optimizer-state snapshot for resumable training: one record per moment
// tensor plus the step counter.
inline void save_adam_state(const std::string& path, const AdamState& st) {
  std::vector<Parameter> recs;
  recs.emplace_back("steps", Tensor::scalar(double(st.step)));
  for (std::size_t i = 0; i < st.m.size(); ++i) {
    recs.emplace_back("m." + std::to_string(i), st.m[i]);
    recs.emplace_back("v." + std::to_string(i), st.v[i]);
  }
  std::vector<const Parameter*> ptrs;
  for (const Parameter& p : recs) ptrs.push_back(&p);
  save_parameters(path, ptrs);
}

inline AdamState load_adam_state(const std::string& path) {
  auto loaded = load_parameters(path);
  AdamState st;
  st.step = static_cast<std::size_t>(loaded.at("steps").value());
  for (std::size_t i = 0;; ++i) {
    auto m = loaded.find("m." + std::to_string(i));
    if (m == loaded.end()) break;
    st.m.push_back(m->second);
    st.v.push_back(loaded.at("v." + std::to_string(i)));
  }
  return st;
}

// Standard (non-amortized) variational inference: the same loop restricted to
// a single cell with its own fresh recognition model.
inline TrainResult train_non_amortized(const CellRecord& cell, double dt, Recognition& recog,
                                       PerCellStore& store, ModelKind kind,
                                       std::size_t ar_order, const TrainerConfig& cfg) {
  CellDataset one;
  one.dt = dt;
  one.cells.push_back(cell);
  return train(one, nullptr, recog, store, kind, ar_order, cfg);
}

}  // namespace dspk

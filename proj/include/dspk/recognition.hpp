#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "dspk/autodiff.hpp"
#include "dspk/errors.hpp"
#include "dspk/rng.hpp"
#include "dspk/signal.hpp"
#include "dspk/tensor.hpp"

namespace dspk {

// Probabilities are clamped into [kProbEps, 1-kProbEps] wherever they enter a
// log or a draw, so log-masses stay finite.
constexpr double kProbEps = 1e-7;

inline double clamp_prob(double p) {
  return std::min(1.0 - kProbEps, std::max(kProbEps, p));
}

struct PosteriorSample {
  SpikeTrain spikes;
  double log_q = 0.0;
  std::vector<double> probs;  // per-bin probabilities in effect when drawn
};

// Bernoulli log-mass of `bits` under per-bin probabilities (clamped).
inline double bernoulli_log_mass(const std::vector<std::uint8_t>& bits,
                                 const std::vector<double>& probs) {
  if (bits.size() != probs.size()) throw data_error("bernoulli_log_mass: length mismatch");
  double out = 0.0;
  for (std::size_t t = 0; t < bits.size(); ++t) {
    double pc = clamp_prob(probs[t]);
    out += bits[t] ? std::log(pc) : std::log1p(-pc);
  }
  return out;
}

// Independent Bernoulli draws per bin per sample, deterministic per rng stream.
inline std::vector<PosteriorSample> sample_factorized(const std::vector<double>& probs,
                                                      std::size_t K, Rng rng) {
  std::vector<PosteriorSample> out(K);
  for (std::size_t k = 0; k < K; ++k) {
    Rng stream = rng.child(k);
    PosteriorSample& s = out[k];
    s.probs.resize(probs.size());
    s.spikes.bits.resize(probs.size());
    for (std::size_t t = 0; t < probs.size(); ++t) {
      double pc = clamp_prob(probs[t]);
      s.probs[t] = pc;
      s.spikes.bits[t] = stream.bernoulli(pc) ? 1 : 0;
    }
    s.log_q = bernoulli_log_mass(s.spikes.bits, s.probs);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Convolutional stack: 1-D "same" convolutions with leaky-rectifier
// activations; a final 1x1-out convolution produces per-bin logits.
// ---------------------------------------------------------------------------
struct CnnConfig {
  std::size_t hidden_layers = 4;  // paper architecture explores up to 5
  std::size_t filters = 20;
  std::size_t kernel = 13;
  double leaky_slope = 0.01;
  double out_bias = 0.0;  // logit of the target initial spike probability
};

class CnnPosterior {
 public:
  CnnPosterior() = default;

  CnnPosterior(const CnnConfig& cfg, std::size_t in_channels, std::size_t out_channels,
               Rng rng, const std::string& name = "cnn")
      : cfg_(cfg), in_channels_(in_channels), out_channels_(out_channels) {
    if (cfg.kernel % 2 == 0) throw config_error("cnn kernel width must be odd");
    std::size_t cin = in_channels;
    for (std::size_t l = 0; l < cfg.hidden_layers; ++l) {
      add_layer(name + "." + std::to_string(l), cin, cfg.filters, cfg.kernel, rng.child(l));
      cin = cfg.filters;
    }
    add_layer(name + ".out", cin, out_channels, cfg.kernel, rng.child(999));
    weights_.back().b.value.fill(cfg.out_bias);
  }

  const CnnConfig& config() const { return cfg_; }
  std::size_t in_channels() const { return in_channels_; }
  std::size_t out_channels() const { return out_channels_; }

  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> out;
    for (Layer& l : weights_) {
      out.push_back(&l.w);
      out.push_back(&l.b);
    }
    return out;
  }

  // Numeric per-bin logits; input is row-major [C_in x T].
  std::vector<double> logits(const std::vector<double>& input, std::size_t T) const {
    if (input.size() != in_channels_ * T) throw data_error("cnn: input size mismatch");
    for (double v : input)
      if (!std::isfinite(v)) throw numeric_error("cnn: non-finite input");
    std::vector<double> cur = input, next;
    std::size_t cin = in_channels_;
    for (std::size_t l = 0; l < weights_.size(); ++l) {
      const Layer& L = weights_[l];
      std::size_t cout = L.b.value.numel();
      next.assign(cout * T, 0.0);
      kernels::conv1d_forward(cur.data(), cin, T, L.w.value.data.data(), cout,
                              L.w.value.dim(2), L.b.value.data.data(), next.data());
      if (l + 1 < weights_.size())
        for (double& v : next)
          if (v < 0.0) v *= cfg_.leaky_slope;
      cur.swap(next);
      cin = cout;
    }
    return cur;  // [C_out x T]
  }

  // Numeric per-bin probabilities for a single-output network.
  std::vector<double> probs(const std::vector<double>& trace) const {
    if (in_channels_ != 1 || out_channels_ != 1)
      throw config_error("probs(trace): single-channel network required");
    std::vector<double> out = logits(trace, trace.size());
    for (double& v : out) v = kernels::sigmoid(v);
    return out;
  }

  // Graph logits, [C_out x T]; input may be [T] or [C_in x T].
  Var logits_graph(Tape& tape, Var input) {
    Var cur = input;
    for (std::size_t l = 0; l < weights_.size(); ++l) {
      Layer& L = weights_[l];
      cur = tape.conv1d(cur, tape.param(L.w), tape.param(L.b));
      if (l + 1 < weights_.size()) cur = tape.leaky_relu(cur, cfg_.leaky_slope);
    }
    return cur;
  }

  // Graph probabilities as a [T] vector for single-output networks.
  Var probs_graph(Tape& tape, const std::vector<double>& trace) {
    if (out_channels_ != 1) throw config_error("probs_graph: single-output network required");
    Tensor in({in_channels_, trace.size() / in_channels_});
    in.data = trace;
    Var lg = logits_graph(tape, tape.constant(std::move(in)));
    return tape.sigmoid(tape.row(lg, 0));
  }

 private:
  struct Layer {
    Parameter w;  // [C_out, C_in, Kw]
    Parameter b;  // [C_out]
  };

  void add_layer(const std::string& name, std::size_t cin, std::size_t cout, std::size_t kw,
                 Rng rng) {
    Tensor w({cout, cin, kw});
    double bound = 1.0 / std::sqrt(double(cin * kw));
    for (double& v : w.data) v = rng.uniform(-bound, bound);
    weights_.push_back({Parameter(name + ".w", w), Parameter(name + ".b", Tensor::zeros({cout}))});
  }

  CnnConfig cfg_;
  std::size_t in_channels_ = 1, out_channels_ = 1;
  std::vector<Layer> weights_;
};

// Factorized posterior: per-bin probabilities from the CNN.
inline std::vector<double> cnn_probs(const CnnPosterior& model, const FluorescenceTrace& f) {
  return model.probs(f.values);
}

// ---------------------------------------------------------------------------
// Gated recurrent cell. Update equations (documented here because gate
// conventions differ across the literature; tests unroll these by hand):
//   r_t = sigmoid(x_t Wr + h_{t-1} Ur + br)
//   z_t = sigmoid(x_t Wz + h_{t-1} Uz + bz)
//   n_t = tanh   (x_t Wn + bn + r_t * (h_{t-1} Un + bu))
//   h_t = (1 - z_t) * n_t + z_t * h_{t-1}
// ---------------------------------------------------------------------------
struct GruCell {
  std::size_t in = 0, hidden = 0;
  Parameter Wr, Wz, Wn;      // [in x H]
  Parameter Ur, Uz, Un;      // [H x H]
  Parameter br, bz, bn, bu;  // [H]

  GruCell() = default;
  GruCell(const std::string& name, std::size_t in_dim, std::size_t hidden_dim, Rng rng)
      : in(in_dim), hidden(hidden_dim) {
    auto input_w = [&](const char* n, int salt) {
      Tensor t({in, hidden});
      double bound = 1.0 / std::sqrt(double(in));
      Rng r = rng.child(salt);
      for (double& v : t.data) v = r.uniform(-bound, bound);
      return Parameter(name + std::string(".") + n, t);
    };
    auto recur_w = [&](const char* n, int salt) {
      return Parameter(name + std::string(".") + n, orthogonal(hidden, rng.child(salt)));
    };
    auto bias = [&](const char* n) {
      return Parameter(name + std::string(".") + n, Tensor::zeros({hidden}));
    };
    Wr = input_w("Wr", 1);
    Wz = input_w("Wz", 2);
    Wn = input_w("Wn", 3);
    Ur = recur_w("Ur", 4);
    Uz = recur_w("Uz", 5);
    Un = recur_w("Un", 6);
    br = bias("br");
    bz = bias("bz");
    bn = bias("bn");
    bu = bias("bu");
  }

  std::vector<Parameter*> parameters() {
    return {&Wr, &Wz, &Wn, &Ur, &Uz, &Un, &br, &bz, &bn, &bu};
  }

  // h' given pre-computed input contributions xr = x Wr + br etc.
  void step_from_input(const double* xr, const double* xz, const double* xn, const double* h,
                       double* h_out) const {
    std::size_t H = hidden;
    thread_local std::vector<double> gr, gz, gn;
    gr.assign(H, 0.0);
    gz.assign(H, 0.0);
    gn.assign(H, 0.0);
    kernels::matmul_acc(h, Ur.value.data.data(), gr.data(), 1, H, H);
    kernels::matmul_acc(h, Uz.value.data.data(), gz.data(), 1, H, H);
    kernels::matmul_acc(h, Un.value.data.data(), gn.data(), 1, H, H);
    for (std::size_t j = 0; j < H; ++j) {
      double r = kernels::sigmoid(xr[j] + gr[j]);
      double z = kernels::sigmoid(xz[j] + gz[j]);
      double n = std::tanh(xn[j] + r * (gn[j] + bu.value.data[j]));
      h_out[j] = (1.0 - z) * n + z * h[j];
    }
  }

  // Full numeric step for a plain input vector.
  std::vector<double> step(const std::vector<double>& x, const std::vector<double>& h) const {
    std::size_t H = hidden;
    std::vector<double> xr(br.value.data), xz(bz.value.data), xn(bn.value.data), out(H);
    kernels::matmul_acc(x.data(), Wr.value.data.data(), xr.data(), 1, in, H);
    kernels::matmul_acc(x.data(), Wz.value.data.data(), xz.data(), 1, in, H);
    kernels::matmul_acc(x.data(), Wn.value.data.data(), xn.data(), 1, in, H);
    step_from_input(xr.data(), xz.data(), xn.data(), h.data(), out.data());
    return out;
  }

  // Recurrent weights bound to a tape once per sequence; re-binding inside
  // the time loop would copy the weight tensors at every step.
  struct BoundWeights {
    Var Ur, Uz, Un, bu_rep;
  };
  BoundWeights bind_recurrent(Tape& tape, std::size_t K) {
    return {tape.param(Ur), tape.param(Uz), tape.param(Un),
            tape.repeat_rows(tape.param(bu), K)};
  }

  // Graph step over K parallel rows. Xr/Xz/Xn are [K x H] input contributions
  // (bias included); H_prev is [K x H].
  Var step_graph(Tape& tape, const BoundWeights& w, Var Xr, Var Xz, Var Xn, Var H_prev) {
    Var r = tape.sigmoid(tape.add(Xr, tape.matmul(H_prev, w.Ur)));
    Var z = tape.sigmoid(tape.add(Xz, tape.matmul(H_prev, w.Uz)));
    Var gn = tape.add(tape.matmul(H_prev, w.Un), w.bu_rep);
    Var n = tape.tanh(tape.add(Xn, tape.mul(r, gn)));
    Var keep = tape.mul(z, H_prev);
    Var one_minus_z = tape.sub(tape.constant(1.0), z);
    return tape.add(tape.mul(one_minus_z, n), keep);
  }

  static Tensor orthogonal(std::size_t n, Rng rng) {
    // Gram-Schmidt on a random Gaussian matrix
    Tensor m({n, n});
    for (double& v : m.data) v = rng.gaussian();
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < i; ++j) {
        double dot = 0.0;
        for (std::size_t k = 0; k < n; ++k) dot += m.at(i, k) * m.at(j, k);
        for (std::size_t k = 0; k < n; ++k) m.at(i, k) -= dot * m.at(j, k);
      }
      double norm = 0.0;
      for (std::size_t k = 0; k < n; ++k) norm += m.at(i, k) * m.at(i, k);
      norm = std::sqrt(std::max(norm, 1e-12));
      for (std::size_t k = 0; k < n; ++k) m.at(i, k) /= norm;
    }
    return m;
  }
};

// ---------------------------------------------------------------------------
// Autoregressive posterior. A CNN extracts per-bin features; a deterministic
// backward recurrence provides future context; the stochastic forward
// recurrence consumes [features, backward state, previous probability,
// previous sampled spike] and a dense sigmoid head emits q(s_t | f, s_<t).
// ---------------------------------------------------------------------------
struct RnnConfig {
  CnnConfig features;      // feature stack (its out_bias is unused)
  std::size_t hidden = 64;
  double out_bias = 0.0;
};

class RnnPosterior {
 public:
  RnnPosterior() = default;

  RnnPosterior(const RnnConfig& cfg, Rng rng, const std::string& name = "rnn") : cfg_(cfg) {
    std::size_t F = cfg.features.filters, H = cfg.hidden;
    feat_ = FeatureStack(cfg.features, rng.child(1), name + ".feat");
    bwd_ = GruCell(name + ".bwd", F, H, rng.child(2));
    fwd_feat_ = make_input(name + ".fwd.Wf", F, 3 * H, rng.child(3));
    fwd_back_ = make_input(name + ".fwd.Wb", H, 3 * H, rng.child(4));
    fwd_prev_ = make_input(name + ".fwd.wp", 2, 3 * H, rng.child(5));
    fwd_bias_ = Parameter(name + ".fwd.b", Tensor::zeros({3 * H}));
    fwd_ = GruCell(name + ".fwd.cell", 1, H, rng.child(6));  // input weights unused
    out_h_ = make_input(name + ".out.wh", H, 1, rng.child(7));
    out_f_ = make_input(name + ".out.wf", F, 1, rng.child(8));
    out_b_ = Parameter(name + ".out.b", Tensor::scalar(cfg.out_bias));
  }

  const RnnConfig& config() const { return cfg_; }

  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> out = feat_.parameters();
    for (Parameter* p : bwd_.parameters()) out.push_back(p);
    out.push_back(&fwd_feat_);
    out.push_back(&fwd_back_);
    out.push_back(&fwd_prev_);
    out.push_back(&fwd_bias_);
    out.push_back(&fwd_.Ur);
    out.push_back(&fwd_.Uz);
    out.push_back(&fwd_.Un);
    out.push_back(&fwd_.bu);
    out.push_back(&out_h_);
    out.push_back(&out_f_);
    out.push_back(&out_b_);
    return out;
  }

  // Ancestral sampling: K paths, probabilities along each path recorded.
  std::vector<PosteriorSample> sample(const std::vector<double>& trace, std::size_t K,
                                      Rng rng) const {
    Pass pass = prepare(trace);
    std::size_t T = trace.size(), H = cfg_.hidden;
    std::vector<PosteriorSample> out(K);
    for (std::size_t k = 0; k < K; ++k) {
      out[k].probs.resize(T);
      out[k].spikes.bits.resize(T);
    }
    std::vector<Rng> streams;
    for (std::size_t k = 0; k < K; ++k) streams.push_back(rng.child(k));
    std::vector<std::vector<double>> h(K, std::vector<double>(H, 0.0));
    std::vector<double> prev_p(K, 0.0), xr(H), xz(H), xn(H), hnew(H);
    std::vector<std::uint8_t> prev_s(K, 0);
    const double* wp = fwd_prev_.value.data.data();          // row 0: prev prob
    const double* ws = fwd_prev_.value.data.data() + 3 * H;  // row 1: prev spike
    for (std::size_t t = 0; t < T; ++t) {
      const double* shared = pass.shared.data() + t * 3 * H;
      for (std::size_t k = 0; k < K; ++k) {
        for (std::size_t j = 0; j < H; ++j) {
          xr[j] = shared[j] + prev_p[k] * wp[j] + double(prev_s[k]) * ws[j];
          xz[j] = shared[H + j] + prev_p[k] * wp[H + j] + double(prev_s[k]) * ws[H + j];
          xn[j] = shared[2 * H + j] + prev_p[k] * wp[2 * H + j] +
                  double(prev_s[k]) * ws[2 * H + j];
        }
        fwd_.step_from_input(xr.data(), xz.data(), xn.data(), h[k].data(), hnew.data());
        h[k] = hnew;
        double logit = out_b_.value.value() + pass.feat_head[t];
        for (std::size_t j = 0; j < H; ++j) logit += hnew[j] * out_h_.value.data[j];
        if (!std::isfinite(logit)) throw numeric_error("rnn: non-finite hidden state");
        double pc = clamp_prob(kernels::sigmoid(logit));
        bool spike = streams[k].bernoulli(pc);
        out[k].probs[t] = pc;
        out[k].spikes.bits[t] = spike ? 1 : 0;
        prev_p[k] = pc;
        prev_s[k] = spike ? 1 : 0;
      }
    }
    for (std::size_t k = 0; k < K; ++k)
      out[k].log_q = bernoulli_log_mass(out[k].spikes.bits, out[k].probs);
    return out;
  }

  // Teacher-forced probabilities for a given spike train.
  std::vector<double> forced_probs(const std::vector<double>& trace,
                                   const std::vector<std::uint8_t>& bits) const {
    Pass pass = prepare(trace);
    std::size_t T = trace.size(), H = cfg_.hidden;
    std::vector<double> probs(T), h(H, 0.0), xr(H), xz(H), xn(H), hnew(H);
    double prev_p = 0.0, prev_s = 0.0;
    const double* wp = fwd_prev_.value.data.data();
    const double* ws = fwd_prev_.value.data.data() + 3 * H;
    for (std::size_t t = 0; t < T; ++t) {
      const double* shared = pass.shared.data() + t * 3 * H;
      for (std::size_t j = 0; j < H; ++j) {
        xr[j] = shared[j] + prev_p * wp[j] + prev_s * ws[j];
        xz[j] = shared[H + j] + prev_p * wp[H + j] + prev_s * ws[H + j];
        xn[j] = shared[2 * H + j] + prev_p * wp[2 * H + j] + prev_s * ws[2 * H + j];
      }
      fwd_.step_from_input(xr.data(), xz.data(), xn.data(), h.data(), hnew.data());
      h = hnew;
      double logit = out_b_.value.value() + pass.feat_head[t];
      for (std::size_t j = 0; j < H; ++j) logit += hnew[j] * out_h_.value.data[j];
      if (!std::isfinite(logit)) throw numeric_error("rnn: non-finite hidden state");
      probs[t] = clamp_prob(kernels::sigmoid(logit));
      prev_p = probs[t];
      prev_s = double(bits[t]);
    }
    return probs;
  }

  double log_q_of(const std::vector<double>& trace, const std::vector<std::uint8_t>& bits) const {
    return bernoulli_log_mass(bits, forced_probs(trace, bits));
  }

  // Graph teacher-forced log-mass, one row per sample: returns [K].
  // spikes: [K x T] constants.
  Var logq_graph(Tape& tape, const std::vector<double>& trace, const Tensor& spikes) {
    std::size_t K = spikes.dim(0), T = spikes.dim(1);
    if (T != trace.size()) throw data_error("rnn logq_graph: length mismatch");
    std::size_t F = cfg_.features.filters, H = cfg_.hidden;

    Tensor in({1, T});
    in.data = trace;
    Var feat = feat_.features_graph(tape, tape.constant(std::move(in)));  // [F x T]

    // deterministic backward recurrence at K=1
    std::vector<Var> back(T);
    {
      Var h = tape.constant(Tensor::zeros({1, H}));
      Var Wr = tape.param(bwd_.Wr), Wz = tape.param(bwd_.Wz), Wn = tape.param(bwd_.Wn);
      Var br = tape.reshape(tape.param(bwd_.br), {1, H});
      Var bz = tape.reshape(tape.param(bwd_.bz), {1, H});
      Var bn = tape.reshape(tape.param(bwd_.bn), {1, H});
      auto bw = bwd_.bind_recurrent(tape, 1);
      for (std::size_t tt = 0; tt < T; ++tt) {
        std::size_t t = T - 1 - tt;
        Var x = tape.reshape(tape.col(feat, t), {1, F});
        Var xr = tape.add(tape.matmul(x, Wr), br);
        Var xz = tape.add(tape.matmul(x, Wz), bz);
        Var xn = tape.add(tape.matmul(x, Wn), bn);
        h = bwd_.step_graph(tape, bw, xr, xz, xn, h);
        back[t] = h;  // [1 x H]
      }
    }

    Var Wf = tape.param(fwd_feat_);    // [F x 3H]
    Var Wb = tape.param(fwd_back_);    // [H x 3H]
    Var Wp = tape.param(fwd_prev_);    // [2 x 3H]
    Var bx = tape.reshape(tape.param(fwd_bias_), {1, 3 * H});
    Var wp_row = tape.reshape(tape.row(Wp, 0), {1, 3 * H});
    Var ws_row = tape.reshape(tape.row(Wp, 1), {1, 3 * H});
    Var wh = tape.param(out_h_);       // [H x 1]
    Var wf = tape.param(out_f_);       // [F x 1]
    Var ob = tape.param(out_b_);
    auto fw = fwd_.bind_recurrent(tape, K);

    Var H_prev = tape.constant(Tensor::zeros({K, H}));
    Var prev_p = tape.constant(Tensor::zeros({K}));
    Var logq{};
    std::vector<double> prev_bits(K, 0.0);
    for (std::size_t t = 0; t < T; ++t) {
      Var ft = tape.col(feat, t);                       // [F]
      Var shared = tape.add(
          tape.add(tape.matmul(tape.reshape(ft, {1, F}), Wf), tape.matmul(back[t], Wb)), bx);
      Var shared_rep = tape.repeat_rows(tape.reshape(shared, {std::size_t(3) * H}), K);
      Var per_sample = tape.add(
          tape.matmul(tape.reshape(prev_p, {K, 1}), wp_row),
          tape.matmul(tape.constant(Tensor({K, 1}, prev_bits)), ws_row));
      Var X = tape.add(shared_rep, per_sample);         // [K x 3H]
      Var Xr = tape.slice_cols(X, 0, H);
      Var Xz = tape.slice_cols(X, H, H);
      Var Xn = tape.slice_cols(X, 2 * H, H);
      H_prev = fwd_.step_graph(tape, fw, Xr, Xz, Xn, H_prev);

      Var head_f = tape.sum(tape.mul(ft, tape.reshape(wf, {F})));
      Var logits = tape.add(tape.add(tape.reshape(tape.matmul(H_prev, wh), {K}),
                                     head_f),
                            ob);
      Var pc = tape.clamp(tape.sigmoid(logits), kProbEps, 1.0 - kProbEps);
      Tensor s_col({K});
      for (std::size_t k = 0; k < K; ++k) s_col.data[k] = spikes.at(k, t);
      Tensor s_rest({K});
      for (std::size_t k = 0; k < K; ++k) s_rest.data[k] = 1.0 - s_col.data[k];
      Var lt = tape.add(tape.mul(tape.constant(s_col), tape.log(pc)),
                        tape.mul(tape.constant(s_rest),
                                 tape.log(tape.sub(tape.constant(1.0), pc))));
      logq = t == 0 ? lt : tape.add(logq, lt);
      prev_p = pc;
      for (std::size_t k = 0; k < K; ++k) prev_bits[k] = spikes.at(k, t);
    }
    return logq;
  }

 private:
  // hidden conv stack only (no output convolution)
  class FeatureStack {
   public:
    FeatureStack() = default;
    FeatureStack(const CnnConfig& cfg, Rng rng, const std::string& name) {
      CnnConfig inner = cfg;
      stack_ = CnnPosterior(inner, 1, cfg.filters, rng, name);
    }
    std::vector<Parameter*> parameters() { return stack_.parameters(); }
    std::vector<double> features(const std::vector<double>& trace) const {
      return stack_.logits(trace, trace.size());
    }
    Var features_graph(Tape& tape, Var input) { return stack_.logits_graph(tape, input); }

   private:
    CnnPosterior stack_;
  };

  struct Pass {
    std::vector<double> feats;      // [F x T]
    std::vector<double> shared;     // [T x 3H] input contributions minus prev terms
    std::vector<double> feat_head;  // [T] feature part of the output logit
  };

  Pass prepare(const std::vector<double>& trace) const {
    std::size_t T = trace.size(), F = cfg_.features.filters, H = cfg_.hidden;
    Pass pass;
    pass.feats = feat_.features(trace);

    // backward recurrence; state at bin t summarizes bins >= t
    std::vector<std::vector<double>> back(T);
    std::vector<double> h(H, 0.0), x(F);
    for (std::size_t tt = 0; tt < T; ++tt) {
      std::size_t t = T - 1 - tt;
      for (std::size_t c = 0; c < F; ++c) x[c] = pass.feats[c * T + t];
      h = bwd_.step(x, h);
      back[t] = h;
    }

    pass.shared.assign(T * 3 * H, 0.0);
    pass.feat_head.assign(T, 0.0);
    for (std::size_t t = 0; t < T; ++t) {
      double* row = pass.shared.data() + t * 3 * H;
      for (std::size_t j = 0; j < 3 * H; ++j) row[j] = fwd_bias_.value.data[j];
      for (std::size_t c = 0; c < F; ++c) x[c] = pass.feats[c * T + t];
      kernels::matmul_acc(x.data(), fwd_feat_.value.data.data(), row, 1, F, 3 * H);
      kernels::matmul_acc(back[t].data(), fwd_back_.value.data.data(), row, 1, H, 3 * H);
      double head = 0.0;
      for (std::size_t c = 0; c < F; ++c) head += x[c] * out_f_.value.data[c];
      pass.feat_head[t] = head;
    }
    return pass;
  }

  static Parameter make_input(const std::string& name, std::size_t rows, std::size_t cols,
                              Rng rng) {
    Tensor t({rows, cols});
    double bound = 1.0 / std::sqrt(double(rows));
    for (double& v : t.data) v = rng.uniform(-bound, bound);
    return Parameter(name, t);
  }

  RnnConfig cfg_;
  FeatureStack feat_;
  GruCell bwd_;
  GruCell fwd_;           // only Ur/Uz/Un/bu participate; input side is explicit
  Parameter fwd_feat_;    // [F x 3H]
  Parameter fwd_back_;    // [H x 3H]
  Parameter fwd_prev_;    // [2 x 3H]: rows = (previous probability, previous spike)
  Parameter fwd_bias_;    // [3H]
  Parameter out_h_;       // [H x 1]
  Parameter out_f_;       // [F x 1]
  Parameter out_b_;       // scalar
};

// ---------------------------------------------------------------------------
// Family-dispatching wrapper used by the trainer and evaluation paths.
// ---------------------------------------------------------------------------
enum class RecogKind { Factorized, Autoregressive };

inline const char* recog_name(RecogKind k) {
  return k == RecogKind::Factorized ? "ds-f" : "ds-nf";
}
inline RecogKind recog_from_name(const std::string& s) {
  if (s == "ds-f") return RecogKind::Factorized;
  if (s == "ds-nf") return RecogKind::Autoregressive;
  throw config_error("unknown recognition family: " + s);
}

// Bernoulli log-mass rows for constant spike rows against a probability
// vector node: returns [K].
inline Var factorized_logq_graph(Tape& tape, Var probs, const Tensor& spikes) {
  Var pc = tape.clamp(probs, kProbEps, 1.0 - kProbEps);
  std::size_t K = spikes.dim(0), T = spikes.dim(1);
  Tensor rest({K, T});
  for (std::size_t i = 0; i < rest.numel(); ++i) rest.data[i] = 1.0 - spikes.data[i];
  Var on = tape.matmul(tape.constant(spikes), tape.log(pc));
  Var off = tape.matmul(tape.constant(rest), tape.log(tape.sub(tape.constant(1.0), pc)));
  return tape.add(on, off);
}

class Recognition {
 public:
  Recognition() = default;
  Recognition(CnnPosterior cnn) : kind_(RecogKind::Factorized), cnn_(std::move(cnn)) {}
  Recognition(RnnPosterior rnn) : kind_(RecogKind::Autoregressive), rnn_(std::move(rnn)) {}

  RecogKind kind() const { return kind_; }
  CnnPosterior& cnn() { return cnn_; }
  RnnPosterior& rnn() { return rnn_; }

  std::vector<Parameter*> parameters() {
    return kind_ == RecogKind::Factorized ? cnn_.parameters() : rnn_.parameters();
  }

  void zero_grad() {
    for (Parameter* p : parameters()) p->zero_grad();
  }

  std::vector<PosteriorSample> sample(const std::vector<double>& trace, std::size_t K,
                                      Rng rng) const {
    if (kind_ == RecogKind::Factorized) return sample_factorized(cnn_.probs(trace), K, rng);
    return rnn_.sample(trace, K, rng);
  }

  // Factorized: Bernoulli mass under the CNN track. Autoregressive: a
  // teacher-forced pass feeding the given spikes as the sampled history.
  double log_q_of(const std::vector<double>& trace, const std::vector<std::uint8_t>& bits) const {
    if (kind_ == RecogKind::Factorized) {
      std::vector<double> p = cnn_.probs(trace);
      for (double& v : p) v = clamp_prob(v);
      return bernoulli_log_mass(bits, p);
    }
    return rnn_.log_q_of(trace, bits);
  }

  // Average per-bin probability track. The factorized track is deterministic
  // and independent of n_samples.
  std::vector<double> marginal_probs(const std::vector<double>& trace, std::size_t n_samples,
                                     Rng rng) const {
    if (kind_ == RecogKind::Factorized) return cnn_.probs(trace);
    if (n_samples < 1) throw config_error("marginal_probs: n_samples must be >= 1");
    auto samples = rnn_.sample(trace, n_samples, rng);
    std::vector<double> out(trace.size(), 0.0);
    for (const PosteriorSample& s : samples)
      for (std::size_t t = 0; t < out.size(); ++t) out[t] += s.probs[t];
    for (double& v : out) v /= double(n_samples);
    return out;
  }

  // Graph log q rows for K constant spike trains: [K].
  Var logq_graph(Tape& tape, const std::vector<double>& trace, const Tensor& spikes) {
    if (kind_ == RecogKind::Factorized)
      return factorized_logq_graph(tape, cnn_.probs_graph(tape, trace), spikes);
    return rnn_.logq_graph(tape, trace, spikes);
  }

 private:
  RecogKind kind_ = RecogKind::Factorized;
  CnnPosterior cnn_;
  RnnPosterior rnn_;
};

// ---------------------------------------------------------------------------
// Multi-channel factorized posterior for soma + spine traces. In the
// weight-shared mode one network scores the soma from (soma, pooled-spine)
// inputs and one network, shared across spines, scores each spine from
// (spine, soma, pooled-spine) inputs; pooling keeps the map equivariant
// under spine permutations. The non-shared mode is a plain multi-channel
// network over all traces at once.
// ---------------------------------------------------------------------------
struct DendriticSample {
  std::vector<SpikeTrain> channels;
  double log_q = 0.0;
};

class DendriticCnnPosterior {
 public:
  DendriticCnnPosterior() = default;
  DendriticCnnPosterior(const CnnConfig& cfg, std::size_t n_spines, bool shared_weights,
                        Rng rng)
      : n_spines_(n_spines), shared_(shared_weights) {
    if (n_spines < 1) throw config_error("dendritic posterior needs at least one spine");
    if (shared_) {
      soma_net_ = CnnPosterior(cfg, 2, 1, rng.child(1), "den.soma");
      spine_net_ = CnnPosterior(cfg, 3, 1, rng.child(2), "den.spine");
    } else {
      full_net_ = CnnPosterior(cfg, n_spines + 1, n_spines + 1, rng.child(3), "den.full");
    }
  }

  std::size_t channels() const { return n_spines_ + 1; }
  bool shared_weights() const { return shared_; }

  std::vector<Parameter*> parameters() {
    if (!shared_) return full_net_.parameters();
    std::vector<Parameter*> out = soma_net_.parameters();
    for (Parameter* p : spine_net_.parameters()) out.push_back(p);
    return out;
  }

  void zero_grad() {
    for (Parameter* p : parameters()) p->zero_grad();
  }

  // Per-channel probability tracks; channel 0 is the soma.
  std::vector<std::vector<double>> probs(const std::vector<std::vector<double>>& traces) const {
    check_traces(traces);
    std::size_t T = traces[0].size();
    std::vector<std::vector<double>> out(channels());
    if (!shared_) {
      std::vector<double> input;
      for (const auto& tr : traces) input.insert(input.end(), tr.begin(), tr.end());
      std::vector<double> lg = full_net_.logits(input, T);
      for (std::size_t ch = 0; ch < channels(); ++ch) {
        out[ch].resize(T);
        for (std::size_t t = 0; t < T; ++t) out[ch][t] = kernels::sigmoid(lg[ch * T + t]);
      }
      return out;
    }
    std::vector<double> pooled = pool_spines(traces);
    {
      std::vector<double> input = traces[0];
      input.insert(input.end(), pooled.begin(), pooled.end());
      std::vector<double> lg = soma_net_.logits(input, T);
      out[0].resize(T);
      for (std::size_t t = 0; t < T; ++t) out[0][t] = kernels::sigmoid(lg[t]);
    }
    for (std::size_t s = 0; s < n_spines_; ++s) {
      std::vector<double> input = traces[s + 1];
      input.insert(input.end(), traces[0].begin(), traces[0].end());
      input.insert(input.end(), pooled.begin(), pooled.end());
      std::vector<double> lg = spine_net_.logits(input, T);
      out[s + 1].resize(T);
      for (std::size_t t = 0; t < T; ++t) out[s + 1][t] = kernels::sigmoid(lg[t]);
    }
    return out;
  }

  // Joint factorized samples across channels and time.
  std::vector<DendriticSample> sample(const std::vector<std::vector<double>>& traces,
                                      std::size_t K, Rng rng) const {
    auto tracks = probs(traces);
    std::vector<DendriticSample> out(K);
    for (std::size_t ch = 0; ch < tracks.size(); ++ch) {
      auto per_channel = sample_factorized(tracks[ch], K, rng.child(ch));
      for (std::size_t k = 0; k < K; ++k) {
        out[k].channels.push_back(std::move(per_channel[k].spikes));
        out[k].log_q += per_channel[k].log_q;
      }
    }
    return out;
  }

  // Graph log q rows summed over channels; spikes_by_channel are [K x T].
  Var logq_graph(Tape& tape, const std::vector<std::vector<double>>& traces,
                 const std::vector<Tensor>& spikes_by_channel) {
    check_traces(traces);
    if (spikes_by_channel.size() != channels())
      throw data_error("dendritic logq_graph: channel count mismatch");
    std::size_t T = traces[0].size();
    Var total{};
    if (!shared_) {
      std::vector<double> input;
      for (const auto& tr : traces) input.insert(input.end(), tr.begin(), tr.end());
      Tensor in({channels(), T});
      in.data = input;
      Var lg = full_net_.logits_graph(tape, tape.constant(std::move(in)));
      for (std::size_t ch = 0; ch < channels(); ++ch) {
        Var p = tape.sigmoid(tape.row(lg, ch));
        Var lq = factorized_logq_graph(tape, p, spikes_by_channel[ch]);
        total = ch == 0 ? lq : tape.add(total, lq);
      }
      return total;
    }
    std::vector<double> pooled = pool_spines(traces);
    {
      Tensor in({2, T});
      std::copy(traces[0].begin(), traces[0].end(), in.data.begin());
      std::copy(pooled.begin(), pooled.end(), in.data.begin() + T);
      Var lg = soma_net_.logits_graph(tape, tape.constant(std::move(in)));
      total = factorized_logq_graph(tape, tape.sigmoid(tape.row(lg, 0)), spikes_by_channel[0]);
    }
    for (std::size_t s = 0; s < n_spines_; ++s) {
      Tensor in({3, T});
      std::copy(traces[s + 1].begin(), traces[s + 1].end(), in.data.begin());
      std::copy(traces[0].begin(), traces[0].end(), in.data.begin() + T);
      std::copy(pooled.begin(), pooled.end(), in.data.begin() + 2 * T);
      Var lg = spine_net_.logits_graph(tape, tape.constant(std::move(in)));
      Var lq = factorized_logq_graph(tape, tape.sigmoid(tape.row(lg, 0)),
                                     spikes_by_channel[s + 1]);
      total = tape.add(total, lq);
    }
    return total;
  }

 private:
  void check_traces(const std::vector<std::vector<double>>& traces) const {
    if (traces.size() != channels())
      throw data_error("dendritic posterior: expected " + std::to_string(channels()) +
                       " traces, got " + std::to_string(traces.size()));
    for (const auto& tr : traces)
      if (tr.size() != traces[0].size())
        throw data_error("dendritic posterior: channel lengths differ");
  }

  std::vector<double> pool_spines(const std::vector<std::vector<double>>& traces) const {
    std::vector<double> pooled(traces[0].size(), 0.0);
    for (std::size_t s = 1; s < traces.size(); ++s)
      for (std::size_t t = 0; t < pooled.size(); ++t) pooled[t] += traces[s][t];
    for (double& v : pooled) v /= double(n_spines_);
    return pooled;
  }

  std::size_t n_spines_ = 0;
  bool shared_ = true;
  CnnPosterior soma_net_;
  CnnPosterior spine_net_;
  CnnPosterior full_net_;
};

// Spec-named convenience: per-channel probability tracks.
inline std::vector<std::vector<double>> dendritic_probs(
    const DendriticCnnPosterior& model, const std::vector<std::vector<double>>& traces) {
  return model.probs(traces);
}

}  // namespace dspk

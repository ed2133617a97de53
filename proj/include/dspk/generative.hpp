#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dspk/autodiff.hpp"
#include "dspk/errors.hpp"
#include "dspk/rng.hpp"
#include "dspk/signal.hpp"
#include "dspk/tensor.hpp"

namespace dspk {

enum class ModelKind { Scf, Scdf, Mlphys, Dendritic };

inline const char* model_name(ModelKind k) {
  switch (k) {
    case ModelKind::Scf: return "scf";
    case ModelKind::Scdf: return "scdf";
    case ModelKind::Mlphys: return "mlphys";
    default: return "dendritic";
  }
}

inline ModelKind model_from_name(const std::string& s) {
  if (s == "scf") return ModelKind::Scf;
  if (s == "scdf") return ModelKind::Scdf;
  if (s == "mlphys") return ModelKind::Mlphys;
  if (s == "dendritic") return ModelKind::Dendritic;
  throw config_error("unknown generative model: " + s);
}

// i.i.d. Bernoulli spike prior; per-bin probability clamped into (0,1).
struct SpikePrior {
  double rate_hz = 1.0;
  double dt = 1.0 / 60.0;

  static constexpr double kEps = 1e-7;

  double bin_prob() const {
    double q = rate_hz * dt;
    return std::min(1.0 - kEps, std::max(kEps, q));
  }
};

// ---------------------------------------------------------------------------
// Parameter transforms. Gradient ascent runs in free space; non-negative
// parameters map through softplus, the dye rise time through 1 + softplus.
// ---------------------------------------------------------------------------
enum class ParamMap { Identity, Softplus, OnePlusSoftplus };

inline ParamMap param_map_of(const std::string& name) {
  // strip a dendritic suffix like "_c" / "_s"
  std::string stem = name;
  if (stem.size() > 2 && (stem.ends_with("_c") || stem.ends_with("_s")))
    stem = stem.substr(0, stem.size() - 2);
  if (stem == "sigma2" || stem == "kon" || stem == "koff" || stem == "eta" || stem == "dtot" ||
      stem == "rate")
    return ParamMap::Softplus;
  if (stem == "tau_on") return ParamMap::OnePlusSoftplus;
  return ParamMap::Identity;
}

inline double constrain_value(ParamMap m, double u) {
  switch (m) {
    case ParamMap::Softplus: return kernels::softplus(u);
    case ParamMap::OnePlusSoftplus: return 1.0 + kernels::softplus(u);
    default: return u;
  }
}

inline double unconstrain_value(ParamMap m, double v) {
  switch (m) {
    case ParamMap::Softplus:
      if (!(v > 0.0)) throw config_error("value must be positive for softplus-mapped parameter");
      return kernels::softplus_inv(v);
    case ParamMap::OnePlusSoftplus:
      if (!(v > 1.0)) throw config_error("rise time must exceed 1 bin");
      return kernels::softplus_inv(v - 1.0);
    default: return v;
  }
}

// ---------------------------------------------------------------------------
// GenParams: one cell's generative parameters, stored in free space.
// ---------------------------------------------------------------------------
struct GenParams {
  ModelKind kind = ModelKind::Scf;
  std::size_t ar_order = 1;
  std::size_t n_spines = 0;  // dendritic only
  std::vector<Parameter> values;

  Parameter& at(const std::string& name) {
    for (Parameter& p : values)
      if (p.name == name) return p;
    throw config_error(std::string(model_name(kind)) + " has no parameter " + name);
  }
  const Parameter& at(const std::string& name) const {
    return const_cast<GenParams*>(this)->at(name);
  }
  bool has(const std::string& name) const {
    for (const Parameter& p : values)
      if (p.name == name) return true;
    return false;
  }

  std::vector<Parameter*> trainable() {
    std::vector<Parameter*> out;
    for (Parameter& p : values)
      if (p.trainable) out.push_back(&p);
    return out;
  }

  void zero_grad() {
    for (Parameter& p : values) p.zero_grad();
  }

  // Natural-space scalar/vector views.
  double natural(const std::string& name) const {
    const Parameter& p = at(name);
    if (!p.value.is_scalar()) throw config_error(name + " is not scalar");
    return constrain_value(param_map_of(name), p.value.value());
  }
  std::vector<double> natural_vec(const std::string& name) const {
    const Parameter& p = at(name);
    ParamMap m = param_map_of(name);
    std::vector<double> out(p.value.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = constrain_value(m, p.value.data[i]);
    return out;
  }
  void set_natural(const std::string& name, double v) {
    Parameter& p = at(name);
    p.value.data[0] = unconstrain_value(param_map_of(name), v);
  }
  void set_natural_vec(const std::string& name, const std::vector<double>& v) {
    Parameter& p = at(name);
    if (p.value.numel() != v.size()) throw config_error(name + ": size mismatch");
    ParamMap m = param_map_of(name);
    for (std::size_t i = 0; i < v.size(); ++i) p.value.data[i] = unconstrain_value(m, v[i]);
  }
};

namespace detail {
inline Parameter scalar_param(const std::string& name, double natural) {
  return Parameter(name, Tensor::scalar(unconstrain_value(param_map_of(name), natural)));
}
inline Parameter vector_param(const std::string& name, const std::vector<double>& natural) {
  ParamMap m = param_map_of(name);
  Tensor t({natural.size()});
  for (std::size_t i = 0; i < natural.size(); ++i) t.data[i] = unconstrain_value(m, natural[i]);
  return Parameter(name, t);
}
}  // namespace detail

inline GenParams scf_params(std::vector<double> gamma, double delta, double alpha, double beta,
                            double sigma2) {
  GenParams g;
  g.kind = ModelKind::Scf;
  g.ar_order = gamma.size();
  g.values.push_back(detail::vector_param("gamma", gamma));
  g.values.push_back(detail::scalar_param("delta", delta));
  g.values.push_back(detail::scalar_param("alpha", alpha));
  g.values.push_back(detail::scalar_param("beta", beta));
  g.values.push_back(detail::scalar_param("sigma2", sigma2));
  return g;
}

inline GenParams scdf_params(std::vector<double> gamma, double delta, double alpha, double beta,
                             double sigma2, double kon, double koff, double eta, double dtot) {
  GenParams g = scf_params(std::move(gamma), delta, alpha, beta, sigma2);
  g.kind = ModelKind::Scdf;
  g.values.push_back(detail::scalar_param("kon", kon));
  g.values.push_back(detail::scalar_param("koff", koff));
  g.values.push_back(detail::scalar_param("eta", eta));
  g.values.push_back(detail::scalar_param("dtot", dtot));
  return g;
}

// delta is pinned to 1 in this model and is not a free parameter.
inline GenParams mlphys_params(std::vector<double> gamma, double alpha, double beta,
                               double sigma2, double tau_on, double omega, double c0,
                               double eta) {
  GenParams g;
  g.kind = ModelKind::Mlphys;
  g.ar_order = gamma.size();
  g.values.push_back(detail::vector_param("gamma", gamma));
  g.values.push_back(detail::scalar_param("alpha", alpha));
  g.values.push_back(detail::scalar_param("beta", beta));
  g.values.push_back(detail::scalar_param("sigma2", sigma2));
  g.values.push_back(detail::scalar_param("tau_on", tau_on));
  g.values.push_back(detail::scalar_param("omega", omega));
  g.values.push_back(detail::scalar_param("c0", c0));
  g.values.push_back(detail::scalar_param("eta", eta));
  return g;
}

// Soma channel plus n_spines spine channels; dye dynamics shared.
inline GenParams dendritic_params(std::size_t n_spines, std::vector<double> gamma_soma,
                                  double delta_soma, double alpha_soma, double beta_soma,
                                  double sigma2_soma, const std::vector<double>& gamma_spine,
                                  const std::vector<double>& delta_spine,
                                  const std::vector<double>& delta_bap,
                                  const std::vector<double>& alpha_spine,
                                  const std::vector<double>& beta_spine,
                                  const std::vector<double>& sigma2_spine, double kon,
                                  double koff, double eta, double dtot) {
  if (n_spines < 1) throw config_error("dendritic model needs at least one spine");
  std::size_t p = gamma_soma.size();
  if (gamma_spine.size() != n_spines * p || delta_spine.size() != n_spines ||
      delta_bap.size() != n_spines || alpha_spine.size() != n_spines ||
      beta_spine.size() != n_spines || sigma2_spine.size() != n_spines)
    throw config_error("dendritic parameter arrays must have one entry per spine");
  GenParams g;
  g.kind = ModelKind::Dendritic;
  g.ar_order = p;
  g.n_spines = n_spines;
  g.values.push_back(detail::vector_param("gamma_c", gamma_soma));
  g.values.push_back(detail::scalar_param("delta_c", delta_soma));
  g.values.push_back(detail::scalar_param("alpha_c", alpha_soma));
  g.values.push_back(detail::scalar_param("beta_c", beta_soma));
  g.values.push_back(detail::scalar_param("sigma2_c", sigma2_soma));
  g.values.push_back(detail::vector_param("gamma_s", gamma_spine));  // [spine*p + j]
  g.values.push_back(detail::vector_param("delta_s", delta_spine));
  g.values.push_back(detail::vector_param("delta_bap", delta_bap));
  g.values.push_back(detail::vector_param("alpha_s", alpha_spine));
  g.values.push_back(detail::vector_param("beta_s", beta_spine));
  g.values.push_back(detail::vector_param("sigma2_s", sigma2_spine));
  g.values.push_back(detail::scalar_param("kon", kon));
  g.values.push_back(detail::scalar_param("koff", koff));
  g.values.push_back(detail::scalar_param("eta", eta));
  g.values.push_back(detail::scalar_param("dtot", dtot));
  return g;
}

// Optional jointly-learned prior rate (off by default).
inline void enable_learnable_prior(GenParams& g, double rate_hz) {
  if (!g.has("rate")) g.values.push_back(detail::scalar_param("rate", rate_hz));
}

// ---------------------------------------------------------------------------
// JSON serialization (natural space, keyed by model and parameter names).
// ---------------------------------------------------------------------------
inline nlohmann::json params_to_json(const GenParams& g) {
  nlohmann::json j;
  j["model"] = model_name(g.kind);
  j["ar_order"] = g.ar_order;
  if (g.kind == ModelKind::Dendritic) j["n_spines"] = g.n_spines;
  for (const Parameter& p : g.values) {
    ParamMap m = param_map_of(p.name);
    if (p.value.rank() == 0) {
      j[p.name] = constrain_value(m, p.value.value());
    } else {
      std::vector<double> v(p.value.numel());
      for (std::size_t i = 0; i < v.size(); ++i) v[i] = constrain_value(m, p.value.data[i]);
      j[p.name] = v;
    }
  }
  return j;
}

inline GenParams params_from_json(const nlohmann::json& j) {
  ModelKind kind = model_from_name(j.at("model").get<std::string>());
  auto vec = [&](const std::string& k) { return j.at(k).get<std::vector<double>>(); };
  auto num = [&](const std::string& k) { return j.at(k).get<double>(); };
  GenParams g;
  switch (kind) {
    case ModelKind::Scf:
      g = scf_params(vec("gamma"), num("delta"), num("alpha"), num("beta"), num("sigma2"));
      break;
    case ModelKind::Scdf:
      g = scdf_params(vec("gamma"), num("delta"), num("alpha"), num("beta"), num("sigma2"),
                      num("kon"), num("koff"), num("eta"), num("dtot"));
      break;
    case ModelKind::Mlphys:
      g = mlphys_params(vec("gamma"), num("alpha"), num("beta"), num("sigma2"), num("tau_on"),
                        num("omega"), num("c0"), num("eta"));
      break;
    case ModelKind::Dendritic:
      g = dendritic_params(j.at("n_spines").get<std::size_t>(), vec("gamma_c"), num("delta_c"),
                           num("alpha_c"), num("beta_c"), num("sigma2_c"), vec("gamma_s"),
                           vec("delta_s"), vec("delta_bap"), vec("alpha_s"), vec("beta_s"),
                           vec("sigma2_s"), num("kon"), num("koff"), num("eta"), num("dtot"));
      break;
  }
  if (j.contains("rate")) enable_learnable_prior(g, j.at("rate").get<double>());
  return g;
}

// ---------------------------------------------------------------------------
// Numeric dynamics. Spike inputs are real-valued drives so superposition
// identities can be expressed directly.
// ---------------------------------------------------------------------------

// c_t = sum_j gamma_j c_{t-j} + delta * s_t, zero initial history.
// |c_t| beyond the overflow guard raises an unstable-dynamics error.
inline std::vector<double> calcium_dynamics(const std::vector<double>& drive,
                                            const std::vector<double>& gamma, double delta) {
  constexpr double kGuard = 1e6;
  std::size_t T = drive.size(), p = gamma.size();
  std::vector<double> c(T, 0.0);
  for (std::size_t t = 0; t < T; ++t) {
    double acc = delta * drive[t];
    for (std::size_t j = 0; j < p && j < t; ++j) acc += gamma[j] * c[t - j - 1];
    c[t] = acc;
    if (!(std::abs(acc) <= kGuard))
      throw numeric_error("unstable dynamics: |c| exceeded " + std::to_string(kGuard) +
                          " at bin " + std::to_string(t));
  }
  return c;
}

// d_t - d_{t-1} = kon * c_t^eta * (dtot - d_{t-1}) - koff * d_{t-1}, d pre-history 0.
inline std::vector<double> dye_dynamics_scdf(const std::vector<double>& c, double kon,
                                             double koff, double eta, double dtot) {
  std::vector<double> d(c.size());
  double prev = 0.0;
  for (std::size_t t = 0; t < c.size(); ++t) {
    double bound = kon * std::pow(std::max(c[t], 0.0), eta);
    prev = prev + bound * (dtot - prev) - koff * prev;
    d[t] = prev;
  }
  return d;
}

// d_t - d_{t-1} = 1/tau_on * (1 + omega*g_t) * (g_t/(1 + omega*g_t) - d_{t-1}),
// g_t = (c0 + c_t)^eta - c0^eta.
inline std::vector<double> dye_dynamics_mlphys(const std::vector<double>& c, double tau_on,
                                               double omega, double c0, double eta) {
  std::vector<double> d(c.size());
  double prev = 0.0;
  double c0e = std::pow(c0, eta);
  for (std::size_t t = 0; t < c.size(); ++t) {
    double g = std::pow(c0 + std::max(c[t], 0.0), eta) - c0e;
    double sat = 1.0 + omega * g;
    prev = prev + (sat / tau_on) * (g / sat - prev);
    d[t] = prev;
  }
  return d;
}

namespace detail {
inline std::vector<double> to_drive(const SpikeTrain& s) {
  return std::vector<double>(s.bits.begin(), s.bits.end());
}
}  // namespace detail

// Noiseless mean fluorescence for the somatic models.
inline std::vector<double> mean_trace(const GenParams& g, const std::vector<double>& drive) {
  std::vector<double> gamma = g.natural_vec("gamma");
  double alpha = g.natural("alpha"), beta = g.natural("beta");
  std::vector<double> x;
  switch (g.kind) {
    case ModelKind::Scf:
      x = calcium_dynamics(drive, gamma, g.natural("delta"));
      break;
    case ModelKind::Scdf:
      x = dye_dynamics_scdf(calcium_dynamics(drive, gamma, g.natural("delta")), g.natural("kon"),
                            g.natural("koff"), g.natural("eta"), g.natural("dtot"));
      break;
    case ModelKind::Mlphys:
      x = dye_dynamics_mlphys(calcium_dynamics(drive, gamma, 1.0), g.natural("tau_on"),
                              g.natural("omega"), g.natural("c0"), g.natural("eta"));
      break;
    default:
      throw config_error("mean_trace: use mean_traces_dendritic for the dendritic model");
  }
  for (double& v : x) v = alpha * v + beta;
  return x;
}

inline std::vector<double> mean_trace(const GenParams& g, const SpikeTrain& s) {
  return mean_trace(g, detail::to_drive(s));
}

// Channel 0 is the soma; channels 1..n are spines whose calcium receives the
// spine's own synaptic drive plus the bAP-scaled somatic spikes.
inline std::vector<std::vector<double>> mean_traces_dendritic(
    const GenParams& g, const std::vector<std::vector<double>>& drives) {
  if (g.kind != ModelKind::Dendritic) throw config_error("not a dendritic parameter set");
  if (drives.size() != g.n_spines + 1)
    throw data_error("dendritic drive count " + std::to_string(drives.size()) + " != channels " +
                     std::to_string(g.n_spines + 1));
  double kon = g.natural("kon"), koff = g.natural("koff");
  double eta = g.natural("eta"), dtot = g.natural("dtot");
  std::size_t p = g.ar_order;

  std::vector<std::vector<double>> out(g.n_spines + 1);
  std::vector<double> gamma_c = g.natural_vec("gamma_c");
  std::vector<double> c_soma = calcium_dynamics(drives[0], gamma_c, g.natural("delta_c"));
  {
    std::vector<double> d = dye_dynamics_scdf(c_soma, kon, koff, eta, dtot);
    double a = g.natural("alpha_c"), b = g.natural("beta_c");
    for (double& v : d) v = a * v + b;
    out[0] = std::move(d);
  }
  std::vector<double> gamma_all = g.natural_vec("gamma_s");
  std::vector<double> delta_s = g.natural_vec("delta_s"), delta_bap = g.natural_vec("delta_bap");
  std::vector<double> alpha_s = g.natural_vec("alpha_s"), beta_s = g.natural_vec("beta_s");
  for (std::size_t k = 0; k < g.n_spines; ++k) {
    std::vector<double> gamma(gamma_all.begin() + k * p, gamma_all.begin() + (k + 1) * p);
    std::vector<double> drive(drives[k + 1].size());
    for (std::size_t t = 0; t < drive.size(); ++t)
      drive[t] = delta_s[k] * drives[k + 1][t] + delta_bap[k] * drives[0][t];
    std::vector<double> c = calcium_dynamics(drive, gamma, 1.0);
    std::vector<double> d = dye_dynamics_scdf(c, kon, koff, eta, dtot);
    for (double& v : d) v = alpha_s[k] * v + beta_s[k];
    out[k + 1] = std::move(d);
  }
  return out;
}

// Mean trace plus i.i.d. Gaussian noise with the model's variance.
inline FluorescenceTrace simulate_trace(const GenParams& g, const SpikeTrain& s, Rng& rng) {
  FluorescenceTrace f;
  f.dt = s.dt;
  f.values = mean_trace(g, s);
  double sd = std::sqrt(g.natural("sigma2"));
  for (double& v : f.values) v += sd * rng.gaussian();
  return f;
}

inline std::vector<FluorescenceTrace> simulate_dendritic(
    const GenParams& g, const std::vector<SpikeTrain>& s, Rng& rng) {
  std::vector<std::vector<double>> drives;
  drives.reserve(s.size());
  for (const SpikeTrain& ch : s) drives.push_back(detail::to_drive(ch));
  auto mu = mean_traces_dendritic(g, drives);
  std::vector<double> sig2_s = g.natural_vec("sigma2_s");
  std::vector<FluorescenceTrace> out(mu.size());
  for (std::size_t ch = 0; ch < mu.size(); ++ch) {
    double sd = std::sqrt(ch == 0 ? g.natural("sigma2_c") : sig2_s[ch - 1]);
    out[ch].dt = s[ch].dt;
    out[ch].channel = static_cast<int>(ch);
    out[ch].values = std::move(mu[ch]);
    for (double& v : out[ch].values) v += sd * rng.gaussian();
  }
  return out;
}

// ---------------------------------------------------------------------------
// Numeric log densities
// ---------------------------------------------------------------------------
constexpr double kLog2Pi = 1.8378770664093454835606594728112;

inline double gaussian_ll(const std::vector<double>& f, const std::vector<double>& mu,
                          double sigma2) {
  if (f.size() != mu.size()) throw data_error("log-likelihood: length mismatch");
  double ssr = 0.0;
  for (std::size_t t = 0; t < f.size(); ++t) {
    double r = f[t] - mu[t];
    ssr += r * r;
  }
  return -0.5 * static_cast<double>(f.size()) * (kLog2Pi + std::log(sigma2)) -
         ssr / (2.0 * sigma2);
}

inline double log_likelihood(const GenParams& g, const SpikeTrain& s,
                             const std::vector<double>& f) {
  return gaussian_ll(f, mean_trace(g, s), g.natural("sigma2"));
}

inline double log_prior(const SpikeTrain& s, const SpikePrior& prior) {
  double q = prior.bin_prob();
  double lq = std::log(q), l1q = std::log1p(-q);
  double out = 0.0;
  for (auto b : s.bits) out += b ? lq : l1q;
  return out;
}

inline double log_joint(const GenParams& g, const SpikeTrain& s, const std::vector<double>& f,
                        const SpikePrior& prior) {
  SpikePrior pr = prior;
  if (g.has("rate")) pr.rate_hz = g.natural("rate");
  return log_prior(s, pr) + log_likelihood(g, s, f);
}

inline double log_joint_dendritic(const GenParams& g, const std::vector<SpikeTrain>& s,
                                  const std::vector<std::vector<double>>& f,
                                  const std::vector<SpikePrior>& priors) {
  if (s.size() != g.n_spines + 1 || f.size() != s.size() || priors.size() != s.size())
    throw data_error("dendritic log-joint: channel count mismatch");
  std::vector<std::vector<double>> drives;
  for (const SpikeTrain& ch : s) drives.push_back(detail::to_drive(ch));
  auto mu = mean_traces_dendritic(g, drives);
  std::vector<double> sig2_s = g.natural_vec("sigma2_s");
  double out = 0.0;
  for (std::size_t ch = 0; ch < s.size(); ++ch) {
    out += log_prior(s[ch], priors[ch]);
    out += gaussian_ll(f[ch], mu[ch], ch == 0 ? g.natural("sigma2_c") : sig2_s[ch - 1]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Graph construction: per-sample log-joint vector for a batch of K spike
// trains against one trace, differentiable in the unconstrained parameters.
// ---------------------------------------------------------------------------
namespace detail {

inline Var constrained_node(Tape& tape, GenParams& g, const std::string& name) {
  Var u = tape.param(g.at(name));
  switch (param_map_of(name)) {
    case ParamMap::Softplus: return tape.softplus(u);
    case ParamMap::OnePlusSoftplus: return tape.add_const(tape.softplus(u), 1.0);
    default: return u;
  }
}

// AR calcium recursion over K parallel sample rows. `drive` holds one
// constant K-vector per bin (already scaled by per-sample spikes).
inline std::vector<Var> calcium_graph(Tape& tape, const std::vector<Var>& drive, Var gamma,
                                      std::size_t p, Var delta) {
  std::vector<Var> gj(p);
  for (std::size_t j = 0; j < p; ++j) gj[j] = tape.slice(gamma, j, 1);
  std::vector<Var> c(drive.size());
  for (std::size_t t = 0; t < drive.size(); ++t) {
    Var acc = tape.mul(delta, drive[t]);
    for (std::size_t j = 0; j < p && j + 1 <= t; ++j)
      acc = tape.add(acc, tape.mul(gj[j], c[t - j - 1]));
    c[t] = acc;
  }
  return c;
}

// Calcium is clamped at zero before the Hill power, matching the numeric
// path; transiently negative calcium can occur mid-optimization.
inline Var nonneg(Tape& tape, Var v) { return tape.clamp(v, 0.0, 1e9); }

inline std::vector<Var> dye_scdf_graph(Tape& tape, const std::vector<Var>& c, Var kon, Var koff,
                                       Var eta, Var dtot) {
  std::vector<Var> d(c.size());
  Var prev{};
  for (std::size_t t = 0; t < c.size(); ++t) {
    Var bound = tape.mul(kon, tape.pow(nonneg(tape, c[t]), eta));
    Var cur;
    if (t == 0) {
      cur = tape.mul(bound, dtot);
    } else {
      // d_{t-1} + bound*(dtot - d_{t-1}) - koff*d_{t-1}
      cur = tape.add(prev, tape.sub(tape.mul(bound, tape.sub(dtot, prev)), tape.mul(koff, prev)));
    }
    d[t] = prev = cur;
  }
  return d;
}

inline std::vector<Var> dye_mlphys_graph(Tape& tape, const std::vector<Var>& c, Var tau_on,
                                         Var omega, Var c0, Var eta) {
  Var c0e = tape.pow(c0, eta);
  std::vector<Var> d(c.size());
  Var prev{};
  for (std::size_t t = 0; t < c.size(); ++t) {
    Var g = tape.sub(tape.pow(tape.add(c0, nonneg(tape, c[t])), eta), c0e);
    Var sat = tape.add_const(tape.mul(omega, g), 1.0);
    Var target = tape.div(g, sat);
    Var step = tape.div(sat, tau_on);
    Var cur = t == 0 ? tape.mul(step, target)
                     : tape.add(prev, tape.mul(step, tape.sub(target, prev)));
    d[t] = prev = cur;
  }
  return d;
}

// Bernoulli prior over K sample rows given constant per-sample spike counts.
inline Var prior_graph(Tape& tape, Var q, const Tensor& spike_counts, double T) {
  Var lq = tape.log(q);
  Var l1q = tape.log(tape.sub(tape.constant(1.0), q));
  Tensor rest = spike_counts;
  for (double& v : rest.data) v = T - v;
  return tape.add(tape.mul(tape.constant(spike_counts), lq), tape.mul(tape.constant(rest), l1q));
}

// Gaussian log-likelihood across K rows with the first `burn_in` bins of the
// residual excluded (chunk-boundary transient).
inline Var gaussian_ll_graph(Tape& tape, const std::vector<Var>& mu,
                             const std::vector<double>& f, Var sigma2, std::size_t burn_in) {
  std::size_t T = f.size();
  if (burn_in >= T) throw config_error("burn-in must be smaller than the chunk length");
  Var ssr{};
  for (std::size_t t = burn_in; t < T; ++t) {
    Var r = tape.sub(mu[t], tape.constant(f[t]));
    Var r2 = tape.mul(r, r);
    ssr = t == burn_in ? r2 : tape.add(ssr, r2);
  }
  double Tl = static_cast<double>(T - burn_in);
  Var norm = tape.scale(tape.add_const(tape.log(sigma2), kLog2Pi), -0.5 * Tl);
  return tape.add(norm, tape.div(ssr, tape.scale(sigma2, -2.0)));
}

// Converts spike rows [K x T] into per-bin constant K-vectors.
inline std::vector<Var> drive_columns(Tape& tape, const Tensor& spikes) {
  std::size_t K = spikes.dim(0), T = spikes.dim(1);
  std::vector<Var> cols(T);
  for (std::size_t t = 0; t < T; ++t) {
    Tensor col({K});
    for (std::size_t k = 0; k < K; ++k) col.data[k] = spikes.at(k, t);
    cols[t] = tape.constant(std::move(col));
  }
  return cols;
}

inline Tensor row_counts(const Tensor& spikes) {
  std::size_t K = spikes.dim(0), T = spikes.dim(1);
  Tensor counts({K});
  for (std::size_t k = 0; k < K; ++k) {
    double n = 0;
    for (std::size_t t = 0; t < T; ++t) n += spikes.at(k, t);
    counts.data[k] = n;
  }
  return counts;
}

inline Var prior_prob_node(Tape& tape, GenParams& g, const SpikePrior& prior) {
  if (g.has("rate")) {
    Var rate = constrained_node(tape, g, "rate");
    return tape.clamp(tape.scale(rate, prior.dt), SpikePrior::kEps, 1.0 - SpikePrior::kEps);
  }
  return tape.constant(prior.bin_prob());
}

}  // namespace detail

// spikes: [K x T] 0/1 rows. Returns the K-vector of log p(s^k, f).
inline Var build_log_joint(Tape& tape, GenParams& g, const Tensor& spikes,
                           const std::vector<double>& f, const SpikePrior& prior,
                           std::size_t burn_in = 0) {
  if (g.kind == ModelKind::Dendritic)
    throw config_error("use build_log_joint_dendritic for the dendritic model");
  if (spikes.rank() != 2 || spikes.dim(1) != f.size())
    throw data_error("build_log_joint: spikes must be [K x T] aligned with the trace");

  std::vector<Var> drive = detail::drive_columns(tape, spikes);
  Var gamma = tape.param(g.at("gamma"));
  Var alpha = detail::constrained_node(tape, g, "alpha");
  Var beta = detail::constrained_node(tape, g, "beta");
  Var sigma2 = detail::constrained_node(tape, g, "sigma2");

  std::vector<Var> x;
  if (g.kind == ModelKind::Scf) {
    x = detail::calcium_graph(tape, drive, gamma, g.ar_order,
                              detail::constrained_node(tape, g, "delta"));
  } else if (g.kind == ModelKind::Scdf) {
    auto c = detail::calcium_graph(tape, drive, gamma, g.ar_order,
                                   detail::constrained_node(tape, g, "delta"));
    x = detail::dye_scdf_graph(tape, c, detail::constrained_node(tape, g, "kon"),
                               detail::constrained_node(tape, g, "koff"),
                               detail::constrained_node(tape, g, "eta"),
                               detail::constrained_node(tape, g, "dtot"));
  } else {
    auto c = detail::calcium_graph(tape, drive, gamma, g.ar_order, tape.constant(1.0));
    x = detail::dye_mlphys_graph(tape, c, detail::constrained_node(tape, g, "tau_on"),
                                 detail::constrained_node(tape, g, "omega"),
                                 tape.param(g.at("c0")),
                                 detail::constrained_node(tape, g, "eta"));
  }
  std::vector<Var> mu(x.size());
  for (std::size_t t = 0; t < x.size(); ++t) mu[t] = tape.add(tape.mul(alpha, x[t]), beta);

  Var ll = detail::gaussian_ll_graph(tape, mu, f, sigma2, burn_in);
  Var q = detail::prior_prob_node(tape, g, prior);
  Var lp = detail::prior_graph(tape, q, detail::row_counts(spikes), double(spikes.dim(1)));
  return tape.add(ll, lp);
}

// spikes_by_channel[0] is the soma, then one [K x T] per spine.
inline Var build_log_joint_dendritic(Tape& tape, GenParams& g,
                                     const std::vector<Tensor>& spikes_by_channel,
                                     const std::vector<std::vector<double>>& f_by_channel,
                                     const std::vector<SpikePrior>& priors,
                                     std::size_t burn_in = 0) {
  if (g.kind != ModelKind::Dendritic) throw config_error("not a dendritic parameter set");
  std::size_t channels = g.n_spines + 1;
  if (spikes_by_channel.size() != channels || f_by_channel.size() != channels ||
      priors.size() != channels)
    throw data_error("dendritic log-joint graph: channel count mismatch");
  std::size_t p = g.ar_order;

  Var kon = detail::constrained_node(tape, g, "kon");
  Var koff = detail::constrained_node(tape, g, "koff");
  Var eta = detail::constrained_node(tape, g, "eta");
  Var dtot = detail::constrained_node(tape, g, "dtot");

  Var gamma_c = tape.param(g.at("gamma_c"));
  Var gamma_s = tape.param(g.at("gamma_s"));
  Var delta_s = tape.param(g.at("delta_s"));
  Var delta_bap = tape.param(g.at("delta_bap"));
  Var alpha_s = tape.param(g.at("alpha_s"));
  Var beta_s = tape.param(g.at("beta_s"));
  Var usigma2_s = tape.param(g.at("sigma2_s"));

  std::vector<Var> soma_drive = detail::drive_columns(tape, spikes_by_channel[0]);
  auto c_soma = detail::calcium_graph(tape, soma_drive, gamma_c, p,
                                      detail::constrained_node(tape, g, "delta_c"));
  auto d_soma = detail::dye_scdf_graph(tape, c_soma, kon, koff, eta, dtot);
  Var alpha_c = detail::constrained_node(tape, g, "alpha_c");
  Var beta_c = detail::constrained_node(tape, g, "beta_c");
  std::vector<Var> mu(d_soma.size());
  for (std::size_t t = 0; t < mu.size(); ++t)
    mu[t] = tape.add(tape.mul(alpha_c, d_soma[t]), beta_c);
  Var total = detail::gaussian_ll_graph(tape, mu, f_by_channel[0],
                                        detail::constrained_node(tape, g, "sigma2_c"), burn_in);
  total = tape.add(total,
                   detail::prior_graph(tape, tape.constant(priors[0].bin_prob()),
                                       detail::row_counts(spikes_by_channel[0]),
                                       double(spikes_by_channel[0].dim(1))));

  for (std::size_t s = 0; s < g.n_spines; ++s) {
    std::vector<Var> spine_cols = detail::drive_columns(tape, spikes_by_channel[s + 1]);
    Var ds = tape.slice(delta_s, s, 1);
    Var db = tape.slice(delta_bap, s, 1);
    std::vector<Var> drive(spine_cols.size());
    for (std::size_t t = 0; t < drive.size(); ++t)
      drive[t] = tape.add(tape.mul(ds, spine_cols[t]), tape.mul(db, soma_drive[t]));
    Var gs = tape.slice(gamma_s, s * p, p);
    auto c = detail::calcium_graph(tape, drive, gs, p, tape.constant(1.0));
    auto d = detail::dye_scdf_graph(tape, c, kon, koff, eta, dtot);
    Var as = tape.slice(alpha_s, s, 1);
    Var bs = tape.slice(beta_s, s, 1);
    std::vector<Var> mus(d.size());
    for (std::size_t t = 0; t < d.size(); ++t) mus[t] = tape.add(tape.mul(as, d[t]), bs);
    Var sig2 = tape.softplus(tape.slice(usigma2_s, s, 1));
    Var ll = detail::gaussian_ll_graph(tape, mus, f_by_channel[s + 1],
                                       tape.reshape(sig2, {}), burn_in);
    total = tape.add(total, ll);
    total = tape.add(total,
                     detail::prior_graph(tape, tape.constant(priors[s + 1].bin_prob()),
                                         detail::row_counts(spikes_by_channel[s + 1]),
                                         double(spikes_by_channel[s + 1].dim(1))));
  }
  return total;
}

// ---------------------------------------------------------------------------
// Exact enumeration oracle for short traces (T <= ~20). Train index encodes
// the spike train bitmask with bit t = spike in bin t.
// ---------------------------------------------------------------------------
inline double logsumexp(const std::vector<double>& v) {
  double m = -std::numeric_limits<double>::infinity();
  for (double x : v) m = std::max(m, x);
  if (!std::isfinite(m)) return m;
  double acc = 0.0;
  for (double x : v) acc += std::exp(x - m);
  return m + std::log(acc);
}

inline SpikeTrain train_from_mask(std::uint64_t mask, std::size_t T, double dt) {
  SpikeTrain s;
  s.dt = dt;
  s.bits.resize(T);
  for (std::size_t t = 0; t < T; ++t) s.bits[t] = (mask >> t) & 1u;
  return s;
}

inline std::vector<double> all_log_joints(const GenParams& g, const std::vector<double>& f,
                                          double dt, const SpikePrior& prior) {
  std::size_t T = f.size();
  if (T > 20) throw config_error("enumeration oracle limited to T <= 20");
  std::vector<double> out(std::size_t(1) << T);
  for (std::uint64_t mask = 0; mask < out.size(); ++mask)
    out[mask] = log_joint(g, train_from_mask(mask, T, dt), f, prior);
  return out;
}

inline double exact_log_evidence(const GenParams& g, const std::vector<double>& f, double dt,
                                 const SpikePrior& prior) {
  return logsumexp(all_log_joints(g, f, dt, prior));
}

inline std::vector<double> exact_posterior(const GenParams& g, const std::vector<double>& f,
                                           double dt, const SpikePrior& prior) {
  std::vector<double> lj = all_log_joints(g, f, dt, prior);
  double lz = logsumexp(lj);
  for (double& v : lj) v = std::exp(v - lz);
  return lj;
}

// ---------------------------------------------------------------------------
// Simulation heterogeneity: positive parameters scale by exp(N(0, spread^2)),
// baselines move additively by N(0, (spread*|beta|)^2). AR coefficients are
// perturbed through their decay time so the dynamics stay stable.
// ---------------------------------------------------------------------------
inline void perturb_params(GenParams& g, Rng& rng, double spread = 0.1) {
  for (Parameter& p : g.values) {
    std::string stem = p.name;
    if (stem.size() > 2 && (stem.ends_with("_c") || stem.ends_with("_s")))
      stem = stem.substr(0, stem.size() - 2);
    ParamMap m = param_map_of(p.name);
    for (std::size_t i = 0; i < p.value.numel(); ++i) {
      double v = constrain_value(m, p.value.data[i]);
      if (stem == "beta") {
        v += rng.gaussian(0.0, spread * std::abs(v));
      } else if (stem == "gamma") {
        if (v > 0.0 && v < 1.0) {
          double tau = -1.0 / std::log(v);
          v = std::exp(-1.0 / (tau * std::exp(rng.gaussian(0.0, spread))));
        }
      } else if (v > 0.0) {
        v *= std::exp(rng.gaussian(0.0, spread));
      }
      p.value.data[i] = unconstrain_value(m, v);
    }
  }
}

// ---------------------------------------------------------------------------
// Moment-based initialization from a raw trace: baseline from a low
// percentile, gain from the amplitude range, AR coefficient from the
// autocorrelation decay, noise from first differences.
// ---------------------------------------------------------------------------
inline GenParams init_params_from_trace(ModelKind kind, const std::vector<double>& f,
                                        std::size_t ar_order) {
  std::vector<double> sorted = f;
  std::sort(sorted.begin(), sorted.end());
  auto quantile = [&](double q) {
    return sorted[std::min(sorted.size() - 1,
                           static_cast<std::size_t>(q * double(sorted.size())))];
  };
  double beta = quantile(0.10);
  double amp = std::max(quantile(0.99) - beta, 1e-3);

  double mean = 0.0;
  for (double v : f) mean += v;
  mean /= double(f.size());
  auto acf = [&](std::size_t lag) {
    double num = 0.0, den = 0.0;
    for (std::size_t t = 0; t + lag < f.size(); ++t)
      num += (f[t] - mean) * (f[t + lag] - mean);
    for (double v : f) den += (v - mean) * (v - mean);
    return den > 0.0 ? num / den : 0.0;
  };
  // ratio of consecutive lags cancels the white-noise inflation at lag 0
  double a1 = acf(1), a2 = acf(2);
  double gamma1 = (a1 > 1e-6) ? std::clamp(a2 / a1, 0.5, 0.995) : 0.9;
  std::vector<double> gamma(ar_order, 0.0);
  gamma[0] = gamma1;

  double mad = 0.0;
  {
    std::vector<double> diffs(f.size() - 1);
    for (std::size_t t = 0; t + 1 < f.size(); ++t) diffs[t] = std::abs(f[t + 1] - f[t]);
    std::nth_element(diffs.begin(), diffs.begin() + diffs.size() / 2, diffs.end());
    mad = diffs[diffs.size() / 2];
  }
  double sigma = std::max(1.4826 * mad / std::sqrt(2.0), 1e-3);

  // amplitude deliberately biased low: oversized event amplitudes make early
  // posterior samples look implausible and collapse the recognition model
  switch (kind) {
    case ModelKind::Scf:
      return scf_params(gamma, 1.0, 0.5 * amp, beta, sigma * sigma);
    case ModelKind::Scdf:
      // the dye saturates near dtot, so the amplitude range maps to alpha*dtot
      return scdf_params(gamma, 1.0, amp / 3.0, beta, sigma * sigma, 0.12, 0.12, 1.2, 4.0);
    case ModelKind::Mlphys:
      return mlphys_params(gamma, amp, beta, sigma * sigma, 3.0, 0.1, 1.0, 1.5);
    default:
      throw config_error("moment initialization covers the somatic models only");
  }
}

}  // namespace dspk

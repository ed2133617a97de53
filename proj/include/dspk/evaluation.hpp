#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "dspk/errors.hpp"
#include "dspk/recognition.hpp"
#include "dspk/rng.hpp"
#include "dspk/signal.hpp"

namespace dspk {

// ---------------------------------------------------------------------------
// Rebinning: sums over non-overlapping windows of `factor` bins; a trailing
// partial window is dropped. Spike counts and expected counts both sum.
// ---------------------------------------------------------------------------
inline std::vector<double> rebin(const std::vector<double>& x, std::size_t factor) {
  if (factor < 1) throw config_error("rebin: factor must be >= 1");
  if (factor == 1) return x;
  std::vector<double> out;
  out.reserve(x.size() / factor);
  for (std::size_t start = 0; start + factor <= x.size(); start += factor) {
    double acc = 0.0;
    for (std::size_t i = 0; i < factor; ++i) acc += x[start + i];
    out.push_back(acc);
  }
  return out;
}

// Nearest integer rebin factor mapping a native bin width onto a target
// evaluation width (e.g. 40 ms on 16.6 ms data -> factor 2).
inline std::size_t rebin_factor_for(double dt, double target_seconds) {
  if (dt <= 0.0 || target_seconds <= 0.0) throw config_error("rebin_factor_for: bad widths");
  double f = std::round(target_seconds / dt);
  return f < 1.0 ? 1 : static_cast<std::size_t>(f);
}

// ---------------------------------------------------------------------------
// Pearson correlation with an explicit undefined flag: a zero-variance input
// yields no correlation rather than a silent zero.
// ---------------------------------------------------------------------------
struct CorrResult {
  double value = 0.0;
  bool defined = false;
};

inline CorrResult pearson(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.empty()) throw data_error("pearson: length mismatch");
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= double(a.size());
  mb /= double(a.size());
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa <= 0.0 || sbb <= 0.0) return {0.0, false};
  return {sab / std::sqrt(saa * sbb), true};
}

// Correlation between predicted rates and a true spike train after rebinning.
inline CorrResult cross_correlation(const std::vector<double>& pred, const SpikeTrain& truth,
                                    std::size_t bin_factor) {
  if (pred.size() != truth.size()) throw data_error("cross_correlation: length mismatch");
  std::vector<double> t(truth.bits.begin(), truth.bits.end());
  return pearson(rebin(pred, bin_factor), rebin(t, bin_factor));
}

// ---------------------------------------------------------------------------
// Amortized inference: marginal rates plus posterior samples per trace. No
// parameter updates happen here.
// ---------------------------------------------------------------------------
struct InferResult {
  std::vector<std::vector<double>> rates;                // per trace
  std::vector<std::vector<PosteriorSample>> samples;     // per trace, n_samples each
  double seconds_per_trace = 0.0;
};

inline InferResult infer(const Recognition& recog,
                         const std::vector<const FluorescenceTrace*>& traces,
                         std::size_t n_samples, Rng rng, bool draw_samples = true) {
  if (n_samples < 1) throw config_error("infer: n_samples must be >= 1");
  InferResult out;
  auto start = std::chrono::steady_clock::now();
  for (std::size_t i = 0; i < traces.size(); ++i) {
    Rng stream = rng.child(i);
    out.rates.push_back(recog.marginal_probs(traces[i]->values, n_samples, stream.child(0)));
    if (draw_samples)
      out.samples.push_back(recog.sample(traces[i]->values, n_samples, stream.child(1)));
    else
      out.samples.emplace_back();
  }
  auto stop = std::chrono::steady_clock::now();
  out.seconds_per_trace =
      traces.empty() ? 0.0
                     : std::chrono::duration<double>(stop - start).count() / double(traces.size());
  return out;
}

// ---------------------------------------------------------------------------
// Spikes sampled per isolated true spike: for each true spike with no
// neighbor closer than 2*window and each posterior sample, count sampled
// spikes within +-window bins. Crowded true spikes are excluded and counted.
// ---------------------------------------------------------------------------
struct SpikeCountHistogram {
  std::vector<std::size_t> counts;  // index = sampled spikes near one true spike
  std::size_t isolated = 0;
  std::size_t excluded = 0;

  double total() const {
    double n = 0;
    for (std::size_t c : counts) n += double(c);
    return n;
  }
  double mean() const {
    double n = total(), s = 0;
    for (std::size_t i = 0; i < counts.size(); ++i) s += double(i) * double(counts[i]);
    return n > 0 ? s / n : 0.0;
  }
  double variance() const {
    double n = total(), mu = mean(), s = 0;
    for (std::size_t i = 0; i < counts.size(); ++i)
      s += (double(i) - mu) * (double(i) - mu) * double(counts[i]);
    return n > 0 ? s / n : 0.0;
  }

  void merge(const SpikeCountHistogram& o) {
    if (o.counts.size() > counts.size()) counts.resize(o.counts.size(), 0);
    for (std::size_t i = 0; i < o.counts.size(); ++i) counts[i] += o.counts[i];
    isolated += o.isolated;
    excluded += o.excluded;
  }
};

inline SpikeCountHistogram spikes_per_true_spike(const std::vector<PosteriorSample>& samples,
                                                 const SpikeTrain& truth, std::size_t window) {
  SpikeCountHistogram out;
  std::vector<std::size_t> spikes;
  for (std::size_t t = 0; t < truth.size(); ++t)
    if (truth.bits[t]) spikes.push_back(t);
  for (std::size_t i = 0; i < spikes.size(); ++i) {
    bool crowded = (i > 0 && spikes[i] - spikes[i - 1] < 2 * window) ||
                   (i + 1 < spikes.size() && spikes[i + 1] - spikes[i] < 2 * window);
    if (crowded) {
      ++out.excluded;
      continue;
    }
    ++out.isolated;
    std::size_t lo = spikes[i] >= window ? spikes[i] - window : 0;
    std::size_t hi = std::min(truth.size() - 1, spikes[i] + window);
    for (const PosteriorSample& s : samples) {
      std::size_t n = 0;
      for (std::size_t t = lo; t <= hi; ++t) n += s.spikes.bits[t];
      if (n >= out.counts.size()) out.counts.resize(n + 1, 0);
      ++out.counts[n];
    }
  }
  return out;
}

// Log-mass of the true spike train under the approximate posterior.
inline double posterior_ll_of_truth(const Recognition& recog, const FluorescenceTrace& f,
                                    const SpikeTrain& truth) {
  if (f.size() != truth.size()) throw data_error("posterior_ll_of_truth: length mismatch");
  return recog.log_q_of(f.values, truth.bits);
}

// Static block partition across worker threads; n_threads <= 1 runs inline.
// Work items must be independent (results written to distinct slots).
template <typename F>
void parallel_for(std::size_t n, std::size_t n_threads, F&& body) {
  if (n_threads <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::size_t workers = std::min(n_threads, n);
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      for (std::size_t i = w; i < n; i += workers) body(i);
    });
  }
  for (std::thread& t : pool) t.join();
}

// ---------------------------------------------------------------------------
// Evaluation report
// ---------------------------------------------------------------------------
struct EvalReport {
  struct PerCell {
    std::string id;
    double correlation = 0.0;
    bool corr_defined = false;
    double log_q_truth = 0.0;
    bool has_truth = false;
  };
  std::vector<PerCell> cells;
  double mean_correlation = 0.0;
  double se_correlation = 0.0;
  std::size_t n_correlated = 0;
  SpikeCountHistogram histogram;
  std::size_t bin_factor = 1;
  std::size_t hist_window = 3;
  std::size_t n_samples = 30;
  double seconds_per_trace = 0.0;
  std::string note;
};

inline EvalReport evaluate(const Recognition& recog, const CellDataset& ds,
                           std::size_t n_samples, std::size_t bin_factor,
                           std::size_t hist_window, Rng rng, std::size_t threads = 1) {
  EvalReport report;
  report.bin_factor = bin_factor;
  report.hist_window = hist_window;
  report.n_samples = n_samples;

  struct CellOutcome {
    EvalReport::PerCell row;
    SpikeCountHistogram hist;
    double seconds = 0.0;
    std::size_t traces = 0;
  };
  std::vector<CellOutcome> outcomes(ds.cells.size());

  // cells are independent; RNG streams are keyed by (cell, trace), so the
  // result does not depend on the thread count
  parallel_for(ds.cells.size(), threads, [&](std::size_t ci) {
    const CellRecord& cell = ds.cells[ci];
    CellOutcome& out = outcomes[ci];
    out.row.id = cell.id;
    double corr_sum = 0.0, lq_sum = 0.0;
    std::size_t corr_n = 0, lq_n = 0;
    for (std::size_t ti = 0; ti < cell.traces.size(); ++ti) {
      std::vector<const FluorescenceTrace*> one = {&cell.traces[ti]};
      auto inf = infer(recog, one, n_samples, rng.child(ci, ti), cell.spikes[ti].has_value());
      out.seconds += inf.seconds_per_trace;
      ++out.traces;
      if (cell.spikes[ti]) {
        auto corr = cross_correlation(inf.rates[0], *cell.spikes[ti], bin_factor);
        if (corr.defined) {
          corr_sum += corr.value;
          ++corr_n;
        }
        lq_sum += posterior_ll_of_truth(recog, cell.traces[ti], *cell.spikes[ti]);
        ++lq_n;
        out.hist.merge(spikes_per_true_spike(inf.samples[0], *cell.spikes[ti], hist_window));
      }
    }
    if (corr_n) {
      out.row.correlation = corr_sum / double(corr_n);
      out.row.corr_defined = true;
    }
    if (lq_n) {
      out.row.log_q_truth = lq_sum / double(lq_n);
      out.row.has_truth = true;
    }
  });

  double sum = 0.0, sumsq = 0.0, seconds = 0.0;
  std::size_t n_traces = 0;
  for (CellOutcome& out : outcomes) {
    if (out.row.corr_defined) {
      sum += out.row.correlation;
      sumsq += out.row.correlation * out.row.correlation;
      ++report.n_correlated;
    }
    report.histogram.merge(out.hist);
    seconds += out.seconds;
    n_traces += out.traces;
    report.cells.push_back(std::move(out.row));
  }
  if (report.n_correlated) {
    double n = double(report.n_correlated);
    report.mean_correlation = sum / n;
    double var = std::max(0.0, sumsq / n - report.mean_correlation * report.mean_correlation);
    report.se_correlation = n > 1 ? std::sqrt(var / (n - 1.0)) : 0.0;
  }
  report.seconds_per_trace = n_traces ? seconds / double(n_traces) : 0.0;
  return report;
}

inline nlohmann::json report_to_json(const EvalReport& r) {
  nlohmann::json j;
  j["bin_factor"] = r.bin_factor;
  j["hist_window"] = r.hist_window;
  j["n_samples"] = r.n_samples;
  j["seconds_per_trace"] = r.seconds_per_trace;
  j["mean_correlation"] = r.n_correlated ? nlohmann::json(r.mean_correlation) : nlohmann::json();
  j["se_correlation"] = r.n_correlated ? nlohmann::json(r.se_correlation) : nlohmann::json();
  j["n_correlated_cells"] = r.n_correlated;
  if (!r.note.empty()) j["note"] = r.note;
  j["cells"] = nlohmann::json::array();
  for (const auto& c : r.cells) {
    nlohmann::json jc;
    jc["id"] = c.id;
    jc["correlation"] = c.corr_defined ? nlohmann::json(c.correlation) : nlohmann::json();
    jc["log_q_truth"] = c.has_truth ? nlohmann::json(c.log_q_truth) : nlohmann::json();
    j["cells"].push_back(jc);
  }
  j["spikes_per_true_spike"] = {{"counts", r.histogram.counts},
                                {"isolated", r.histogram.isolated},
                                {"excluded", r.histogram.excluded},
                                {"mean", r.histogram.mean()},
                                {"variance", r.histogram.variance()}};
  return j;
}

// Plot-ready CSVs: a rates overlay for one trace, the sampled-count
// histogram, and a per-cell scatter of correlation vs posterior log-mass.
inline void write_rates_overlay_csv(const std::string& path, const FluorescenceTrace& f,
                                    const SpikeTrain* truth, const std::vector<double>& rates) {
  std::ofstream out(path);
  if (!out) throw data_error("cannot write " + path);
  out << "bin,f,rate" << (truth ? ",spike" : "") << '\n';
  for (std::size_t t = 0; t < f.size(); ++t) {
    out << t << ',' << f.values[t] << ',' << rates[t];
    if (truth) out << ',' << int(truth->bits[t]);
    out << '\n';
  }
}

inline void write_histogram_csv(const std::string& path, const SpikeCountHistogram& h) {
  std::ofstream out(path);
  if (!out) throw data_error("cannot write " + path);
  out << "count,occurrences\n";
  for (std::size_t i = 0; i < h.counts.size(); ++i) out << i << ',' << h.counts[i] << '\n';
}

inline void write_scatter_csv(const std::string& path, const EvalReport& r) {
  std::ofstream out(path);
  if (!out) throw data_error("cannot write " + path);
  out << "cell,correlation,log_q_truth\n";
  for (const auto& c : r.cells) {
    out << c.id << ',';
    if (c.corr_defined) out << c.correlation;
    out << ',';
    if (c.has_truth) out << c.log_q_truth;
    out << '\n';
  }
}

// ---------------------------------------------------------------------------
// Timing benchmark: median wall-clock seconds per trace over >= 5 repeats.
// ---------------------------------------------------------------------------
struct BenchResult {
  std::size_t trace_length = 0;
  double seconds_per_trace = 0.0;
  double traces_per_second = 0.0;
  std::string family;
  std::size_t samples = 1;
  std::string machine;
};

inline std::string machine_descriptor() {
  std::ifstream in("/proc/cpuinfo");
  std::string line;
  while (std::getline(in, line)) {
    if (line.rfind("model name", 0) == 0) {
      auto pos = line.find(':');
      if (pos != std::string::npos) return line.substr(pos + 2);
    }
  }
  return "unknown cpu";
}

inline BenchResult bench(const Recognition& recog, std::size_t trace_length,
                         std::size_t repeats, std::size_t n_samples, Rng rng) {
  if (repeats < 5) throw config_error("bench: at least 5 repeats required");
  std::vector<double> trace(trace_length);
  for (double& v : trace) v = rng.gaussian(0.0, 1.0);
  std::vector<double> times(repeats);
  for (std::size_t r = 0; r < repeats; ++r) {
    auto start = std::chrono::steady_clock::now();
    volatile double sink = recog.marginal_probs(trace, n_samples, rng.child(r))[0];
    (void)sink;
    auto stop = std::chrono::steady_clock::now();
    times[r] = std::chrono::duration<double>(stop - start).count();
  }
  std::sort(times.begin(), times.end());
  BenchResult out;
  out.trace_length = trace_length;
  out.seconds_per_trace = times[repeats / 2];
  out.traces_per_second = out.seconds_per_trace > 0 ? 1.0 / out.seconds_per_trace : 0.0;
  out.family = recog_name(recog.kind());
  out.samples = n_samples;
  out.machine = machine_descriptor();
  return out;
}

}  // namespace dspk

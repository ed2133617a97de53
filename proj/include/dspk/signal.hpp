#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dspk/errors.hpp"

namespace dspk {

struct FluorescenceTrace {
  std::vector<double> values;
  double dt = 0.0;               // seconds per bin
  std::string cell_id;
  int channel = -1;              // soma/spine index for dendritic data, -1 otherwise

  std::size_t size() const { return values.size(); }

  void validate() const {
    if (dt <= 0.0) throw data_error("trace " + cell_id + ": dt must be positive");
    if (values.empty()) throw data_error("trace " + cell_id + ": empty");
    for (double v : values)
      if (!std::isfinite(v)) throw data_error("trace " + cell_id + ": non-finite value");
  }
};

struct SpikeTrain {
  std::vector<std::uint8_t> bits;  // 0/1 per bin
  double dt = 0.0;

  std::size_t size() const { return bits.size(); }
  std::size_t count() const {
    std::size_t n = 0;
    for (auto b : bits) n += b;
    return n;
  }
};

struct CellRecord {
  std::string id;
  std::vector<FluorescenceTrace> traces;
  std::vector<std::optional<SpikeTrain>> spikes;  // aligned with traces
};

struct CellDataset {
  double dt = 0.0;
  std::string split;  // train / val / test
  std::vector<CellRecord> cells;

  void validate() const {
    for (const CellRecord& c : cells) {
      if (c.traces.size() != c.spikes.size())
        throw data_error("cell " + c.id + ": traces/spikes count mismatch");
      for (std::size_t i = 0; i < c.traces.size(); ++i) {
        c.traces[i].validate();
        if (c.traces[i].dt != dt) throw data_error("cell " + c.id + ": dt differs from dataset");
        if (c.spikes[i] && c.spikes[i]->size() != c.traces[i].size())
          throw data_error("cell " + c.id + ": ground truth not length-aligned");
      }
    }
  }
};

// A contiguous slice of one trace; batches are formed from chunks of a single cell.
struct Chunk {
  std::size_t cell = 0;   // index into dataset.cells
  std::size_t trace = 0;  // index into cells[cell].traces
  std::size_t start = 0;
  std::size_t length = 0;
};

// ---------------------------------------------------------------------------
// Preprocessing
// ---------------------------------------------------------------------------

// Centered rolling nearest-rank percentile, window truncated at the edges.
// percentile is a fraction in (0,1); percentile -> 0 gives the window minimum.
inline std::vector<double> rolling_percentile_baseline(const std::vector<double>& values,
                                                       std::size_t window, double percentile) {
  if (values.empty()) throw data_error("rolling percentile: empty trace");
  if (window < 1) throw data_error("rolling percentile: window must be >= 1");
  if (!(percentile >= 0.0) || !(percentile < 1.0))
    throw data_error("rolling percentile: percentile must lie in [0,1)");
  const std::size_t T = values.size();
  const std::size_t half_lo = (window - 1) / 2, half_hi = window / 2;

  std::vector<double> sorted;  // current window contents, ascending
  sorted.reserve(std::min(window, T));
  std::vector<double> out(T);
  std::size_t cur_lo = 0, cur_hi = 0;
  for (std::size_t t = 0; t < T; ++t) {
    std::size_t lo = t >= half_lo ? t - half_lo : 0;
    std::size_t hi = std::min(T, t + half_hi + 1);
    while (cur_hi < hi) {
      double v = values[cur_hi++];
      sorted.insert(std::upper_bound(sorted.begin(), sorted.end(), v), v);
    }
    while (cur_lo < lo) {
      double v = values[cur_lo++];
      sorted.erase(std::lower_bound(sorted.begin(), sorted.end(), v));
    }
    std::size_t n = sorted.size();
    std::size_t rank = static_cast<std::size_t>(std::ceil(percentile * static_cast<double>(n)));
    if (rank < 1) rank = 1;
    if (rank > n) rank = n;
    out[t] = sorted[rank - 1];
  }
  return out;
}

// out_t = (f_t - b_t) / b_t; requires strictly positive baseline.
inline FluorescenceTrace dff(const FluorescenceTrace& trace, const std::vector<double>& baseline) {
  if (baseline.size() != trace.size())
    throw data_error("dff: baseline length " + std::to_string(baseline.size()) +
                     " != trace length " + std::to_string(trace.size()));
  FluorescenceTrace out = trace;
  for (std::size_t t = 0; t < trace.size(); ++t) {
    if (!(baseline[t] > 0.0))
      throw data_error("dff: nonpositive baseline at bin " + std::to_string(t));
    out.values[t] = (trace.values[t] - baseline[t]) / baseline[t];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Chunking
// ---------------------------------------------------------------------------

// Covers every bin of every trace; never crosses a trace boundary. When the
// strided grid stops short of the end, one extra end-aligned chunk is added.
inline std::vector<Chunk> make_chunks(const CellDataset& ds, std::size_t chunk_len,
                                      std::size_t stride) {
  if (chunk_len < 1) throw data_error("make_chunks: chunk_len must be >= 1");
  if (stride < 1 || stride > chunk_len)
    throw data_error("make_chunks: stride must lie in [1, chunk_len] to cover every bin");
  std::vector<Chunk> out;
  for (std::size_t ci = 0; ci < ds.cells.size(); ++ci) {
    for (std::size_t ti = 0; ti < ds.cells[ci].traces.size(); ++ti) {
      std::size_t T = ds.cells[ci].traces[ti].size();
      if (chunk_len > T)
        throw data_error("make_chunks: chunk length " + std::to_string(chunk_len) +
                         " exceeds trace length " + std::to_string(T) + " (cell " +
                         ds.cells[ci].id + ")");
      std::size_t covered = 0;
      for (std::size_t start = 0; start + chunk_len <= T; start += stride) {
        out.push_back({ci, ti, start, chunk_len});
        covered = start + chunk_len;
      }
      if (covered < T) out.push_back({ci, ti, T - chunk_len, chunk_len});
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Ground-truth ingestion
// ---------------------------------------------------------------------------

struct BinnedSpikes {
  SpikeTrain train;
  std::size_t collisions = 0;  // spikes collapsed into an already-set bin
};

// bit_t = 1 iff at least one spike time falls in [t*dt, (t+1)*dt).
inline BinnedSpikes bin_spike_times(const std::vector<double>& times, double dt, std::size_t T) {
  if (dt <= 0.0) throw data_error("bin_spike_times: dt must be positive");
  BinnedSpikes out;
  out.train.dt = dt;
  out.train.bits.assign(T, 0);
  for (double s : times) {
    if (s < 0.0) throw data_error("bin_spike_times: negative spike time");
    std::size_t t = static_cast<std::size_t>(std::floor(s / dt));
    if (t >= T)
      throw data_error("bin_spike_times: spike time " + std::to_string(s) +
                       " outside trace of " + std::to_string(T) + " bins");
    if (out.train.bits[t]) ++out.collisions;
    out.train.bits[t] = 1;
  }
  return out;
}

// ---------------------------------------------------------------------------
// CSV and manifest I/O. Trace files are CSV with a header row and a column
// `f`, plus an optional 0/1 `spike` column. The sample interval dt lives in
// the dataset manifest.
// ---------------------------------------------------------------------------

struct TraceFile {
  std::vector<double> f;
  std::optional<std::vector<std::uint8_t>> spike;
};

inline TraceFile read_trace_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw data_error("cannot open trace file: " + path);
  std::string line;
  if (!std::getline(in, line)) throw data_error("empty trace file: " + path);
  auto split = [](const std::string& s) {
    std::vector<std::string> parts;
    std::string cur;
    for (char c : s) {
      if (c == ',') {
        parts.push_back(cur);
        cur.clear();
      } else if (c != '\r') {
        cur.push_back(c);
      }
    }
    parts.push_back(cur);
    return parts;
  };
  auto header = split(line);
  int f_col = -1, spike_col = -1;
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (header[i] == "f") f_col = static_cast<int>(i);
    if (header[i] == "spike") spike_col = static_cast<int>(i);
  }
  if (f_col < 0) throw data_error("trace file " + path + " has no `f` column");
  TraceFile out;
  if (spike_col >= 0) out.spike.emplace();
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    auto parts = split(line);
    try {
      out.f.push_back(std::stod(parts.at(f_col)));
      if (spike_col >= 0) {
        int s = std::stoi(parts.at(spike_col));
        if (s != 0 && s != 1) throw data_error("spike column must be 0/1");
        out.spike->push_back(static_cast<std::uint8_t>(s));
      }
    } catch (const data_error&) {
      throw;
    } catch (const std::exception&) {
      throw data_error("bad row " + std::to_string(lineno) + " in " + path);
    }
  }
  if (out.f.empty()) throw data_error("trace file " + path + " has no rows");
  return out;
}

inline void write_trace_csv(const std::string& path, const std::vector<double>& f,
                            const std::vector<std::uint8_t>* spike = nullptr) {
  std::ofstream out(path);
  if (!out) throw data_error("cannot write trace file: " + path);
  out << (spike ? "f,spike\n" : "f\n");
  char buf[40];
  for (std::size_t t = 0; t < f.size(); ++t) {
    std::snprintf(buf, sizeof buf, "%.17g", f[t]);
    out << buf;
    if (spike) out << ',' << int((*spike)[t]);
    out << '\n';
  }
  if (!out) throw data_error("write failed: " + path);
}

// Manifest schema:
//   { "dt": seconds,
//     "cells": [ { "id": str, "traces": [paths], "spikes": [paths or null] } ] }
// Paths are relative to the manifest location.
inline CellDataset load_dataset(const std::string& manifest_path, const std::string& split = "") {
  std::ifstream in(manifest_path);
  if (!in) throw data_error("cannot open manifest: " + manifest_path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw data_error("manifest " + manifest_path + ": " + e.what());
  }
  if (!j.contains("dt") || !j.contains("cells"))
    throw data_error("manifest " + manifest_path + " must contain `dt` and `cells`");
  std::filesystem::path base = std::filesystem::path(manifest_path).parent_path();

  CellDataset ds;
  ds.dt = j.at("dt").get<double>();
  ds.split = split;
  for (const auto& jc : j.at("cells")) {
    CellRecord cell;
    cell.id = jc.at("id").get<std::string>();
    const auto& traces = jc.at("traces");
    const auto* spikes = jc.contains("spikes") ? &jc.at("spikes") : nullptr;
    if (spikes && spikes->size() != traces.size())
      throw data_error("cell " + cell.id + ": traces/spikes arrays differ in length");
    for (std::size_t i = 0; i < traces.size(); ++i) {
      std::string tpath = (base / traces[i].get<std::string>()).string();
      TraceFile tf = read_trace_csv(tpath);
      FluorescenceTrace tr;
      tr.values = std::move(tf.f);
      tr.dt = ds.dt;
      tr.cell_id = cell.id;
      cell.traces.push_back(std::move(tr));
      std::optional<SpikeTrain> st;
      if (spikes && !(*spikes)[i].is_null()) {
        std::string spath = (base / (*spikes)[i].get<std::string>()).string();
        TraceFile sf = spath == tpath ? std::move(tf) : read_trace_csv(spath);
        if (!sf.spike) throw data_error("spike file " + spath + " has no `spike` column");
        st = SpikeTrain{std::move(*sf.spike), ds.dt};
      }
      cell.spikes.push_back(std::move(st));
    }
    ds.cells.push_back(std::move(cell));
  }
  ds.validate();
  return ds;
}

inline void write_manifest(const std::string& path, double dt,
                           const std::vector<std::string>& cell_ids,
                           const std::vector<std::vector<std::string>>& trace_paths,
                           const std::vector<std::vector<std::string>>& spike_paths) {
  nlohmann::json j;
  j["dt"] = dt;
  j["cells"] = nlohmann::json::array();
  for (std::size_t c = 0; c < cell_ids.size(); ++c) {
    nlohmann::json jc;
    jc["id"] = cell_ids[c];
    jc["traces"] = trace_paths[c];
    if (c < spike_paths.size() && !spike_paths[c].empty()) {
      nlohmann::json sp = nlohmann::json::array();
      for (const std::string& s : spike_paths[c])
        sp.push_back(s.empty() ? nlohmann::json() : nlohmann::json(s));
      jc["spikes"] = sp;
    }
    j["cells"].push_back(jc);
  }
  std::ofstream out(path);
  if (!out) throw data_error("cannot write manifest: " + path);
  out << j.dump(2) << '\n';
}

}  // namespace dspk

#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "dspk/trainer.hpp"

using namespace dspk;

namespace {

CnnConfig tiny_cnn() {
  CnnConfig cfg;
  cfg.hidden_layers = 1;
  cfg.filters = 2;
  cfg.kernel = 3;
  return cfg;
}

std::vector<std::uint8_t> bits_of(std::uint64_t mask, std::size_t T) {
  std::vector<std::uint8_t> b(T);
  for (std::size_t t = 0; t < T; ++t) b[t] = (mask >> t) & 1u;
  return b;
}

Tensor rows_of(const std::vector<std::uint64_t>& masks, std::size_t T) {
  Tensor S({masks.size(), T});
  for (std::size_t k = 0; k < masks.size(); ++k)
    for (std::size_t t = 0; t < T; ++t) S.at(k, t) = double((masks[k] >> t) & 1u);
  return S;
}

// Simulates a small dataset from one parameter set per cell.
CellDataset simulate_cells(const std::vector<GenParams>& cells, std::size_t T, double rate_hz,
                           Rng rng) {
  CellDataset ds;
  ds.dt = 1.0 / 60.0;
  for (std::size_t c = 0; c < cells.size(); ++c) {
    CellRecord rec;
    rec.id = "cell" + std::to_string(c);
    SpikeTrain s;
    s.dt = ds.dt;
    double p = rate_hz * ds.dt;
    Rng cell_rng = rng.child(c);
    s.bits.resize(T);
    for (std::size_t t = 0; t < T; ++t) s.bits[t] = cell_rng.bernoulli(p) ? 1 : 0;
    FluorescenceTrace f = simulate_trace(cells[c], s, cell_rng);
    f.cell_id = rec.id;
    rec.traces.push_back(std::move(f));
    rec.spikes.push_back(s);
    ds.cells.push_back(std::move(rec));
  }
  return ds;
}

}  // namespace

TEST_CASE("vimco signals: hand-computed K=2 case") {
  auto sig = vimco_signals({0.0, std::log(3.0)});
  CHECK(sig.weights[0] == Catch::Approx(0.25).margin(1e-12));
  CHECK(sig.weights[1] == Catch::Approx(0.75).margin(1e-12));
  CHECK(sig.learning[0] == Catch::Approx(std::log(2.0) - std::log(3.0)).margin(1e-12));
  CHECK(sig.learning[1] == Catch::Approx(std::log(2.0)).margin(1e-12));
}

TEST_CASE("vimco signals: equal weights and shift invariance") {
  auto sig = vimco_signals(std::vector<double>(8, -1.7));
  for (double l : sig.learning) CHECK(l == Catch::Approx(0.0).margin(1e-12));
  for (double w : sig.weights) CHECK(w == Catch::Approx(1.0 / 8.0).margin(1e-12));

  Rng rng(3);
  std::vector<double> lw(6);
  for (double& v : lw) v = rng.uniform(-4, 2);
  auto base = vimco_signals(lw);
  for (double& v : lw) v += 11.3;
  auto shifted = vimco_signals(lw);
  for (std::size_t k = 0; k < 6; ++k) {
    CHECK(shifted.learning[k] == Catch::Approx(base.learning[k]).margin(1e-9));
    CHECK(shifted.weights[k] == Catch::Approx(base.weights[k]).margin(1e-12));
  }
  double wsum = 0.0;
  for (double w : base.weights) wsum += w;
  CHECK(wsum == Catch::Approx(1.0).margin(1e-12));
}

TEST_CASE("bound: K=1 reduces to the single log weight") {
  auto b = bound_from_log_weights({-3.7});
  CHECK(b.value == Catch::Approx(-3.7).margin(1e-12));
  CHECK_THROWS_AS(bound_from_log_weights({0.0, std::numeric_limits<double>::infinity()}),
                  numeric_error);
}

TEST_CASE("bound with the exact posterior: zero variance at log p(f)") {
  Rng rng(5);
  std::size_t T = 6;
  auto theta = scf_params({0.9}, 1.0, 1.0, 0.1, 0.09);
  SpikePrior prior{1.0, 1.0 / 60.0};
  SpikeTrain s = train_from_mask(0b010010, T, prior.dt);
  Rng sim(2);
  auto f = simulate_trace(theta, s, sim).values;

  auto lj = all_log_joints(theta, f, prior.dt, prior);
  double logz = logsumexp(lj);
  auto post = exact_posterior(theta, f, prior.dt, prior);

  // ancestral draws from the enumerated posterior, log q = log posterior
  auto draw = [&](Rng& r) {
    double u = r.uniform(), acc = 0.0;
    for (std::size_t m = 0; m < post.size(); ++m) {
      acc += post[m];
      if (u < acc) return m;
    }
    return post.size() - 1;
  };
  for (int rep = 0; rep < 20; ++rep) {
    std::vector<double> log_w;
    for (int k = 0; k < 16; ++k) {
      std::size_t m = draw(rng);
      log_w.push_back(lj[m] - std::log(post[m]));
    }
    auto b = bound_from_log_weights(log_w);
    CHECK(b.value == Catch::Approx(logz).margin(1e-9));
    for (double w : log_w) CHECK(w == Catch::Approx(logz).margin(1e-9));
  }
}

TEST_CASE("bound bracketing and monotonicity in K against enumeration") {
  std::size_t T = 6;
  auto theta = scf_params({0.9}, 1.0, 1.0, 0.1, 0.09);
  SpikePrior prior{1.0, 1.0 / 60.0};
  Rng sim(7);
  SpikeTrain s = train_from_mask(0b001010, T, prior.dt);
  auto f = simulate_trace(theta, s, sim).values;
  double logz = exact_log_evidence(theta, f, prior.dt, prior);

  Rng rng(11);
  Recognition recog(CnnPosterior(tiny_cnn(), 1, 1, rng));
  std::size_t seeds = 300;
  double sum64 = 0, sumsq64 = 0, sumdiff = 0, sumsqdiff = 0;
  for (std::size_t seed = 0; seed < seeds; ++seed) {
    auto b64 = iwae_bound(f, theta, recog, prior, 64, Rng(seed));
    auto b1 = bound_from_log_weights({b64.log_weights[0]});
    sum64 += b64.value;
    sumsq64 += b64.value * b64.value;
    double d = b64.value - b1.value;
    sumdiff += d;
    sumsqdiff += d * d;
  }
  double n = double(seeds);
  double mean64 = sum64 / n;
  double se64 = std::sqrt(std::max(0.0, sumsq64 / n - mean64 * mean64) / (n - 1));
  CHECK(mean64 <= logz + 3.0 * se64);

  double meand = sumdiff / n;
  double sed = std::sqrt(std::max(0.0, sumsqdiff / n - meand * meand) / (n - 1));
  CHECK(meand >= -3.0 * sed);  // K=64 at least as tight as K=1
}

TEST_CASE("grad_theta: K=1 equals the plain joint gradient; fd with frozen samples") {
  Rng rng(13);
  std::size_t T = 12;
  auto theta = scf_params({0.85}, 1.0, 1.2, 0.05, 0.09);
  SpikePrior prior{1.0, 1.0 / 60.0};
  Recognition recog(CnnPosterior(tiny_cnn(), 1, 1, rng));
  std::vector<double> f(T);
  for (double& v : f) v = rng.uniform(-0.3, 1.2);

  auto g1 = grad_theta(f, theta, recog, prior, 1, Rng(21));
  {
    auto samples = recog.sample(f, 1, Rng(21));
    theta.zero_grad();
    Tape tape;
    Var lp = build_log_joint(tape, theta, spikes_to_rows(samples), f, prior);
    tape.backward(tape.sum(lp));
    auto direct = flatten_grads(theta.trainable());
    REQUIRE(direct.size() == g1.size());
    for (std::size_t i = 0; i < direct.size(); ++i)
      CHECK(g1[i] == Catch::Approx(direct[i]).margin(1e-12));
  }

  // frozen samples: gradient of the bound value itself wrt theta
  std::size_t K = 8;
  auto samples = recog.sample(f, K, Rng(33));
  Tensor S = spikes_to_rows(samples);
  std::vector<double> log_q(K);
  for (std::size_t k = 0; k < K; ++k) log_q[k] = samples[k].log_q;

  auto bound_value = [&]() {
    Tape tape;
    Var lp = build_log_joint(tape, theta, S, f, prior);
    std::vector<double> lw(K);
    for (std::size_t k = 0; k < K; ++k) lw[k] = tape.val(lp).data[k] - log_q[k];
    return logsumexp(lw) - std::log(double(K));
  };
  // analytic: sum_k w~_k d log p_k (with the same frozen samples)
  theta.zero_grad();
  {
    Tape tape;
    Var lp = build_log_joint(tape, theta, S, f, prior);
    std::vector<double> lw(K);
    for (std::size_t k = 0; k < K; ++k) lw[k] = tape.val(lp).data[k] - log_q[k];
    double total = logsumexp(lw);
    Tensor w({K});
    for (std::size_t k = 0; k < K; ++k) w.data[k] = std::exp(lw[k] - total);
    tape.backward(tape.dot(tape.constant(w), lp));
  }
  double worst = 0.0;
  for (Parameter* p : theta.trainable()) {
    for (std::size_t i = 0; i < p->value.numel(); ++i) {
      double x0 = p->value.data[i], h = 1e-6;
      p->value.data[i] = x0 + h;
      double fp = bound_value();
      p->value.data[i] = x0 - h;
      double fm = bound_value();
      p->value.data[i] = x0;
      double central = (fp - fm) / (2 * h);
      worst = std::max(worst, std::abs(p->grad.data[i] - central) /
                                  (std::abs(p->grad.data[i]) + std::abs(central) + 1e-12));
    }
  }
  CHECK(worst < 1e-5);
}

TEST_CASE("vimco estimators are unbiased on a tiny enumerable problem") {
  // T=3, K=2: compare the exact expectation of the estimator over all
  // ordered sample pairs with exhaustive differentiation of the bound.
  Rng rng(17);
  std::size_t T = 3, K = 2;
  auto theta = scf_params({0.8}, 1.0, 1.0, 0.0, 0.16);
  SpikePrior prior{1.5, 1.0 / 60.0};
  Recognition recog(CnnPosterior(tiny_cnn(), 1, 1, rng));
  std::vector<double> f = {0.9, 0.4, 0.1};

  std::size_t M = 1u << T;
  Tensor all = rows_of([&] {
    std::vector<std::uint64_t> m(M);
    for (std::size_t i = 0; i < M; ++i) m[i] = i;
    return m;
  }(), T);

  // numeric per-train quantities
  std::vector<double> lq(M), lp(M);
  for (std::size_t m = 0; m < M; ++m) {
    lq[m] = recog.log_q_of(f, bits_of(m, T));
    SpikeTrain s = train_from_mask(m, T, prior.dt);
    lp[m] = log_joint(theta, s, f, prior);
  }

  // exact gradient of L^K by differentiating the full expectation
  recog.zero_grad();
  theta.zero_grad();
  {
    Tape tape;
    Var lq_vec = recog.logq_graph(tape, f, all);
    Var lp_vec = build_log_joint(tape, theta, all, f, prior);
    Var lw_vec = tape.sub(lp_vec, lq_vec);
    Var expectation{};
    bool first = true;
    for (std::size_t i = 0; i < M; ++i) {
      for (std::size_t j = 0; j < M; ++j) {
        Var qi = tape.slice(lq_vec, i, 1);
        Var qj = tape.slice(lq_vec, j, 1);
        Var weight = tape.exp(tape.add(qi, qj));
        Var wi = tape.exp(tape.slice(lw_vec, i, 1));
        Var wj = tape.exp(tape.slice(lw_vec, j, 1));
        Var pair = tape.log(tape.scale(tape.add(wi, wj), 0.5));
        Var term = tape.mul(weight, pair);
        expectation = first ? term : tape.add(expectation, term);
        first = false;
      }
    }
    tape.backward(tape.sum(expectation));
  }
  std::vector<double> exact_phi = flatten_grads(recog.parameters());
  std::vector<double> exact_theta = flatten_grads(theta.trainable());

  // expectation of the estimator: weighted surrogate over all pairs
  recog.zero_grad();
  theta.zero_grad();
  {
    Tape tape;
    Var lq_vec = recog.logq_graph(tape, f, all);
    Var lp_vec = build_log_joint(tape, theta, all, f, prior);
    Var surrogate{};
    bool first = true;
    for (std::size_t i = 0; i < M; ++i) {
      for (std::size_t j = 0; j < M; ++j) {
        double prob = std::exp(lq[i] + lq[j]);
        auto sig = vimco_signals({lp[i] - lq[i], lp[j] - lq[j]});
        Tensor a({2}), w({2});
        a.data = {sig.learning[0] - sig.weights[0], sig.learning[1] - sig.weights[1]};
        w.data = {sig.weights[0], sig.weights[1]};
        Var term = tape.add(
            tape.add(tape.scale(tape.slice(lq_vec, i, 1), prob * a.data[0]),
                     tape.scale(tape.slice(lq_vec, j, 1), prob * a.data[1])),
            tape.add(tape.scale(tape.slice(lp_vec, i, 1), prob * w.data[0]),
                     tape.scale(tape.slice(lp_vec, j, 1), prob * w.data[1])));
        surrogate = first ? term : tape.add(surrogate, term);
        first = false;
      }
    }
    tape.backward(tape.sum(surrogate));
  }
  std::vector<double> est_phi = flatten_grads(recog.parameters());
  std::vector<double> est_theta = flatten_grads(theta.trainable());

  for (std::size_t i = 0; i < exact_phi.size(); ++i)
    CHECK(std::abs(est_phi[i] - exact_phi[i]) < 1e-8);
  for (std::size_t i = 0; i < exact_theta.size(); ++i)
    CHECK(std::abs(est_theta[i] - exact_theta[i]) < 1e-8);
}

TEST_CASE("clip_by_global_norm") {
  Parameter a("a", Tensor::vector({0.6, 0.8}));
  a.grad.data = {0.6, 0.8};  // norm 1
  double norm = clip_by_global_norm({&a}, 0.02);
  CHECK(norm == Catch::Approx(1.0).margin(1e-12));
  CHECK(std::hypot(a.grad.data[0], a.grad.data[1]) == Catch::Approx(0.02).margin(1e-12));
  CHECK(a.grad.data[0] / a.grad.data[1] == Catch::Approx(0.75).margin(1e-12));

  a.grad.data = {0.006, 0.008};  // norm 0.01, below threshold
  clip_by_global_norm({&a}, 0.02);
  CHECK(a.grad.data[0] == 0.006);
  CHECK(a.grad.data[1] == 0.008);

  a.grad.data = {0.0, 0.0};
  clip_by_global_norm({&a}, 0.02);
  CHECK(a.grad.data[0] == 0.0);
}

TEST_CASE("adam: first-step magnitude, fixed point, convergence") {
  {
    Parameter p("p", Tensor::vector({1.0, -2.0}));
    p.grad.data = {0.3, -0.7};
    AdamState st;
    adam_step({&p}, st, 0.01);
    CHECK(p.value.data[0] == Catch::Approx(1.0 + 0.01).epsilon(1e-6));
    CHECK(p.value.data[1] == Catch::Approx(-2.0 - 0.01).epsilon(1e-6));
  }
  {
    Parameter p("p", Tensor::vector({0.5}));
    AdamState st;
    for (int i = 0; i < 10; ++i) {
      p.zero_grad();
      adam_step({&p}, st, 0.1);
    }
    CHECK(p.value.data[0] == 0.5);
  }
  {
    // maximize -(x-1)^2 by ascent on its gradient
    Parameter p("p", Tensor::vector({0.0}));
    AdamState st;
    for (int i = 0; i < 500; ++i) {
      p.zero_grad();
      p.grad.data[0] = -2.0 * (p.value.data[0] - 1.0);
      adam_step({&p}, st, 0.01);
    }
    CHECK(p.value.data[0] == Catch::Approx(1.0).margin(1e-3));
  }
}

TEST_CASE("training raises the bound on a small simulated problem") {
  auto truth = scf_params({0.95}, 1.0, 1.0, 0.2, 0.04);
  CellDataset ds = simulate_cells({truth}, 3000, 1.2, Rng(42));

  TrainerConfig cfg;
  cfg.samples = 16;
  cfg.batch_chunks = 2;
  cfg.chunk_len = 96;
  cfg.chunk_stride = 64;
  cfg.max_steps = 250;
  cfg.eval_interval = 125;
  cfg.burn_in = 8;
  cfg.prior_rate_hz = 1.2;
  cfg.seed = 9;

  CnnConfig net;
  net.hidden_layers = 2;
  net.filters = 8;
  net.kernel = 9;
  net.out_bias = std::log(0.02 / 0.98);
  Recognition recog(CnnPosterior(net, 1, 1, Rng(5)));
  PerCellStore store;
  auto result = train(ds, nullptr, recog, store, ModelKind::Scf, 1, cfg);

  REQUIRE(result.steps_run == 250);
  auto window_mean = [&](std::size_t lo, std::size_t hi) {
    double s = 0;
    std::size_t n = 0;
    for (const auto& row : result.log)
      if (row.step > lo && row.step <= hi && !std::isnan(row.bound)) {
        s += row.bound;
        ++n;
      }
    return s / double(n);
  };
  CHECK(window_mean(200, 250) > window_mean(0, 50));
  CHECK(store.has("cell0"));

  // reproducibility: identical config and seed give an identical log
  Recognition recog2(CnnPosterior(net, 1, 1, Rng(5)));
  PerCellStore store2;
  auto result2 = train(ds, nullptr, recog2, store2, ModelKind::Scf, 1, cfg);
  REQUIRE(result2.log.size() == result.log.size());
  for (std::size_t i = 0; i < result.log.size(); ++i) {
    CHECK(result2.log[i].bound == result.log[i].bound);
    CHECK(result2.log[i].grad_norm_phi == result.log[i].grad_norm_phi);
  }
}

TEST_CASE("non-amortized training is the one-cell loop") {
  auto truth = scf_params({0.9}, 1.0, 1.0, 0.1, 0.09);
  CellDataset ds = simulate_cells({truth}, 1200, 1.0, Rng(3));

  TrainerConfig cfg;
  cfg.samples = 8;
  cfg.batch_chunks = 1;
  cfg.chunk_len = 64;
  cfg.chunk_stride = 64;
  cfg.max_steps = 40;
  cfg.eval_interval = 20;
  cfg.seed = 4;

  CnnConfig net = tiny_cnn();
  Recognition a(CnnPosterior(net, 1, 1, Rng(8)));
  Recognition b(CnnPosterior(net, 1, 1, Rng(8)));
  PerCellStore sa, sb;
  auto ra = train(ds, nullptr, a, sa, ModelKind::Scf, 1, cfg);
  auto rb = train_non_amortized(ds.cells[0], ds.dt, b, sb, ModelKind::Scf, 1, cfg);
  REQUIRE(ra.log.size() == rb.log.size());
  for (std::size_t i = 0; i < ra.log.size(); ++i)
    CHECK(ra.log[i].bound == rb.log[i].bound);
}

TEST_CASE("early stopping restores the best snapshot and respects patience") {
  auto truth = scf_params({0.9}, 1.0, 1.0, 0.1, 0.04);
  CellDataset ds = simulate_cells({truth}, 1500, 1.0, Rng(12));

  TrainerConfig cfg;
  cfg.samples = 8;
  cfg.batch_chunks = 1;
  cfg.chunk_len = 64;
  cfg.chunk_stride = 64;
  cfg.max_steps = 4000;
  cfg.eval_interval = 10;
  cfg.patience = 3;
  cfg.seed = 6;

  Recognition recog(CnnPosterior(tiny_cnn(), 1, 1, Rng(2)));
  PerCellStore store;
  auto result = train(ds, &ds, recog, store, ModelKind::Scf, 1, cfg);
  if (result.steps_run < cfg.max_steps) {
    // stopped on patience: within patience+1 evaluations of the peak
    CHECK(result.steps_run - result.best_step <= (cfg.patience + 1) * cfg.eval_interval);
  }
  CHECK(!std::isnan(result.best_val));
}

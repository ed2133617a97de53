#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "dspk/generative.hpp"
#include "dspk/rng.hpp"

using namespace dspk;

namespace {

SpikeTrain make_train(std::vector<int> bits, double dt = 1.0 / 60.0) {
  SpikeTrain s;
  s.dt = dt;
  for (int b : bits) s.bits.push_back(static_cast<std::uint8_t>(b));
  return s;
}

Tensor spike_rows(const std::vector<SpikeTrain>& trains) {
  Tensor S({trains.size(), trains[0].size()});
  for (std::size_t k = 0; k < trains.size(); ++k)
    for (std::size_t t = 0; t < trains[k].size(); ++t) S.at(k, t) = trains[k].bits[t];
  return S;
}

SpikeTrain random_train(Rng& rng, std::size_t T, double p = 0.15) {
  SpikeTrain s;
  s.dt = 1.0 / 60.0;
  for (std::size_t t = 0; t < T; ++t) s.bits.push_back(rng.bernoulli(p) ? 1 : 0);
  return s;
}

GenParams random_params(ModelKind kind, Rng& rng, std::size_t p = 1) {
  std::vector<double> gamma(p);
  gamma[0] = rng.uniform(0.6, 0.95);
  for (std::size_t j = 1; j < p; ++j) gamma[j] = rng.uniform(-0.1, 0.05);
  double delta = rng.uniform(0.5, 1.5), alpha = rng.uniform(0.5, 2.0);
  double beta = rng.uniform(-0.5, 0.5), sigma2 = rng.uniform(0.02, 0.3);
  switch (kind) {
    case ModelKind::Scf: return scf_params(gamma, delta, alpha, beta, sigma2);
    case ModelKind::Scdf:
      return scdf_params(gamma, delta, alpha, beta, sigma2, rng.uniform(0.05, 0.3),
                         rng.uniform(0.02, 0.2), rng.uniform(0.8, 1.8), rng.uniform(1.0, 3.0));
    case ModelKind::Mlphys:
      return mlphys_params(gamma, alpha, beta, sigma2, rng.uniform(1.5, 5.0),
                           rng.uniform(0.05, 0.5), rng.uniform(0.5, 2.0), rng.uniform(1.0, 2.0));
    default: {
      std::size_t spines = 2;
      std::vector<double> gs, ds, db, as, bs, s2;
      for (std::size_t k = 0; k < spines; ++k) {
        for (std::size_t j = 0; j < p; ++j)
          gs.push_back(j == 0 ? rng.uniform(0.6, 0.9) : rng.uniform(-0.1, 0.05));
        ds.push_back(rng.uniform(0.5, 1.5));
        db.push_back(rng.uniform(0.2, 0.8));
        as.push_back(rng.uniform(0.5, 2.0));
        bs.push_back(rng.uniform(-0.5, 0.5));
        s2.push_back(rng.uniform(0.02, 0.3));
      }
      return dendritic_params(spines, gamma, delta, alpha, beta, sigma2, gs, ds, db, as, bs, s2,
                              rng.uniform(0.05, 0.3), rng.uniform(0.02, 0.2),
                              rng.uniform(0.8, 1.8), rng.uniform(1.0, 3.0));
    }
  }
}

}  // namespace

TEST_CASE("calcium dynamics: hand-unrolled recursions") {
  auto c = calcium_dynamics({1, 0, 0}, {0.5}, 2.0);
  CHECK(c == std::vector<double>{2.0, 1.0, 0.5});

  auto z = calcium_dynamics({0, 0, 0, 0}, {0.5}, 2.0);
  CHECK(z == std::vector<double>{0, 0, 0, 0});

  auto c2 = calcium_dynamics({1, 0, 0, 0}, {0.5, 0.25}, 1.0);
  CHECK(c2 == std::vector<double>{1.0, 0.5, 0.5, 0.375});
}

TEST_CASE("calcium dynamics: overflow guard") {
  std::vector<double> drive(200, 1.0);
  CHECK_THROWS_AS(calcium_dynamics(drive, {1.2}, 1.0), numeric_error);
}

TEST_CASE("scdf dye dynamics: decay and fixed point") {
  std::vector<double> zero(50, 0.0);
  for (double d : dye_dynamics_scdf(zero, 0.1, 0.05, 1.5, 2.0)) CHECK(d == 0.0);
  // kon = 0: pure decay from an all-zero pre-history stays zero
  for (double d : dye_dynamics_scdf(std::vector<double>(20, 1.0), 0.0, 0.1, 1.5, 2.0))
    CHECK(d == 0.0);

  double kon = 0.12, koff = 0.07, eta = 1.4, dtot = 2.5, cval = 0.8;
  std::vector<double> c(4000, cval);
  auto d = dye_dynamics_scdf(c, kon, koff, eta, dtot);
  double rate = kon * std::pow(cval, eta);
  double fixed_point = rate * dtot / (rate + koff);
  CHECK(d.back() == Catch::Approx(fixed_point).margin(1e-8));
}

TEST_CASE("scdf dye dynamics: boundedness under contractive updates") {
  Rng rng(31);
  for (int rep = 0; rep < 200; ++rep) {
    double dtot = rng.uniform(0.5, 4.0);
    double eta = rng.uniform(0.8, 2.0);
    double cmax = rng.uniform(0.1, 2.0);
    // keep kon*c^eta + koff < 1 per bin
    double koff = rng.uniform(0.01, 0.4);
    double kon = rng.uniform(0.0, (0.99 - koff) / std::pow(cmax, eta));
    std::vector<double> c(100);
    for (double& v : c) v = rng.uniform(0.0, cmax);
    for (double d : dye_dynamics_scdf(c, kon, koff, eta, dtot)) {
      CHECK(d >= 0.0);
      CHECK(d <= dtot);
    }
  }
}

TEST_CASE("mlphys dye dynamics: decay and fixed point") {
  std::vector<double> zero(30, 0.0);
  for (double d : dye_dynamics_mlphys(zero, 3.0, 0.2, 1.0, 1.6)) CHECK(d == 0.0);

  double tau = 2.5, omega = 0.3, c0 = 1.0, eta = 1.6, cval = 1.2;
  std::vector<double> c(6000, cval);
  auto d = dye_dynamics_mlphys(c, tau, omega, c0, eta);
  double g = std::pow(c0 + cval, eta) - std::pow(c0, eta);
  CHECK(d.back() == Catch::Approx(g / (1.0 + omega * g)).margin(1e-8));

  // slow limit: per-step movement bounded by (1+omega*g)*max|target-d|/tau
  double big_tau = 500.0;
  auto ds = dye_dynamics_mlphys(c, big_tau, omega, c0, eta);
  double target = g / (1.0 + omega * g);
  for (std::size_t t = 1; t < ds.size(); ++t)
    CHECK(std::abs(ds[t] - ds[t - 1]) <=
          (1.0 + omega * g) * std::max(target, std::abs(target - ds[t - 1])) / big_tau + 1e-12);
}

TEST_CASE("mean_trace identities") {
  auto s = make_train({0, 1, 0, 1, 1, 0});
  // gamma=0, delta=1, alpha=1, beta=0 passes spikes through
  auto g = scf_params({0.0}, 1.0, 1.0, 0.0, 0.1);
  auto mu = mean_trace(g, s);
  for (std::size_t t = 0; t < s.size(); ++t) CHECK(mu[t] == double(s.bits[t]));

  auto zeros = make_train({0, 0, 0, 0});
  for (ModelKind kind : {ModelKind::Scf, ModelKind::Scdf, ModelKind::Mlphys}) {
    Rng rng(7);
    auto params = random_params(kind, rng);
    auto m = mean_trace(params, zeros);
    for (double v : m) CHECK(v == Catch::Approx(params.natural("beta")).margin(1e-14));
  }
}

TEST_CASE("scf linearity: superposition of drives") {
  Rng rng(13);
  auto g = random_params(ModelKind::Scf, rng, 2);
  std::vector<double> s1(40, 0.0), s2(40, 0.0);
  for (int i = 0; i < 6; ++i) {
    s1[rng.index(40)] += 1.0;
    s2[rng.index(40)] += 1.0;
  }
  std::vector<double> both(40);
  for (std::size_t t = 0; t < 40; ++t) both[t] = s1[t] + s2[t];
  auto m1 = mean_trace(g, s1), m2 = mean_trace(g, s2), mb = mean_trace(g, both);
  double beta = g.natural("beta");
  for (std::size_t t = 0; t < 40; ++t)
    CHECK(mb[t] == Catch::Approx(m1[t] + m2[t] - beta).margin(1e-10));
}

TEST_CASE("dendritic mean traces: bAP transient vs soma transient") {
  auto g = dendritic_params(2, {0.9}, 1.0, 1.0, 0.0, 0.05, {0.8, 0.85}, {1.0, 1.0}, {0.6, 0.3},
                            {1.0, 1.0}, {0.0, 0.0}, {0.05, 0.05}, 0.2, 0.1, 1.0, 2.0);
  // spike only at the soma
  std::vector<std::vector<double>> drives = {{1, 0, 0, 0}, {0, 0, 0, 0}, {0, 0, 0, 0}};
  auto mu = mean_traces_dendritic(g, drives);
  REQUIRE(mu.size() == 3);
  // soma channel: c = delta_c = 1 -> dye kon*c^eta*dtot = 0.2*1*2
  CHECK(mu[0][0] == Catch::Approx(0.4).margin(1e-12));
  // spine channels see the bAP-scaled somatic spike: c = delta_bap
  CHECK(mu[1][0] == Catch::Approx(0.2 * std::pow(0.6, 1.0) * 2.0).margin(1e-12));
  CHECK(mu[2][0] == Catch::Approx(0.2 * std::pow(0.3, 1.0) * 2.0).margin(1e-12));
  // no synaptic drive: spine responses stay proportional to the bAP amplitude
  CHECK(mu[1][0] > mu[2][0]);
}

TEST_CASE("simulate: determinism and noise statistics") {
  Rng rng(3);
  auto g = random_params(ModelKind::Scf, rng);
  auto s = random_train(rng, 500);

  Rng r1(42), r2(42);
  auto f1 = simulate_trace(g, s, r1);
  auto f2 = simulate_trace(g, s, r2);
  CHECK(f1.values == f2.values);

  // near-zero variance reduces to the mean trace
  auto g0 = scf_params({0.9}, 1.0, 1.0, 0.1, 1e-300);
  Rng r3(7);
  auto f0 = simulate_trace(g0, s, r3);
  auto mu = mean_trace(g0, s);
  for (std::size_t t = 0; t < s.size(); ++t)
    CHECK(f0.values[t] == Catch::Approx(mu[t]).margin(1e-100));

  // empirical residual variance within 1% over 1e6 bins
  auto glong = scf_params({0.9}, 1.0, 1.0, 0.0, 0.25);
  SpikeTrain empty;
  empty.dt = 1.0 / 60.0;
  empty.bits.assign(1000000, 0);
  Rng r4(11);
  auto f = simulate_trace(glong, empty, r4);
  double var = 0.0;
  for (double v : f.values) var += v * v;
  var /= double(f.values.size());
  CHECK(var == Catch::Approx(0.25).epsilon(0.01));
}

TEST_CASE("log-likelihood identities and density oracle") {
  auto s = make_train({1, 0, 0, 1});
  auto g = scf_params({0.5}, 1.0, 1.0, 0.0, 1.0 / (2.0 * 3.14159265358979323846));
  auto mu = mean_trace(g, s);
  CHECK(log_likelihood(g, s, mu) == Catch::Approx(0.0).margin(1e-12));

  Rng rng(5);
  auto g2 = random_params(ModelKind::Scf, rng);
  auto mu2 = mean_trace(g2, s);
  std::vector<double> f1(4), f2(4);
  double ssr = 0.0;
  for (std::size_t t = 0; t < 4; ++t) {
    double r = rng.uniform(-1, 1);
    f1[t] = mu2[t] + r;
    f2[t] = mu2[t] + 2.0 * r;
    ssr += r * r;
  }
  double drop = log_likelihood(g2, s, f1) - log_likelihood(g2, s, f2);
  CHECK(drop == Catch::Approx(3.0 * ssr / (2.0 * g2.natural("sigma2"))).margin(1e-10));

  // direct Gaussian density oracle
  for (int rep = 0; rep < 50; ++rep) {
    auto gp = random_params(ModelKind::Scdf, rng);
    auto st = random_train(rng, 12);
    auto m = mean_trace(gp, st);
    std::vector<double> f(m.size());
    for (std::size_t t = 0; t < f.size(); ++t) f[t] = m[t] + rng.gaussian(0, 0.3);
    double sig2 = gp.natural("sigma2");
    double expect = 0.0;
    for (std::size_t t = 0; t < f.size(); ++t) {
      double r = f[t] - m[t];
      expect += -0.5 * std::log(2.0 * 3.14159265358979323846 * sig2) - r * r / (2.0 * sig2);
    }
    CHECK(log_likelihood(gp, st, f) == Catch::Approx(expect).margin(1e-9));
  }
}

TEST_CASE("log-prior identities and normalization by enumeration") {
  SpikePrior half{30.0, 1.0 / 60.0};  // rate*dt = 0.5
  auto s = make_train({1, 0, 1, 1, 0, 0, 0, 1});
  CHECK(log_prior(s, half) == Catch::Approx(8.0 * std::log(0.5)).margin(1e-12));

  SpikePrior pr{1.3, 1.0 / 60.0};
  auto zeros = make_train(std::vector<int>(10, 0));
  CHECK(log_prior(zeros, pr) ==
        Catch::Approx(10.0 * std::log1p(-pr.bin_prob())).margin(1e-12));

  double total = 0.0;
  for (std::uint64_t mask = 0; mask < (1u << 10); ++mask)
    total += std::exp(log_prior(train_from_mask(mask, 10, pr.dt), pr));
  CHECK(total == Catch::Approx(1.0).margin(1e-9));
}

TEST_CASE("log-joint additivity and exact posterior normalization") {
  Rng rng(9);
  auto g = random_params(ModelKind::Scf, rng);
  auto s = random_train(rng, 6);
  SpikePrior pr{1.0, s.dt};
  std::vector<double> f(6);
  auto mu = mean_trace(g, s);
  for (std::size_t t = 0; t < 6; ++t) f[t] = mu[t] + rng.gaussian(0, 0.2);
  CHECK(log_joint(g, s, f, pr) - log_likelihood(g, s, f) ==
        Catch::Approx(log_prior(s, pr)).margin(1e-12));

  auto post = exact_posterior(g, f, s.dt, pr);
  double sum = 0.0;
  for (double p : post) sum += p;
  CHECK(sum == Catch::Approx(1.0).margin(1e-12));
}

TEST_CASE("graph log-joint matches the numeric path") {
  Rng rng(23);
  for (ModelKind kind : {ModelKind::Scf, ModelKind::Scdf, ModelKind::Mlphys}) {
    auto g = random_params(kind, rng);
    std::vector<SpikeTrain> trains = {random_train(rng, 24), random_train(rng, 24)};
    SpikePrior pr{0.9, trains[0].dt};
    std::vector<double> f(24);
    auto mu = mean_trace(g, trains[0]);
    for (std::size_t t = 0; t < 24; ++t) f[t] = mu[t] + rng.gaussian(0, 0.2);

    Tape tape;
    Var lj = build_log_joint(tape, g, spike_rows(trains), f, pr);
    for (std::size_t k = 0; k < trains.size(); ++k)
      CHECK(tape.val(lj).data[k] ==
            Catch::Approx(log_joint(g, trains[k], f, pr)).margin(1e-9));
  }
}

TEST_CASE("log-joint gradients pass finite differences for every model") {
  Rng rng(37);
  for (ModelKind kind :
       {ModelKind::Scf, ModelKind::Scdf, ModelKind::Mlphys, ModelKind::Dendritic}) {
    auto g = random_params(kind, rng, kind == ModelKind::Dendritic ? 1 : 2);
    std::size_t T = 32;
    SpikePrior pr{1.0, 1.0 / 60.0};
    double err = 0.0;
    if (kind == ModelKind::Dendritic) {
      T = 12;
      std::vector<SpikeTrain> soma = {random_train(rng, T)};
      std::vector<SpikeTrain> sp1 = {random_train(rng, T)};
      std::vector<SpikeTrain> sp2 = {random_train(rng, T)};
      std::vector<SpikeTrain> chans = {soma[0], sp1[0], sp2[0]};
      std::vector<std::vector<double>> f;
      {
        Rng noise(5);
        auto sim = simulate_dendritic(g, chans, noise);
        for (auto& tr : sim) f.push_back(tr.values);
      }
      std::vector<SpikePrior> priors(3, pr);
      std::vector<Tensor> S = {spike_rows(soma), spike_rows(sp1), spike_rows(sp2)};
      err = fd_check_params(
          [&](Tape& t) {
            return t.sum(build_log_joint_dendritic(t, g, S, f, priors));
          },
          g.trainable(), 1e-6);
    } else {
      std::vector<SpikeTrain> trains = {random_train(rng, T)};
      std::vector<double> f(T);
      auto mu = mean_trace(g, trains[0]);
      for (std::size_t t = 0; t < T; ++t) f[t] = mu[t] + rng.gaussian(0, 0.2);
      Tensor S = spike_rows(trains);
      err = fd_check_params(
          [&](Tape& t) { return t.sum(build_log_joint(t, g, S, f, pr)); }, g.trainable(),
          1e-6);
    }
    INFO(model_name(kind));
    CHECK(err < 1e-5);
  }
}

TEST_CASE("constrain/unconstrain round-trips and invariants") {
  Rng rng(41);
  for (int rep = 0; rep < 100; ++rep) {
    for (ParamMap m : {ParamMap::Identity, ParamMap::Softplus, ParamMap::OnePlusSoftplus}) {
      double u = rng.uniform(-8, 8);
      double v = constrain_value(m, u);
      CHECK(unconstrain_value(m, v) == Catch::Approx(u).margin(1e-12));
      if (m == ParamMap::Softplus) CHECK(v > 0.0);
      if (m == ParamMap::OnePlusSoftplus) CHECK(v > 1.0);
    }
  }
  // natural-space accessors round-trip through a parameter set
  auto g = scdf_params({0.9}, 1.0, 1.2, 0.1, 0.04, 0.1, 0.05, 1.5, 2.0);
  g.set_natural("kon", 0.37);
  CHECK(g.natural("kon") == Catch::Approx(0.37).margin(1e-12));

  // gradient through the constraining map
  double err = fd_check([](Tape& t, Var x) { return t.sum(t.softplus(x)); },
                        Tensor::vector({-3.0, -0.2, 0.4, 2.5}), 1e-6);
  CHECK(err < 1e-6);
}

TEST_CASE("parameter JSON round-trip") {
  Rng rng(55);
  for (ModelKind kind :
       {ModelKind::Scf, ModelKind::Scdf, ModelKind::Mlphys, ModelKind::Dendritic}) {
    auto g = random_params(kind, rng);
    auto j = params_to_json(g);
    auto g2 = params_from_json(j);
    CHECK(g2.kind == g.kind);
    REQUIRE(g2.values.size() == g.values.size());
    for (std::size_t i = 0; i < g.values.size(); ++i) {
      CHECK(g2.values[i].name == g.values[i].name);
      for (std::size_t k = 0; k < g.values[i].value.numel(); ++k)
        CHECK(g2.values[i].value.data[k] ==
              Catch::Approx(g.values[i].value.data[k]).margin(1e-9));
    }
  }
}

TEST_CASE("heterogeneity perturbation keeps parameters valid") {
  Rng rng(67);
  for (int rep = 0; rep < 50; ++rep) {
    auto g = scdf_params({0.95}, 1.0, 1.0, 0.3, 0.06, 0.1, 0.05, 1.5, 2.0);
    perturb_params(g, rng, 0.1);
    CHECK(g.natural("sigma2") > 0.0);
    CHECK(g.natural("kon") > 0.0);
    CHECK(g.natural("dtot") > 0.0);
    auto gamma = g.natural_vec("gamma");
    CHECK(gamma[0] > 0.0);
    CHECK(gamma[0] < 1.0);
  }
}

TEST_CASE("moment initialization lands in a sane region") {
  Rng rng(71);
  auto truth = scf_params({0.95}, 1.0, 1.3, 0.4, 0.04);
  auto s = random_train(rng, 4000, 1.0 / 60.0);
  auto f = simulate_trace(truth, s, rng);
  auto init = init_params_from_trace(ModelKind::Scf, f.values, 1);
  CHECK(init.natural("beta") == Catch::Approx(0.4).margin(0.25));
  auto gamma = init.natural_vec("gamma");
  CHECK(gamma[0] > 0.8);
  CHECK(gamma[0] < 1.0);
  CHECK(init.natural("sigma2") == Catch::Approx(0.04).epsilon(0.6));
}

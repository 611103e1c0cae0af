#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "nerfus/core/checkpoint.hpp"
#include "nerfus/prior/ddpm.hpp"
#include "nerfus/prior/denoiser.hpp"
#include "nerfus/prior/lora.hpp"
#include "nerfus/prior/schedule.hpp"

using namespace nerfus;

namespace {

// Tiny two-level denoiser on 4^3 cubes; cheap enough for finite differences.
DenoiserConfig tiny_config() {
  DenoiserConfig c;
  c.base_width = 2;
  c.mults = {1, 2};
  c.temb_dim = 4;
  c.input_res = 4;
  return c;
}

template <class Real>
bool same_matrix(const MatX<Real>& a, const MatX<Real>& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() && (a.array() == b.array()).all();
}

// Noise predictor stub that always returns zero: x0_hat == xt / sqrt(abar).
struct ZeroModel {
  MatX<double> forward(const MatX<double>& x, double) const {
    return MatX<double>::Zero(x.rows(), x.cols());
  }
};

// Stub that predicts exactly the injected noise when eps is known.
struct ConstModel {
  MatX<double> eps;
  MatX<double> forward(const MatX<double>&, double) const { return eps; }
};

}  // namespace

TEST_CASE("noise schedule basics") {
  NoiseSchedule s = NoiseSchedule::desk();
  CHECK(s.T == 100);
  CHECK(s.abar[0] == doctest::Approx(1.0));
  for (int t = 1; t <= s.T; ++t) {
    CHECK(s.beta[std::size_t(t)] > 0.0);
    CHECK(s.beta[std::size_t(t)] < 1.0);
    CHECK(s.abar[std::size_t(t)] < s.abar[std::size_t(t) - 1]);
    CHECK(s.abar[std::size_t(t)] ==
          doctest::Approx(s.abar[std::size_t(t) - 1] * (1.0 - s.beta[std::size_t(t)])));
  }
  // the desk schedule ends close to pure noise
  CHECK(s.abar[std::size_t(s.T)] < 0.01);
  CHECK_THROWS_AS(s.check_step(-1), ValidationError);
  CHECK_THROWS_AS(s.check_step(s.T + 1), ValidationError);
  s.check_step(0);  // t = 0 is the noiseless marginal
  s.check_step(1);
  s.check_step(s.T);
}

TEST_CASE("patch row mapping is the [0,1] <-> [-1,1] bijection") {
  Grid3 g(2, 2, 2);
  for (std::size_t i = 0; i < g.data.size(); ++i) g.data[i] = double(i) / 7.0;
  auto x = patch_to_row<double>(g);
  CHECK(x(0, 0) == doctest::Approx(-1.0));
  CHECK(x(0, 7) == doctest::Approx(1.0));
  Grid3 back = row_to_patch(x, 2);
  for (std::size_t i = 0; i < g.data.size(); ++i)
    CHECK(back.data[i] == doctest::Approx(g.data[i]));
  // values outside [-1,1] clamp back into range
  MatX<double> wild(1, 8);
  wild.setConstant(3.0);
  Grid3 c = row_to_patch(wild, 2);
  CHECK(c.data[0] == doctest::Approx(1.0));
}

TEST_CASE("time embedding is interleaved sin/cos") {
  auto e = time_embedding<double>(3.0, 8);
  REQUIRE(e.size() == 8);
  for (int i = 0; i < 4; ++i) {
    double w = std::pow(10000.0, -double(i) / 4.0);
    CHECK(e(2 * i) == doctest::Approx(std::sin(3.0 * w)));
    CHECK(e(2 * i + 1) == doctest::Approx(std::cos(3.0 * w)));
  }
}

TEST_CASE("stepwise diffusion chain matches the closed-form marginal") {
  // x_t chain: x_t = sqrt(1-beta_t) x_{t-1} + sqrt(beta_t) eps_t.
  // Closed form: x_t = sqrt(abar_t) x0 + sqrt(1-abar_t) eps.
  NoiseSchedule s = NoiseSchedule::linear(20, 1e-3, 0.2);
  const int draws = 10000;
  const double x0 = 0.6;

  for (int t : {5, 20}) {
    double chain_mean = 0, chain_m2 = 0, closed_mean = 0, closed_m2 = 0;
    std::normal_distribution<double> n01(0.0, 1.0);
    Rng rng = substream(77, 0xC4A1, std::uint64_t(t));
    for (int d = 0; d < draws; ++d) {
      double xc = x0;
      for (int k = 1; k <= t; ++k)
        xc = std::sqrt(1.0 - s.beta[std::size_t(k)]) * xc +
             std::sqrt(s.beta[std::size_t(k)]) * n01(rng);
      chain_mean += xc;
      chain_m2 += xc * xc;
      double xf = std::sqrt(s.abar[std::size_t(t)]) * x0 +
                  std::sqrt(1.0 - s.abar[std::size_t(t)]) * n01(rng);
      closed_mean += xf;
      closed_m2 += xf * xf;
    }
    chain_mean /= draws;
    closed_mean /= draws;
    double chain_var = chain_m2 / draws - chain_mean * chain_mean;
    double closed_var = closed_m2 / draws - closed_mean * closed_mean;

    double want_mean = std::sqrt(s.abar[std::size_t(t)]) * x0;
    double want_var = 1.0 - s.abar[std::size_t(t)];
    CHECK(std::abs(chain_mean - want_mean) <= 0.05 * std::max(std::abs(want_mean), 0.1));
    CHECK(std::abs(closed_mean - want_mean) <= 0.05 * std::max(std::abs(want_mean), 0.1));
    CHECK(std::abs(chain_var - want_var) <= 0.05 * want_var);
    CHECK(std::abs(closed_var - want_var) <= 0.05 * want_var);
  }
}

TEST_CASE("forward_diffuse implements the closed form exactly") {
  NoiseSchedule s = NoiseSchedule::desk();
  MatX<double> x0(1, 3), eps(1, 3);
  x0 << 0.2, -0.4, 0.9;
  eps << 1.0, -1.0, 0.5;
  int t = 10;
  auto xt = forward_diffuse(x0, t, eps, s);
  double a = std::sqrt(s.abar[std::size_t(t)]), b = std::sqrt(1 - s.abar[std::size_t(t)]);
  for (int i = 0; i < 3; ++i)
    CHECK(xt(0, i) == doctest::Approx(a * x0(0, i) + b * eps(0, i)));
}

TEST_CASE("denoise_estimate inverts known noise and clamps") {
  NoiseSchedule s = NoiseSchedule::linear(4, 0.75, 0.75);  // abar_1 = 0.25
  REQUIRE(s.abar[1] == doctest::Approx(0.25));

  // Stub predicting identically zero noise: x0_hat = xt / sqrt(0.25) = 2 xt.
  MatX<double> xt(1, 3);
  xt << 0.1, 0.4, 0.8;
  auto est = denoise_estimate<double>(ZeroModel{}, xt, 1, s);
  CHECK(est(0, 0) == doctest::Approx(0.2));
  CHECK(est(0, 1) == doctest::Approx(0.8));
  CHECK(est(0, 2) == doctest::Approx(1.0));  // 1.6 clamps to 1

  // Stub predicting exactly the injected noise recovers x0 precisely.
  MatX<double> x0(1, 3), eps(1, 3);
  x0 << -0.5, 0.0, 0.75;
  eps << 0.3, -1.2, 0.9;
  auto noised = forward_diffuse(x0, 1, eps, s);
  auto rec = denoise_estimate<double>(ConstModel{eps}, noised, 1, s);
  for (int i = 0; i < 3; ++i) CHECK(rec(0, i) == doctest::Approx(x0(0, i)));
}

TEST_CASE("denoiser forward shapes and determinism") {
  DenoiserConfig cfg = tiny_config();
  Denoiser<double> m(cfg);
  m.init(5);
  MatX<double> x = MatX<double>::Random(1, 64);
  auto y1 = m.forward(x, 3.0);
  CHECK(y1.rows() == 1);
  CHECK(y1.cols() == 64);
  Denoiser<double> m2(cfg);
  m2.init(5);
  CHECK(same_matrix(y1, m2.forward(x, 3.0)));
  CHECK(m.weight_hash() == m2.weight_hash());
  m2.init(6);
  CHECK(m.weight_hash() != m2.weight_hash());
  // layer registry is consistent
  CHECK(m.layers().size() == m.layer_names().size());
}

TEST_CASE("denoiser backward matches finite differences") {
  DenoiserConfig cfg = tiny_config();
  Denoiser<double> m(cfg);
  m.init(11);
  Rng rng = substream(11, 0xFDFD);
  std::uniform_real_distribution<double> u(-0.5, 0.5);
  MatX<double> x(1, 64), dEps(1, 64);
  for (int i = 0; i < 64; ++i) {
    x(0, i) = u(rng);
    dEps(0, i) = u(rng);
  }
  const double t = 2.0;

  typename Denoiser<double>::Cache cache;
  m.forward(x, t, &cache);
  m.zero_grad();
  MatX<double> dx = m.backward(cache, dEps);

  auto loss_of = [&]() { return (m.forward(x, t).array() * dEps.array()).sum(); };
  const double fd_eps = 1e-6;

  auto layers = m.layers();
  auto names = m.layer_names();
  for (std::size_t li = 0; li < layers.size(); ++li) {
    auto* d = layers[li];
    // probe a few coordinates of each layer
    for (int probe = 0; probe < 3; ++probe) {
      Eigen::Index i = (probe * 7919) % d->W.size();
      double keep = d->W.data()[i];
      d->W.data()[i] = keep + fd_eps;
      double lp = loss_of();
      d->W.data()[i] = keep - fd_eps;
      double lm = loss_of();
      d->W.data()[i] = keep;
      double fd = (lp - lm) / (2 * fd_eps);
      double got = d->dW.data()[i];
      double denom = std::max({std::abs(fd), std::abs(got), 1e-6});
      INFO("layer " << names[li] << " W[" << i << "]");
      CHECK(std::abs(fd - got) / denom < 1e-3);
    }
    if (d->b.size() > 0) {
      Eigen::Index i = d->b.size() / 2;
      double keep = d->b(i);
      d->b(i) = keep + fd_eps;
      double lp = loss_of();
      d->b(i) = keep - fd_eps;
      double lm = loss_of();
      d->b(i) = keep;
      double fd = (lp - lm) / (2 * fd_eps);
      double denom = std::max({std::abs(fd), std::abs(d->db(i)), 1e-6});
      INFO("layer " << names[li] << " b[" << i << "]");
      CHECK(std::abs(fd - d->db(i)) / denom < 1e-3);
    }
  }

  // input gradient as well
  for (int i : {0, 13, 37, 63}) {
    double keep = x(0, i);
    x(0, i) = keep + fd_eps;
    double lp = loss_of();
    x(0, i) = keep - fd_eps;
    double lm = loss_of();
    x(0, i) = keep;
    double fd = (lp - lm) / (2 * fd_eps);
    double denom = std::max({std::abs(fd), std::abs(dx(0, i)), 1e-6});
    CHECK(std::abs(fd - dx(0, i)) / denom < 1e-3);
  }
}

TEST_CASE("low-rank adapter: identity at attach, exact factor shapes") {
  DenoiserConfig cfg = tiny_config();
  Denoiser<double> base(cfg);
  base.init(21);
  MatX<double> x = MatX<double>::Random(1, 64);
  auto y_base = base.forward(x, 4.0);

  AdaptedDenoiser<double> ad(base, 4, 1.0, 33);
  // B starts at zero, so the adapted model reproduces the base bit-exactly.
  CHECK(same_matrix(ad.forward(x, 4.0), y_base));

  // factor shapes: A is rows x r, B is r x cols, per adapted layer
  auto layers = base.layers();
  REQUIRE(ad.A.size() == layers.size());
  for (std::size_t i = 0; i < layers.size(); ++i) {
    CHECK(ad.A[i].rows() == layers[i]->W.rows());
    CHECK(ad.A[i].cols() == 4);
    CHECK(ad.B[i].rows() == 4);
    CHECK(ad.B[i].cols() == layers[i]->W.cols());
    CHECK((ad.B[i].array() == 0.0).all());
  }

  // delta = 0 keeps identity even with nonzero factors
  AdaptedDenoiser<double> ad0(base, 4, 0.0, 33);
  for (auto& b : ad0.B) b.setRandom();
  ad0.refresh();
  CHECK(same_matrix(ad0.forward(x, 4.0), y_base));
}

TEST_CASE("fine-tuning trains only the adapter; the base hash is frozen") {
  DenoiserConfig cfg = tiny_config();
  Denoiser<double> base(cfg);
  base.init(2);
  std::uint64_t hash_before = base.weight_hash();

  AdaptedDenoiser<double> ad(base, 2, 1.0, 3);
  NoiseSchedule sched = NoiseSchedule::linear(10, 1e-3, 0.2);
  std::vector<Grid3> patches;
  for (int i = 0; i < 4; ++i) {
    Grid3 g(4, 4, 4, 0.25 * i);
    patches.push_back(g);
  }
  PriorTrainConfig pcfg;
  pcfg.iterations = 8;
  pcfg.batch = 2;
  pcfg.lr = 1e-3;
  pcfg.seed = 9;
  auto losses = finetune_prior(ad, patches, sched, pcfg);
  REQUIRE(losses.size() == 8);
  for (double l : losses) CHECK(std::isfinite(l));

  CHECK(ad.base.weight_hash() == hash_before);
  CHECK(base.weight_hash() == hash_before);
  // adapter actually moved: effective output differs from the base now
  MatX<double> x = MatX<double>::Random(1, 64);
  CHECK(!same_matrix(ad.forward(x, 2.0), base.forward(x, 2.0)));
  CHECK(ad.factor_param_count() > 0);
}

TEST_CASE("prior training reduces to finite losses and is deterministic") {
  DenoiserConfig cfg = tiny_config();
  NoiseSchedule sched = NoiseSchedule::linear(10, 1e-3, 0.2);
  std::vector<Grid3> patches;
  for (int i = 0; i < 6; ++i) {
    Grid3 g(4, 4, 4, 0.0);
    for (std::size_t v = 0; v < g.data.size(); ++v) g.data[v] = ((v + i) % 5) / 4.0;
    patches.push_back(g);
  }
  PriorTrainConfig pcfg;
  pcfg.iterations = 10;
  pcfg.batch = 3;
  pcfg.seed = 4;

  Denoiser<double> m1(cfg);
  m1.init(4);
  auto l1 = train_prior(m1, patches, sched, pcfg);
  Denoiser<double> m2(cfg);
  m2.init(4);
  auto l2 = train_prior(m2, patches, sched, pcfg);
  REQUIRE(l1.size() == 10);
  CHECK(l1 == l2);
  CHECK(m1.weight_hash() == m2.weight_hash());
  for (double l : l1) CHECK(std::isfinite(l));
}

TEST_CASE("guidance targets are deterministic and in range") {
  DenoiserConfig cfg = tiny_config();
  cfg.input_res = kPatchRes;  // guidance operates on 32^3 patches
  cfg.mults = {1, 2};
  Denoiser<float> m(cfg);
  m.init(7);
  NoiseSchedule sched = NoiseSchedule::desk();
  Grid3 rb(kPatchRes, kPatchRes, kPatchRes, 0.3), rs(kPatchRes, kPatchRes, kPatchRes, 0.6);

  auto [m1b, m1s] = guidance_targets<float>(m, rb, rs, 10, sched, 123);
  auto [m2b, m2s] = guidance_targets<float>(m, rb, rs, 10, sched, 123);
  CHECK(m1b.data == m2b.data);
  CHECK(m1s.data == m2s.data);
  for (double v : m1b.data) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
  // different channels get independent noise draws
  CHECK(m1b.data != m1s.data);
  auto [m3b, m3s] = guidance_targets<float>(m, rb, rs, 10, sched, 124);
  CHECK(m1b.data != m3b.data);
  (void)m3s;
}

TEST_CASE("prior and adapter checkpoints round trip") {
  namespace fs = std::filesystem;
  std::string dir = (fs::temp_directory_path() / "nerfus_prior_test").string();
  fs::create_directories(dir);

  DenoiserConfig cfg = tiny_config();
  Denoiser<float> m(cfg);
  m.init(31);
  NoiseSchedule sched = NoiseSchedule::linear(12, 1e-3, 0.15);

  Checkpoint ck;
  prior_to_checkpoint(m, sched, ck);
  ck.save(dir + "/prior.ckpt");
  CHECK(!checkpoint_has_adapter(ck));

  Denoiser<float> m_back;
  NoiseSchedule s_back;
  prior_from_checkpoint(Checkpoint::load(dir + "/prior.ckpt"), m_back, s_back);
  CHECK(m_back.weight_hash() == m.weight_hash());
  CHECK(s_back.T == 12);
  CHECK(s_back.abar[12] == doctest::Approx(sched.abar[12]));

  AdaptedDenoiser<float> ad(m, 3, 0.5, 8);
  for (auto& a : ad.A) a.setRandom();
  for (auto& b : ad.B) b.setRandom();
  ad.refresh();
  Checkpoint ck2;
  adapter_to_checkpoint(ad, sched, ck2);
  ck2.save(dir + "/adapter.ckpt");

  Checkpoint loaded = Checkpoint::load(dir + "/adapter.ckpt");
  CHECK(checkpoint_has_adapter(loaded));
  NoiseSchedule sched_back;
  AdaptedDenoiser<float> ad_back = adapter_from_checkpoint<float>(loaded, sched_back);
  CHECK(ad_back.rank == 3);
  CHECK(ad_back.delta == doctest::Approx(0.5));
  CHECK(ad_back.base.weight_hash() == m.weight_hash());
  MatX<float> x = MatX<float>::Random(1, 64);
  CHECK(same_matrix(ad_back.forward(x, 5.0), ad.forward(x, 5.0)));
  (void)sched_back;
}

TEST_CASE("ancestral sampling runs and stays finite") {
  DenoiserConfig cfg = tiny_config();
  Denoiser<double> m(cfg);
  m.init(13);
  NoiseSchedule sched = NoiseSchedule::linear(5, 1e-3, 0.1);
  auto x = sample_ancestral<double>(m, sched, 64, 99);
  CHECK(x.cols() == 64);
  for (Eigen::Index i = 0; i < x.size(); ++i) CHECK(std::isfinite(x.data()[i]));
}

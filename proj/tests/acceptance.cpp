// End-to-end acceptance checks. Each criterion prints exactly one
// "[PASS]"/"[FAIL]" line; the process exits non-zero if any fail.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "nerfus/metrics.hpp"
#include "nerfus/phantom.hpp"
#include "nerfus/prior/ddpm.hpp"
#include "nerfus/prior/lora.hpp"
#include "nerfus/train.hpp"

using namespace nerfus;
namespace fs = std::filesystem;

namespace {

// ---- frozen fixture constants ----------------------------------------------
// Reconstruction thresholds; confirmed against the first oracle run of the
// layered desk fixture and frozen since.
constexpr double kPsnrThresholdDb = 25.0;
constexpr double kSsimThreshold = 0.8;

constexpr int kFixtureFrames = 20;
constexpr int kFixtureIterations = 2000;
constexpr int kFixtureBatch = 128;
constexpr int kPriorTrainSteps = 400;
constexpr int kPriorFinetuneSteps = 200;

int g_pass = 0, g_fail = 0;

void report(int criterion, bool ok, const std::string& what) {
  std::printf("[%s] criterion %d: %s\n", ok ? "PASS" : "FAIL", criterion, what.c_str());
  std::fflush(stdout);
  (ok ? g_pass : g_fail)++;
}

void progress(const std::string& msg) {
  std::fprintf(stderr, "[acceptance] %s\n", msg.c_str());
}

std::string work_dir() {
  fs::path p = fs::temp_directory_path() / "nerfus_acceptance";
  fs::create_directories(p);
  return p.string();
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

ParameterSample ps(double a, double b, double rb, double rs, double phi) {
  return {a, b, rb, rs, phi};
}

ProbeConfig desk_probe() {
  ProbeConfig p;
  p.n_scanlines = 64;
  p.n_samples = 128;
  p.depth_extent = 1.0;
  return p;
}

PhantomSpec fixture_spec() {
  return load_phantom_spec(std::string(NERFUS_TEST_DATA_DIR) + "/desk_phantom.json");
}

std::vector<Pose> fixture_trajectory(int frames) {
  std::vector<Pose> tr;
  for (int i = 0; i < frames; ++i)
    tr.push_back(Pose::translation(0.0, -0.2 + 0.4 * i / double(frames - 1), 0.0));
  return tr;
}

TrainConfig fixture_train_config(std::uint64_t seed) {
  TrainConfig cfg;
  cfg.iterations = kFixtureIterations;
  cfg.batch_size = kFixtureBatch;
  cfg.field = FieldConfig::desk();
  cfg.seed = seed;
  cfg.guidance_patches = 2;
  return cfg;
}

// Sparse-view variant: every 4th training frame dropped.
SweepDataset sparsify(const SweepDataset& ds) {
  SweepDataset out = ds;
  out.train_indices.clear();
  for (std::size_t i = 0; i < ds.train_indices.size(); ++i)
    if (i % 4 != 0) out.train_indices.push_back(ds.train_indices[i]);
  return out;
}

// ---- criterion 1: rendering closed forms ------------------------------------

bool criterion1() {
  ProbeConfig probe;
  probe.n_samples = 2;
  probe.depth_extent = 2.0;  // dt = 1
  RenderConfig cfg;
  auto I = transmit({ps(1, 0, 0, 0, 0), ps(0, 0, 0, 0, 0)}, probe, cfg);
  if (std::abs(I[1] - std::exp(-1.0)) >= 1e-6) return false;

  probe.n_samples = 5;
  probe.depth_extent = 5 * 0.3;
  probe.frequency = 1.7;
  probe.initial_intensity = 0.9;
  std::vector<ParameterSample> samples = {ps(0.2, 0.15, 0.05, 0, 0), ps(0.9, 0.3, 0.2, 0, 0),
                                          ps(0.5, 0.02, 0.6, 0, 0), ps(1.4, 0.25, 0.1, 0, 0),
                                          ps(0.1, 0.1, 0.1, 0, 0)};
  I = transmit(samples, probe, cfg);
  double dt = probe.sample_spacing(), f = probe.frequency;
  for (std::size_t t = 0; t < samples.size(); ++t) {
    double asum = 0.0, prod = 1.0;
    for (std::size_t n = 0; n < t; ++n) {
      asum += samples[n].attenuation;
      prod *= (1.0 - samples[n].reflectance) * (1.0 - samples[n].border_prob);
    }
    double want = probe.initial_intensity * prod * std::exp(-dt * f * asum);
    if (std::abs(I[t] - want) >= 1e-6) return false;
  }
  return true;
}

// ---- criterion 2: finite-difference gradient suite --------------------------

bool rel_ok(double fd, double an) {
  double denom = std::max({std::abs(fd), std::abs(an), 1e-6});
  return std::abs(fd - an) / denom < 1e-3;
}

bool criterion2() {
  bool ok = true;
  const double fd_eps = 1e-6;

  for (std::uint64_t seed = 0; seed < 20 && ok; ++seed) {
    Rng rng = substream(seed, 0xACC2);
    std::uniform_real_distribution<double> u(0.1, 0.9);

    // field_eval: gradients of a weighted head sum w.r.t. mlp parameters.
    {
      FieldConfig fcfg{3, 8, 1, 2};
      FieldState<double> field(fcfg, seed);
      std::vector<Point3> pts{{u(rng) - 0.5, u(rng) - 0.5, u(rng)}};
      MatX<double> wgt = MatX<double>::Random(5, 1);
      Mlp<double>::Cache cache;
      MatX<double> raw = field.eval_raw_batch(pts, &cache);
      auto grads = field.mlp.backward(cache, head_activation_backward(raw, wgt));
      std::vector<double> flat, gflat;
      field.mlp.to_flat(flat);
      Mlp<double>::grads_to_flat(grads, gflat);
      auto loss = [&]() {
        MatX<double> r = field.eval_raw_batch(pts);
        apply_head_activations(r);
        return (r.array() * wgt.array()).sum();
      };
      // ReLU hidden units: probes whose FD step flips an activation are not
      // comparable to the analytic gradient and are skipped.
      auto pattern = [&]() {
        Mlp<double>::Cache c;
        field.eval_raw_batch(pts, &c);
        std::vector<bool> pat;
        for (int l = 0; l + 1 < fcfg.n_layers; ++l)
          for (Eigen::Index k = 0; k < c.pre[std::size_t(l)].size(); ++k)
            pat.push_back(c.pre[std::size_t(l)].data()[k] > 0.0);
        return pat;
      };
      for (int probe = 0; probe < 10 && ok; ++probe) {
        std::uniform_int_distribution<std::size_t> pick(0, flat.size() - 1);
        std::size_t i = pick(rng);
        double keep = flat[i];
        flat[i] = keep + fd_eps;
        field.mlp.from_flat(flat);
        double lp = loss();
        auto pat_p = pattern();
        flat[i] = keep - fd_eps;
        field.mlp.from_flat(flat);
        double lm = loss();
        auto pat_m = pattern();
        flat[i] = keep;
        field.mlp.from_flat(flat);
        if (pat_p != pat_m) continue;
        ok = rel_ok((lp - lm) / (2 * fd_eps), gflat[i]);
      }
    }

    // transmit + compose_bmode via the full frame renderer.
    {
      ProbeConfig probe;
      probe.n_scanlines = 2;
      probe.n_samples = 4;
      probe.depth_extent = 0.4;
      RenderConfig rcfg;
      const Eigen::Index N = 8;
      MatX<double> params(5, N), dE(4, 2);
      for (Eigen::Index i = 0; i < params.size(); ++i) params.data()[i] = u(rng);
      for (Eigen::Index i = 0; i < dE.size(); ++i) dE.data()[i] = u(rng) - 0.5;
      auto fc = render_frame_from_params<double>(params, probe, rcfg, 0);
      MatX<double> grad = frame_backward(fc, dE);
      auto loss = [&](const MatX<double>& p) {
        auto c = render_frame_from_params<double>(p, probe, rcfg, 0);
        double l = 0;
        for (int t = 0; t < 4; ++t)
          for (int j = 0; j < 2; ++j) l += dE(t, j) * clamp01(c.P(t, j));
        return l;
      };
      for (int probe_i = 0; probe_i < 10 && ok; ++probe_i) {
        int r = int(rng() % 5);
        Eigen::Index cidx = Eigen::Index(rng() % N);
        MatX<double> pp = params, pm = params;
        pp(r, cidx) += fd_eps;
        pm(r, cidx) -= fd_eps;
        ok = rel_ok((loss(pp) - loss(pm)) / (2 * fd_eps), grad(r, cidx));
      }
    }

    // render_volume_standard backward.
    {
      const std::size_t n = 5;
      std::vector<double> sig(n), col(n), dE(n);
      for (std::size_t i = 0; i < n; ++i) {
        sig[i] = u(rng);
        col[i] = u(rng);
        dE[i] = u(rng) - 0.5;
      }
      auto c = std_render_column<double>(sig, col, 0.2);
      auto [dsig, dcol] = std_column_backward(c, dE);
      auto loss = [&](const std::vector<double>& s, const std::vector<double>& cl) {
        auto e = std_column_contributions(std_render_column<double>(s, cl, 0.2));
        double l = 0;
        for (std::size_t i = 0; i < n; ++i) l += dE[i] * e[i];
        return l;
      };
      for (std::size_t i = 0; i < n && ok; ++i) {
        auto sp = sig, sm = sig;
        sp[i] += fd_eps;
        sm[i] -= fd_eps;
        ok = rel_ok((loss(sp, col) - loss(sm, col)) / (2 * fd_eps), dsig[i]);
        if (!ok) break;
        auto cp = col, cm = col;
        cp[i] += fd_eps;
        cm[i] -= fd_eps;
        ok = rel_ok((loss(sig, cp) - loss(sig, cm)) / (2 * fd_eps), dcol[i]);
      }
    }

    // total_loss photometric gradient: d/dr of the batch-mean squared error.
    {
      std::vector<std::vector<double>> rendered{{u(rng), u(rng)}, {u(rng), u(rng)}};
      std::vector<std::vector<double>> reference{{u(rng), u(rng)}, {u(rng), u(rng)}};
      double an = 2.0 * (rendered[0][1] - reference[0][1]) / double(rendered.size());
      auto lp = rendered, lm = rendered;
      lp[0][1] += fd_eps;
      lm[0][1] -= fd_eps;
      double fd = (total_loss(lp, reference, 0, 0, {}).photometric -
                   total_loss(lm, reference, 0, 0, {}).photometric) /
                  (2 * fd_eps);
      ok = ok && rel_ok(fd, an);
    }
  }
  return ok;
}

// ---- criterion 3: DDPM marginal law -----------------------------------------

bool criterion3() {
  NoiseSchedule s = NoiseSchedule::linear(20, 1e-3, 0.2);
  const int draws = 10000;
  const double x0 = 0.5;
  std::normal_distribution<double> n01(0.0, 1.0);
  bool ok = true;
  for (int t : {7, 20}) {
    Rng rng = substream(5, 0xACC3, std::uint64_t(t));
    double mean = 0, m2 = 0;
    for (int d = 0; d < draws; ++d) {
      double x = x0;
      for (int k = 1; k <= t; ++k)
        x = std::sqrt(1.0 - s.beta[std::size_t(k)]) * x +
            std::sqrt(s.beta[std::size_t(k)]) * n01(rng);
      mean += x;
      m2 += x * x;
    }
    mean /= draws;
    double var = m2 / draws - mean * mean;
    double want_mean = std::sqrt(s.abar[std::size_t(t)]) * x0;
    double want_var = 1.0 - s.abar[std::size_t(t)];
    ok = ok && std::abs(mean - want_mean) <= 0.05 * std::max(std::abs(want_mean), 0.1) &&
         std::abs(var - want_var) <= 0.05 * want_var;
  }
  return ok;
}

// ---- criterion 4: low-rank adapter identity and containment ------------------

bool criterion4() {
  DenoiserConfig cfg;
  cfg.base_width = 2;
  cfg.mults = {1, 2};
  cfg.temb_dim = 4;
  cfg.input_res = 4;
  Denoiser<double> base(cfg);
  base.init(17);
  MatX<double> x = MatX<double>::Random(1, 64);
  MatX<double> y = base.forward(x, 3.0);

  // zero-init factors reproduce the base bit-exactly; so does delta = 0
  AdaptedDenoiser<double> ad(base, 4, 1.0, 5);
  if (!((ad.forward(x, 3.0).array() == y.array()).all())) return false;
  AdaptedDenoiser<double> ad0(base, 4, 0.0, 5);
  for (auto& b : ad0.B) b.setRandom();
  ad0.refresh();
  if (!((ad0.forward(x, 3.0).array() == y.array()).all())) return false;

  // rank-4 factor shapes per layer
  auto layers = base.layers();
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (ad.A[i].rows() != layers[i]->W.rows() || ad.A[i].cols() != 4) return false;
    if (ad.B[i].rows() != 4 || ad.B[i].cols() != layers[i]->W.cols()) return false;
  }

  // fine-tuning leaves the base hash untouched
  std::uint64_t hash = base.weight_hash();
  NoiseSchedule sched = NoiseSchedule::linear(10, 1e-3, 0.2);
  std::vector<Grid3> patches(4, Grid3(4, 4, 4, 0.5));
  PriorTrainConfig pcfg;
  pcfg.iterations = 6;
  pcfg.batch = 2;
  finetune_prior(ad, patches, sched, pcfg);
  return ad.base.weight_hash() == hash && base.weight_hash() == hash;
}

// ---- criterion 5: oracle equivalence keystone --------------------------------

bool criterion5(const ParameterVolume& vol) {
  ProbeConfig probe = desk_probe();
  RenderConfig cfg;
  Rng rng = substream(9, 0xACC5);
  std::uniform_real_distribution<double> u(-0.2, 0.2);
  std::vector<Pose> poses;
  for (int i = 0; i < 10; ++i) poses.push_back(Pose::translation(0.0, u(rng), 0.0));
  SweepDataset oracle = simulate_sweep(vol, poses, probe, cfg, 0);

  auto sampler = [&](const std::vector<Point3>& pts) {
    MatX<double> params(5, Eigen::Index(pts.size()));
    for (std::size_t i = 0; i < pts.size(); ++i) {
      ParameterSample s = vol.sample(pts[i]);
      params.col(Eigen::Index(i)) << s.attenuation, s.reflectance, s.border_prob,
          s.scatter_density, s.scatter_intensity;
    }
    return params;
  };
  for (int i = 0; i < 10; ++i) {
    Image img = render_frame_with<double>(sampler, poses[std::size_t(i)], probe, cfg, 0);
    const Image& ref = oracle.frames[std::size_t(i)].image;
    for (std::size_t p = 0; p < img.v.size(); ++p)
      if (std::abs(img.v[p] - ref.v[p]) >= 1e-6) return false;
  }
  return true;
}

// ---- criterion 9: metric unit examples ---------------------------------------

bool criterion9() {
  Image a(16, 16), zero(8, 8), one(8, 8), c4(8, 8), c5(8, 8);
  for (int r = 0; r < 16; ++r)
    for (int c = 0; c < 16; ++c) a.at(r, c) = double(r + c) / 30.0;
  for (double& v : one.v) v = 1.0;
  for (double& v : c4.v) v = 0.4;
  for (double& v : c5.v) v = 0.5;

  bool ok = std::abs(psnr(zero, one) - 0.0) < 1e-12;
  ok = ok && std::abs(psnr(c4, c5) - 20.0) < 1e-9;
  ok = ok && psnr(a, a) == kPsnrCap;
  Image b = a;
  b.v[40] += 0.25;
  ok = ok && psnr(a, b) == psnr(b, a) && ssim(a, b) == ssim(b, a);
  Image big(32, 32);
  for (int r = 0; r < 32; ++r)
    for (int c = 0; c < 32; ++c) big.at(r, c) = double(r * c) / (31.0 * 31.0);
  ok = ok && std::abs(ssim(big, big) - 1.0) < 1e-12;
  return ok;
}

// ---- heavy fixtures ----------------------------------------------------------

struct Fixture {
  SweepDataset ds;          // as reloaded from disk (8-bit quantized frames)
  Denoiser<float> prior;    // fine-tuned effective weights
  NoiseSchedule sched;
  std::string data_dir;
  std::string prior_path;
};

Fixture build_fixture(const ParameterVolume& vol, const PhantomSpec& spec) {
  Fixture fx;
  std::string root = work_dir();
  fx.data_dir = root + "/data";
  fx.prior_path = root + "/prior_finetuned.ckpt";

  progress("rendering the fixture sweep");
  SweepDataset ds =
      simulate_sweep(vol, fixture_trajectory(kFixtureFrames), desk_probe(), RenderConfig{}, 1);
  fs::remove_all(fx.data_dir);
  write_dataset(ds, fx.data_dir);
  fx.ds = load_dataset(fx.data_dir);

  fx.sched = NoiseSchedule::desk();
  Denoiser<float> base;  // default desk denoiser config
  base.init(1);
  PriorTrainConfig pc;
  pc.iterations = kPriorTrainSteps;
  pc.batch = 4;
  pc.seed = 1;
  pc.verbose = true;
  pc.log_every = 25;
  progress("training the base prior (" + std::to_string(pc.iterations) + " steps)");
  train_prior(base, procedural_patches(200, 1), fx.sched, pc);

  progress("fine-tuning the adapter (" + std::to_string(kPriorFinetuneSteps) + " steps)");
  std::vector<Grid3> patches;
  for (auto& p : extract_patches(vol.rho_b, vol.origin, vol.extent, 20, 0.1, 0.4,
                                 splitmix64(std::uint64_t(1) ^ 0xB)))
    patches.push_back(std::move(p.grid));
  for (auto& p : extract_patches(vol.rho_s, vol.origin, vol.extent, 20, 0.1, 0.4,
                                 splitmix64(std::uint64_t(1) ^ 0x5)))
    patches.push_back(std::move(p.grid));
  AdaptedDenoiser<float> adapter(base, 4, 1.0, 2);
  PriorTrainConfig fc;
  fc.iterations = kPriorFinetuneSteps;
  fc.batch = 4;
  fc.seed = 2;
  fc.verbose = true;
  fc.log_every = 10;
  finetune_prior(adapter, patches, fx.sched, fc);

  Checkpoint ck;
  adapter_to_checkpoint(adapter, fx.sched, ck);
  ck.save(fx.prior_path);
  fx.prior = adapter.eff;
  return fx;
}

// criteria 6 and 10: deterministic end-to-end reconstruction via the CLI.
bool criterion6_and_10(const Fixture& fx, bool& determinism_ok, MetricReport& m) {
  std::string root = work_dir();
  std::string cfg_path = root + "/fixture.cfg";
  {
    std::ofstream cfg(cfg_path);
    cfg << "iterations = " << kFixtureIterations << "\n"
        << "batch_size = " << kFixtureBatch << "\n"
        << "guidance.patches = 2\n"
        << "checkpoint_interval = 1000\n";
  }
  auto run_once = [&](const std::string& out) {
    std::string cmd = std::string(NERFUS_CLI_PATH) + " train --config " + cfg_path +
                      " --data " + fx.data_dir + " --prior " + fx.prior_path +
                      " --seed 7 --out " + out + " > " + out + ".log 2>&1";
    return std::system(cmd.c_str()) == 0;
  };
  progress("criterion 6/10: training run A (this is the long part)");
  if (!run_once(root + "/runA")) return false;
  progress("criterion 6/10: training run B");
  if (!run_once(root + "/runB")) return false;

  determinism_ok =
      slurp(root + "/runA/loss.csv") == slurp(root + "/runB/loss.csv") &&
      !slurp(root + "/runA/loss.csv").empty() &&
      slurp(root + "/runA/field_latest.ckpt") == slurp(root + "/runB/field_latest.ckpt");

  auto field =
      field_from_checkpoint<float>(Checkpoint::load(root + "/runA/field_latest.ckpt"));
  m = evaluate_field(field, fx.ds, RenderConfig{}, true, 7);
  return m.psnr_mean >= kPsnrThresholdDb && m.ssim_mean >= kSsimThreshold;
}

// criterion 7: ablation ordering over 3 seeds.
bool criterion7(const Fixture& fx, std::string& detail) {
  double full = 0, wo_rb = 0, wo_rs = 0, wo_us = 0;
  for (std::uint64_t seed : {11, 12, 13}) {
    progress("criterion 7: ablation suite, seed " + std::to_string(seed));
    TrainConfig cfg = fixture_train_config(seed);
    auto suite = ablation_suite<float>(fx.ds, &fx.prior, &fx.sched, cfg);
    full += suite.rows[0].psnr / 3.0;
    wo_rb += suite.rows[1].psnr / 3.0;
    wo_rs += suite.rows[2].psnr / 3.0;
    wo_us += suite.rows[3].psnr / 3.0;
  }
  char buf[256];
  std::snprintf(buf, sizeof buf,
                "mean PSNR: full %.2f, w/o border loss %.2f, w/o scatter loss %.2f (reported), "
                "w/o transmit rendering %.2f",
                full, wo_rb, wo_rs, wo_us);
  detail = buf;
  return full > wo_rb && full > wo_us;
}

// criterion 8: guidance beats no-guidance on the sparse-view fixture.
bool criterion8(const Fixture& fx, std::string& detail) {
  SweepDataset sparse = sparsify(fx.ds);
  double with_g = 0, without_g = 0;
  for (std::uint64_t seed : {21, 22, 23}) {
    progress("criterion 8: sparse-view pair, seed " + std::to_string(seed));
    TrainConfig cfg = fixture_train_config(seed);
    auto guided = train_field<float>(sparse, &fx.prior, &fx.sched, cfg);
    with_g += evaluate_field(guided.field, sparse, cfg.render, true, seed).psnr_mean / 3.0;

    TrainConfig plain = cfg;
    plain.weights = {0.0, 0.0};  // lambda = 0 run
    auto unguided = train_field<float>(sparse, &fx.prior, &fx.sched, plain);
    without_g += evaluate_field(unguided.field, sparse, plain.render, true, seed).psnr_mean / 3.0;
  }
  char buf[160];
  std::snprintf(buf, sizeof buf, "sparse-view mean PSNR: guided %.2f vs unguided %.2f", with_g,
                without_g);
  detail = buf;
  return with_g > without_g;
}

}  // namespace

int main() {
  auto t0 = std::chrono::steady_clock::now();
  PhantomSpec spec = fixture_spec();
  ParameterVolume vol = build_phantom(spec);

  report(1, criterion1(), "transmit matches its closed form (incl. the e^-1 step) to 1e-6");
  report(2, criterion2(),
         "finite-difference gradient suite (field, transmit/compose, standard rendering, "
         "total loss) under 1e-3 relative error over 20 seeds");
  report(3, criterion3(),
         "stepwise diffusion chain matches the closed-form marginal within 5% at T=20");
  report(4, criterion4(),
         "low-rank adapter: bit-exact identity at attach and delta=0, frozen base hash, "
         "rank-4 factor shapes");
  report(5, criterion5(vol),
         "field forced to phantom parameters matches the sweep oracle within 1e-6 at 10 poses");
  report(9, criterion9(), "metric examples: 0 dB, 20 dB, cap, symmetry, self-similarity = 1");

  Fixture fx = build_fixture(vol, spec);

  bool det_ok = false;
  MetricReport m;
  bool rec_ok = criterion6_and_10(fx, det_ok, m);
  {
    char buf[160];
    std::snprintf(buf, sizeof buf,
                  "desk reconstruction: test PSNR %.2f dB (>= %.0f), SSIM %.4f (>= %.1f)",
                  m.psnr_mean, kPsnrThresholdDb, m.ssim_mean, kSsimThreshold);
    report(6, rec_ok, buf);
  }

  std::string detail7;
  bool ok7 = criterion7(fx, detail7);  // sequenced before the message is built
  report(7, ok7, "ablation ordering: " + detail7);

  std::string detail8;
  bool ok8 = criterion8(fx, detail8);
  report(8, ok8, "guidance on sparse views: " + detail8);

  report(10, det_ok, "two seed-7 training runs produce byte-identical loss CSVs and checkpoints");

  auto secs = std::chrono::duration_cast<std::chrono::seconds>(
                  std::chrono::steady_clock::now() - t0)
                  .count();
  std::printf("%d/%d criteria passed (%lld s)\n", g_pass, g_pass + g_fail,
              static_cast<long long>(secs));
  return g_fail == 0 ? 0 : 1;
}

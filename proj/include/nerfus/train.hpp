// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "nerfus/core/config.hpp"
#include "nerfus/core/dataset.hpp"
#include "nerfus/core/grid.hpp"
#include "nerfus/field.hpp"
#include "nerfus/metrics.hpp"
#include "nerfus/prior/ddpm.hpp"
#include "nerfus/usrender.hpp"

namespace nerfus {

struct LossWeights {
  double lambda_rho_b = 0.5;
  double lambda_rho_s = 0.25;

  void validate() const {
    require(lambda_rho_b >= 0 && lambda_rho_s >= 0, "loss weights must be >= 0");
  }
};

struct TrainConfig {
  int iterations = 2000;
  int batch_size = 512;
  double lr_start = 5e-4;
  double lr_end = 5e-5;
  double clip_norm = 10.0;
  int checkpoint_interval = 500;
  int guidance_cadence = 10;
  int guidance_patches = 4;
  int guidance_t = -1;  // -1: timesteps / 10
  double guidance_size_min = 0.1;
  double guidance_size_max = 0.4;
  bool use_l_rho_b = true;
  bool use_l_rho_s = true;
  bool use_us_rendering = true;
  std::uint64_t seed = 0;
  bool verbose = false;
  std::string resume_path;

  FieldConfig field = FieldConfig::desk();
  RenderConfig render;
  LossWeights weights;

  void validate() const {
    require(iterations >= 1 && batch_size >= 1, "train: iterations and batch_size must be >= 1");
    require(guidance_cadence >= 1 && guidance_patches >= 1,
            "train: guidance cadence/patches must be >= 1");
    require(lr_start > 0 && lr_end > 0 && lr_end <= lr_start, "train: bad lr schedule endpoints");
    require(clip_norm > 0, "train: clip_norm must be > 0");
    field.validate();
    render.validate();
    weights.validate();
  }
};

// ---- RunConfig wiring ----------------------------------------------------

inline FieldConfig field_config_from(const RunConfig& rc) {
  return {rc.field_layers, rc.field_width, rc.field_skip, rc.field_pe_frequencies};
}

inline RenderConfig render_config_from(const RunConfig& rc) {
  RenderConfig r;
  r.boundary_mode = rc.render_boundary_mode == "bernoulli"
                        ? SampleMode::bernoulli_straight_through
                        : SampleMode::expected;
  r.scatter_mode = rc.render_scatter_mode == "bernoulli" ? SampleMode::bernoulli_straight_through
                                                         : SampleMode::expected;
  r.w_reflect = rc.render_w_reflect;
  r.w_scatter = rc.render_w_scatter;
  r.psf_enabled = rc.render_psf;
  r.psf_size = rc.render_psf_size;
  r.psf_sigma_axial = rc.render_psf_sigma_axial;
  r.psf_sigma_lateral = rc.render_psf_sigma_lateral;
  return r;
}

inline NoiseSchedule schedule_from(const RunConfig& rc) {
  return NoiseSchedule::linear(rc.prior_timesteps, rc.prior_beta_min, rc.prior_beta_max);
}

inline DenoiserConfig denoiser_config_from(const RunConfig& rc) {
  DenoiserConfig d;
  d.base_width = rc.prior_base_width;
  d.temb_dim = rc.prior_temb_dim;
  d.mults.clear();
  std::string cur;
  for (char ch : rc.prior_mults + ",") {
    if (ch == ',') {
      if (!cur.empty()) d.mults.push_back(detail::parse_num<int>(cur, "prior.mults"));
      cur.clear();
    } else {
      cur += ch;
    }
  }
  d.validate();
  return d;
}

inline TrainConfig train_config_from(const RunConfig& rc) {
  TrainConfig t;
  t.iterations = rc.iterations;
  t.batch_size = rc.batch_size;
  t.lr_start = rc.lr_start;
  t.lr_end = rc.lr_end;
  t.clip_norm = rc.clip_norm;
  t.checkpoint_interval = rc.checkpoint_interval;
  t.guidance_cadence = rc.guidance_cadence;
  t.guidance_patches = rc.guidance_patches;
  t.guidance_t = rc.guidance_t;
  t.guidance_size_min = rc.guidance_size_min;
  t.guidance_size_max = rc.guidance_size_max;
  t.use_l_rho_b = rc.use_l_rho_b;
  t.use_l_rho_s = rc.use_l_rho_s;
  t.use_us_rendering = rc.use_us_rendering;
  t.seed = rc.seed;
  t.field = field_config_from(rc);
  t.render = render_config_from(rc);
  t.weights = {rc.lambda_rho_b, rc.lambda_rho_s};
  return t;
}

// ---- loss bookkeeping ----------------------------------------------------

struct LossReport {
  int step = 0;
  double photometric = 0, l_rho_b = 0, l_rho_s = 0, total = 0, lr = 0;

  static LossReport make(int step, double photometric, double l_rho_b, double l_rho_s,
                         const LossWeights& w, double lr) {
    LossReport r;
    r.step = step;
    r.photometric = photometric;
    r.l_rho_b = l_rho_b;
    r.l_rho_s = l_rho_s;
    r.total = photometric + w.lambda_rho_b * l_rho_b + w.lambda_rho_s * l_rho_s;
    r.lr = lr;
    return r;
  }
};

inline std::string loss_history_csv(const std::vector<LossReport>& hist) {
  std::string out = "step,photometric,l_rho_b,l_rho_s,total,lr\n";
  char buf[256];
  for (const auto& r : hist) {
    std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g,%.17g,%.17g,%.17g\n", r.step, r.photometric,
                  r.l_rho_b, r.l_rho_s, r.total, r.lr);
    out += buf;
  }
  return out;
}

/// Exponential decay from lr_start at step 0 to lr_end at the final step.
inline double lr_at(const TrainConfig& cfg, int step) {
  if (cfg.iterations <= 1) return cfg.lr_start;
  double frac = double(step) / double(cfg.iterations - 1);
  return cfg.lr_start * std::pow(cfg.lr_end / cfg.lr_start, frac);
}

/// total_loss per the batch objective: photometric sum of squared column
/// differences (averaged over the batch) plus weighted guidance terms.
inline LossReport total_loss(const std::vector<std::vector<double>>& rendered,
                             const std::vector<std::vector<double>>& reference, double l_rho_b,
                             double l_rho_s, const LossWeights& w) {
  require(rendered.size() == reference.size() && !rendered.empty(), "total_loss: batch mismatch");
  double photo = 0.0;
  for (std::size_t r = 0; r < rendered.size(); ++r) {
    require(rendered[r].size() == reference[r].size(), "total_loss: column shape mismatch");
    for (std::size_t t = 0; t < rendered[r].size(); ++t) {
      double d = rendered[r][t] - reference[r][t];
      photo += d * d;
    }
  }
  photo /= double(rendered.size());
  return LossReport::make(0, photo, l_rho_b, l_rho_s, w, 0.0);
}

// ---- ray batching ----------------------------------------------------------

struct RayRef {
  int frame = 0;     // index into dataset.frames
  int scanline = 0;  // column index
};

/// Uniform sample without replacement over (train frame, scanline) pairs,
/// deterministic in (seed, step).
inline std::vector<RayRef> sample_ray_batch(const SweepDataset& ds, int batch_size,
                                            std::uint64_t seed, int step) {
  require(!ds.train_indices.empty(), "sample_ray_batch: empty train split");
  require(batch_size >= 1, "sample_ray_batch: batch_size must be >= 1");
  const int W = ds.probe.n_scanlines;
  const std::size_t total = ds.train_indices.size() * std::size_t(W);
  std::vector<std::uint32_t> ids(total);
  for (std::size_t i = 0; i < total; ++i) ids[i] = std::uint32_t(i);

  Rng rng = substream(seed, 0xBA7C, std::uint64_t(step));
  const std::size_t k = std::min(std::size_t(batch_size), total);
  for (std::size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, total - 1);
    std::swap(ids[i], ids[pick(rng)]);
  }
  std::vector<RayRef> out(k);
  for (std::size_t i = 0; i < k; ++i) {
    out[i].frame = ds.train_indices[ids[i] / std::size_t(W)];
    out[i].scanline = int(ids[i] % std::size_t(W));
  }
  return out;
}

// ---- optimizer -------------------------------------------------------------

/// Rectified Adam: per-parameter adaptive steps with variance-rectification
/// warmup, plus global-norm gradient clipping.
template <class Real>
class RAdam {
 public:
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

  void reset(std::size_t n) {
    m_.assign(n, 0.0);
    v_.assign(n, 0.0);
    t_ = 0;
  }

  void step(std::vector<Real>& params, std::vector<Real>& grads, double lr, double clip_norm) {
    require(params.size() == grads.size() && params.size() == m_.size(),
            "radam: size mismatch");
    double norm2 = 0.0;
    for (Real g : grads) norm2 += double(g) * double(g);
    double norm = std::sqrt(norm2);
    double scale = (clip_norm > 0 && norm > clip_norm) ? clip_norm / norm : 1.0;

    ++t_;
    const double b1t = std::pow(beta1, double(t_));
    const double b2t = std::pow(beta2, double(t_));
    const double rho_inf = 2.0 / (1.0 - beta2) - 1.0;
    const double rho_t = rho_inf - 2.0 * double(t_) * b2t / (1.0 - b2t);
    double rect = -1.0;
    if (rho_t > 4.0)
      rect = std::sqrt(((rho_t - 4.0) * (rho_t - 2.0) * rho_inf) /
                       ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t));

    for (std::size_t i = 0; i < params.size(); ++i) {
      double g = double(grads[i]) * scale;
      m_[i] = beta1 * m_[i] + (1.0 - beta1) * g;
      v_[i] = beta2 * v_[i] + (1.0 - beta2) * g * g;
      double mhat = m_[i] / (1.0 - b1t);
      double upd = rho_t > 4.0 ? rect * mhat / (std::sqrt(v_[i] / (1.0 - b2t)) + eps) : mhat;
      params[i] = Real(double(params[i]) - lr * upd);
    }
  }

  void to_checkpoint(Checkpoint& ck) const {
    ck.put("opt/m", m_);
    ck.put("opt/v", v_);
    ck.put_scalar("opt/t", std::int64_t(t_));
  }

  void from_checkpoint(const Checkpoint& ck) {
    m_ = ck.get<double>("opt/m");
    v_ = ck.get<double>("opt/v");
    t_ = long(ck.get_i64("opt/t"));
  }

 private:
  std::vector<double> m_, v_;
  long t_ = 0;
};

// ---- guidance --------------------------------------------------------------

struct PatchPlacement {
  Point3 origin;
  double edge = 0;
};

struct SceneBounds {
  Point3 lo{0, 0, 0}, hi{0, 0, 0};

  double max_extent() const {
    return std::max({hi.x - lo.x, hi.y - lo.y, hi.z - lo.z});
  }
};

/// Axis-aligned box swept by the probe over the training frames.
inline SceneBounds swept_bounds(const SweepDataset& ds) {
  require(!ds.frames.empty(), "swept_bounds: empty dataset");
  SceneBounds b;
  bool first = true;
  const int W = ds.probe.n_scanlines;
  for (const auto& f : ds.frames) {
    for (int j : {0, W - 1}) {
      ScanRay ray = ray_for_pixel(ds.probe, f.pose, j, ds.probe.n_samples);
      for (double t : {ray.depths.front(), ray.depths.back()}) {
        Point3 p = ray.at(t);
        Point3 o = ray.origin;
        for (const Point3& q : {p, o}) {
          if (first) {
            b.lo = b.hi = q;
            first = false;
          } else {
            b.lo = {std::min(b.lo.x, q.x), std::min(b.lo.y, q.y), std::min(b.lo.z, q.z)};
            b.hi = {std::max(b.hi.x, q.x), std::max(b.hi.y, q.y), std::max(b.hi.z, q.z)};
          }
        }
      }
    }
  }
  return b;
}

/// Skin-anchored placement: the patch's top face lies on the minimum-z plane
/// of the swept region, lateral position uniform inside it.
inline PatchPlacement place_patch(const SceneBounds& b, double size_min, double size_max,
                                  Rng& rng) {
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  PatchPlacement p;
  p.edge = (size_min + u01(rng) * (size_max - size_min)) * b.max_extent();
  auto lateral = [&](double lo, double hi) {
    double span = hi - lo - p.edge;
    return span > 0 ? lo + u01(rng) * span : lo;
  };
  p.origin = {lateral(b.lo.x, b.hi.x), lateral(b.lo.y, b.hi.y), b.lo.z};
  return p;
}

/// The 32^3 voxel-center lattice of a placement.
inline std::vector<Point3> patch_lattice(const PatchPlacement& p) {
  std::vector<Point3> pts;
  pts.reserve(std::size_t(kPatchRes) * kPatchRes * kPatchRes);
  for (int k = 0; k < kPatchRes; ++k)
    for (int j = 0; j < kPatchRes; ++j)
      for (int i = 0; i < kPatchRes; ++i)
        pts.push_back({p.origin.x + (i + 0.5) / kPatchRes * p.edge,
                       p.origin.y + (j + 0.5) / kPatchRes * p.edge,
                       p.origin.z + (k + 0.5) / kPatchRes * p.edge});
  return pts;
}

/// Mean squared deviation of a field-evaluated patch from a prior target:
/// L = (1/N) sum |G - m|^2 over the 32^3 lattice.
inline double patch_loss(const Grid3& g, const Grid3& m) {
  require(g.data.size() == m.data.size(), "patch_loss: shape mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < g.data.size(); ++i) {
    double d = g.data[i] - m.data[i];
    s += d * d;
  }
  return s / double(g.data.size());
}

/// Guidance loss for one placement: evaluates the field's rho_b / rho_s
/// voxelizations and compares against frozen diffusion-prior targets.
/// Gradients flow only through the field (the prior is a stop-gradient
/// oracle). Returns (L_rho_b, L_rho_s).
template <class Real, class Prior>
std::pair<double, double> guidance_loss(const FieldState<Real>& field, const PatchPlacement& p,
                                        const Prior& prior, int t_g, const NoiseSchedule& sched,
                                        std::uint64_t seed) {
  auto pts = patch_lattice(p);
  MatX<Real> raw = field.eval_raw_batch(pts);
  apply_head_activations(raw);
  Grid3 g_rb(kPatchRes, kPatchRes, kPatchRes), g_rs(kPatchRes, kPatchRes, kPatchRes);
  for (std::size_t i = 0; i < pts.size(); ++i) {
    g_rb.data[i] = double(raw(2, Eigen::Index(i)));
    g_rs.data[i] = double(raw(3, Eigen::Index(i)));
  }
  auto [m_rb, m_rs] = guidance_targets<Real>(prior, g_rb, g_rs, t_g, sched, seed);
  return {patch_loss(g_rb, m_rb), patch_loss(g_rs, m_rs)};
}

// ---- training loop ---------------------------------------------------------

template <class Real>
struct TrainResult {
  FieldState<Real> field{FieldConfig::desk(), 0};
  std::vector<LossReport> history;
  long us_column_renders = 0;
  long std_column_renders = 0;
  bool aborted_non_finite = false;
};

namespace detail {

/// Writes a training checkpoint: field weights plus optimizer state.
template <class Real>
void write_train_checkpoint(const FieldState<Real>& field, const RAdam<Real>& opt, int next_step,
                            const std::string& path) {
  Checkpoint ck;
  field_to_checkpoint(field, ck);
  opt.to_checkpoint(ck);
  ck.put_scalar("train/next_step", std::int64_t(next_step));
  ck.save(path);
}

}  // namespace detail

/// The main optimization loop. `prior` may be null when both guidance
/// switches are off; otherwise guidance fires every cadence-th step on
/// randomly placed skin-anchored patches. Deterministic given cfg.seed.
template <class Real, class Prior>
TrainResult<Real> train_field(const SweepDataset& ds, const Prior* prior,
                              const NoiseSchedule* sched, const TrainConfig& cfg,
                              const std::string& out_dir = "") {
  cfg.validate();
  require(!ds.train_indices.empty(), "train: dataset has no training frames");
  const bool guidance_on = cfg.use_l_rho_b || cfg.use_l_rho_s;
  require(!guidance_on || (prior && sched), "train: guidance enabled but no prior model given");

  const int S = ds.probe.n_samples;
  const Real I0 = Real(ds.probe.initial_intensity);
  const Real f = Real(ds.probe.frequency);
  const Real dt = Real(ds.probe.sample_spacing());
  const int t_g = (sched && cfg.guidance_t < 0) ? std::max(1, sched->T / 10)
                                                : cfg.guidance_t;
  if (sched) sched->check_step(t_g);

  TrainResult<Real> res;
  res.field = FieldState<Real>(cfg.field, cfg.seed);
  RAdam<Real> opt;
  opt.reset(res.field.mlp.param_count());
  int start_step = 0;
  if (!cfg.resume_path.empty()) {
    Checkpoint ck = Checkpoint::load(cfg.resume_path);
    res.field = field_from_checkpoint<Real>(ck);
    opt.from_checkpoint(ck);
    start_step = int(ck.get_i64("train/next_step"));
  }

  const SceneBounds bounds = guidance_on ? swept_bounds(ds) : SceneBounds{};
  std::vector<Real> flat_params, flat_grads;
  const std::string ckpt_path = out_dir.empty() ? "" : out_dir + "/field_latest.ckpt";

  for (int step = start_step; step < cfg.iterations; ++step) {
    const double lr = lr_at(cfg, step);
    auto batch = sample_ray_batch(ds, cfg.batch_size, cfg.seed, step);
    const int B = int(batch.size());

    // Forward: one MLP pass over every sample point of the batch.
    std::vector<Point3> pts;
    pts.reserve(std::size_t(B) * S);
    for (const auto& rr : batch) {
      ScanRay ray = ray_for_pixel(ds.probe, ds.frames[std::size_t(rr.frame)].pose, rr.scanline, S);
      for (double t : ray.depths) pts.push_back(ray.at(t));
    }
    typename Mlp<Real>::Cache cache;
    MatX<Real> raw = res.field.eval_raw_batch(pts, &cache);
    MatX<Real> act = raw;
    apply_head_activations(act);

    // Per-ray rendering and photometric gradient (in activated space).
    double photo = 0.0;
    MatX<Real> dAct = MatX<Real>::Zero(5, act.cols());
    const double photo_scale = 2.0 / double(B);  // d/dP of mean-per-batch sum of squares

    for (int r = 0; r < B; ++r) {
      const auto& rr = batch[std::size_t(r)];
      const Image& gt = ds.frames[std::size_t(rr.frame)].image;
      const Eigen::Index base = Eigen::Index(r) * S;

      if (cfg.use_us_rendering) {
        RaySamples<Real> s;
        s.resize(std::size_t(S));
        for (int t = 0; t < S; ++t) {
          s.alpha[std::size_t(t)] = act(0, base + t);
          s.beta[std::size_t(t)] = act(1, base + t);
          s.rho_b[std::size_t(t)] = act(2, base + t);
          s.rho_s[std::size_t(t)] = act(3, base + t);
          s.phi[std::size_t(t)] = act(4, base + t);
        }
        std::optional<Rng> rng;
        if (cfg.render.stochastic())
          rng = substream(cfg.seed, 0xB0DE, std::uint64_t(step), std::uint64_t(r));
        auto col = transmit_column<Real>(s, I0, f, dt, cfg.render, rng ? &*rng : nullptr);
        compose_column(col, cfg.render, rng ? &*rng : nullptr);
        ++res.us_column_renders;

        std::vector<Real> dR(s.alpha.size()), dS(s.alpha.size());
        for (int t = 0; t < S; ++t) {
          double p = cfg.render.w_reflect * double(col.reflect[std::size_t(t)]) +
                     cfg.render.w_scatter * double(col.scatter[std::size_t(t)]);
          double e = clamp01(p) - gt.at(t, rr.scanline);
          photo += e * e;
          double dP = (p >= 0.0 && p <= 1.0) ? photo_scale * e : 0.0;
          dR[std::size_t(t)] = Real(dP * cfg.render.w_reflect);
          dS[std::size_t(t)] = Real(dP * cfg.render.w_scatter);
        }
        MatX<Real> d = column_backward(col, dR, dS);
        dAct.block(0, base, 5, S) += d;
      } else {
        std::vector<Real> sigma(static_cast<std::size_t>(S)), color(static_cast<std::size_t>(S));
        for (int t = 0; t < S; ++t) {
          sigma[std::size_t(t)] = act(3, base + t);
          color[std::size_t(t)] = act(4, base + t);
        }
        auto col = std_render_column(sigma, color, dt);
        auto contrib = std_column_contributions(col);
        ++res.std_column_renders;

        std::vector<Real> dE(sigma.size());
        for (int t = 0; t < S; ++t) {
          double e = double(contrib[std::size_t(t)]) - gt.at(t, rr.scanline);
          photo += e * e;
          dE[std::size_t(t)] = Real(photo_scale * e);
        }
        auto [dsig, dcol] = std_column_backward(col, dE);
        for (int t = 0; t < S; ++t) {
          dAct(3, base + t) += dsig[std::size_t(t)];
          dAct(4, base + t) += dcol[std::size_t(t)];
        }
      }
    }
    photo /= double(B);

    MatX<Real> dRaw = head_activation_backward(raw, dAct);
    auto grads = res.field.mlp.backward(cache, dRaw);

    // Diffusion guidance every cadence-th step.
    double l_rho_b = 0.0, l_rho_s = 0.0;
    if (guidance_on && step % cfg.guidance_cadence == 0) {
      for (int p = 0; p < cfg.guidance_patches; ++p) {
        Rng prng = substream(cfg.seed, 0x6A1D, std::uint64_t(step), std::uint64_t(p));
        PatchPlacement place =
            place_patch(bounds, cfg.guidance_size_min, cfg.guidance_size_max, prng);
        std::uint64_t gseed =
            splitmix64(cfg.seed ^ (std::uint64_t(step) << 20) ^ std::uint64_t(p) ^ 0x6D7A11CEULL);

        auto pts_g = patch_lattice(place);
        typename Mlp<Real>::Cache gcache;
        MatX<Real> graw = res.field.eval_raw_batch(pts_g, &gcache);
        MatX<Real> gact = graw;
        apply_head_activations(gact);
        const std::size_t N = pts_g.size();
        Grid3 g_rb(kPatchRes, kPatchRes, kPatchRes), g_rs(kPatchRes, kPatchRes, kPatchRes);
        for (std::size_t i = 0; i < N; ++i) {
          g_rb.data[i] = double(gact(2, Eigen::Index(i)));
          g_rs.data[i] = double(gact(3, Eigen::Index(i)));
        }
        auto [m_rb, m_rs] = guidance_targets<Real>(*prior, g_rb, g_rs, t_g, *sched, gseed);
        if (cfg.use_l_rho_b) l_rho_b += patch_loss(g_rb, m_rb);
        if (cfg.use_l_rho_s) l_rho_s += patch_loss(g_rs, m_rs);

        // Gradient through G only (targets are a frozen oracle).
        MatX<Real> gdAct = MatX<Real>::Zero(5, Eigen::Index(N));
        const double gscale = 2.0 / (double(N) * cfg.guidance_patches);
        bool any = false;
        for (std::size_t i = 0; i < N; ++i) {
          if (cfg.use_l_rho_b && cfg.weights.lambda_rho_b > 0) {
            gdAct(2, Eigen::Index(i)) =
                Real(cfg.weights.lambda_rho_b * gscale * (g_rb.data[i] - m_rb.data[i]));
            any = true;
          }
          if (cfg.use_l_rho_s && cfg.weights.lambda_rho_s > 0) {
            gdAct(3, Eigen::Index(i)) =
                Real(cfg.weights.lambda_rho_s * gscale * (g_rs.data[i] - m_rs.data[i]));
            any = true;
          }
        }
        if (any) {
          MatX<Real> gdRaw = head_activation_backward(graw, gdAct);
          auto g2 = res.field.mlp.backward(gcache, gdRaw);
          for (std::size_t l = 0; l < grads.dW.size(); ++l) {
            grads.dW[l] += g2.dW[l];
            grads.db[l] += g2.db[l];
          }
        }
      }
      l_rho_b /= cfg.guidance_patches;
      l_rho_s /= cfg.guidance_patches;
    }

    LossReport rep = LossReport::make(step, photo, l_rho_b, l_rho_s, cfg.weights, lr);
    if (!std::isfinite(rep.total)) {
      res.aborted_non_finite = true;
      if (!out_dir.empty()) {
        std::string csv = loss_history_csv(res.history);
        std::ofstream(out_dir + "/loss.csv", std::ios::trunc) << csv;
      }
      throw ValidationError("train: non-finite loss at step " + std::to_string(step) +
                            "; last checkpoint retained");
    }
    res.history.push_back(rep);

    res.field.mlp.to_flat(flat_params);
    Mlp<Real>::grads_to_flat(grads, flat_grads);
    opt.step(flat_params, flat_grads, lr, cfg.clip_norm);
    res.field.mlp.from_flat(flat_params);

    if (!ckpt_path.empty() &&
        ((step + 1) % cfg.checkpoint_interval == 0 || step + 1 == cfg.iterations))
      detail::write_train_checkpoint(res.field, opt, step + 1, ckpt_path);
    if (cfg.verbose && (step % 100 == 0 || step + 1 == cfg.iterations))
      std::fprintf(stderr, "[train] step %d photo %.6f l_rb %.6f l_rs %.6f lr %.3g\n", step,
                   photo, l_rho_b, l_rho_s, lr);
  }

  if (!out_dir.empty())
    std::ofstream(out_dir + "/loss.csv", std::ios::trunc) << loss_history_csv(res.history);
  return res;
}

// ---- evaluation and ablations ----------------------------------------------

/// Renders one frame through the standard (non-ultrasound) path: each pixel
/// is the per-depth accumulation contribution of its scan ray.
template <class Real>
Image render_frame_std(const FieldState<Real>& field, const Pose& pose,
                       const ProbeConfig& probe) {
  const int S = probe.n_samples, W = probe.n_scanlines;
  Image img(S, W);
  for (int j = 0; j < W; ++j) {
    ScanRay ray = ray_for_pixel(probe, pose, j, S);
    std::vector<Point3> pts;
    pts.reserve(std::size_t(S));
    for (double t : ray.depths) pts.push_back(ray.at(t));
    MatX<Real> raw = field.eval_raw_batch(pts);
    apply_head_activations(raw);
    std::vector<Real> sigma(pts.size()), color(pts.size());
    for (int t = 0; t < S; ++t) {
      sigma[std::size_t(t)] = raw(3, t);
      color[std::size_t(t)] = raw(4, t);
    }
    auto contrib = std_column_contributions(std_render_column(sigma, color, Real(ray.dt)));
    for (int t = 0; t < S; ++t) img.at(t, j) = clamp01(double(contrib[std::size_t(t)]));
  }
  return img;
}

/// Test-split evaluation; renders with the same path the model trained on.
template <class Real>
MetricReport evaluate_field(const FieldState<Real>& field, const SweepDataset& ds,
                            const RenderConfig& rcfg, bool us_path, std::uint64_t seed = 0) {
  require(!ds.test_indices.empty(), "evaluate: empty test split");
  std::vector<Image> rendered, reference;
  std::vector<int> indices;
  for (int fi : ds.test_indices) {
    const auto& frame = ds.frames[std::size_t(fi)];
    rendered.push_back(us_path ? render_frame(field, frame.pose, ds.probe, rcfg,
                                              splitmix64(seed ^ std::uint64_t(fi + 1)))
                               : render_frame_std(field, frame.pose, ds.probe));
    reference.push_back(frame.image);
    indices.push_back(frame.frame_index);
  }
  return evaluate_frames(rendered, reference, indices);
}

struct AblationRow {
  std::string name;
  double psnr = 0, ssim = 0, ms_ssim = 0;
};

template <class Real>
struct AblationResult {
  std::vector<AblationRow> rows;             // full, w/o L_rho_b, w/o L_rho_s, w/o I(t)
  std::vector<TrainResult<Real>> runs;
};

inline std::string ablation_table_csv(const std::vector<AblationRow>& rows) {
  std::string out = "variant,psnr_db,ssim,ms_ssim\n";
  char buf[200];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%s,%.17g,%.17g,%.17g\n", r.name.c_str(), r.psnr, r.ssim,
                  r.ms_ssim);
    out += buf;
  }
  return out;
}

/// Table-3-style suite: full model and the three single-switch ablations,
/// all with the same seed, each evaluated on the test split.
template <class Real, class Prior>
AblationResult<Real> ablation_suite(const SweepDataset& ds, const Prior* prior,
                                    const NoiseSchedule* sched, const TrainConfig& base) {
  struct Variant {
    const char* name;
    bool rb, rs, us;
  };
  const Variant variants[4] = {{"full", true, true, true},
                               {"wo_l_rho_b", false, true, true},
                               {"wo_l_rho_s", true, false, true},
                               {"wo_intensity", true, true, false}};
  AblationResult<Real> out;
  for (const auto& v : variants) {
    TrainConfig cfg = base;
    cfg.use_l_rho_b = v.rb;
    cfg.use_l_rho_s = v.rs;
    cfg.use_us_rendering = v.us;
    auto run = train_field<Real>(ds, prior, sched, cfg);
    MetricReport m = evaluate_field(run.field, ds, cfg.render, cfg.use_us_rendering, cfg.seed);
    out.rows.push_back({v.name, m.psnr_mean, m.ssim_mean, m.ms_ssim_mean});
    out.runs.push_back(std::move(run));
  }
  return out;
}

}  // namespace nerfus

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "nerfus/core/checkpoint.hpp"
#include "nerfus/core/grid.hpp"
#include "nerfus/prior/denoiser.hpp"
#include "nerfus/prior/lora.hpp"
#include "nerfus/prior/schedule.hpp"

namespace nerfus {

/// Map a voxel patch with values in [0,1] onto the signed range the
/// diffusion model trains on, and back.
template <class Real>
MatX<Real> patch_to_row(const Grid3& g) {
  MatX<Real> x(1, Eigen::Index(g.data.size()));
  for (std::size_t i = 0; i < g.data.size(); ++i) x(0, Eigen::Index(i)) = Real(2.0 * g.data[i] - 1.0);
  return x;
}

template <class Real>
Grid3 row_to_patch(const MatX<Real>& x, int n) {
  require(x.rows() == 1 && x.cols() == Eigen::Index(n) * n * n, "row_to_patch: shape mismatch");
  Grid3 g(n, n, n);
  for (Eigen::Index i = 0; i < x.cols(); ++i) g.data[std::size_t(i)] = clamp01(0.5 * (double(x(0, i)) + 1.0));
  return g;
}

/// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.
template <class Real>
MatX<Real> forward_diffuse(const MatX<Real>& x0, int t, const MatX<Real>& eps,
                           const NoiseSchedule& sched) {
  sched.check_step(t);
  Real a = Real(std::sqrt(sched.abar[std::size_t(t)]));
  Real s = Real(std::sqrt(1.0 - sched.abar[std::size_t(t)]));
  return a * x0 + s * eps;
}

template <class Real>
MatX<Real> gaussian_like(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  std::normal_distribution<double> n01(0.0, 1.0);
  MatX<Real> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = Real(n01(rng));
  return m;
}

/// One-shot clean-signal estimate from a noised input:
/// x0_hat = (x_t - sqrt(1-abar_t) eps_hat) / sqrt(abar_t), clamped to [-1,1].
template <class Real, class Model>
MatX<Real> denoise_estimate(const Model& model, const MatX<Real>& xt, int t,
                            const NoiseSchedule& sched) {
  sched.check_step(t);
  MatX<Real> eps_hat = model.forward(xt, double(t));
  double a = std::sqrt(sched.abar[std::size_t(t)]);
  double s = std::sqrt(1.0 - sched.abar[std::size_t(t)]);
  MatX<Real> x0 = (xt - Real(s) * eps_hat) / Real(a);
  return x0.unaryExpr([](Real v) { return std::max(Real(-1), std::min(Real(1), v)); });
}

/// Ancestral sampling from pure noise (test/inspection utility).
template <class Real, class Model>
MatX<Real> sample_ancestral(const Model& model, const NoiseSchedule& sched, Eigen::Index n_vox,
                            std::uint64_t seed) {
  Rng rng = substream(seed, 0x5A3);
  MatX<Real> x = gaussian_like<Real>(1, n_vox, rng);
  for (int t = sched.T; t >= 1; --t) {
    MatX<Real> eps_hat = model.forward(x, double(t));
    double b = sched.beta[std::size_t(t)];
    double abar = sched.abar[std::size_t(t)];
    x = (x - Real(b / std::sqrt(1.0 - abar)) * eps_hat) * Real(1.0 / std::sqrt(1.0 - b));
    if (t > 1) x += Real(std::sqrt(b)) * gaussian_like<Real>(1, n_vox, rng);
  }
  return x;
}

struct PriorTrainConfig {
  int iterations = 400;
  int batch = 4;
  double lr = 1e-4;  // cosine-decayed to zero over the run
  std::uint64_t seed = 0;
  int log_every = 50;
  bool verbose = false;
};

namespace detail {

/// Adam over an arbitrary list of (param, grad, count) spans.
template <class Real>
class AdamOpt {
 public:
  struct Span {
    Real* p;
    Real* g;
    Eigen::Index n;
  };

  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

  void attach(std::vector<Span> spans) {
    spans_ = std::move(spans);
    m_.clear();
    v_.clear();
    for (const auto& s : spans_) {
      m_.push_back(std::vector<double>(std::size_t(s.n), 0.0));
      v_.push_back(std::vector<double>(std::size_t(s.n), 0.0));
    }
    step_ = 0;
  }

  void update(double lr) {
    ++step_;
    double c1 = 1.0 - std::pow(beta1, double(step_));
    double c2 = 1.0 - std::pow(beta2, double(step_));
    for (std::size_t k = 0; k < spans_.size(); ++k) {
      auto& s = spans_[k];
      for (Eigen::Index i = 0; i < s.n; ++i) {
        double g = double(s.g[i]);
        double& m = m_[k][std::size_t(i)];
        double& v = v_[k][std::size_t(i)];
        m = beta1 * m + (1.0 - beta1) * g;
        v = beta2 * v + (1.0 - beta2) * g * g;
        s.p[i] -= Real(lr * (m / c1) / (std::sqrt(v / c2) + eps));
      }
    }
  }

 private:
  std::vector<Span> spans_;
  std::vector<std::vector<double>> m_, v_;
  long step_ = 0;
};

inline double cosine_lr(double lr0, int step, int total) {
  if (total <= 1) return lr0;
  return lr0 * 0.5 * (1.0 + std::cos(M_PI * double(step) / double(total)));
}

}  // namespace detail

/// Noise-prediction training of the base model on a set of 32^3 patches.
/// Returns the per-iteration batch losses.
template <class Real>
std::vector<double> train_prior(Denoiser<Real>& model, const std::vector<Grid3>& patches,
                                const NoiseSchedule& sched, const PriorTrainConfig& cfg) {
  require(!patches.empty(), "prior training: empty patch set");
  std::vector<MatX<Real>> rows;
  rows.reserve(patches.size());
  for (const auto& g : patches) {
    require(g.nx == model.cfg.input_res && g.ny == g.nx && g.nz == g.nx,
            "prior training: patch resolution mismatch");
    rows.push_back(patch_to_row<Real>(g));
  }

  detail::AdamOpt<Real> opt;
  {
    std::vector<typename detail::AdamOpt<Real>::Span> spans;
    for (auto* d : model.layers()) {
      spans.push_back({d->W.data(), d->dW.data(), d->W.size()});
      spans.push_back({d->b.data(), d->db.data(), d->b.size()});
    }
    opt.attach(std::move(spans));
  }

  Rng rng = substream(cfg.seed, 0xDD9);
  std::uniform_int_distribution<int> pick(0, int(rows.size()) - 1);
  std::uniform_int_distribution<int> stepd(1, sched.T);
  const Eigen::Index V = rows[0].cols();
  std::vector<double> losses;
  losses.reserve(std::size_t(cfg.iterations));

  for (int it = 0; it < cfg.iterations; ++it) {
    model.zero_grad();
    double loss = 0.0;
    for (int b = 0; b < cfg.batch; ++b) {
      const MatX<Real>& x0 = rows[std::size_t(pick(rng))];
      int t = stepd(rng);
      MatX<Real> eps = gaussian_like<Real>(1, V, rng);
      MatX<Real> xt = forward_diffuse(x0, t, eps, sched);
      typename Denoiser<Real>::Cache cache;
      MatX<Real> eps_hat = model.forward(xt, double(t), &cache);
      MatX<Real> diff = eps_hat - eps;
      loss += double(diff.squaredNorm()) / double(V);
      MatX<Real> deps = diff * Real(2.0 / (double(V) * cfg.batch));
      model.backward(cache, deps);
    }
    loss /= cfg.batch;
    require(std::isfinite(loss), "prior training diverged: non-finite loss");
    losses.push_back(loss);
    opt.update(detail::cosine_lr(cfg.lr, it, cfg.iterations));
    if (cfg.verbose && cfg.log_every > 0 && (it % cfg.log_every == 0 || it + 1 == cfg.iterations))
      std::fprintf(stderr, "[prior] iter %d loss %.6f\n", it, loss);
  }
  return losses;
}

/// Same objective, but only the low-rank factors receive updates.
template <class Real>
std::vector<double> finetune_prior(AdaptedDenoiser<Real>& model, const std::vector<Grid3>& patches,
                                   const NoiseSchedule& sched, const PriorTrainConfig& cfg) {
  require(!patches.empty(), "prior fine-tune: empty patch set");
  std::vector<MatX<Real>> rows;
  rows.reserve(patches.size());
  for (const auto& g : patches) rows.push_back(patch_to_row<Real>(g));

  detail::AdamOpt<Real> opt;
  {
    std::vector<typename detail::AdamOpt<Real>::Span> spans;
    for (std::size_t i = 0; i < model.A.size(); ++i) {
      spans.push_back({model.A[i].data(), model.dA[i].data(), model.A[i].size()});
      spans.push_back({model.B[i].data(), model.dB[i].data(), model.B[i].size()});
    }
    opt.attach(std::move(spans));
  }

  Rng rng = substream(cfg.seed, 0xF17E);
  std::uniform_int_distribution<int> pick(0, int(rows.size()) - 1);
  std::uniform_int_distribution<int> stepd(1, sched.T);
  const Eigen::Index V = rows[0].cols();
  std::vector<double> losses;
  losses.reserve(std::size_t(cfg.iterations));

  for (int it = 0; it < cfg.iterations; ++it) {
    model.zero_grad();
    double loss = 0.0;
    for (int b = 0; b < cfg.batch; ++b) {
      const MatX<Real>& x0 = rows[std::size_t(pick(rng))];
      int t = stepd(rng);
      MatX<Real> eps = gaussian_like<Real>(1, V, rng);
      MatX<Real> xt = forward_diffuse(x0, t, eps, sched);
      typename Denoiser<Real>::Cache cache;
      MatX<Real> eps_hat = model.forward(xt, double(t), &cache);
      MatX<Real> diff = eps_hat - eps;
      loss += double(diff.squaredNorm()) / double(V);
      MatX<Real> deps = diff * Real(2.0 / (double(V) * cfg.batch));
      model.backward(cache, deps);
    }
    loss /= cfg.batch;
    require(std::isfinite(loss), "prior fine-tune diverged: non-finite loss");
    losses.push_back(loss);
    opt.update(detail::cosine_lr(cfg.lr, it, cfg.iterations));
    model.refresh();
    if (cfg.verbose && cfg.log_every > 0 && (it % cfg.log_every == 0 || it + 1 == cfg.iterations))
      std::fprintf(stderr, "[prior-ft] iter %d loss %.6f\n", it, loss);
  }
  return losses;
}

/// Guidance target for one field-rendered patch (values in [0,1]): noise it
/// to step t_g, run the one-shot denoise estimate, and map back to [0,1].
template <class Real, class Model>
Grid3 guidance_target(const Model& model, const Grid3& patch, int t_g, const NoiseSchedule& sched,
                      std::uint64_t seed) {
  MatX<Real> x0 = patch_to_row<Real>(patch);
  Rng rng = substream(seed, 0x6D1);
  MatX<Real> eps = gaussian_like<Real>(1, x0.cols(), rng);
  MatX<Real> xt = forward_diffuse(x0, t_g, eps, sched);
  MatX<Real> est = denoise_estimate(model, xt, t_g, sched);
  return row_to_patch(est, patch.nx);
}

/// Guidance targets for the border-probability and scatter-density channels:
/// two independent passes through the same single-channel prior.
template <class Real, class Model>
std::pair<Grid3, Grid3> guidance_targets(const Model& model, const Grid3& rho_b_patch,
                                         const Grid3& rho_s_patch, int t_g,
                                         const NoiseSchedule& sched, std::uint64_t seed) {
  return {guidance_target<Real>(model, rho_b_patch, t_g, sched, splitmix64(seed ^ 0xB0)),
          guidance_target<Real>(model, rho_s_patch, t_g, sched, splitmix64(seed ^ 0x5C))};
}

// ---- checkpoint serialization ------------------------------------------

template <class Real>
void prior_to_checkpoint(const Denoiser<Real>& model, const NoiseSchedule& sched, Checkpoint& ck) {
  std::vector<std::int64_t> meta{model.cfg.base_width, model.cfg.temb_dim, model.cfg.input_res};
  ck.put("prior/meta", meta);
  std::vector<std::int64_t> mults(model.cfg.mults.begin(), model.cfg.mults.end());
  ck.put("prior/mults", mults);
  ck.put_scalar("prior/timesteps", std::int64_t(sched.T));
  ck.put("prior/beta", sched.beta);
  auto names = model.layer_names();
  auto ls = model.layers();
  for (std::size_t i = 0; i < ls.size(); ++i) {
    ck.put<Real>("prior/" + names[i] + "/W", ls[i]->W.data(),
                 {std::int64_t(ls[i]->W.rows()), std::int64_t(ls[i]->W.cols())});
    ck.put<Real>("prior/" + names[i] + "/b", ls[i]->b.data(), {std::int64_t(ls[i]->b.size())});
  }
}

template <class Real>
void prior_from_checkpoint(const Checkpoint& ck, Denoiser<Real>& model, NoiseSchedule& sched) {
  auto meta = ck.get<std::int64_t>("prior/meta");
  require(meta.size() == 3, "prior checkpoint: bad meta");
  auto mults = ck.get<std::int64_t>("prior/mults");
  DenoiserConfig cfg;
  cfg.base_width = int(meta[0]);
  cfg.temb_dim = int(meta[1]);
  cfg.input_res = int(meta[2]);
  cfg.mults.assign(mults.begin(), mults.end());
  model = Denoiser<Real>(cfg);
  sched.T = int(ck.get_i64("prior/timesteps"));
  sched.beta = ck.get<double>("prior/beta");
  sched.abar.assign(sched.beta.size(), 1.0);
  for (std::size_t t = 1; t < sched.beta.size(); ++t)
    sched.abar[t] = sched.abar[t - 1] * (1.0 - sched.beta[t]);
  sched.validate();
  auto names = model.layer_names();
  auto ls = model.layers();
  for (std::size_t i = 0; i < ls.size(); ++i) {
    auto W = ck.get<Real>("prior/" + names[i] + "/W");
    auto b = ck.get<Real>("prior/" + names[i] + "/b");
    require(Eigen::Index(W.size()) == ls[i]->W.size() && Eigen::Index(b.size()) == ls[i]->b.size(),
            "prior checkpoint: tensor size mismatch for " + names[i]);
    std::copy(W.begin(), W.end(), ls[i]->W.data());
    std::copy(b.begin(), b.end(), ls[i]->b.data());
  }
}

template <class Real>
void adapter_to_checkpoint(const AdaptedDenoiser<Real>& model, const NoiseSchedule& sched,
                           Checkpoint& ck) {
  prior_to_checkpoint(model.base, sched, ck);
  ck.put_scalar("prior/adapter/rank", std::int64_t(model.rank));
  ck.put_scalar("prior/adapter/delta", model.delta);
  auto names = model.base.layer_names();
  for (std::size_t i = 0; i < model.A.size(); ++i) {
    ck.put<Real>("prior/adapter/" + names[i] + "/A", model.A[i].data(),
                 {std::int64_t(model.A[i].rows()), std::int64_t(model.A[i].cols())});
    ck.put<Real>("prior/adapter/" + names[i] + "/B", model.B[i].data(),
                 {std::int64_t(model.B[i].rows()), std::int64_t(model.B[i].cols())});
  }
}

template <class Real>
AdaptedDenoiser<Real> adapter_from_checkpoint(const Checkpoint& ck, NoiseSchedule& sched) {
  Denoiser<Real> base;
  prior_from_checkpoint(ck, base, sched);
  int rank = int(ck.get_i64("prior/adapter/rank"));
  double delta = ck.get_f64("prior/adapter/delta");
  AdaptedDenoiser<Real> out(base, rank, delta, /*seed=*/0);
  auto names = base.layer_names();
  for (std::size_t i = 0; i < out.A.size(); ++i) {
    auto A = ck.get<Real>("prior/adapter/" + names[i] + "/A");
    auto B = ck.get<Real>("prior/adapter/" + names[i] + "/B");
    require(Eigen::Index(A.size()) == out.A[i].size() && Eigen::Index(B.size()) == out.B[i].size(),
            "adapter checkpoint: factor size mismatch for " + names[i]);
    std::copy(A.begin(), A.end(), out.A[i].data());
    std::copy(B.begin(), B.end(), out.B[i].data());
  }
  out.refresh();
  return out;
}

/// True when a checkpoint holds low-rank adapter factors on top of the base.
inline bool checkpoint_has_adapter(const Checkpoint& ck) { return ck.has("prior/adapter/rank"); }

}  // namespace nerfus

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <optional>
#include <vector>

#include "nerfus/core/common.hpp"
#include "nerfus/core/image.hpp"
#include "nerfus/core/types.hpp"
#include "nerfus/field.hpp"

namespace nerfus {

enum class SampleMode { expected, bernoulli_straight_through };

inline std::string to_string(SampleMode m) {
  return m == SampleMode::expected ? "expected" : "bernoulli_straight_through";
}

inline SampleMode sample_mode_from_string(const std::string& s) {
  if (s == "expected") return SampleMode::expected;
  if (s == "bernoulli_straight_through") return SampleMode::bernoulli_straight_through;
  throw ValidationError("render: unknown sample mode '" + s + "'");
}

struct RenderConfig {
  SampleMode boundary_mode = SampleMode::expected;
  SampleMode scatter_mode = SampleMode::expected;
  double w_reflect = 0.5;
  double w_scatter = 0.5;
  bool psf_enabled = false;
  int psf_size = 5;
  double psf_sigma_axial = 1.0;
  double psf_sigma_lateral = 1.0;

  void validate() const {
    require(w_reflect >= 0 && w_scatter >= 0, "render: compose weights must be >= 0");
    require(w_reflect + w_scatter <= 1.0 + 1e-12, "render: compose weights must sum to <= 1");
    if (psf_enabled) {
      require(psf_size >= 1 && psf_size % 2 == 1, "render: psf size must be odd");
      require(psf_sigma_axial > 0 && psf_sigma_lateral > 0, "render: psf sigma must be > 0");
    }
  }

  bool stochastic() const {
    return boundary_mode == SampleMode::bernoulli_straight_through ||
           scatter_mode == SampleMode::bernoulli_straight_through;
  }
};

/// Structure-of-arrays view of the per-sample acoustic parameters along one ray.
template <class Real>
struct RaySamples {
  std::vector<Real> alpha, beta, rho_b, rho_s, phi;

  std::size_t size() const { return alpha.size(); }

  void resize(std::size_t n) {
    alpha.resize(n);
    beta.resize(n);
    rho_b.resize(n);
    rho_s.resize(n);
    phi.resize(n);
  }

  static RaySamples from(const std::vector<ParameterSample>& ps) {
    RaySamples s;
    s.resize(ps.size());
    for (std::size_t i = 0; i < ps.size(); ++i) {
      require(ps[i].valid(), "render: invalid parameter sample");
      s.alpha[i] = Real(ps[i].attenuation);
      s.beta[i] = Real(ps[i].reflectance);
      s.rho_b[i] = Real(ps[i].border_prob);
      s.rho_s[i] = Real(ps[i].scatter_density);
      s.phi[i] = Real(ps[i].scatter_intensity);
    }
    return s;
  }
};

/// Per-column forward state kept for the backward pass.
template <class Real>
struct ColumnCache {
  RaySamples<Real> s;
  std::vector<Real> I;        // transmitted intensity, I[0] = I0
  std::vector<Real> k;        // step multipliers, I[t+1] = I[t] * k[t]
  std::vector<Real> G;        // boundary mask used (expected or sampled)
  std::vector<Real> gate;     // scatter gate used (rho_s or sampled 0/1)
  std::vector<Real> att;      // exp(-alpha * f * dt) per step
  std::vector<Real> reflect;  // I * beta * rho_b
  std::vector<Real> scatter;  // I * gate * phi
  Real f = 1, dt = 1, I0 = 1;
};

/// Transmitted intensity of Ultra-NeRF-style rendering:
/// I[t] = I0 * prod_{n<t} (1-beta_n) G_n * exp(-dt f sum_{n<t} alpha_n).
/// In expected mode G = 1 - rho_b; in bernoulli mode G is sampled with the
/// gradient passed straight through the probability.
template <class Real>
ColumnCache<Real> transmit_column(const RaySamples<Real>& s, Real I0, Real f, Real dt,
                                  const RenderConfig& cfg, Rng* rng) {
  const std::size_t n = s.size();
  require(n > 0, "transmit: empty sample list");
  for (std::size_t i = 0; i < n; ++i)
    require(std::isfinite(double(s.alpha[i])) && std::isfinite(double(s.beta[i])) &&
                std::isfinite(double(s.rho_b[i])),
            "transmit: non-finite parameters");

  ColumnCache<Real> c;
  c.s = s;
  c.f = f;
  c.dt = dt;
  c.I0 = I0;
  c.I.resize(n);
  c.k.resize(n);
  c.G.resize(n);
  c.att.resize(n);

  std::uniform_real_distribution<double> u01(0.0, 1.0);
  for (std::size_t t = 0; t < n; ++t) {
    if (cfg.boundary_mode == SampleMode::expected) {
      c.G[t] = Real(1) - s.rho_b[t];
    } else {
      require(rng, "transmit: bernoulli mode needs a random stream");
      c.G[t] = u01(*rng) < double(s.rho_b[t]) ? Real(0) : Real(1);
    }
    c.att[t] = Real(std::exp(-double(s.alpha[t]) * double(f) * double(dt)));
    c.k[t] = (Real(1) - s.beta[t]) * c.G[t] * c.att[t];
  }
  c.I[0] = I0;
  for (std::size_t t = 1; t < n; ++t) c.I[t] = c.I[t - 1] * c.k[t - 1];
  return c;
}

/// B-mode composition for one column: reflect + scatter terms, clamped.
/// The PSF, when enabled, is applied at frame level across columns.
template <class Real>
void compose_column(ColumnCache<Real>& c, const RenderConfig& cfg, Rng* rng) {
  const std::size_t n = c.s.size();
  c.gate.resize(n);
  c.reflect.resize(n);
  c.scatter.resize(n);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  for (std::size_t t = 0; t < n; ++t) {
    if (cfg.scatter_mode == SampleMode::expected) {
      c.gate[t] = c.s.rho_s[t];
    } else {
      require(rng, "compose: bernoulli mode needs a random stream");
      c.gate[t] = u01(*rng) < double(c.s.rho_s[t]) ? Real(1) : Real(0);
    }
    c.reflect[t] = c.I[t] * c.s.beta[t] * c.s.rho_b[t];
    c.scatter[t] = c.I[t] * c.gate[t] * c.s.phi[t];
  }
}

/// Per-column gradients given dL/d(pre-clamp reflect/scatter contributions).
/// Returns a 5 x S matrix in activated parameter space
/// (rows: alpha, beta, rho_b, rho_s, phi).
template <class Real>
MatX<Real> column_backward(const ColumnCache<Real>& c, const std::vector<Real>& dReflect,
                           const std::vector<Real>& dScatter) {
  const std::size_t n = c.s.size();
  MatX<Real> d = MatX<Real>::Zero(5, n);

  // Direct composition terms plus the direct dL/dI contribution.
  std::vector<Real> dI(n, Real(0));
  for (std::size_t t = 0; t < n; ++t) {
    d(1, t) += dReflect[t] * c.I[t] * c.s.rho_b[t];
    d(2, t) += dReflect[t] * c.I[t] * c.s.beta[t];
    d(3, t) += dScatter[t] * c.I[t] * c.s.phi[t];  // straight-through for sampled gates
    d(4, t) += dScatter[t] * c.I[t] * c.gate[t];
    dI[t] = dReflect[t] * c.s.beta[t] * c.s.rho_b[t] + dScatter[t] * c.gate[t] * c.s.phi[t];
  }

  // Reverse recurrence through I[t+1] = I[t] * k[t].
  Real gI = dI[n - 1];
  for (std::size_t t = n - 1; t-- > 0;) {
    Real gk = gI * c.I[t];
    d(0, t) += gk * c.k[t] * (-c.f * c.dt);
    d(1, t) += -gk * c.G[t] * c.att[t];
    d(2, t) += -gk * (Real(1) - c.s.beta[t]) * c.att[t];  // through G's probability
    gI = dI[t] + gI * c.k[t];
  }
  return d;
}

/// Spec-facing transmit: intensity sequence for a sample list.
inline std::vector<double> transmit(const std::vector<ParameterSample>& samples,
                                    const ProbeConfig& probe, const RenderConfig& cfg,
                                    Rng* rng = nullptr) {
  auto c = transmit_column<double>(RaySamples<double>::from(samples),
                                   probe.initial_intensity, probe.frequency,
                                   probe.sample_spacing(), cfg, rng);
  return c.I;
}

/// Spec-facing compose: one B-mode column from samples and intensities.
inline std::vector<double> compose_bmode(const std::vector<ParameterSample>& samples,
                                         const std::vector<double>& I,
                                         const RenderConfig& cfg, Rng* rng = nullptr) {
  require(samples.size() == I.size(), "compose_bmode: length mismatch");
  ColumnCache<double> c;
  c.s = RaySamples<double>::from(samples);
  c.I = I;
  compose_column(c, cfg, rng);
  std::vector<double> E(samples.size());
  for (std::size_t t = 0; t < samples.size(); ++t)
    E[t] = clamp01(cfg.w_reflect * c.reflect[t] + cfg.w_scatter * c.scatter[t]);
  return E;
}

/// Normalized 2D Gaussian point-spread kernel (rows axial, cols lateral).
inline std::vector<double> psf_kernel(const RenderConfig& cfg) {
  int k = cfg.psf_size, h = k / 2;
  std::vector<double> ker(std::size_t(k) * k);
  double sum = 0;
  for (int r = 0; r < k; ++r)
    for (int c = 0; c < k; ++c) {
      double dr = (r - h) / cfg.psf_sigma_axial;
      double dc = (c - h) / cfg.psf_sigma_lateral;
      ker[std::size_t(r) * k + c] = std::exp(-0.5 * (dr * dr + dc * dc));
      sum += ker[std::size_t(r) * k + c];
    }
  for (double& v : ker) v /= sum;
  return ker;
}

/// Same-size zero-padded 2D convolution; the Gaussian kernel is symmetric,
/// so this doubles as its own adjoint.
template <class Real>
MatX<Real> conv2d_same(const MatX<Real>& x, const std::vector<double>& ker, int k) {
  int h = k / 2;
  MatX<Real> y = MatX<Real>::Zero(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r)
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
      Real acc = 0;
      for (int dr = -h; dr <= h; ++dr)
        for (int dc = -h; dc <= h; ++dc) {
          Eigen::Index rr = r + dr, cc = c + dc;
          if (rr < 0 || cc < 0 || rr >= x.rows() || cc >= x.cols()) continue;
          acc += x(rr, cc) * Real(ker[std::size_t(dr + h) * k + (dc + h)]);
        }
      y(r, c) = acc;
    }
  return y;
}

/// Forward state of a whole rendered frame (H = samples, W = scanlines).
template <class Real>
struct FrameCache {
  int H = 0, W = 0;
  std::vector<ColumnCache<Real>> cols;
  MatX<Real> reflect, scatter, scatter_conv, P;
  RenderConfig cfg;
};

/// Renders one frame from a parameter matrix laid out column-major:
/// params is 5 x (W*S), point index j*S + t for scanline j, depth t.
template <class Real>
FrameCache<Real> render_frame_from_params(const MatX<Real>& params, const ProbeConfig& probe,
                                          const RenderConfig& cfg, std::uint64_t seed) {
  const int S = probe.n_samples, W = probe.n_scanlines;
  require(params.rows() == 5 && params.cols() == Eigen::Index(S) * W,
          "render_frame: parameter matrix shape mismatch");
  FrameCache<Real> fc;
  fc.H = S;
  fc.W = W;
  fc.cfg = cfg;
  fc.reflect.resize(S, W);
  fc.scatter.resize(S, W);
  fc.cols.resize(W);

  for (int j = 0; j < W; ++j) {
    RaySamples<Real> s;
    s.resize(S);
    for (int t = 0; t < S; ++t) {
      Eigen::Index p = Eigen::Index(j) * S + t;
      s.alpha[t] = params(0, p);
      s.beta[t] = params(1, p);
      s.rho_b[t] = params(2, p);
      s.rho_s[t] = params(3, p);
      s.phi[t] = params(4, p);
    }
    std::optional<Rng> rng;
    if (cfg.stochastic()) rng = substream(seed, 0xB0DE, std::uint64_t(j));
    auto& c = fc.cols[j];
    c = transmit_column<Real>(s, Real(probe.initial_intensity), Real(probe.frequency),
                              Real(probe.sample_spacing()), cfg, rng ? &*rng : nullptr);
    compose_column(c, cfg, rng ? &*rng : nullptr);
    for (int t = 0; t < S; ++t) {
      fc.reflect(t, j) = c.reflect[t];
      fc.scatter(t, j) = c.scatter[t];
    }
  }

  if (cfg.psf_enabled)
    fc.scatter_conv = conv2d_same(fc.scatter, psf_kernel(cfg), cfg.psf_size);
  else
    fc.scatter_conv = fc.scatter;
  fc.P = Real(cfg.w_reflect) * fc.reflect + Real(cfg.w_scatter) * fc.scatter_conv;
  return fc;
}

template <class Real>
Image frame_image(const FrameCache<Real>& fc) {
  Image img(fc.H, fc.W);
  for (int t = 0; t < fc.H; ++t)
    for (int j = 0; j < fc.W; ++j) img.at(t, j) = clamp01(double(fc.P(t, j)));
  return img;
}

/// Backward through composition, PSF and transmit. dE is H x W; the result
/// is 5 x (W*S) in the same layout render_frame_from_params consumes.
template <class Real>
MatX<Real> frame_backward(const FrameCache<Real>& fc, const MatX<Real>& dE) {
  const int S = fc.H, W = fc.W;
  MatX<Real> dP(S, W);
  for (int t = 0; t < S; ++t)
    for (int j = 0; j < W; ++j)
      dP(t, j) = (fc.P(t, j) >= Real(0) && fc.P(t, j) <= Real(1)) ? dE(t, j) : Real(0);

  MatX<Real> dReflect = Real(fc.cfg.w_reflect) * dP;
  MatX<Real> dScatterConv = Real(fc.cfg.w_scatter) * dP;
  MatX<Real> dScatter = fc.cfg.psf_enabled
                            ? conv2d_same(dScatterConv, psf_kernel(fc.cfg), fc.cfg.psf_size)
                            : dScatterConv;

  MatX<Real> dParams(5, Eigen::Index(S) * W);
  std::vector<Real> dR(S), dS(S);
  for (int j = 0; j < W; ++j) {
    for (int t = 0; t < S; ++t) {
      dR[t] = dReflect(t, j);
      dS[t] = dScatter(t, j);
    }
    MatX<Real> d = column_backward(fc.cols[j], dR, dS);
    dParams.block(0, Eigen::Index(j) * S, 5, S) = d;
  }
  return dParams;
}

/// Collects all frame sample points: index j*S + t, positions along each ray.
inline std::vector<Point3> frame_points(const ProbeConfig& probe, const Pose& pose) {
  std::vector<Point3> pts;
  pts.reserve(std::size_t(probe.n_scanlines) * probe.n_samples);
  for (int j = 0; j < probe.n_scanlines; ++j) {
    ScanRay ray = ray_for_pixel(probe, pose, j, probe.n_samples);
    for (double t : ray.depths) pts.push_back(ray.at(t));
  }
  return pts;
}

/// Renders one B-mode frame from any point sampler. The sampler receives all
/// frame points at once and returns an activated 5 x N parameter matrix.
template <class Real, class Sampler>
Image render_frame_with(Sampler&& sampler, const Pose& pose, const ProbeConfig& probe,
                        const RenderConfig& cfg, std::uint64_t seed = 0) {
  cfg.validate();
  probe.validate();
  pose.validate();
  MatX<Real> params = sampler(frame_points(probe, pose));
  return frame_image(render_frame_from_params<Real>(params, probe, cfg, seed));
}

/// Renders one frame from a trained field.
template <class Real>
Image render_frame(const FieldState<Real>& field, const Pose& pose, const ProbeConfig& probe,
                   const RenderConfig& cfg, std::uint64_t seed = 0) {
  return render_frame_with<Real>(
      [&](const std::vector<Point3>& pts) {
        MatX<Real> raw = field.eval_raw_batch(pts);
        apply_head_activations(raw);
        return raw;
      },
      pose, probe, cfg, seed);
}

/// Standard volume rendering cache: sigma := rho_s, c := phi mapping is used
/// for the non-ultrasound rendering path.
template <class Real>
struct StdColumnCache {
  std::vector<Real> sigma, color, T, u;  // u[t] = exp(-sigma[t] dt)
  Real dt = 1;
};

template <class Real>
StdColumnCache<Real> std_render_column(const std::vector<Real>& sigma,
                                       const std::vector<Real>& color, Real dt) {
  require(!sigma.empty() && sigma.size() == color.size(), "std render: bad inputs");
  StdColumnCache<Real> c;
  c.sigma = sigma;
  c.color = color;
  c.dt = dt;
  const std::size_t n = sigma.size();
  c.T.resize(n);
  c.u.resize(n);
  c.T[0] = Real(1);
  for (std::size_t t = 0; t < n; ++t) {
    require(std::isfinite(double(sigma[t])) && sigma[t] >= Real(0),
            "std render: sigma must be finite and non-negative");
    c.u[t] = Real(std::exp(-double(sigma[t]) * double(dt)));
    if (t + 1 < n) c.T[t + 1] = c.T[t] * c.u[t];
  }
  return c;
}

/// Per-depth accumulation contribution T_t (1 - e^{-sigma_t dt}) c_t. Its sum
/// over the column is the classic quadrature of the volume-rendering integral.
template <class Real>
std::vector<Real> std_column_contributions(const StdColumnCache<Real>& c) {
  std::vector<Real> e(c.sigma.size());
  for (std::size_t t = 0; t < e.size(); ++t) e[t] = c.T[t] * (Real(1) - c.u[t]) * c.color[t];
  return e;
}

/// Backward for the contribution column; dE per depth. Returns (dsigma, dcolor).
template <class Real>
std::pair<std::vector<Real>, std::vector<Real>> std_column_backward(
    const StdColumnCache<Real>& c, const std::vector<Real>& dE) {
  const std::size_t n = c.sigma.size();
  std::vector<Real> dsig(n), dcol(n);
  Real dT_next = 0;
  for (std::size_t t = n; t-- > 0;) {
    dcol[t] = dE[t] * c.T[t] * (Real(1) - c.u[t]);
    Real du = -dE[t] * c.T[t] * c.color[t] + dT_next * c.T[t];
    dsig[t] = -c.dt * c.u[t] * du;
    dT_next = dE[t] * (Real(1) - c.u[t]) * c.color[t] + dT_next * c.u[t];
  }
  return {dsig, dcol};
}

/// Spec-facing scalar pixel of Eq.-5-style rendering along one ray.
template <class Real>
Real render_volume_standard_raw(const std::vector<Real>& sigma, const std::vector<Real>& color,
                                Real dt) {
  auto c = std_render_column(sigma, color, dt);
  auto e = std_column_contributions(c);
  Real v = 0;
  for (Real x : e) v += x;
  return v;
}

/// Standard volume rendering of a field along a scan ray (sigma := rho_s,
/// c := phi), one scalar per ray.
template <class Real>
Real render_volume_standard(const FieldState<Real>& field, const ScanRay& ray) {
  ray.validate();
  std::vector<Point3> pts;
  pts.reserve(ray.depths.size());
  for (double t : ray.depths) pts.push_back(ray.at(t));
  MatX<Real> raw = field.eval_raw_batch(pts);
  apply_head_activations(raw);
  std::vector<Real> sigma(pts.size()), color(pts.size());
  for (std::size_t i = 0; i < pts.size(); ++i) {
    sigma[i] = raw(3, i);
    color[i] = raw(4, i);
  }
  return render_volume_standard_raw(sigma, color, Real(ray.dt));
}

}  // namespace nerfus

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdio>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "nerfus/core/common.hpp"
#include "nerfus/core/image.hpp"

namespace nerfus {

inline constexpr double kPsnrCap = 100.0;

/// Peak signal-to-noise ratio in dB; identical images return the 100 dB cap.
inline double psnr(const Image& a, const Image& b, double peak = 1.0) {
  require(a.h == b.h && a.w == b.w, "psnr: shape mismatch");
  require(peak > 0.0, "psnr: peak must be > 0");
  double mse = 0.0;
  for (std::size_t i = 0; i < a.v.size(); ++i) {
    double d = a.v[i] - b.v[i];
    mse += d * d;
  }
  mse /= double(a.v.size());
  if (mse == 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(peak * peak / mse));
}

namespace detail {

inline std::vector<double> gaussian_window(int size, double sigma) {
  std::vector<double> w(static_cast<std::size_t>(size));
  double sum = 0.0;
  int c = size / 2;
  for (int i = 0; i < size; ++i) {
    w[std::size_t(i)] = std::exp(-0.5 * (i - c) * (i - c) / (sigma * sigma));
    sum += w[std::size_t(i)];
  }
  for (auto& x : w) x /= sum;
  return w;
}

/// Separable valid-region Gaussian filtering; output is (h-size+1)x(w-size+1).
inline Image gauss_valid(const Image& img, const std::vector<double>& w) {
  int size = int(w.size());
  int oh = img.h - size + 1, ow = img.w - size + 1;
  Image tmp(img.h, ow);
  for (int r = 0; r < img.h; ++r)
    for (int c = 0; c < ow; ++c) {
      double s = 0.0;
      for (int k = 0; k < size; ++k) s += w[std::size_t(k)] * img.at(r, c + k);
      tmp.at(r, c) = s;
    }
  Image out(oh, ow);
  for (int r = 0; r < oh; ++r)
    for (int c = 0; c < ow; ++c) {
      double s = 0.0;
      for (int k = 0; k < size; ++k) s += w[std::size_t(k)] * tmp.at(r + k, c);
      out.at(r, c) = s;
    }
  return out;
}

inline Image elementwise(const Image& a, const Image& b,
                         const std::function<double(double, double)>& f) {
  Image out(a.h, a.w);
  for (std::size_t i = 0; i < a.v.size(); ++i) out.v[i] = f(a.v[i], b.v[i]);
  return out;
}

struct SsimTerms {
  double ssim;  // full index
  double cs;    // contrast-structure component (used by the multi-scale form)
};

inline SsimTerms ssim_terms(const Image& a, const Image& b, double peak) {
  constexpr int kWin = 11;
  constexpr double kSigma = 1.5, k1 = 0.01, k2 = 0.03;
  require(a.h >= kWin && a.w >= kWin, "ssim: image smaller than 11x11 window");
  const double c1 = (k1 * peak) * (k1 * peak);
  const double c2 = (k2 * peak) * (k2 * peak);
  auto w = gaussian_window(kWin, kSigma);

  Image mu_a = gauss_valid(a, w), mu_b = gauss_valid(b, w);
  auto mul = [](double x, double y) { return x * y; };
  Image aa = gauss_valid(elementwise(a, a, mul), w);
  Image bb = gauss_valid(elementwise(b, b, mul), w);
  Image ab = gauss_valid(elementwise(a, b, mul), w);

  double ssim_sum = 0.0, cs_sum = 0.0;
  for (std::size_t i = 0; i < mu_a.v.size(); ++i) {
    double ma = mu_a.v[i], mb = mu_b.v[i];
    double va = aa.v[i] - ma * ma;
    double vb = bb.v[i] - mb * mb;
    double cov = ab.v[i] - ma * mb;
    double cs = (2.0 * cov + c2) / (va + vb + c2);
    double lum = (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
    ssim_sum += lum * cs;
    cs_sum += cs;
  }
  double n = double(mu_a.v.size());
  return {ssim_sum / n, cs_sum / n};
}

inline Image downsample2(const Image& img) {
  int oh = img.h / 2, ow = img.w / 2;
  Image out(oh, ow);
  for (int r = 0; r < oh; ++r)
    for (int c = 0; c < ow; ++c)
      out.at(r, c) = 0.25 * (img.at(2 * r, 2 * c) + img.at(2 * r + 1, 2 * c) +
                             img.at(2 * r, 2 * c + 1) + img.at(2 * r + 1, 2 * c + 1));
  return out;
}

}  // namespace detail

/// Structural similarity with the standard 11x11 sigma=1.5 Gaussian window.
inline double ssim(const Image& a, const Image& b, double peak = 1.0) {
  require(a.h == b.h && a.w == b.w, "ssim: shape mismatch");
  return detail::ssim_terms(a, b, peak).ssim;
}

/// Multi-scale SSIM over up to 5 dyadic scales; scales the image cannot
/// support are dropped with a warning and the weights renormalized.
inline double ms_ssim(const Image& a, const Image& b, int scales = 5, double peak = 1.0) {
  require(a.h == b.h && a.w == b.w, "ms_ssim: shape mismatch");
  require(scales >= 1 && scales <= 5, "ms_ssim: scales must be in [1,5]");
  static const double kWeights[5] = {0.0448, 0.2856, 0.3001, 0.2363, 0.1333};

  int feasible = 1;
  int m = std::min(a.h, a.w);
  while (feasible < scales && (m >> feasible) >= 11) ++feasible;
  if (feasible < scales) {
    std::fprintf(stderr, "[metrics] warning: image %dx%d supports only %d of %d ms-ssim scales\n",
                 a.h, a.w, feasible, scales);
    scales = feasible;
  }
  double wsum = 0.0;
  for (int s = 0; s < scales; ++s) wsum += kWeights[s];

  Image ca = a, cb = b;
  double score = 1.0;
  for (int s = 0; s < scales; ++s) {
    auto t = detail::ssim_terms(ca, cb, peak);
    double term = (s + 1 == scales) ? t.ssim : t.cs;
    // Negative components would make fractional powers undefined; clamp at 0.
    score *= std::pow(std::max(term, 0.0), kWeights[s] / wsum);
    if (s + 1 < scales) {
      ca = detail::downsample2(ca);
      cb = detail::downsample2(cb);
    }
  }
  return score;
}

/// External perceptual scorer hook (e.g. a learned metric); none is bundled.
using PerceptualScorer = std::function<double(const Image&, const Image&)>;

struct MetricReport {
  std::vector<int> frame_indices;
  std::vector<double> psnr_per_frame, ssim_per_frame, ms_ssim_per_frame, perceptual_per_frame;
  double psnr_mean = 0, psnr_std = 0;
  double ssim_mean = 0, ssim_std = 0;
  double ms_ssim_mean = 0, ms_ssim_std = 0;
  double perceptual_mean = 0, perceptual_std = 0;
  bool has_perceptual = false;
};

namespace detail {

inline std::pair<double, double> mean_std(const std::vector<double>& v) {
  if (v.empty()) return {0.0, 0.0};
  double m = 0.0;
  for (double x : v) m += x;
  m /= double(v.size());
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return {m, std::sqrt(s / double(v.size()))};
}

}  // namespace detail

/// Frame-wise comparison of rendered frames against references.
inline MetricReport evaluate_frames(const std::vector<Image>& rendered,
                                    const std::vector<Image>& reference,
                                    const std::vector<int>& indices,
                                    const PerceptualScorer& perceptual = nullptr) {
  require(rendered.size() == reference.size() && rendered.size() == indices.size(),
          "evaluate: frame count mismatch");
  require(!rendered.empty(), "evaluate: empty test split");
  MetricReport r;
  r.frame_indices = indices;
  r.has_perceptual = bool(perceptual);
  for (std::size_t i = 0; i < rendered.size(); ++i) {
    r.psnr_per_frame.push_back(psnr(rendered[i], reference[i]));
    r.ssim_per_frame.push_back(ssim(rendered[i], reference[i]));
    r.ms_ssim_per_frame.push_back(ms_ssim(rendered[i], reference[i]));
    if (perceptual) r.perceptual_per_frame.push_back(perceptual(rendered[i], reference[i]));
  }
  std::tie(r.psnr_mean, r.psnr_std) = detail::mean_std(r.psnr_per_frame);
  std::tie(r.ssim_mean, r.ssim_std) = detail::mean_std(r.ssim_per_frame);
  std::tie(r.ms_ssim_mean, r.ms_ssim_std) = detail::mean_std(r.ms_ssim_per_frame);
  if (perceptual)
    std::tie(r.perceptual_mean, r.perceptual_std) = detail::mean_std(r.perceptual_per_frame);
  return r;
}

inline nlohmann::json report_to_json(const MetricReport& r) {
  nlohmann::json j;
  j["frames"] = nlohmann::json::array();
  for (std::size_t i = 0; i < r.frame_indices.size(); ++i) {
    nlohmann::json f;
    f["frame"] = r.frame_indices[i];
    f["psnr_db"] = r.psnr_per_frame[i];
    f["ssim"] = r.ssim_per_frame[i];
    f["ms_ssim"] = r.ms_ssim_per_frame[i];
    if (r.has_perceptual) f["perceptual"] = r.perceptual_per_frame[i];
    j["frames"].push_back(f);
  }
  j["psnr_db"] = {{"mean", r.psnr_mean}, {"std", r.psnr_std}};
  j["ssim"] = {{"mean", r.ssim_mean}, {"std", r.ssim_std}};
  j["ms_ssim"] = {{"mean", r.ms_ssim_mean}, {"std", r.ms_ssim_std}};
  if (r.has_perceptual) j["perceptual"] = {{"mean", r.perceptual_mean}, {"std", r.perceptual_std}};
  return j;
}

inline std::string report_to_csv(const MetricReport& r) {
  std::string out = "frame,psnr_db,ssim,ms_ssim\n";
  char buf[160];
  for (std::size_t i = 0; i < r.frame_indices.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g,%.17g\n", r.frame_indices[i],
                  r.psnr_per_frame[i], r.ssim_per_frame[i], r.ms_ssim_per_frame[i]);
    out += buf;
  }
  return out;
}

}  // namespace nerfus

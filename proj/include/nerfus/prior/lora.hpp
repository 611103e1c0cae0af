// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "nerfus/prior/denoiser.hpp"

namespace nerfus {

/// Low-rank adaptation of every weight matrix in a Denoiser:
/// W_eff = W + delta * A * B. Base weights and all biases stay frozen;
/// only the factors A (out x rank) and B (rank x in) train. B starts at
/// zero, so a freshly attached adapter reproduces the base model exactly.
template <class Real>
class AdaptedDenoiser {
 public:
  using Mat = MatX<Real>;

  Denoiser<Real> base;  // frozen
  Denoiser<Real> eff;   // effective weights, refreshed from base + factors
  std::vector<Mat> A, B, dA, dB;
  double delta = 1.0;
  int rank = 4;

  AdaptedDenoiser(const Denoiser<Real>& model, int r, double d, std::uint64_t seed)
      : base(model), eff(model), delta(d), rank(r) {
    require(r >= 1, "lora: rank must be >= 1");
    require(d >= 0.0, "lora: delta must be >= 0");
    Rng rng = substream(seed, 0x10A4);
    auto ls = base.layers();
    A.resize(ls.size());
    B.resize(ls.size());
    for (std::size_t i = 0; i < ls.size(); ++i) {
      const Mat& W = ls[i]->W;
      double bound = 1.0 / std::sqrt(double(W.cols()));
      std::uniform_real_distribution<double> u(-bound, bound);
      A[i] = Mat(W.rows(), rank);
      for (Eigen::Index j = 0; j < A[i].size(); ++j) A[i].data()[j] = Real(u(rng));
      B[i] = Mat::Zero(rank, W.cols());
    }
    zero_grad();
    refresh();
  }

  void zero_grad() {
    dA.assign(A.size(), Mat());
    dB.assign(B.size(), Mat());
    for (std::size_t i = 0; i < A.size(); ++i) {
      dA[i] = Mat::Zero(A[i].rows(), A[i].cols());
      dB[i] = Mat::Zero(B[i].rows(), B[i].cols());
    }
  }

  /// Recompute W_eff after the factors change.
  void refresh() {
    auto bs = base.layers();
    auto es = eff.layers();
    for (std::size_t i = 0; i < bs.size(); ++i) {
      es[i]->W = bs[i]->W + Real(delta) * (A[i] * B[i]).eval();
      es[i]->b = bs[i]->b;
    }
  }

  Mat forward(const Mat& x, double t, typename Denoiser<Real>::Cache* c = nullptr) const {
    return eff.forward(x, t, c);
  }

  /// Runs the effective model's backward, then chains dW_eff into the
  /// factor gradients: dA = delta * dW * B^T, dB = delta * A^T * dW.
  Mat backward(const typename Denoiser<Real>::Cache& c, const Mat& deps) {
    eff.zero_grad();
    Mat dx = eff.backward(c, deps);
    auto es = eff.layers();
    for (std::size_t i = 0; i < es.size(); ++i) {
      dA[i] += Real(delta) * es[i]->dW * B[i].transpose();
      dB[i] += Real(delta) * A[i].transpose() * es[i]->dW;
    }
    return dx;
  }

  std::size_t factor_param_count() const {
    std::size_t n = 0;
    for (std::size_t i = 0; i < A.size(); ++i) n += std::size_t(A[i].size() + B[i].size());
    return n;
  }
};

}  // namespace nerfus

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <vector>

#include "nerfus/core/checkpoint.hpp"
#include "nerfus/core/common.hpp"
#include "nerfus/core/types.hpp"

namespace nerfus {

struct FieldConfig {
  int n_layers = 8;
  int hidden_width = 256;
  int skip_at_layer = 5;
  int pe_frequencies = 10;  // L

  /// Small preset sized for CPU experiments and tests.
  static FieldConfig desk() { return {4, 64, 2, 6}; }

  void validate() const {
    require(n_layers >= 2, "field: n_layers must be >= 2");
    require(skip_at_layer >= 1 && skip_at_layer < n_layers,
            "field: skip_at_layer must satisfy 1 <= skip < n_layers");
    require(pe_frequencies >= 0, "field: pe_frequencies must be >= 0");
    require(hidden_width >= 1, "field: hidden_width must be >= 1");
  }

  int input_dim() const { return 3 + 6 * pe_frequencies; }
};

/// (q, sin(2^0 pi q), cos(2^0 pi q), ..., sin(2^{L-1} pi q), cos(2^{L-1} pi q)),
/// three coordinates per slot; length 3 + 6L.
inline std::vector<double> positional_encode(const Point3& q, int L) {
  require(q.finite(), "positional_encode: non-finite input");
  std::vector<double> out;
  out.reserve(3 + 6 * L);
  out.push_back(q.x);
  out.push_back(q.y);
  out.push_back(q.z);
  double scale = M_PI;
  for (int l = 0; l < L; ++l) {
    out.push_back(std::sin(scale * q.x));
    out.push_back(std::sin(scale * q.y));
    out.push_back(std::sin(scale * q.z));
    out.push_back(std::cos(scale * q.x));
    out.push_back(std::cos(scale * q.y));
    out.push_back(std::cos(scale * q.z));
    scale *= 2.0;
  }
  return out;
}

template <class Real>
using MatX = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic>;
template <class Real>
using VecX = Eigen::Matrix<Real, Eigen::Dynamic, 1>;

/// Encodes a batch of points into a (3+6L) x N column matrix.
template <class Real>
MatX<Real> encode_batch(const std::vector<Point3>& pts, int L) {
  MatX<Real> X(3 + 6 * L, pts.size());
  for (std::size_t n = 0; n < pts.size(); ++n) {
    const Point3& q = pts[n];
    require(q.finite(), "encode_batch: non-finite point");
    X(0, n) = Real(q.x);
    X(1, n) = Real(q.y);
    X(2, n) = Real(q.z);
    double scale = M_PI;
    for (int l = 0; l < L; ++l) {
      X(3 + 6 * l + 0, n) = Real(std::sin(scale * q.x));
      X(3 + 6 * l + 1, n) = Real(std::sin(scale * q.y));
      X(3 + 6 * l + 2, n) = Real(std::sin(scale * q.z));
      X(3 + 6 * l + 3, n) = Real(std::cos(scale * q.x));
      X(3 + 6 * l + 4, n) = Real(std::cos(scale * q.y));
      X(3 + 6 * l + 5, n) = Real(std::cos(scale * q.z));
      scale *= 2.0;
    }
  }
  return X;
}

/// ReLU MLP with a skip connection that re-concatenates the encoded input
/// at one hidden layer. Emits five raw heads; range activations are applied
/// by the field wrapper.
template <class Real>
class Mlp {
 public:
  using Mat = MatX<Real>;
  using Vec = VecX<Real>;

  FieldConfig cfg;
  std::vector<Mat> W;
  std::vector<Vec> b;

  struct Cache {
    std::vector<Mat> inputs;  // matrix actually fed to each layer
    std::vector<Mat> pre;     // pre-activation outputs
  };

  struct Grads {
    std::vector<Mat> dW;
    std::vector<Vec> db;
    Mat dX;  // gradient w.r.t. the encoded input
  };

  explicit Mlp(const FieldConfig& c = FieldConfig::desk()) : cfg(c) {
    cfg.validate();
    W.resize(cfg.n_layers);
    b.resize(cfg.n_layers);
    for (int i = 0; i < cfg.n_layers; ++i) {
      W[i] = Mat::Zero(out_dim(i), in_dim(i));
      b[i] = Vec::Zero(out_dim(i));
    }
  }

  int in_dim(int layer) const {
    if (layer == 0) return cfg.input_dim();
    if (layer == cfg.skip_at_layer) return cfg.hidden_width + cfg.input_dim();
    return cfg.hidden_width;
  }
  int out_dim(int layer) const { return layer == cfg.n_layers - 1 ? 5 : cfg.hidden_width; }

  /// Fan-in-scaled uniform init, deterministic for a given seed.
  void init(std::uint64_t seed) {
    Rng rng = substream(seed, 0xF1E1D);
    for (int i = 0; i < cfg.n_layers; ++i) {
      Real bound = Real(1.0 / std::sqrt(double(in_dim(i))));
      std::uniform_real_distribution<double> u(-double(bound), double(bound));
      for (int r = 0; r < W[i].rows(); ++r)
        for (int c = 0; c < W[i].cols(); ++c) W[i](r, c) = Real(u(rng));
      for (int r = 0; r < b[i].rows(); ++r) b[i](r) = Real(u(rng));
    }
  }

  /// X is input_dim x N; returns raw 5 x N heads.
  Mat forward(const Mat& X, Cache* cache = nullptr) const {
    if (cache) {
      cache->inputs.assign(cfg.n_layers, Mat());
      cache->pre.assign(cfg.n_layers, Mat());
    }
    Mat h;
    for (int i = 0; i < cfg.n_layers; ++i) {
      Mat in;
      if (i == 0) {
        in = X;
      } else if (i == cfg.skip_at_layer) {
        in.resize(cfg.hidden_width + X.rows(), X.cols());
        in << h, X;
      } else {
        in = std::move(h);
      }
      Mat z = (W[i] * in).colwise() + b[i];
      if (cache) {
        cache->inputs[i] = std::move(in);
        cache->pre[i] = z;
      }
      if (i == cfg.n_layers - 1) return z;
      h = z.cwiseMax(Real(0));
    }
    return h;  // unreachable
  }

  /// dRaw is 5 x N, the gradient w.r.t. the raw heads.
  Grads backward(const Cache& cache, const Mat& dRaw) const {
    Grads g;
    g.dW.resize(cfg.n_layers);
    g.db.resize(cfg.n_layers);
    Mat delta = dRaw;
    Mat dX = Mat::Zero(cfg.input_dim(), dRaw.cols());
    for (int i = cfg.n_layers - 1; i >= 0; --i) {
      if (i != cfg.n_layers - 1)
        delta = delta.cwiseProduct(
            (cache.pre[i].array() > Real(0)).template cast<Real>().matrix());
      g.dW[i] = delta * cache.inputs[i].transpose();
      g.db[i] = delta.rowwise().sum();
      Mat din = W[i].transpose() * delta;
      if (i == cfg.skip_at_layer) {
        dX += din.bottomRows(cfg.input_dim());
        delta = din.topRows(cfg.hidden_width);
      } else if (i == 0) {
        dX += din;
      } else {
        delta = std::move(din);
      }
    }
    g.dX = std::move(dX);
    return g;
  }

  std::size_t param_count() const {
    std::size_t n = 0;
    for (int i = 0; i < cfg.n_layers; ++i) n += W[i].size() + b[i].size();
    return n;
  }

  void to_flat(std::vector<Real>& out) const {
    out.clear();
    out.reserve(param_count());
    for (int i = 0; i < cfg.n_layers; ++i) {
      out.insert(out.end(), W[i].data(), W[i].data() + W[i].size());
      out.insert(out.end(), b[i].data(), b[i].data() + b[i].size());
    }
  }

  void from_flat(const std::vector<Real>& in) {
    require(in.size() == param_count(), "mlp: flat parameter size mismatch");
    std::size_t p = 0;
    for (int i = 0; i < cfg.n_layers; ++i) {
      std::copy(in.begin() + p, in.begin() + p + W[i].size(), W[i].data());
      p += W[i].size();
      std::copy(in.begin() + p, in.begin() + p + b[i].size(), b[i].data());
      p += b[i].size();
    }
  }

  static void grads_to_flat(const Grads& g, std::vector<Real>& out) {
    out.clear();
    for (std::size_t i = 0; i < g.dW.size(); ++i) {
      out.insert(out.end(), g.dW[i].data(), g.dW[i].data() + g.dW[i].size());
      out.insert(out.end(), g.db[i].data(), g.db[i].data() + g.db[i].size());
    }
  }
};

/// Raw-head to ParameterSample activations: softplus keeps attenuation
/// non-negative, a logistic squash bounds the other four to [0,1].
template <class Real>
Real softplus(Real z) {
  return z > Real(30) ? z : Real(std::log1p(std::exp(double(z))));
}

template <class Real>
Real sigmoid(Real z) {
  return Real(1) / (Real(1) + Real(std::exp(-double(z))));
}

/// Applies head activations in place: row 0 softplus, rows 1..4 sigmoid.
template <class Real>
void apply_head_activations(MatX<Real>& raw) {
  for (Eigen::Index n = 0; n < raw.cols(); ++n) {
    raw(0, n) = softplus(raw(0, n));
    for (int r = 1; r < 5; ++r) raw(r, n) = sigmoid(raw(r, n));
  }
}

/// Chains dL/d(activated outputs) back to dL/d(raw heads).
/// `raw` must hold the pre-activation values.
template <class Real>
MatX<Real> head_activation_backward(const MatX<Real>& raw, const MatX<Real>& dOut) {
  MatX<Real> dRaw(raw.rows(), raw.cols());
  for (Eigen::Index n = 0; n < raw.cols(); ++n) {
    dRaw(0, n) = dOut(0, n) * sigmoid(raw(0, n));  // d softplus
    for (int r = 1; r < 5; ++r) {
      Real s = sigmoid(raw(r, n));
      dRaw(r, n) = dOut(r, n) * s * (Real(1) - s);
    }
  }
  return dRaw;
}

template <class Real>
struct FieldState {
  Mlp<Real> mlp;

  explicit FieldState(const FieldConfig& cfg = FieldConfig::desk(), std::uint64_t seed = 0)
      : mlp(cfg) {
    mlp.init(seed);
  }

  const FieldConfig& config() const { return mlp.cfg; }

  /// Raw (pre-activation) 5 x N heads for a batch of points, order preserved.
  MatX<Real> eval_raw_batch(const std::vector<Point3>& pts,
                            typename Mlp<Real>::Cache* cache = nullptr) const {
    MatX<Real> X = encode_batch<Real>(pts, mlp.cfg.pe_frequencies);
    return mlp.forward(X, cache);
  }

  std::vector<ParameterSample> eval_batch(const std::vector<Point3>& pts) const {
    MatX<Real> raw = eval_raw_batch(pts);
    apply_head_activations(raw);
    std::vector<ParameterSample> out(pts.size());
    for (std::size_t n = 0; n < pts.size(); ++n) {
      out[n] = {double(raw(0, n)), double(raw(1, n)), double(raw(2, n)),
                double(raw(3, n)), double(raw(4, n))};
    }
    return out;
  }

  ParameterSample eval(const Point3& q) const {
    require(q.finite(), "field_eval: non-finite query point");
    return eval_batch({q})[0];
  }
};

template <class Real>
void field_to_checkpoint(const FieldState<Real>& f, Checkpoint& ck,
                         const std::string& prefix = "field/") {
  const auto& cfg = f.mlp.cfg;
  std::vector<std::int64_t> meta = {cfg.n_layers, cfg.hidden_width, cfg.skip_at_layer,
                                    cfg.pe_frequencies};
  ck.put(prefix + "config", meta.data(), {std::int64_t(meta.size())});
  for (int i = 0; i < cfg.n_layers; ++i) {
    ck.put(prefix + "W" + std::to_string(i), f.mlp.W[i].data(),
           {f.mlp.W[i].rows(), f.mlp.W[i].cols()});
    ck.put(prefix + "b" + std::to_string(i), f.mlp.b[i].data(), {f.mlp.b[i].rows()});
  }
}

template <class Real>
FieldState<Real> field_from_checkpoint(const Checkpoint& ck,
                                       const std::string& prefix = "field/") {
  auto meta = ck.get<std::int64_t>(prefix + "config");
  FieldConfig cfg{int(meta.at(0)), int(meta.at(1)), int(meta.at(2)), int(meta.at(3))};
  FieldState<Real> f(cfg, 0);
  for (int i = 0; i < cfg.n_layers; ++i) {
    auto w = ck.get<Real>(prefix + "W" + std::to_string(i));
    auto bv = ck.get<Real>(prefix + "b" + std::to_string(i));
    require(std::int64_t(w.size()) == f.mlp.W[i].size(), "checkpoint: field W shape mismatch");
    require(std::int64_t(bv.size()) == f.mlp.b[i].size(), "checkpoint: field b shape mismatch");
    std::copy(w.begin(), w.end(), f.mlp.W[i].data());
    std::copy(bv.begin(), bv.end(), f.mlp.b[i].data());
  }
  return f;
}

}  // namespace nerfus

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>

#include <string>
#include <vector>

#include "nerfus/core/checkpoint.hpp"
#include "nerfus/core/common.hpp"
#include "nerfus/core/grid.hpp"
#include "nerfus/field.hpp"  // MatX/VecX aliases

namespace nerfus {

struct DenoiserConfig {
  int base_width = 16;
  std::vector<int> mults = {1, 2, 4};  // channel multiplier per resolution level
  int temb_dim = 32;
  int input_res = kPatchRes;

  /// Shape of the full-scale UNet (selectable; the desk default trains on CPU).
  static DenoiserConfig full_scale() { return {32, {1, 2, 4, 8}, 128, kPatchRes}; }

  void validate() const {
    require(base_width >= 1 && temb_dim >= 2 && temb_dim % 2 == 0,
            "denoiser: base_width >= 1 and even temb_dim >= 2 required");
    require(!mults.empty(), "denoiser: at least one resolution level");
    int res = input_res;
    for (std::size_t l = 0; l + 1 < mults.size(); ++l) {
      require(res % 2 == 0, "denoiser: resolution must halve at every level");
      res /= 2;
    }
  }

  int levels() const { return int(mults.size()); }
  int width(int level) const { return base_width * mults[level]; }
  int res(int level) const { return input_res >> level; }
};

/// Weight matrix plus bias; convolutions use W against im2col columns.
template <class Real>
struct Dense {
  MatX<Real> W;
  VecX<Real> b;
  MatX<Real> dW;  // gradient accumulators
  VecX<Real> db;

  void shape(int out, int in) {
    W = MatX<Real>::Zero(out, in);
    b = VecX<Real>::Zero(out);
    zero_grad();
  }

  void zero_grad() {
    dW = MatX<Real>::Zero(W.rows(), W.cols());
    db = VecX<Real>::Zero(b.rows());
  }

  void init(Rng& rng) {
    double bound = 1.0 / std::sqrt(double(W.cols()));
    std::uniform_real_distribution<double> u(-bound, bound);
    for (Eigen::Index i = 0; i < W.size(); ++i) W.data()[i] = Real(u(rng));
    for (Eigen::Index i = 0; i < b.size(); ++i) b.data()[i] = Real(u(rng));
  }
};

namespace detail {

/// im2col for a 3x3x3 window with zero padding on an n^3 volume with
/// C channels (x fastest). Result is (C*27) x n^3.
template <class Real>
MatX<Real> im2col3(const MatX<Real>& x, int n) {
  const int C = int(x.rows());
  const Eigen::Index V = Eigen::Index(n) * n * n;
  MatX<Real> col = MatX<Real>::Zero(Eigen::Index(C) * 27, V);
  for (int c = 0; c < C; ++c) {
    int m = 0;
    for (int dz = -1; dz <= 1; ++dz)
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx, ++m) {
          Eigen::Index row = Eigen::Index(c) * 27 + m;
          for (int k = 0; k < n; ++k) {
            int kk = k + dz;
            if (kk < 0 || kk >= n) continue;
            for (int j = 0; j < n; ++j) {
              int jj = j + dy;
              if (jj < 0 || jj >= n) continue;
              int i0 = std::max(0, -dx), i1 = std::min(n, n - dx);
              Eigen::Index out_base = (Eigen::Index(k) * n + j) * n;
              Eigen::Index in_base = (Eigen::Index(kk) * n + jj) * n + dx;
              for (int i = i0; i < i1; ++i) col(row, out_base + i) = x(c, in_base + i);
            }
          }
        }
  }
  return col;
}

/// Adjoint of im2col3: scatter-add columns back into a C x n^3 volume.
template <class Real>
MatX<Real> col2im3(const MatX<Real>& col, int C, int n) {
  const Eigen::Index V = Eigen::Index(n) * n * n;
  MatX<Real> x = MatX<Real>::Zero(C, V);
  for (int c = 0; c < C; ++c) {
    int m = 0;
    for (int dz = -1; dz <= 1; ++dz)
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx, ++m) {
          Eigen::Index row = Eigen::Index(c) * 27 + m;
          for (int k = 0; k < n; ++k) {
            int kk = k + dz;
            if (kk < 0 || kk >= n) continue;
            for (int j = 0; j < n; ++j) {
              int jj = j + dy;
              if (jj < 0 || jj >= n) continue;
              int i0 = std::max(0, -dx), i1 = std::min(n, n - dx);
              Eigen::Index out_base = (Eigen::Index(k) * n + j) * n;
              Eigen::Index in_base = (Eigen::Index(kk) * n + jj) * n + dx;
              for (int i = i0; i < i1; ++i) x(c, in_base + i) += col(row, out_base + i);
            }
          }
        }
  }
  return x;
}

template <class Real>
MatX<Real> avgpool2(const MatX<Real>& x, int n) {
  const int h = n / 2;
  MatX<Real> y = MatX<Real>::Zero(x.rows(), Eigen::Index(h) * h * h);
  for (int c = 0; c < x.rows(); ++c)
    for (int k = 0; k < n; ++k)
      for (int j = 0; j < n; ++j)
        for (int i = 0; i < n; ++i) {
          Eigen::Index src = (Eigen::Index(k) * n + j) * n + i;
          Eigen::Index dst = (Eigen::Index(k / 2) * h + j / 2) * h + i / 2;
          y(c, dst) += x(c, src) * Real(0.125);
        }
  return y;
}

template <class Real>
MatX<Real> avgpool2_backward(const MatX<Real>& dy, int n) {
  const int h = n / 2;
  MatX<Real> dx(dy.rows(), Eigen::Index(n) * n * n);
  for (int c = 0; c < dy.rows(); ++c)
    for (int k = 0; k < n; ++k)
      for (int j = 0; j < n; ++j)
        for (int i = 0; i < n; ++i) {
          Eigen::Index src = (Eigen::Index(k / 2) * h + j / 2) * h + i / 2;
          dx(c, (Eigen::Index(k) * n + j) * n + i) = dy(c, src) * Real(0.125);
        }
  return dx;
}

template <class Real>
MatX<Real> upsample2(const MatX<Real>& x, int h) {
  const int n = h * 2;
  MatX<Real> y(x.rows(), Eigen::Index(n) * n * n);
  for (int c = 0; c < x.rows(); ++c)
    for (int k = 0; k < n; ++k)
      for (int j = 0; j < n; ++j)
        for (int i = 0; i < n; ++i)
          y(c, (Eigen::Index(k) * n + j) * n + i) =
              x(c, (Eigen::Index(k / 2) * h + j / 2) * h + i / 2);
  return y;
}

template <class Real>
MatX<Real> upsample2_backward(const MatX<Real>& dy, int h) {
  const int n = h * 2;
  MatX<Real> dx = MatX<Real>::Zero(dy.rows(), Eigen::Index(h) * h * h);
  for (int c = 0; c < dy.rows(); ++c)
    for (int k = 0; k < n; ++k)
      for (int j = 0; j < n; ++j)
        for (int i = 0; i < n; ++i)
          dx(c, (Eigen::Index(k / 2) * h + j / 2) * h + i / 2) +=
              dy(c, (Eigen::Index(k) * n + j) * n + i);
  return dx;
}

template <class Real>
Real silu(Real z) {
  return z * sigmoid(z);
}

template <class Real>
Real silu_grad(Real z) {
  Real s = sigmoid(z);
  return s * (Real(1) + z * (Real(1) - s));
}

template <class Real>
MatX<Real> silu_mat(const MatX<Real>& z) {
  return z.unaryExpr([](Real v) { return silu(v); });
}

}  // namespace detail

/// Sinusoidal embedding of a (real-valued) diffusion step index.
template <class Real>
VecX<Real> time_embedding(double t, int dim) {
  VecX<Real> e(dim);
  int half = dim / 2;
  for (int i = 0; i < half; ++i) {
    double w = std::pow(10000.0, -double(i) / half);
    e(2 * i) = Real(std::sin(t * w));
    e(2 * i + 1) = Real(std::cos(t * w));
  }
  return e;
}

/// 3D convolutional encoder-decoder noise predictor eps(x_t, t) on
/// single-channel cubes, with additive per-channel time conditioning.
template <class Real>
class Denoiser {
 public:
  using Mat = MatX<Real>;
  using Vec = VecX<Real>;

  DenoiserConfig cfg;
  Dense<Real> stem, out, t_lin1, t_lin2;
  std::vector<Dense<Real>> enc_conv, enc_tproj;  // per level
  std::vector<Dense<Real>> down;                 // per level transition (L-1)
  std::vector<Dense<Real>> up_proj, dec_conv, dec_tproj;  // per level (L-1)

  explicit Denoiser(const DenoiserConfig& c = DenoiserConfig()) : cfg(c) {
    cfg.validate();
    const int L = cfg.levels();
    stem.shape(cfg.width(0), 27);
    out.shape(1, cfg.width(0) * 27);
    t_lin1.shape(cfg.temb_dim, cfg.temb_dim);
    t_lin2.shape(cfg.temb_dim, cfg.temb_dim);
    enc_conv.resize(L);
    enc_tproj.resize(L);
    for (int l = 0; l < L; ++l) {
      enc_conv[l].shape(cfg.width(l), cfg.width(l) * 27);
      enc_tproj[l].shape(cfg.width(l), cfg.temb_dim);
    }
    down.resize(L - 1);
    up_proj.resize(L - 1);
    dec_conv.resize(L - 1);
    dec_tproj.resize(L - 1);
    for (int l = 0; l + 1 < L; ++l) {
      down[l].shape(cfg.width(l + 1), cfg.width(l) * 27);
      up_proj[l].shape(cfg.width(l), cfg.width(l + 1));  // 1x1x1 conv
      dec_conv[l].shape(cfg.width(l), cfg.width(l) * 27);
      dec_tproj[l].shape(cfg.width(l), cfg.temb_dim);
    }
  }

  void init(std::uint64_t seed) {
    Rng rng = substream(seed, 0xDE401);
    for (auto* d : layers()) d->init(rng);
  }

  std::vector<Dense<Real>*> layers() {
    std::vector<Dense<Real>*> v{&stem, &out, &t_lin1, &t_lin2};
    for (auto& d : enc_conv) v.push_back(&d);
    for (auto& d : enc_tproj) v.push_back(&d);
    for (auto& d : down) v.push_back(&d);
    for (auto& d : up_proj) v.push_back(&d);
    for (auto& d : dec_conv) v.push_back(&d);
    for (auto& d : dec_tproj) v.push_back(&d);
    return v;
  }
  std::vector<const Dense<Real>*> layers() const {
    auto v = const_cast<Denoiser*>(this)->layers();
    return {v.begin(), v.end()};
  }

  std::vector<std::string> layer_names() const {
    std::vector<std::string> v{"stem", "out", "t_lin1", "t_lin2"};
    const int L = cfg.levels();
    for (int l = 0; l < L; ++l) v.push_back("enc_conv" + std::to_string(l));
    for (int l = 0; l < L; ++l) v.push_back("enc_tproj" + std::to_string(l));
    for (int l = 0; l + 1 < L; ++l) v.push_back("down" + std::to_string(l));
    for (int l = 0; l + 1 < L; ++l) v.push_back("up_proj" + std::to_string(l));
    for (int l = 0; l + 1 < L; ++l) v.push_back("dec_conv" + std::to_string(l));
    for (int l = 0; l + 1 < L; ++l) v.push_back("dec_tproj" + std::to_string(l));
    return v;
  }

  void zero_grad() {
    for (auto* d : layers()) d->zero_grad();
  }

  std::uint64_t weight_hash() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto* d : layers()) {
      h = fnv1a(d->W.data(), sizeof(Real) * d->W.size(), h);
      h = fnv1a(d->b.data(), sizeof(Real) * d->b.size(), h);
    }
    return h;
  }

  struct Cache {
    Vec temb0, temb, t_z1;
    Mat x_in, stem_col;
    std::vector<Mat> enc_in, enc_z, enc_col, skip;
    std::vector<Mat> down_in, down_z, down_col;
    std::vector<Mat> up_in, upproj_in, dec_in, dec_z, dec_col;
    Mat out_in, out_col;
  };

  /// x is 1 x res^3; t is the diffusion step index. Returns predicted noise.
  Mat forward(const Mat& x, double t, Cache* cc = nullptr) const {
    const int L = cfg.levels();
    Cache local;
    Cache& c = cc ? *cc : local;
    c.enc_in.assign(L, Mat());
    c.enc_z.assign(L, Mat());
    c.enc_col.assign(L, Mat());
    c.skip.assign(L, Mat());
    c.down_in.assign(L - 1, Mat());
    c.down_z.assign(L - 1, Mat());
    c.down_col.assign(L - 1, Mat());
    c.up_in.assign(L - 1, Mat());
    c.upproj_in.assign(L - 1, Mat());
    c.dec_in.assign(L - 1, Mat());
    c.dec_z.assign(L - 1, Mat());
    c.dec_col.assign(L - 1, Mat());

    c.temb0 = time_embedding<Real>(t, cfg.temb_dim);
    c.t_z1 = t_lin1.W * c.temb0 + t_lin1.b;
    c.temb = t_lin2.W * c.t_z1.unaryExpr([](Real v) { return detail::silu(v); }) + t_lin2.b;

    c.x_in = x;
    c.stem_col = detail::im2col3(x, cfg.res(0));
    Mat h = stem.W * c.stem_col;
    h.colwise() += stem.b;

    for (int l = 0; l < L; ++l) {
      c.enc_in[l] = h;
      c.enc_col[l] = detail::im2col3(h, cfg.res(l));
      Mat z = enc_conv[l].W * c.enc_col[l];
      z.colwise() += enc_conv[l].b + (enc_tproj[l].W * c.temb + enc_tproj[l].b);
      c.enc_z[l] = z;
      h = detail::silu_mat(z);
      c.skip[l] = h;
      if (l + 1 < L) {
        Mat p = detail::avgpool2(h, cfg.res(l));
        c.down_in[l] = p;
        c.down_col[l] = detail::im2col3(p, cfg.res(l + 1));
        Mat z2 = down[l].W * c.down_col[l];
        z2.colwise() += down[l].b;
        c.down_z[l] = z2;
        h = detail::silu_mat(z2);
      }
    }

    Mat y = h;
    for (int l = L - 2; l >= 0; --l) {
      c.up_in[l] = y;
      Mat u = detail::upsample2(y, cfg.res(l + 1));
      c.upproj_in[l] = u;
      y = up_proj[l].W * u;
      y.colwise() += up_proj[l].b;
      y += c.skip[l];
      c.dec_in[l] = y;
      c.dec_col[l] = detail::im2col3(y, cfg.res(l));
      Mat z = dec_conv[l].W * c.dec_col[l];
      z.colwise() += dec_conv[l].b + (dec_tproj[l].W * c.temb + dec_tproj[l].b);
      c.dec_z[l] = z;
      y = detail::silu_mat(z);
    }

    c.out_in = y;
    c.out_col = detail::im2col3(y, cfg.res(0));
    Mat eps = out.W * c.out_col;
    eps.colwise() += out.b;
    return eps;
  }

  /// Accumulates parameter gradients for dL/d(eps); returns dL/dx.
  Mat backward(const Cache& c, const Mat& deps) {
    const int L = cfg.levels();
    Vec dtemb = Vec::Zero(cfg.temb_dim);

    auto conv_backward = [&](Dense<Real>& conv, const Mat& col, int channels, int n,
                             const Mat& dz, bool need_dx) -> Mat {
      conv.dW += dz * col.transpose();
      conv.db += dz.rowwise().sum();
      if (!need_dx) return Mat();
      return detail::col2im3<Real>(conv.W.transpose() * dz, channels, n);
    };

    // Output conv.
    Mat dy = conv_backward(out, c.out_col, int(c.out_in.rows()), cfg.res(0), deps, true);

    // Decoder (reverse of the forward's l = L-2 .. 0 descent).
    std::vector<Mat> dskip(L);
    for (int l = 0; l + 1 < L; ++l) {
      Mat dz = dy.cwiseProduct(c.dec_z[l].unaryExpr([](Real v) { return detail::silu_grad(v); }));
      Vec dproj = dz.rowwise().sum();
      dec_tproj[l].dW += dproj * c.temb.transpose();
      dec_tproj[l].db += dproj;
      dtemb += dec_tproj[l].W.transpose() * dproj;
      Mat ddec_in =
          conv_backward(dec_conv[l], c.dec_col[l], int(c.dec_in[l].rows()), cfg.res(l), dz, true);
      dskip[l] = ddec_in;
      up_proj[l].dW += ddec_in * c.upproj_in[l].transpose();
      up_proj[l].db += ddec_in.rowwise().sum();
      Mat du = up_proj[l].W.transpose() * ddec_in;
      dy = detail::upsample2_backward(du, cfg.res(l + 1));
    }

    // Encoder, deepest level first; dy currently holds the bottleneck grad.
    Mat d_from_deeper = dy;
    Mat dx_out;
    for (int l = L - 1; l >= 0; --l) {
      Mat dh = (l + 1 < L) ? Mat(dskip[l] + d_from_deeper) : d_from_deeper;
      Mat dz = dh.cwiseProduct(c.enc_z[l].unaryExpr([](Real v) { return detail::silu_grad(v); }));
      Vec dproj = dz.rowwise().sum();
      enc_tproj[l].dW += dproj * c.temb.transpose();
      enc_tproj[l].db += dproj;
      dtemb += enc_tproj[l].W.transpose() * dproj;
      Mat denc_in =
          conv_backward(enc_conv[l], c.enc_col[l], int(c.enc_in[l].rows()), cfg.res(l), dz, true);
      if (l > 0) {
        Mat dz2 = denc_in;  // consumed below after mapping through down conv chain
        // x_l = silu(down_z[l-1]) was the input at this level.
        dz2 = dz2.cwiseProduct(
            c.down_z[l - 1].unaryExpr([](Real v) { return detail::silu_grad(v); }));
        Mat dp = conv_backward(down[l - 1], c.down_col[l - 1], int(c.down_in[l - 1].rows()),
                               cfg.res(l), dz2, true);
        d_from_deeper = detail::avgpool2_backward(dp, cfg.res(l - 1));
      } else {
        // Stem.
        stem.dW += denc_in * c.stem_col.transpose();
        stem.db += denc_in.rowwise().sum();
        dx_out = detail::col2im3<Real>(stem.W.transpose() * denc_in, 1, cfg.res(0));
      }
    }

    // Time embedding path.
    Mat t_h1 = c.t_z1.unaryExpr([](Real v) { return detail::silu(v); });
    t_lin2.dW += dtemb * t_h1.transpose();
    t_lin2.db += dtemb;
    Vec dh1 = t_lin2.W.transpose() * dtemb;
    Vec dz1 = dh1.cwiseProduct(c.t_z1.unaryExpr([](Real v) { return detail::silu_grad(v); }));
    t_lin1.db += dz1;
    t_lin1.dW += dz1 * c.temb0.transpose();
    return dx_out;
  }
};

}  // namespace nerfus

#pragma once

// Building blocks of the segmentation network. Every layer caches what its
// backward pass needs during a training forward, so one forward must be
// followed by at most one backward before the next forward of that layer.

#include "halos/tensor.hpp"

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace halos {

enum class ParamGroup { segmentation, classifier };

template <typename Scalar>
struct Parameter {
  using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

  std::string name;
  Array value;
  Array grad;
  ParamGroup group = ParamGroup::segmentation;

  Parameter() = default;
  Parameter(std::string n, Index size, ParamGroup g = ParamGroup::segmentation)
      : name(std::move(n)), value(Array::Zero(size)), grad(Array::Zero(size)), group(g) {}

  void zero_grad() { grad.setZero(); }
};

/// Non-trainable state saved with the weights (batch-norm running statistics).
template <typename Scalar>
struct Buffer {
  std::string name;
  Eigen::Array<Scalar, Eigen::Dynamic, 1> value;
};

/// Stable 64-bit FNV-1a, used to give every named parameter its own stream.
inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// He-normal initialisation for leaky-ReLU (negative slope 0.01). Values are
/// drawn in double so float and double models built from one seed agree.
template <typename Scalar>
void he_normal(Parameter<Scalar>& p, Index fan_in, std::uint64_t seed) {
  std::mt19937_64 rng(seed ^ fnv1a(p.name));
  const double gain = std::sqrt(2.0 / (1.0 + 0.01 * 0.01));
  std::normal_distribution<double> dist(0.0, gain / std::sqrt(static_cast<double>(fan_in)));
  for (Index i = 0; i < p.value.size(); ++i) p.value[i] = static_cast<Scalar>(dist(rng));
}

constexpr double kLeakySlope = 0.01;

template <typename Scalar>
class LeakyRelu {
 public:
  Tensor5<Scalar> forward(const Tensor5<Scalar>& x, bool cache) {
    if (cache) input_ = x;
    Tensor5<Scalar> y(x.shape());
    y.array() = (x.array() > Scalar(0)).select(x.array(), x.array() * Scalar(kLeakySlope));
    return y;
  }
  Tensor5<Scalar> backward(const Tensor5<Scalar>& gy) {
    Tensor5<Scalar> gx(gy.shape());
    gx.array() = (input_.array() > Scalar(0)).select(gy.array(), gy.array() * Scalar(kLeakySlope));
    return gx;
  }

 private:
  Tensor5<Scalar> input_;
};

/// 3D convolution with cubic kernel (1 or 3), stride 1 or 2, zero padding
/// (kernel - 1) / 2. Implemented as im2col followed by a GEMM.
template <typename Scalar>
class Conv3d {
 public:
  Conv3d() = default;
  Conv3d(Index in_channels, Index out_channels, int kernel, int stride, const std::string& name,
         ParamGroup group = ParamGroup::segmentation)
      : weight(name + ".weight", out_channels * in_channels * kernel * kernel * kernel, group),
        bias(name + ".bias", out_channels, group),
        in_(in_channels),
        out_(out_channels),
        kernel_(kernel),
        stride_(stride) {}

  void init(std::uint64_t seed) { he_normal(weight, in_ * kernel_ * kernel_ * kernel_, seed); }

  GridShape output_grid(const GridShape& g) const {
    const int pad = (kernel_ - 1) / 2;
    auto out = [&](Index n) { return (n + 2 * pad - kernel_) / stride_ + 1; };
    return {out(g.depth), out(g.height), out(g.width)};
  }

  Tensor5<Scalar> forward(const Tensor5<Scalar>& x, bool cache) {
    if (x.channels() != in_)
      throw std::invalid_argument(weight.name + ": expected " + std::to_string(in_) +
                                  " input channels, got " + std::to_string(x.channels()));
    const GridShape og = output_grid(x.grid());
    Tensor5<Scalar> y(x.batch(), out_, og);
    const auto w = weight_matrix();
    RowMatrix<Scalar> cols;
    for (Index n = 0; n < x.batch(); ++n) {
      if (kernel_ == 1 && stride_ == 1) {
        y.item(n).noalias() = w * x.item(n);
      } else {
        im2col(x, n, og, cols);
        y.item(n).noalias() = w * cols;
      }
      y.item(n).colwise() += bias.value.matrix();
    }
    if (cache) input_ = x;
    return y;
  }

  Tensor5<Scalar> backward(const Tensor5<Scalar>& gy) {
    const auto w = weight_matrix();
    Eigen::Map<RowMatrix<Scalar>> gw(weight.grad.data(), out_, weight.grad.size() / out_);
    Tensor5<Scalar> gx(input_.shape());
    RowMatrix<Scalar> cols;
    RowMatrix<Scalar> gcols;
    for (Index n = 0; n < gy.batch(); ++n) {
      const auto g = gy.item(n);
      bias.grad.matrix() += g.rowwise().sum();
      if (kernel_ == 1 && stride_ == 1) {
        gw.noalias() += g * input_.item(n).transpose();
        gx.item(n).noalias() = w.transpose() * g;
      } else {
        im2col(input_, n, gy.grid(), cols);
        gw.noalias() += g * cols.transpose();
        gcols.noalias() = w.transpose() * g;
        col2im(gcols, n, gy.grid(), gx);
      }
    }
    return gx;
  }

  Index in_channels() const { return in_; }
  Index out_channels() const { return out_; }

  Parameter<Scalar> weight;
  Parameter<Scalar> bias;

 private:
  Eigen::Map<const RowMatrix<Scalar>> weight_matrix() const {
    return {weight.value.data(), out_, weight.value.size() / out_};
  }

  void im2col(const Tensor5<Scalar>& x, Index n, const GridShape& og, RowMatrix<Scalar>& cols) const {
    const GridShape ig = x.grid();
    const int k = kernel_;
    const int pad = (k - 1) / 2;
    const Index ov = og.voxels();
    cols.resize(in_ * k * k * k, ov);
    Index row = 0;
    for (Index c = 0; c < in_; ++c) {
      const Scalar* src = x.data() + (n * in_ + c) * ig.voxels();
      for (int kz = 0; kz < k; ++kz)
        for (int ky = 0; ky < k; ++ky)
          for (int kx = 0; kx < k; ++kx, ++row) {
            Scalar* dst = cols.data() + row * ov;
            for (Index oz = 0; oz < og.depth; ++oz) {
              const Index iz = oz * stride_ + kz - pad;
              for (Index oy = 0; oy < og.height; ++oy) {
                const Index iy = oy * stride_ + ky - pad;
                Scalar* d = dst + (oz * og.height + oy) * og.width;
                if (iz < 0 || iz >= ig.depth || iy < 0 || iy >= ig.height) {
                  std::fill(d, d + og.width, Scalar(0));
                  continue;
                }
                const Scalar* s = src + (iz * ig.height + iy) * ig.width;
                for (Index ox = 0; ox < og.width; ++ox) {
                  const Index ix = ox * stride_ + kx - pad;
                  d[ox] = (ix >= 0 && ix < ig.width) ? s[ix] : Scalar(0);
                }
              }
            }
          }
    }
  }

  void col2im(const RowMatrix<Scalar>& cols, Index n, const GridShape& og, Tensor5<Scalar>& gx) const {
    const GridShape ig = gx.grid();
    const int k = kernel_;
    const int pad = (k - 1) / 2;
    const Index ov = og.voxels();
    Index row = 0;
    for (Index c = 0; c < in_; ++c) {
      Scalar* dst = gx.data() + (n * in_ + c) * ig.voxels();
      for (int kz = 0; kz < k; ++kz)
        for (int ky = 0; ky < k; ++ky)
          for (int kx = 0; kx < k; ++kx, ++row) {
            const Scalar* src = cols.data() + row * ov;
            for (Index oz = 0; oz < og.depth; ++oz) {
              const Index iz = oz * stride_ + kz - pad;
              if (iz < 0 || iz >= ig.depth) continue;
              for (Index oy = 0; oy < og.height; ++oy) {
                const Index iy = oy * stride_ + ky - pad;
                if (iy < 0 || iy >= ig.height) continue;
                const Scalar* s = src + (oz * og.height + oy) * og.width;
                Scalar* d = dst + (iz * ig.height + iy) * ig.width;
                for (Index ox = 0; ox < og.width; ++ox) {
                  const Index ix = ox * stride_ + kx - pad;
                  if (ix >= 0 && ix < ig.width) d[ix] += s[ox];
                }
              }
            }
          }
    }
  }

  Index in_ = 0;
  Index out_ = 0;
  int kernel_ = 3;
  int stride_ = 1;
  Tensor5<Scalar> input_;
};

/// Transposed convolution with kernel 2 and stride 2 (exact 2x upsampling).
/// Weight rows are ordered (kernel offset, output channel).
template <typename Scalar>
class ConvTranspose3d {
 public:
  ConvTranspose3d() = default;
  ConvTranspose3d(Index in_channels, Index out_channels, const std::string& name)
      : weight(name + ".weight", 8 * out_channels * in_channels),
        bias(name + ".bias", out_channels),
        in_(in_channels),
        out_(out_channels) {}

  void init(std::uint64_t seed) { he_normal(weight, in_, seed); }

  Tensor5<Scalar> forward(const Tensor5<Scalar>& x, bool cache) {
    if (x.channels() != in_)
      throw std::invalid_argument(weight.name + ": channel mismatch");
    const GridShape ig = x.grid();
    const GridShape og{ig.depth * 2, ig.height * 2, ig.width * 2};
    Tensor5<Scalar> y(x.batch(), out_, og);
    const Eigen::Map<const RowMatrix<Scalar>> w(weight.value.data(), 8 * out_, in_);
    RowMatrix<Scalar> y8;
    for (Index n = 0; n < x.batch(); ++n) {
      y8.noalias() = w * x.item(n);
      scatter(y8, n, ig, y);
      y.item(n).colwise() += bias.value.matrix();
    }
    if (cache) input_ = x;
    return y;
  }

  Tensor5<Scalar> backward(const Tensor5<Scalar>& gy) {
    const GridShape ig = input_.grid();
    const Eigen::Map<const RowMatrix<Scalar>> w(weight.value.data(), 8 * out_, in_);
    Eigen::Map<RowMatrix<Scalar>> gw(weight.grad.data(), 8 * out_, in_);
    Tensor5<Scalar> gx(input_.shape());
    RowMatrix<Scalar> g8(8 * out_, ig.voxels());
    for (Index n = 0; n < gy.batch(); ++n) {
      bias.grad.matrix() += gy.item(n).rowwise().sum();
      gather(gy, n, ig, g8);
      gw.noalias() += g8 * input_.item(n).transpose();
      gx.item(n).noalias() = w.transpose() * g8;
    }
    return gx;
  }

  Parameter<Scalar> weight;
  Parameter<Scalar> bias;

 private:
  void scatter(const RowMatrix<Scalar>& y8, Index n, const GridShape& ig, Tensor5<Scalar>& y) const {
    for (int k = 0; k < 8; ++k) {
      const int a = k >> 2, b = (k >> 1) & 1, c = k & 1;
      for (Index co = 0; co < out_; ++co) {
        const Scalar* src = y8.data() + (k * out_ + co) * ig.voxels();
        for (Index z = 0; z < ig.depth; ++z)
          for (Index yy = 0; yy < ig.height; ++yy)
            for (Index x = 0; x < ig.width; ++x)
              y(n, co, 2 * z + a, 2 * yy + b, 2 * x + c) = src[(z * ig.height + yy) * ig.width + x];
      }
    }
  }
  void gather(const Tensor5<Scalar>& gy, Index n, const GridShape& ig, RowMatrix<Scalar>& g8) const {
    for (int k = 0; k < 8; ++k) {
      const int a = k >> 2, b = (k >> 1) & 1, c = k & 1;
      for (Index co = 0; co < out_; ++co) {
        Scalar* dst = g8.data() + (k * out_ + co) * ig.voxels();
        for (Index z = 0; z < ig.depth; ++z)
          for (Index yy = 0; yy < ig.height; ++yy)
            for (Index x = 0; x < ig.width; ++x)
              dst[(z * ig.height + yy) * ig.width + x] = gy(n, co, 2 * z + a, 2 * yy + b, 2 * x + c);
      }
    }
  }

  Index in_ = 0;
  Index out_ = 0;
  Tensor5<Scalar> input_;
};

enum class NormType { instance, batch };

/// Instance or batch normalisation with a learned per-channel affine.
template <typename Scalar>
class Norm3d {
 public:
  Norm3d() = default;
  Norm3d(Index channels, NormType type, const std::string& name,
         ParamGroup group = ParamGroup::segmentation)
      : weight(name + ".weight", channels, group),
        bias(name + ".bias", channels, group),
        type_(type) {
    weight.value.setOnes();
    if (type_ == NormType::batch) {
      running_mean = {name + ".running_mean", Eigen::Array<Scalar, Eigen::Dynamic, 1>::Zero(channels)};
      running_var = {name + ".running_var", Eigen::Array<Scalar, Eigen::Dynamic, 1>::Ones(channels)};
    }
  }

  NormType type() const { return type_; }

  Tensor5<Scalar> forward(const Tensor5<Scalar>& x, bool training) {
    const Index C = x.channels();
    const Index V = x.grid().voxels();
    Tensor5<Scalar> y(x.shape());
    xhat_ = Tensor5<Scalar>(x.shape());
    if (type_ == NormType::instance) {
      inv_std_.resize(x.batch() * C);
      for (Index n = 0; n < x.batch(); ++n)
        for (Index c = 0; c < C; ++c) {
          const auto xc = x.channel(n, c);
          const Scalar mean = xc.mean();
          const Scalar var = (xc - mean).square().mean();
          const Scalar inv = Scalar(1) / std::sqrt(var + Scalar(kEps));
          inv_std_[n * C + c] = inv;
          xhat_.channel(n, c) = (xc - mean) * inv;
          y.channel(n, c) = weight.value[c] * xhat_.channel(n, c) + bias.value[c];
        }
      return y;
    }
    inv_std_.resize(C);
    const Scalar count = static_cast<Scalar>(x.batch() * V);
    for (Index c = 0; c < C; ++c) {
      Scalar mean;
      Scalar var;
      if (training) {
        Scalar sum = 0;
        for (Index n = 0; n < x.batch(); ++n) sum += x.channel(n, c).sum();
        mean = sum / count;
        Scalar sq = 0;
        for (Index n = 0; n < x.batch(); ++n) sq += (x.channel(n, c) - mean).square().sum();
        var = sq / count;
        const Scalar unbiased = count > 1 ? var * count / (count - 1) : var;
        running_mean.value[c] = Scalar(1 - kMomentum) * running_mean.value[c] + Scalar(kMomentum) * mean;
        running_var.value[c] = Scalar(1 - kMomentum) * running_var.value[c] + Scalar(kMomentum) * unbiased;
      } else {
        mean = running_mean.value[c];
        var = running_var.value[c];
      }
      const Scalar inv = Scalar(1) / std::sqrt(var + Scalar(kEps));
      inv_std_[c] = inv;
      for (Index n = 0; n < x.batch(); ++n) {
        xhat_.channel(n, c) = (x.channel(n, c) - mean) * inv;
        y.channel(n, c) = weight.value[c] * xhat_.channel(n, c) + bias.value[c];
      }
    }
    return y;
  }

  /// Backward through the training-mode statistics.
  Tensor5<Scalar> backward(const Tensor5<Scalar>& gy) {
    const Index C = gy.channels();
    const Index V = gy.grid().voxels();
    Tensor5<Scalar> gx(gy.shape());
    if (type_ == NormType::instance) {
      for (Index n = 0; n < gy.batch(); ++n)
        for (Index c = 0; c < C; ++c) {
          const auto g = gy.channel(n, c);
          const auto xh = xhat_.channel(n, c);
          weight.grad[c] += (g * xh).sum();
          bias.grad[c] += g.sum();
          const Eigen::Array<Scalar, Eigen::Dynamic, 1> dxh = g * weight.value[c];
          const Scalar m = static_cast<Scalar>(V);
          gx.channel(n, c) =
              (inv_std_[n * C + c] / m) * (m * dxh - dxh.sum() - xh * (dxh * xh).sum());
        }
      return gx;
    }
    const Scalar m = static_cast<Scalar>(gy.batch() * V);
    for (Index c = 0; c < C; ++c) {
      Scalar sum_dxh = 0;
      Scalar sum_dxh_xh = 0;
      for (Index n = 0; n < gy.batch(); ++n) {
        const auto g = gy.channel(n, c);
        const auto xh = xhat_.channel(n, c);
        weight.grad[c] += (g * xh).sum();
        bias.grad[c] += g.sum();
        sum_dxh += g.sum() * weight.value[c];
        sum_dxh_xh += (g * xh).sum() * weight.value[c];
      }
      for (Index n = 0; n < gy.batch(); ++n) {
        const auto xh = xhat_.channel(n, c);
        gx.channel(n, c) =
            (inv_std_[c] / m) * (m * weight.value[c] * gy.channel(n, c) - sum_dxh - xh * sum_dxh_xh);
      }
    }
    return gx;
  }

  Parameter<Scalar> weight;
  Parameter<Scalar> bias;
  Buffer<Scalar> running_mean;
  Buffer<Scalar> running_var;

 private:
  static constexpr double kEps = 1e-5;
  static constexpr double kMomentum = 0.1;
  NormType type_ = NormType::instance;
  Tensor5<Scalar> xhat_;
  Eigen::Array<Scalar, Eigen::Dynamic, 1> inv_std_;
};

/// Fully connected layer on row-vector batches (batch × features).
template <typename Scalar>
class Linear {
 public:
  using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

  Linear() = default;
  Linear(Index in, Index out, const std::string& name, ParamGroup group = ParamGroup::segmentation)
      : weight(name + ".weight", in * out, group), bias(name + ".bias", out, group), in_(in), out_(out) {}

  void init(std::uint64_t seed) { he_normal(weight, in_, seed); }

  Matrix forward(const Matrix& x, bool cache) {
    if (x.cols() != in_) throw std::invalid_argument(weight.name + ": feature count mismatch");
    if (cache) input_ = x;
    Matrix y = x * w().transpose();
    y.rowwise() += bias.value.matrix().transpose();
    return y;
  }

  Matrix backward(const Matrix& gy) {
    Eigen::Map<RowMatrix<Scalar>> gw(weight.grad.data(), out_, in_);
    gw.noalias() += gy.transpose() * input_;
    bias.grad.matrix() += gy.colwise().sum().transpose();
    return gy * w();
  }

  Index in_features() const { return in_; }
  Index out_features() const { return out_; }

  Parameter<Scalar> weight;
  Parameter<Scalar> bias;

 private:
  Eigen::Map<const RowMatrix<Scalar>> w() const { return {weight.value.data(), out_, in_}; }

  Index in_ = 0;
  Index out_ = 0;
  Matrix input_;
};

/// Mean over all voxels of each channel: batch × channels.
template <typename Scalar>
Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> global_average_pool(const Tensor5<Scalar>& x) {
  Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> out(x.batch(), x.channels());
  for (Index n = 0; n < x.batch(); ++n) out.row(n) = x.item(n).rowwise().mean().transpose();
  return out;
}

template <typename Scalar>
Tensor5<Scalar> global_average_pool_backward(const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>& g,
                                             const Shape5& input_shape) {
  Tensor5<Scalar> gx(input_shape);
  const Scalar inv = Scalar(1) / static_cast<Scalar>(input_shape.grid.voxels());
  for (Index n = 0; n < input_shape.batch; ++n)
    for (Index c = 0; c < input_shape.channels; ++c) gx.channel(n, c).setConstant(g(n, c) * inv);
  return gx;
}

/// Two (conv 3^3 -> norm -> leaky ReLU) units; the first conv may downsample.
template <typename Scalar>
class ConvBlock {
 public:
  ConvBlock() = default;
  ConvBlock(Index in, Index out, int first_stride, NormType norm, const std::string& name,
            ParamGroup group = ParamGroup::segmentation)
      : conv0_(in, out, 3, first_stride, name + ".conv0", group),
        norm0_(out, norm, name + ".norm0", group),
        conv1_(out, out, 3, 1, name + ".conv1", group),
        norm1_(out, norm, name + ".norm1", group) {}

  void init(std::uint64_t seed) {
    conv0_.init(seed);
    conv1_.init(seed);
  }

  Tensor5<Scalar> forward(const Tensor5<Scalar>& x, bool training) {
    auto h = act0_.forward(norm0_.forward(conv0_.forward(x, training), training), training);
    return act1_.forward(norm1_.forward(conv1_.forward(h, training), training), training);
  }

  Tensor5<Scalar> backward(const Tensor5<Scalar>& gy) {
    auto g = conv1_.backward(norm1_.backward(act1_.backward(gy)));
    return conv0_.backward(norm0_.backward(act0_.backward(g)));
  }

  GridShape output_grid(const GridShape& g) const { return conv0_.output_grid(g); }
  Index out_channels() const { return conv0_.out_channels(); }

  template <typename F>
  void visit_parameters(F&& f) {
    f(conv0_.weight);
    f(conv0_.bias);
    f(norm0_.weight);
    f(norm0_.bias);
    f(conv1_.weight);
    f(conv1_.bias);
    f(norm1_.weight);
    f(norm1_.bias);
  }
  template <typename F>
  void visit_buffers(F&& f) {
    for (auto* n : {&norm0_, &norm1_}) {
      if (n->type() == NormType::batch) {
        f(n->running_mean);
        f(n->running_var);
      }
    }
  }

 private:
  Conv3d<Scalar> conv0_;
  Norm3d<Scalar> norm0_;
  LeakyRelu<Scalar> act0_;
  Conv3d<Scalar> conv1_;
  Norm3d<Scalar> norm1_;
  LeakyRelu<Scalar> act1_;
};

}  // namespace halos

#pragma once

#include <Eigen/Dense>

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace halos {

using Index = Eigen::Index;

/// Spatial extent of a 3D grid, stored as depth × height × width with width
/// varying fastest in memory.
struct GridShape {
  Index depth = 0;
  Index height = 0;
  Index width = 0;

  Index voxels() const { return depth * height * width; }
  bool operator==(const GridShape&) const = default;

  GridShape halved() const { return {depth / 2, height / 2, width / 2}; }
  std::string str() const {
    return std::to_string(depth) + "x" + std::to_string(height) + "x" + std::to_string(width);
  }
};

/// Shape of a batched feature tensor: batch × channels × D × H × W.
struct Shape5 {
  Index batch = 0;
  Index channels = 0;
  GridShape grid;

  Index item_size() const { return channels * grid.voxels(); }
  Index size() const { return batch * item_size(); }
  bool operator==(const Shape5&) const = default;
  std::string str() const {
    return std::to_string(batch) + "x" + std::to_string(channels) + "x" + grid.str();
  }
};

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Dense batched 5D tensor. Each batch item is a contiguous channels × voxels
/// block, so `item(b)` maps it as a row-major matrix for GEMM-based layers.
template <typename Scalar>
class Tensor5 {
 public:
  using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;
  using ItemMap = Eigen::Map<RowMatrix<Scalar>>;
  using ConstItemMap = Eigen::Map<const RowMatrix<Scalar>>;
  using ChannelMap = Eigen::Map<Eigen::Array<Scalar, Eigen::Dynamic, 1>>;
  using ConstChannelMap = Eigen::Map<const Eigen::Array<Scalar, Eigen::Dynamic, 1>>;

  Tensor5() = default;
  explicit Tensor5(const Shape5& shape, Scalar fill = Scalar(0))
      : shape_(shape), data_(Array::Constant(shape.size(), fill)) {}
  Tensor5(Index batch, Index channels, const GridShape& grid, Scalar fill = Scalar(0))
      : Tensor5(Shape5{batch, channels, grid}, fill) {}

  const Shape5& shape() const { return shape_; }
  Index batch() const { return shape_.batch; }
  Index channels() const { return shape_.channels; }
  const GridShape& grid() const { return shape_.grid; }
  Index size() const { return shape_.size(); }
  bool empty() const { return shape_.size() == 0; }

  Array& array() { return data_; }
  const Array& array() const { return data_; }
  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }

  ItemMap item(Index b) {
    return ItemMap(data_.data() + b * shape_.item_size(), shape_.channels, shape_.grid.voxels());
  }
  ConstItemMap item(Index b) const {
    return ConstItemMap(data_.data() + b * shape_.item_size(), shape_.channels,
                        shape_.grid.voxels());
  }
  ChannelMap channel(Index b, Index c) {
    return ChannelMap(data_.data() + offset(b, c), shape_.grid.voxels());
  }
  ConstChannelMap channel(Index b, Index c) const {
    return ConstChannelMap(data_.data() + offset(b, c), shape_.grid.voxels());
  }

  Scalar& operator()(Index b, Index c, Index z, Index y, Index x) {
    return data_[offset(b, c) + (z * shape_.grid.height + y) * shape_.grid.width + x];
  }
  Scalar operator()(Index b, Index c, Index z, Index y, Index x) const {
    return data_[offset(b, c) + (z * shape_.grid.height + y) * shape_.grid.width + x];
  }

  void set_zero() { data_.setZero(); }

  template <typename Other>
  Tensor5<Other> cast() const {
    Tensor5<Other> out(shape_);
    out.array() = data_.template cast<Other>();
    return out;
  }

 private:
  Index offset(Index b, Index c) const { return (b * shape_.channels + c) * shape_.grid.voxels(); }

  Shape5 shape_;
  Array data_;
};

inline void require_same_shape(const Shape5& a, const Shape5& b, const char* what) {
  if (!(a == b)) {
    throw std::invalid_argument(std::string(what) + ": shape mismatch " + a.str() + " vs " +
                                b.str());
  }
}

/// Concatenate along channels; both inputs share batch and grid.
template <typename Scalar>
Tensor5<Scalar> concat_channels(const Tensor5<Scalar>& a, const Tensor5<Scalar>& b) {
  if (a.batch() != b.batch() || !(a.grid() == b.grid())) {
    throw std::invalid_argument("concat_channels: incompatible shapes " + a.shape().str() +
                                " and " + b.shape().str());
  }
  Tensor5<Scalar> out(a.batch(), a.channels() + b.channels(), a.grid());
  for (Index n = 0; n < a.batch(); ++n) {
    out.item(n).topRows(a.channels()) = a.item(n);
    out.item(n).bottomRows(b.channels()) = b.item(n);
  }
  return out;
}

/// Inverse of concat_channels for gradients: returns the first `split` channels
/// and the remainder.
template <typename Scalar>
std::pair<Tensor5<Scalar>, Tensor5<Scalar>> split_channels(const Tensor5<Scalar>& t,
                                                           Index split) {
  Tensor5<Scalar> a(t.batch(), split, t.grid());
  Tensor5<Scalar> b(t.batch(), t.channels() - split, t.grid());
  for (Index n = 0; n < t.batch(); ++n) {
    a.item(n) = t.item(n).topRows(split);
    b.item(n) = t.item(n).bottomRows(t.channels() - split);
  }
  return {std::move(a), std::move(b)};
}

/// Channel-wise softmax at every voxel.
template <typename Scalar>
Tensor5<Scalar> softmax_channels(const Tensor5<Scalar>& logits) {
  Tensor5<Scalar> out(logits.shape());
  for (Index n = 0; n < logits.batch(); ++n) {
    auto in = logits.item(n);
    auto o = out.item(n);
    const Eigen::Matrix<Scalar, 1, Eigen::Dynamic> mx = in.colwise().maxCoeff();
    o = (in.rowwise() - mx).array().exp().matrix();
    const Eigen::Matrix<Scalar, 1, Eigen::Dynamic> sum = o.colwise().sum();
    o = (o.array().rowwise() / sum.array()).matrix();
  }
  return out;
}

/// Vector-Jacobian product of softmax_channels: given probabilities p and dL/dp,
/// returns dL/dlogits = p ⊙ (g − Σ_c p_c g_c).
template <typename Scalar>
Tensor5<Scalar> softmax_channels_backward(const Tensor5<Scalar>& probs,
                                          const Tensor5<Scalar>& grad_probs) {
  require_same_shape(probs.shape(), grad_probs.shape(), "softmax_channels_backward");
  Tensor5<Scalar> out(probs.shape());
  for (Index n = 0; n < probs.batch(); ++n) {
    auto p = probs.item(n).array();
    auto g = grad_probs.item(n).array();
    const Eigen::Array<Scalar, 1, Eigen::Dynamic> dot = (p * g).colwise().sum();
    out.item(n) = (p * (g.rowwise() - dot)).matrix();
  }
  return out;
}

/// Nearest-neighbour downsampling by an integer factor along every axis.
template <typename Scalar>
Tensor5<Scalar> downsample_nearest(const Tensor5<Scalar>& t, Index factor) {
  if (factor == 1) return t;
  const GridShape g = t.grid();
  const GridShape o{g.depth / factor, g.height / factor, g.width / factor};
  Tensor5<Scalar> out(t.batch(), t.channels(), o);
  for (Index n = 0; n < t.batch(); ++n)
    for (Index c = 0; c < t.channels(); ++c)
      for (Index z = 0; z < o.depth; ++z)
        for (Index y = 0; y < o.height; ++y)
          for (Index x = 0; x < o.width; ++x)
            out(n, c, z, y, x) = t(n, c, z * factor, y * factor, x * factor);
  return out;
}

}  // namespace halos

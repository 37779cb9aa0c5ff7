#pragma once

// Training objectives. Every loss returns its value and, when a gradient
// pointer is supplied, writes the gradient with respect to its first argument.

#include "halos/core_data.hpp"
#include "halos/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

namespace halos {

struct DiceConfig {
  double epsilon = 1.0;
  bool batch_reduction = true;
  bool include_background = false;

  void validate() const {
    if (!(epsilon >= 0.0)) throw std::invalid_argument("dice: epsilon must be >= 0");
  }
};

/// Soft Dice loss averaged over the included classes. Sums run over voxels and,
/// with batch reduction, over the batch as well; epsilon is added to both
/// numerator and denominator so a class empty in prediction and target scores 0.
template <typename Scalar>
Scalar dice_loss(const Tensor5<Scalar>& probs, const Tensor5<Scalar>& target, const DiceConfig& cfg,
                 Tensor5<Scalar>* grad = nullptr) {
  cfg.validate();
  require_same_shape(probs.shape(), target.shape(), "dice_loss");
  if ((probs.array() < Scalar(0)).any()) throw std::invalid_argument("dice_loss: negative probabilities");
  const Index B = probs.batch();
  const Index C = probs.channels();
  const Index first = cfg.include_background ? 0 : 1;
  if (first >= C) throw std::invalid_argument("dice_loss: no classes to score");
  const Scalar eps = static_cast<Scalar>(cfg.epsilon);
  const Index groups = cfg.batch_reduction ? 1 : B;
  const Scalar terms = static_cast<Scalar>((C - first) * groups);

  if (grad) *grad = Tensor5<Scalar>(probs.shape());
  Scalar total = 0;
  for (Index c = first; c < C; ++c) {
    for (Index gi = 0; gi < groups; ++gi) {
      const Index n0 = cfg.batch_reduction ? 0 : gi;
      const Index n1 = cfg.batch_reduction ? B : gi + 1;
      Scalar inter = 0, psum = 0, tsum = 0;
      for (Index n = n0; n < n1; ++n) {
        const auto p = probs.channel(n, c);
        const auto t = target.channel(n, c);
        inter += (p * t).sum();
        psum += p.sum();
        tsum += t.sum();
      }
      const Scalar num = Scalar(2) * inter + eps;
      const Scalar den = psum + tsum + eps;
      // 0/0 (epsilon == 0, class empty everywhere) counts as perfect agreement.
      if (den == Scalar(0)) continue;
      total += Scalar(1) - num / den;
      if (grad) {
        for (Index n = n0; n < n1; ++n) {
          const auto t = target.channel(n, c);
          grad->channel(n, c) = -(Scalar(2) * t * den - num) / (den * den) / terms;
        }
      }
    }
  }
  return total / terms;
}

/// Per-image class weights from inverse voxel frequency: classes absent from
/// the image get 0, present ones are normalised to mean 1 and clipped to [0.1, 10].
template <typename Scalar>
Eigen::Array<Scalar, Eigen::Dynamic, 1> dynamic_class_weights(const Tensor5<Scalar>& target, Index n) {
  const Index C = target.channels();
  Eigen::Array<Scalar, Eigen::Dynamic, 1> w = Eigen::Array<Scalar, Eigen::Dynamic, 1>::Zero(C);
  const Scalar voxels = static_cast<Scalar>(target.grid().voxels());
  Index present = 0;
  for (Index c = 0; c < C; ++c) present += target.channel(n, c).sum() > Scalar(0);
  if (present == 0) return w;
  for (Index c = 0; c < C; ++c) {
    const Scalar count = target.channel(n, c).sum();
    if (count > Scalar(0)) w[c] = voxels / (static_cast<Scalar>(present) * count);
  }
  const Scalar mean = w.sum() / static_cast<Scalar>(present);
  for (Index c = 0; c < C; ++c)
    if (w[c] > Scalar(0)) w[c] = std::clamp(w[c] / mean, Scalar(0.1), Scalar(10));
  return w;
}

/// Voxel-averaged cross-entropy of softmax(logits) against (one-hot) targets.
template <typename Scalar>
Scalar cross_entropy_loss(const Tensor5<Scalar>& logits, const Tensor5<Scalar>& target,
                          bool dynamic_weights, Tensor5<Scalar>* grad = nullptr) {
  require_same_shape(logits.shape(), target.shape(), "cross_entropy_loss");
  const Index B = logits.batch();
  const Index C = logits.channels();
  const Index V = logits.grid().voxels();
  const Scalar inv_n = Scalar(1) / static_cast<Scalar>(B * V);
  if (grad) *grad = Tensor5<Scalar>(logits.shape());
  Scalar total = 0;
  for (Index n = 0; n < B; ++n) {
    const Eigen::Array<Scalar, Eigen::Dynamic, 1> w =
        dynamic_weights ? dynamic_class_weights(target, n)
                        : Eigen::Array<Scalar, Eigen::Dynamic, 1>::Ones(C);
    const auto z = logits.item(n).array();
    const auto t = target.item(n).array();
    const Eigen::Array<Scalar, 1, Eigen::Dynamic> mx = z.colwise().maxCoeff();
    const Eigen::Array<Scalar, Eigen::Dynamic, Eigen::Dynamic> shifted = z.rowwise() - mx;
    const Eigen::Array<Scalar, 1, Eigen::Dynamic> lse = shifted.exp().colwise().sum().log();
    const Eigen::Array<Scalar, Eigen::Dynamic, Eigen::Dynamic> logp = shifted.rowwise() - lse;
    const Eigen::Array<Scalar, Eigen::Dynamic, Eigen::Dynamic> wt = t.colwise() * w;
    total -= (wt * logp).sum();
    if (grad) {
      const Eigen::Array<Scalar, 1, Eigen::Dynamic> wsum = wt.colwise().sum();
      grad->item(n) = (inv_n * (logp.exp().rowwise() * wsum - wt)).matrix();
    }
  }
  return total * inv_n;
}

/// Deep-supervision weights 2^-k normalised to sum 1 (k = 0 is full resolution).
inline std::vector<double> deep_supervision_weights(int scales) {
  std::vector<double> w(static_cast<std::size_t>(scales));
  double sum = 0.0;
  for (int k = 0; k < scales; ++k) sum += w[static_cast<std::size_t>(k)] = std::ldexp(1.0, -k);
  for (auto& v : w) v /= sum;
  return w;
}

struct SegLossConfig {
  DiceConfig dice;
  bool dynamic_ce_weights = true;
};

/// Sum over supervised scales of w_k * (CE + Dice). Targets for scale k are the
/// full-resolution one-hot maps downsampled by 2^k with nearest neighbour.
template <typename Scalar>
Scalar seg_loss(const std::vector<Tensor5<Scalar>>& scale_logits, const Tensor5<Scalar>& target,
                const SegLossConfig& cfg, std::vector<Tensor5<Scalar>>* grads = nullptr) {
  if (scale_logits.empty()) throw std::invalid_argument("seg_loss: no outputs");
  const auto weights = deep_supervision_weights(static_cast<int>(scale_logits.size()));
  if (grads) grads->assign(scale_logits.size(), Tensor5<Scalar>());
  Scalar total = 0;
  for (std::size_t k = 0; k < scale_logits.size(); ++k) {
    const Tensor5<Scalar> t = downsample_nearest(target, Index(1) << k);
    const Tensor5<Scalar>& z = scale_logits[k];
    require_same_shape(z.shape(), t.shape(), "seg_loss");
    const Scalar wk = static_cast<Scalar>(weights[k]);
    Tensor5<Scalar> gce, gdice;
    const Tensor5<Scalar> probs = softmax_channels(z);
    const Scalar ce = cross_entropy_loss(z, t, cfg.dynamic_ce_weights, grads ? &gce : nullptr);
    const Scalar dl = dice_loss(probs, t, cfg.dice, grads ? &gdice : nullptr);
    total += wk * (ce + dl);
    if (grads) {
      Tensor5<Scalar> g = softmax_channels_backward(probs, gdice);
      g.array() = wk * (g.array() + gce.array());
      (*grads)[k] = std::move(g);
    }
  }
  return total;
}

/// Per-organ binary CE weights: present = 1, absent = (#present / #absent).
struct ClfClassWeights {
  std::vector<double> present;
  std::vector<double> absent;
};

ClfClassWeights class_ratio_weights(const std::vector<ExistenceVector>& training_labels);

/// Weighted binary cross-entropy on classifier logits (batch x organs), averaged
/// over organs and batch.
template <typename Scalar>
Scalar clf_loss(const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>& logits,
                const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>& targets,
                const ClfClassWeights& weights,
                Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>* grad = nullptr) {
  if (logits.rows() != targets.rows() || logits.cols() != targets.cols())
    throw std::invalid_argument("clf_loss: logits and targets differ in shape");
  if (static_cast<Index>(weights.present.size()) != logits.cols() ||
      static_cast<Index>(weights.absent.size()) != logits.cols())
    throw std::invalid_argument("clf_loss: class weights do not match organ count");
  const Scalar inv = Scalar(1) / static_cast<Scalar>(logits.size());
  if (grad) grad->resize(logits.rows(), logits.cols());
  Scalar total = 0;
  for (Index n = 0; n < logits.rows(); ++n)
    for (Index o = 0; o < logits.cols(); ++o) {
      const Scalar z = logits(n, o);
      const Scalar y = targets(n, o);
      const Scalar w = static_cast<Scalar>(y > Scalar(0.5) ? weights.present[static_cast<std::size_t>(o)]
                                                           : weights.absent[static_cast<std::size_t>(o)]);
      const Scalar bce = std::max(z, Scalar(0)) - z * y + std::log1p(std::exp(-std::abs(z)));
      total += w * bce;
      if (grad) (*grad)(n, o) = w * (Scalar(1) / (Scalar(1) + std::exp(-z)) - y) * inv;
    }
  return total * inv;
}

struct LossWeights {
  double alpha = 0.5;
  ClfClassWeights clf_class_weights;
};

/// alpha * l_seg + (1 - alpha) * l_clf.
template <typename Scalar>
Scalar combined_loss(Scalar l_seg, Scalar l_clf, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw std::invalid_argument("combined_loss: alpha must lie in [0, 1]");
  return static_cast<Scalar>(alpha) * l_seg + static_cast<Scalar>(1.0 - alpha) * l_clf;
}

}  // namespace halos

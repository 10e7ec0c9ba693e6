#pragma once

// Soft-margin triplet loss over every in-batch triplet.

#include "transgeo/ops.hpp"

namespace transgeo {

struct TripletLossConfig {
  double alpha = 10.0;

  void validate() const {
    if (!(alpha > 0.0)) throw std::invalid_argument("triplet loss alpha must be positive");
  }
};

/// Entry (i, j) = ||a_i - b_j||^2.
template <class T>
Tensor<T> pairwise_sq_dist(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1)) {
    throw TensorError("pairwise_sq_dist shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const std::size_t nb = b.dim(0);
  Tensor<T> a_sq = sum_axis(square(a), 1, true);                      // [Na x 1]
  Tensor<T> b_sq = reshape(sum_axis(square(b), 1, true), {1, nb});    // [1 x Nb]
  Tensor<T> cross = scale(matmul(a, transpose(b)), T(-2));
  return add(add(cross, a_sq), b_sq);
}

template <class T>
struct TripletLoss {
  Tensor<T> loss;        // scalar mean over all terms
  std::size_t terms = 0;  // 2 N (N - 1)
};

inline std::size_t triplet_count(std::size_t n) { return 2 * n * (n - 1); }

/// Mean of log(1 + exp(alpha (d_pos - d_neg))) over the 2N(N-1) triplets: each street row i
/// against every aerial negative j != i, and each aerial row j against every street
/// negative i != j. Row i of both inputs is a positive pair.
template <class T>
TripletLoss<T> triplet_loss(const Tensor<T>& street, const Tensor<T>& aerial, const TripletLossConfig& cfg) {
  cfg.validate();
  if (street.rank() != 2 || !(street.shape() == aerial.shape())) {
    throw TensorError("triplet_loss needs two N x E embedding matrices of equal shape");
  }
  const std::size_t n = street.dim(0);
  if (n < 2) throw TensorError("triplet_loss needs a batch of at least two pairs");

  Tensor<T> d = pairwise_sq_dist(street, aerial);  // d(i, j): street i vs aerial j
  Tensor<T> pos = diag(d);
  Tensor<T> street_anchor = sub(reshape(pos, {n, 1}), d);  // d(i,i) - d(i,j)
  Tensor<T> aerial_anchor = sub(reshape(pos, {1, n}), d);  // d(j,j) - d(i,j)
  const T alpha = static_cast<T>(cfg.alpha);
  std::vector<T> off(n * n, T(1));
  for (std::size_t i = 0; i < n; ++i) off[i * n + i] = T(0);
  auto mask = Tensor<T>::from({n, n}, std::move(off));
  Tensor<T> total = add(sum(mul(softplus(scale(street_anchor, alpha)), mask)),
                        sum(mul(softplus(scale(aerial_anchor, alpha)), mask)));
  const std::size_t terms = triplet_count(n);
  return {scale(total, T(1) / T(terms)), terms};
}

}  // namespace transgeo

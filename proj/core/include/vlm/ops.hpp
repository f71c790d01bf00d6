#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "vlm/tensor.hpp"

namespace vlm {

/// Boolean mask over the trailing dimensions of a tensor. Broadcasts over any
/// leading dimensions of the tensor it is applied to.
struct Mask {
  Shape shape;
  std::vector<std::uint8_t> bits;

  static Mask all(Shape shape, bool value);
  /// Lower-triangular [n, n] mask: row i may see columns j <= i.
  static Mask causal(std::size_t n);
  bool at(std::size_t flat) const { return bits[flat] != 0; }
};

/// What softmax_last does with a row whose entries are all masked.
enum class EmptyRowPolicy { kError, kZero };

// Linear algebra.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& x);

// Elementwise, equal shapes.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
/// x * s for a single-element tensor s, differentiable in both.
Tensor mul_scalar(const Tensor& x, const Tensor& s);
Tensor sqrt(const Tensor& x);
Tensor tanh(const Tensor& x);
/// Exact (erf-based) GELU.
Tensor gelu(const Tensor& x);

// Broadcast of a vector along the last dimension.
Tensor add_row(const Tensor& x, const Tensor& row);
Tensor mul_row(const Tensor& x, const Tensor& row);

// Reductions.
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
/// [r, c] -> [c], summing over rows.
Tensor sum_rows(const Tensor& x);

// Shape manipulation on row-major 2-D views.
Tensor reshape(const Tensor& x, Shape shape);
Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end);
Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t end);
Tensor concat_rows(std::span<const Tensor> parts);
Tensor concat_cols(std::span<const Tensor> parts);
Tensor gather_rows(const Tensor& table, std::span<const int> ids);
/// Returns `base` with rows [start, start + src.rows) replaced by `src`.
Tensor replace_rows(const Tensor& base, std::size_t start, const Tensor& src);
/// Output row i is the weighted sum of input rows listed in taps[i].
Tensor combine_rows(const Tensor& x,
                    const std::vector<std::vector<std::pair<std::size_t, double>>>& taps);

Tensor softmax_last(const Tensor& x, const Mask* mask = nullptr,
                    EmptyRowPolicy empty_rows = EmptyRowPolicy::kError);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

/// Mean negative log-likelihood over positions whose loss_mask is set.
/// Masked positions contribute exactly zero to value and gradient.
Tensor cross_entropy_masked(const Tensor& logits, std::span<const int> targets,
                            std::span<const std::uint8_t> loss_mask);

}  // namespace vlm

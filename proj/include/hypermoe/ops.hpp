#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "hypermoe/tensor.hpp"

namespace hypermoe {

// Matrix product of [m x k] and [k x n].
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

enum class Elementwise { kAdd, kSub, kMul, kRelu, kSoftplus };

// Generic entry point; unary kinds ignore `b`.
Tensor elementwise(Elementwise kind, const Tensor& a, const Tensor& b = {});

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor relu(const Tensor& a);
Tensor softplus(const Tensor& a);
Tensor scale(const Tensor& a, double factor);

// a[m x n] + row[1 x n] for every row.
Tensor add_row(const Tensor& a, const Tensor& row);
// a[m x n] * col[m x 1], scaling each row.
Tensor mul_col(const Tensor& a, const Tensor& col);

// Softmax over the last axis, max-subtracted.
Tensor softmax(const Tensor& x);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
// Column means of a 2-D tensor: [m x n] -> [1 x n].
Tensor mean_rows(const Tensor& a);
Tensor mse(const Tensor& prediction, const Tensor& target);
// Mean over rows of -log softmax(logits)[target].
Tensor softmax_cross_entropy(const Tensor& logits,
                             std::span<const std::size_t> targets);

Tensor reshape(const Tensor& a, Shape shape);
Tensor concat_cols(const Tensor& a, const Tensor& b);
// Stacks 2-D tensors with equal column counts vertically.
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end);
Tensor gather_rows(const Tensor& a, std::span<const std::size_t> indices);
// out[indices[i]] += src[i]; out has n_rows rows.
Tensor scatter_add_rows(const Tensor& src,
                        std::span<const std::size_t> indices,
                        std::size_t n_rows);
// Column vector [n x 1] of a[rows[i], cols[i]].
Tensor pick(const Tensor& a, std::span<const std::size_t> rows,
            std::span<const std::size_t> cols);

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps = 1e-5);

// Row-wise vector-matrix products: out[i] = x[i] . reshape(w[i], m x n),
// x is [T x m], w is [T x (m*n)] (row-major m x n blocks), out is [T x n].
Tensor batched_vecmat(const Tensor& x, const Tensor& w, std::size_t n);

// Single-head scaled dot-product attention applied independently to each
// consecutive block of seq_len rows. q, k, v are [T x d], T % seq_len == 0.
Tensor sequence_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                          std::size_t seq_len);

namespace debug {

// Scales the backward rule of one named operation while alive. Exists so the
// gradient checker can be shown to catch a broken rule.
class ScopedBackwardFault {
 public:
  ScopedBackwardFault(std::string op, double scale);
  ~ScopedBackwardFault();
  ScopedBackwardFault(const ScopedBackwardFault&) = delete;
  ScopedBackwardFault& operator=(const ScopedBackwardFault&) = delete;
};

double backward_fault_scale(const char* op);

}  // namespace debug

}  // namespace hypermoe

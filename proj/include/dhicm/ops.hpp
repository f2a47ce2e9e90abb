#pragma once

#include <optional>
#include <vector>

#include "dhicm/rng.hpp"
#include "dhicm/tensor.hpp"

namespace dhicm {

// Elementwise ops broadcast with standard trailing-dimension alignment.
// There is no implicit type promotion; everything is `real`.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor scale(const Tensor& a, real c);

// Natural log, elementwise. Domain: strictly positive inputs.
Tensor log_op(const Tensor& a);

Tensor relu(const Tensor& a);

// 2-D matrix product [M,K] x [K,N] -> [M,N].
Tensor matmul(const Tensor& a, const Tensor& b);

// 2-D transpose.
Tensor transpose(const Tensor& a);

// Softmax along `axis`, numerically stabilized by max subtraction. `mask`
// (values 0/1, broadcastable to x) marks entries allowed to receive weight;
// masked entries are exactly 0. A lane with every entry masked yields all
// zeros for that lane.
Tensor softmax(const Tensor& x, int axis);
Tensor softmax(const Tensor& x, int axis, const Tensor& mask);

// Log-softmax along the last axis.
Tensor log_softmax(const Tensor& x);

// Layer normalization over the last axis with learned gain/bias.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, real eps = 1e-5);

// Inverted dropout: in training mode survivors are scaled by 1/(1-rate) so
// evaluation mode is the identity. rate must be in [0,1). Draws from `rng`
// sequentially; the stream position is part of the op's recorded seed.
Tensor dropout(const Tensor& x, real rate, bool training, Rng& rng);

// Row gather: out[i,:] = table[ids[i],:]. Gradients scatter-add into table.
Tensor embedding_lookup(const Tensor& table, const std::vector<int>& ids);

Tensor reshape(const Tensor& x, std::vector<int> new_shape);

// First-axis slice of `count` slabs starting at `start`.
Tensor slice_rows(const Tensor& x, int start, int count);
// Last-axis slice.
Tensor slice_cols(const Tensor& x, int start, int count);

Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);

// Reductions.
Tensor sum_all(const Tensor& x);                      // -> [1]
Tensor mean_all(const Tensor& x);                     // -> [1]
Tensor sum_last(const Tensor& x);                     // drops the last axis

}  // namespace dhicm

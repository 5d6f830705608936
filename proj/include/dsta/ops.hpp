#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "dsta/tensor.hpp"

// Differentiable tensor operations. Every op takes the Tape it records onto;
// pass a non-recording tape for inference.
namespace dsta::ops {

Tensor add(Tape& tape, const Tensor& a, const Tensor& b);
Tensor mul(Tape& tape, const Tensor& a, const Tensor& b);
Tensor scale(Tape& tape, const Tensor& x, double factor);
// Sum of all elements, shape [1].
Tensor sum(Tape& tape, const Tensor& x);
Tensor reshape(Tape& tape, const Tensor& x, Shape shape);

// [m x k] . [k x n] -> [m x n]
Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b);
Tensor transpose(Tape& tape, const Tensor& x);
// x [n x in], weight [out x in], bias [out] (may be undefined) -> x . weight^T + bias
Tensor linear(Tape& tape, const Tensor& x, const Tensor& weight, const Tensor& bias);

Tensor softmax(Tape& tape, const Tensor& x, std::size_t axis);
// Normalizes over the last axis with the population variance.
Tensor layernorm(Tape& tape, const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps);
// Exact erf form: x * Phi(x).
Tensor gelu(Tape& tape, const Tensor& x);

// Row manipulation on rank-2 tensors.
Tensor concat_rows(Tape& tape, const Tensor& top, const Tensor& bottom);
Tensor index_rows(Tape& tape, const Tensor& x, std::vector<std::size_t> rows);
Tensor slice_cols(Tape& tape, const Tensor& x, std::size_t begin, std::size_t count);
Tensor concat_cols(Tape& tape, const std::vector<Tensor>& parts);
// Mean over rows: [n x d] -> [1 x d]
Tensor mean_rows(Tape& tape, const Tensor& x);

}  // namespace dsta::ops

namespace dsta::testing {

// Negative-control hook: while set, the GELU backward rule is scaled by 1.1 so
// that gradient checks must fail.
void set_corrupt_backward(bool on);
bool corrupt_backward();

}  // namespace dsta::testing

#pragma once

#include <span>

#include "c2l/tensor.hpp"

// Differentiable operations. Broadcasting exists only where noted
// (per-channel bias and per-channel / per-sample-per-channel modulation).
namespace c2l::ops {

template <typename T> BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T> BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T> BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T> BasicTensor<T> scale(const BasicTensor<T>& a, T s);
template <typename T> BasicTensor<T> silu(const BasicTensor<T>& a);
template <typename T> BasicTensor<T> reshape(const BasicTensor<T>& a, Shape shape);
template <typename T> BasicTensor<T> sum(const BasicTensor<T>& a);
template <typename T> BasicTensor<T> mean(const BasicTensor<T>& a);

// Multiplies row n (first axis) by factors[n]; factors are constants.
template <typename T>
BasicTensor<T> scale_rows(const BasicTensor<T>& a, std::span<const T> factors);

// x:[N,in], weight:[out,in], bias:[out] or null -> [N,out]
template <typename T>
BasicTensor<T> linear(const BasicTensor<T>& x, const BasicTensor<T>& weight,
                      const BasicTensor<T>* bias);

// input:[N,C,H,W], kernel:[O,C,k,k], bias:[O] or null -> [N,O,H',W'],
// H' = (H + 2*padding - k) / stride + 1.
template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const BasicTensor<T>& kernel,
                      const BasicTensor<T>* bias, std::size_t stride, std::size_t padding);

// x:[N,C,H,W] plus bias [C] or [N,C] broadcast over H,W.
template <typename T>
BasicTensor<T> add_channel_bias(const BasicTensor<T>& x, const BasicTensor<T>& bias);

// Normalizes each (sample, group) to zero mean / unit variance. No affine.
template <typename T>
BasicTensor<T> group_norm(const BasicTensor<T>& x, std::size_t groups, T eps);

// h' = gamma * h + beta per channel; gamma/beta are [C] or [N,C].
template <typename T>
BasicTensor<T> film_modulate(const BasicTensor<T>& h, const BasicTensor<T>& gamma,
                             const BasicTensor<T>& beta);

template <typename T>
BasicTensor<T> concat_channels(const BasicTensor<T>& a, const BasicTensor<T>& b);

template <typename T> BasicTensor<T> upsample_nearest2x(const BasicTensor<T>& x);

// [N,C,H,W] -> [N,C]
template <typename T> BasicTensor<T> global_avg_pool(const BasicTensor<T>& x);

// (1/N) * sum_n weights[n] * mean_j (pred[n,j] - target[n,j])^2. Target is
// treated as a constant.
template <typename T>
BasicTensor<T> weighted_mse(const BasicTensor<T>& pred, const BasicTensor<T>& target,
                            std::span<const T> weights);

// mean |pred - target| over all elements; target constant.
template <typename T>
BasicTensor<T> l1_loss(const BasicTensor<T>& pred, const BasicTensor<T>& target);

// Sinusoidal embedding [N, dim]: first half sin(t * f_i), second half
// cos(t * f_i), f_i = 10000^(-i / (dim/2)). Not differentiable (t is data).
template <typename T>
BasicTensor<T> embed_timestep(std::span<const int> timesteps, std::size_t dim);

}  // namespace c2l::ops

#pragma once

#include "transnetr/tensor.hpp"

namespace transnetr {

enum class Activation { Relu, LeakyRelu, Sigmoid };

template <class T>
TensorT<T> activation(const TensorT<T>& x, Activation kind, T negative_slope = T(0.01));

// input NCHW, weight [O, I, Kh, Kw], optional bias [O] (pass a default
// TensorT to omit). Output H' = floor((H + 2p - Kh)/stride) + 1.
template <class T>
TensorT<T> conv2d(const TensorT<T>& input, const TensorT<T>& weight, const TensorT<T>& bias,
                  int stride, int padding);

// Train mode normalizes with batch statistics and updates running_mean /
// running_var in place by exponential moving average (unbiased variance for
// the running estimate). Eval mode normalizes with the running statistics
// and mutates nothing.
template <class T>
TensorT<T> batchnorm2d(const TensorT<T>& input, const TensorT<T>& bn_scale, const TensorT<T>& bn_shift,
                       TensorT<T>& running_mean, TensorT<T>& running_var, bool training,
                       T momentum = T(0.1), T eps = T(1e-5));

// Backward routes the gradient to the first maximal element of each window
// in row-major order.
template <class T>
TensorT<T> maxpool2d(const TensorT<T>& input, int kernel, int stride, int padding);

// Half-pixel-center bilinear interpolation (source coordinate of output
// pixel i is (i + 0.5) * in/out - 0.5, edge-clamped). Maps constant fields
// to the same constant.
template <class T>
TensorT<T> bilinear_resize(const TensorT<T>& input, std::int64_t out_h, std::int64_t out_w);

template <class T>
TensorT<T> bilinear_upsample2x(const TensorT<T>& input);

template <class T>
TensorT<T> concat_channels(const TensorT<T>& a, const TensorT<T>& b);

// Affine map on the trailing axis: [... , D_in] x [D_out, D_in] -> [..., D_out].
template <class T>
TensorT<T> linear(const TensorT<T>& input, const TensorT<T>& weight, const TensorT<T>& bias);

template <class T>
TensorT<T> layernorm(const TensorT<T>& input, const TensorT<T>& ln_scale, const TensorT<T>& ln_shift,
                     T eps = T(1e-5));

// Trailing-axis softmax with max subtraction.
template <class T>
TensorT<T> softmax(const TensorT<T>& input);

// NCHW -> [N, T, C*p*p] non-overlapping patches; token order is row-major
// over the patch grid, features ordered channel-major then patch pixels.
template <class T>
TensorT<T> patchify(const TensorT<T>& input, int patch);

template <class T>
TensorT<T> unpatchify(const TensorT<T>& tokens, std::int64_t channels, std::int64_t h, std::int64_t w,
                      int patch);

// [N, T, D] + [T, D] broadcast over the batch axis.
template <class T>
TensorT<T> add_token_bias(const TensorT<T>& tokens, const TensorT<T>& table);

}  // namespace transnetr

#pragma once

#include "picr/ops.hpp"

namespace picr {

// [C,H,W] -> [H*W, C]
template <typename T>
TensorT<T> to_tokens(const TensorT<T>& x) {
    return reshape(permute(x, {1, 2, 0}), {x.dim(1) * x.dim(2), x.dim(0)});
}

// [H*W, C] -> [C,H,W]
template <typename T>
TensorT<T> to_spatial(const TensorT<T>& tokens, int h, int w) {
    return permute(reshape(tokens, {h, w, tokens.dim(1)}), {2, 0, 1});
}

}  // namespace picr

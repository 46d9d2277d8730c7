#include "picr/encoder.hpp"

#include <algorithm>

#include "picr/errors.hpp"
#include "picr/token_util.hpp"

namespace picr {

template <typename T>
TensorT<T> preprocess_depth(const TensorT<T>& depth) {
    if (depth.rank() != 3 || depth.dim(0) != 1)
        throw ShapeError("preprocess_depth: expected [1,H,W], got " + shape_str(depth.shape()));
    const int h = depth.dim(1), w = depth.dim(2);
    const T* p = depth.data();
    T lo = p[0], hi = p[0];
    for (std::int64_t i = 1; i < depth.numel(); ++i) {
        lo = std::min(lo, p[i]);
        hi = std::max(hi, p[i]);
    }
    TensorT<T> out({3, h, w});
    T* q = out.data();
    const std::int64_t hw = static_cast<std::int64_t>(h) * w;
    if (hi > lo) {
        const T inv = T(1) / (hi - lo);
        for (std::int64_t i = 0; i < hw; ++i) q[i] = (p[i] - lo) * inv;
    } else {
        for (std::int64_t i = 0; i < hw; ++i) q[i] = T(0.5);
    }
    std::copy(q, q + hw, q + hw);
    std::copy(q, q + hw, q + 2 * hw);
    return out;
}

template <typename T>
FeaturePyramidT<T> encode(const TensorT<T>& img, const EncoderDims& dims, const EncoderParamsT<T>& params) {
    if (img.rank() != 3 || img.dim(0) != 3)
        throw ShapeError("encode: expected [3,H,W], got " + shape_str(img.shape()));
    const int h = img.dim(1), w = img.dim(2);
    if (h % 32 != 0 || w % 32 != 0)
        throw ShapeError("encode: input " + shape_str(img.shape()) + " must be a multiple of 32");

    FeaturePyramidT<T> pyr;
    TensorT<T> tokens = linear(extract_patches(img, 4), params.embed_w, params.embed_b);
    int gh = h / 4, gw = w / 4;
    for (int i = 0; i < 4; ++i) {
        const auto& st = params.stages[static_cast<std::size_t>(i)];
        const AttentionConfig cfg = dims.stage_attention(i);
        tokens = swin_block(tokens, gh, gw, cfg, false, st.block0);
        tokens = swin_block(tokens, gh, gw, cfg, true, st.block1);
        pyr.level[static_cast<std::size_t>(i)] = to_spatial(tokens, gh, gw);
        if (i < 3) {
            tokens = linear(extract_patches(pyr.level[static_cast<std::size_t>(i)], 2), st.merge_w, st.merge_b);
            gh /= 2;
            gw /= 2;
        }
    }
    return pyr;
}

template <typename T>
std::pair<FeaturePyramidT<T>, FeaturePyramidT<T>> encode_pair(const TensorT<T>& rgb, const TensorT<T>& depth3,
                                                              const EncoderDims& dims,
                                                              const EncoderParamsT<T>& params) {
    if (rgb.shape() != depth3.shape())
        throw ShapeError("encode_pair: rgb " + shape_str(rgb.shape()) + " vs depth " + shape_str(depth3.shape()));
    return {encode(rgb, dims, params), encode(depth3, dims, params)};
}

#define PICR_INSTANTIATE_ENCODER(T)                                                            \
    template TensorT<T> preprocess_depth<T>(const TensorT<T>&);                                \
    template FeaturePyramidT<T> encode<T>(const TensorT<T>&, const EncoderDims&,               \
                                          const EncoderParamsT<T>&);                           \
    template std::pair<FeaturePyramidT<T>, FeaturePyramidT<T>> encode_pair<T>(                 \
        const TensorT<T>&, const TensorT<T>&, const EncoderDims&, const EncoderParamsT<T>&);

PICR_INSTANTIATE_ENCODER(float)
PICR_INSTANTIATE_ENCODER(double)
#undef PICR_INSTANTIATE_ENCODER

}  // namespace picr

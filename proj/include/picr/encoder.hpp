#pragma once

#include <array>
#include <utility>

#include "picr/attention.hpp"
#include "picr/tensor.hpp"

namespace picr {

// Stage layout of the hierarchical encoder: grids input/4, /8, /16, /32 with
// channel widths c, 2c, 4c, 8c.
struct EncoderDims {
    int input = 224;
    int embed = 96;
    std::array<int, 4> heads{3, 6, 12, 24};
    int window = 7;
    float mask_value = -100.0f;
    bool use_gelu = false;
    bool rel_pos_bias = false;

    int stage_channels(int i) const { return embed << i; }
    int stage_grid(int i) const { return (input / 4) >> i; }

    AttentionConfig stage_attention(int i) const {
        AttentionConfig c;
        c.dim = stage_channels(i);
        c.heads = heads[static_cast<std::size_t>(i)];
        c.window = window;
        c.mask_value = mask_value;
        c.use_gelu = use_gelu;
        c.rel_pos_bias = rel_pos_bias;
        return c;
    }
};

template <typename T>
struct EncoderStageParamsT {
    SwinBlockParamsT<T> block0;  // regular windows
    SwinBlockParamsT<T> block1;  // shifted windows
    TensorT<T> merge_w, merge_b;  // 2x2 patch merging, absent at the last stage

    template <typename F>
    void visit(const std::string& prefix, F&& f) {
        block0.visit(prefix + ".block0", f);
        block1.visit(prefix + ".block1", f);
        if (merge_w.defined()) f(prefix + ".merge.w", merge_w);
        if (merge_b.defined()) f(prefix + ".merge.b", merge_b);
    }
};

// One parameter set serves both streams ("shared-weight" dual encoder).
template <typename T>
struct EncoderParamsT {
    TensorT<T> embed_w, embed_b;  // 4x4 stride-4 patch projection
    std::array<EncoderStageParamsT<T>, 4> stages;

    template <typename F>
    void visit(const std::string& prefix, F&& f) {
        f(prefix + ".patch_embed.w", embed_w);
        f(prefix + ".patch_embed.b", embed_b);
        for (int i = 0; i < 4; ++i) stages[static_cast<std::size_t>(i)].visit(prefix + ".stage" + std::to_string(i + 1), f);
    }
};

// Four per-stage feature maps of one modality, channels-first [c_i,H_i,W_i].
template <typename T>
struct FeaturePyramidT {
    std::array<TensorT<T>, 4> level;
};

// Min-max normalizes a [1,H,W] depth map to [0,1] (constant maps become 0.5)
// and replicates it to three identical channels. Plain preprocessing, not
// recorded on the tape.
template <typename T>
TensorT<T> preprocess_depth(const TensorT<T>& depth);

template <typename T>
FeaturePyramidT<T> encode(const TensorT<T>& img, const EncoderDims& dims, const EncoderParamsT<T>& params);

// Both pyramids computed with the same parameter tensors.
template <typename T>
std::pair<FeaturePyramidT<T>, FeaturePyramidT<T>> encode_pair(const TensorT<T>& rgb, const TensorT<T>& depth3,
                                                              const EncoderDims& dims,
                                                              const EncoderParamsT<T>& params);

#define PICR_EXTERN_ENCODER(T)                                                                        \
    extern template TensorT<T> preprocess_depth<T>(const TensorT<T>&);                                \
    extern template FeaturePyramidT<T> encode<T>(const TensorT<T>&, const EncoderDims&,               \
                                                 const EncoderParamsT<T>&);                           \
    extern template std::pair<FeaturePyramidT<T>, FeaturePyramidT<T>> encode_pair<T>(                 \
        const TensorT<T>&, const TensorT<T>&, const EncoderDims&, const EncoderParamsT<T>&);

PICR_EXTERN_ENCODER(float)
PICR_EXTERN_ENCODER(double)
#undef PICR_EXTERN_ENCODER

}  // namespace picr

#pragma once

#include <string>

#include "picr/ops.hpp"
#include "picr/tensor.hpp"

namespace picr {

struct AttentionConfig {
    int dim = 96;
    int heads = 3;
    int window = 7;  // token window for block attention
    float mask_value = -100.0f;
    bool use_gelu = false;      // MLP activation, ReLU by default
    bool rel_pos_bias = false;  // learned per-window bias table when enabled

    int head_dim() const { return dim / heads; }
    void validate() const;
};

// Additive attention mask; entries are 0 or mask_value only.
struct MaskMatrix {
    int rows = 0;
    int cols = 0;
    std::vector<float> values;

    static MaskMatrix zeros(int n) { return MaskMatrix{n, n, std::vector<float>(static_cast<std::size_t>(n) * n, 0.0f)}; }
    float& at(int r, int c) { return values[static_cast<std::size_t>(r) * cols + c]; }
    float at(int r, int c) const { return values[static_cast<std::size_t>(r) * cols + c]; }

    template <typename T>
    TensorT<T> tensor() const {
        std::vector<T> v(values.begin(), values.end());
        return TensorT<T>({rows, cols}, std::move(v));
    }
};

template <typename T>
struct MhaParamsT {
    TensorT<T> wq, bq, wk, bk, wv, bv;
    TensorT<T> wo, bo;  // undefined => heads are concatenated without output projection

    template <typename F>
    void visit(const std::string& prefix, F&& f) {
        f(prefix + ".wq", wq);
        f(prefix + ".bq", bq);
        f(prefix + ".wk", wk);
        f(prefix + ".bk", bk);
        f(prefix + ".wv", wv);
        f(prefix + ".bv", bv);
        if (wo.defined()) f(prefix + ".wo", wo);
        if (bo.defined()) f(prefix + ".bo", bo);
    }
};

// Batched multi-head attention. q: [B,Lq,c], k/v: [B,Lk,c].
// mask is additive, [Lq,Lk] or [B,Lq,Lk]; bias is [heads,Lq,Lk]; either may be
// undefined. Scores are scaled by 1/sqrt(head_dim).
template <typename T>
TensorT<T> multihead_attention(const TensorT<T>& q, const TensorT<T>& k, const TensorT<T>& v,
                               const MhaParamsT<T>& p, int heads, const TensorT<T>& mask,
                               const TensorT<T>& bias);

// Single-group form: q,k,v are [L,c], m is square [L,L].
template <typename T>
TensorT<T> masked_attention(const TensorT<T>& q, const TensorT<T>& k, const TensorT<T>& v,
                            const MaskMatrix& m, const AttentionConfig& cfg, const MhaParamsT<T>& p);

template <typename T>
struct SwinBlockParamsT {
    TensorT<T> ln1_g, ln1_b;
    MhaParamsT<T> attn;
    TensorT<T> ln2_g, ln2_b;
    TensorT<T> fc1_w, fc1_b, fc2_w, fc2_b;
    TensorT<T> rel_bias;  // [(2w-1)^2, heads], only when cfg.rel_pos_bias

    template <typename F>
    void visit(const std::string& prefix, F&& f) {
        f(prefix + ".ln1.g", ln1_g);
        f(prefix + ".ln1.b", ln1_b);
        attn.visit(prefix + ".attn", f);
        f(prefix + ".ln2.g", ln2_g);
        f(prefix + ".ln2.b", ln2_b);
        f(prefix + ".mlp.fc1.w", fc1_w);
        f(prefix + ".mlp.fc1.b", fc1_b);
        f(prefix + ".mlp.fc2.w", fc2_w);
        f(prefix + ".mlp.fc2.b", fc2_b);
        if (rel_bias.defined()) f(prefix + ".rel_bias", rel_bias);
    }
};

// Pre-norm windowed self-attention + residual, then pre-norm 2-layer MLP
// (hidden 4c) + residual. shift rolls the grid by window/2 before window
// partitioning and unrolls after. Grids not divisible by the window are
// zero-padded and the padded keys masked with cfg.mask_value.
template <typename T>
TensorT<T> swin_block(const TensorT<T>& tokens, int grid_h, int grid_w, const AttentionConfig& cfg,
                      bool shift, const SwinBlockParamsT<T>& p);

#define PICR_EXTERN_ATTN(T)                                                                            \
    extern template TensorT<T> multihead_attention<T>(const TensorT<T>&, const TensorT<T>&,            \
                                                      const TensorT<T>&, const MhaParamsT<T>&, int,    \
                                                      const TensorT<T>&, const TensorT<T>&);           \
    extern template TensorT<T> masked_attention<T>(const TensorT<T>&, const TensorT<T>&,               \
                                                   const TensorT<T>&, const MaskMatrix&,               \
                                                   const AttentionConfig&, const MhaParamsT<T>&);      \
    extern template TensorT<T> swin_block<T>(const TensorT<T>&, int, int, const AttentionConfig&, bool, \
                                             const SwinBlockParamsT<T>&);

PICR_EXTERN_ATTN(float)
PICR_EXTERN_ATTN(double)
#undef PICR_EXTERN_ATTN

}  // namespace picr

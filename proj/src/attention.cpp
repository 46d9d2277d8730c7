#include "picr/attention.hpp"

#include <cmath>

#include "picr/errors.hpp"

namespace picr {

void AttentionConfig::validate() const {
    if (dim <= 0 || heads <= 0 || dim % heads != 0)
        throw ConfigError("attention: dim " + std::to_string(dim) + " not divisible by heads " +
                          std::to_string(heads));
    if (window < 1) throw ConfigError("attention: window must be positive");
    const float sweep[] = {-10.0f, -100.0f, -1000.0f, -10000.0f};
    bool ok = false;
    for (float v : sweep) ok = ok || v == mask_value;
    if (!ok) throw ConfigError("attention: mask_value must be one of {-10,-100,-1000,-10000}");
}

namespace {

// [B,L,c] -> [B*heads, L, d]
template <typename T>
TensorT<T> split_heads(const TensorT<T>& x, int heads) {
    const int b = x.dim(0), l = x.dim(1), c = x.dim(2);
    const int d = c / heads;
    TensorT<T> y = reshape(x, {b, l, heads, d});
    y = permute(y, {0, 2, 1, 3});
    return reshape(y, {b * heads, l, d});
}

// [B*heads, L, d] -> [B, L, c]
template <typename T>
TensorT<T> merge_heads(const TensorT<T>& x, int b, int heads) {
    const int l = x.dim(1), d = x.dim(2);
    TensorT<T> y = reshape(x, {b, heads, l, d});
    y = permute(y, {0, 2, 1, 3});
    return reshape(y, {b, l, heads * d});
}

}  // namespace

template <typename T>
TensorT<T> multihead_attention(const TensorT<T>& q, const TensorT<T>& k, const TensorT<T>& v,
                               const MhaParamsT<T>& p, int heads, const TensorT<T>& mask,
                               const TensorT<T>& bias) {
    if (q.rank() != 3 || k.rank() != 3 || v.rank() != 3)
        throw ShapeError("attention: expected [B,L,c] inputs, got " + shape_str(q.shape()));
    const int b = q.dim(0), lq = q.dim(1), c = q.dim(2);
    const int lk = k.dim(1);
    if (k.dim(0) != b || v.dim(0) != b || v.dim(1) != lk || k.dim(2) != c || v.dim(2) != c)
        throw ShapeError("attention: mismatched q " + shape_str(q.shape()) + " / k " + shape_str(k.shape()) +
                         " / v " + shape_str(v.shape()));
    if (c % heads != 0) throw ConfigError("attention: dim " + std::to_string(c) + " not divisible by heads");
    const int d = c / heads;
    if (mask.defined()) {
        const bool ok2 = mask.rank() == 2 && mask.dim(0) == lq && mask.dim(1) == lk;
        const bool ok3 = mask.rank() == 3 && mask.dim(0) == b && mask.dim(1) == lq && mask.dim(2) == lk;
        if (!ok2 && !ok3)
            throw ShapeError("attention: mask " + shape_str(mask.shape()) + " does not match tokens [" +
                             std::to_string(lq) + "," + std::to_string(lk) + "]");
    }

    TensorT<T> qh = split_heads(linear(reshape(q, {b * lq, c}), p.wq, p.bq).view({b, lq, c}), heads);
    TensorT<T> kh = split_heads(linear(reshape(k, {b * lk, c}), p.wk, p.bk).view({b, lk, c}), heads);
    TensorT<T> vh = split_heads(linear(reshape(v, {b * lk, c}), p.wv, p.bv).view({b, lk, c}), heads);

    TensorT<T> scores = mul_scalar(bmm(qh, kh, /*transpose_b=*/true), 1.0 / std::sqrt(static_cast<double>(d)));
    if (mask.defined() || bias.defined()) {
        scores = reshape(scores, {b, heads, lq, lk});
        if (mask.defined())
            scores = add(scores, mask.rank() == 3 ? reshape(mask, {b, 1, lq, lk}) : mask);
        if (bias.defined()) scores = add(scores, bias);
        scores = reshape(scores, {b * heads, lq, lk});
    }
    TensorT<T> attn = softmax_lastdim(scores);
    TensorT<T> out = merge_heads(bmm(attn, vh), b, heads);
    if (p.wo.defined()) out = linear(reshape(out, {b * lq, c}), p.wo, p.bo).view({b, lq, c});
    return out;
}

template <typename T>
TensorT<T> masked_attention(const TensorT<T>& q, const TensorT<T>& k, const TensorT<T>& v,
                            const MaskMatrix& m, const AttentionConfig& cfg, const MhaParamsT<T>& p) {
    if (q.rank() != 2) throw ShapeError("masked_attention: expected [L,c], got " + shape_str(q.shape()));
    const int l = q.dim(0), c = q.dim(1);
    if (m.rows != l || m.cols != l)
        throw ShapeError("masked_attention: mask " + std::to_string(m.rows) + "x" + std::to_string(m.cols) +
                         " does not match " + std::to_string(l) + " tokens");
    if (c != cfg.dim) throw ShapeError("masked_attention: tokens " + shape_str(q.shape()) + " vs config dim");
    TensorT<T> out = multihead_attention(reshape(q, {1, l, c}), reshape(k, {1, l, c}), reshape(v, {1, l, c}),
                                         p, cfg.heads, m.tensor<T>(), TensorT<T>());
    return reshape(out, {l, c});
}

namespace {

// Additive key-padding mask per window, or undefined when nothing is padded.
// valid is the (possibly rolled) validity grid of the padded token grid.
template <typename T>
TensorT<T> window_pad_mask(const std::vector<char>& valid, int hp, int wp, int win, float mask_value) {
    bool any = false;
    for (char f : valid)
        if (!f) any = true;
    if (!any) return TensorT<T>();
    const int nh = hp / win, nw = wp / win, l = win * win;
    TensorT<T> mask({nh * nw, l, l});
    T* pm = mask.data();
    for (int gy = 0; gy < nh; ++gy)
        for (int gx = 0; gx < nw; ++gx) {
            T* block = pm + (static_cast<std::int64_t>(gy) * nw + gx) * l * l;
            for (int kt = 0; kt < l; ++kt) {
                const int ky = gy * win + kt / win, kx = gx * win + kt % win;
                if (!valid[static_cast<std::size_t>(ky) * wp + kx])
                    for (int qt = 0; qt < l; ++qt) block[qt * l + kt] = static_cast<T>(mask_value);
            }
        }
    return mask;
}

// Relative-position bias [heads, L, L] from the learned table [(2w-1)^2, heads].
template <typename T>
TensorT<T> window_rel_bias(const TensorT<T>& table, int win, int heads) {
    const int l = win * win;
    std::vector<int> idx(static_cast<std::size_t>(l) * l);
    for (int i = 0; i < l; ++i)
        for (int j = 0; j < l; ++j) {
            const int dy = i / win - j / win + win - 1;
            const int dx = i % win - j % win + win - 1;
            idx[static_cast<std::size_t>(i) * l + j] = dy * (2 * win - 1) + dx;
        }
    TensorT<T> rows = take_rows(table, idx);            // [L*L, heads]
    return permute(reshape(rows, {l, l, heads}), {2, 0, 1});
}

}  // namespace

template <typename T>
TensorT<T> swin_block(const TensorT<T>& tokens, int grid_h, int grid_w, const AttentionConfig& cfg,
                      bool shift, const SwinBlockParamsT<T>& p) {
    if (tokens.rank() != 2 || tokens.dim(0) != grid_h * grid_w)
        throw ShapeError("swin_block: token count " + shape_str(tokens.shape()) + " does not match grid " +
                         std::to_string(grid_h) + "x" + std::to_string(grid_w));
    const int c = tokens.dim(1);
    if (c != cfg.dim) throw ShapeError("swin_block: channel width " + std::to_string(c) + " vs config dim");
    const int win = cfg.window;
    const int hp = (grid_h + win - 1) / win * win;
    const int wp = (grid_w + win - 1) / win * win;
    const int s = shift ? win / 2 : 0;

    // windowed self-attention branch
    TensorT<T> h = layernorm(tokens, p.ln1_g, p.ln1_b);
    TensorT<T> grid = reshape(h, {grid_h, grid_w, c});
    if (hp != grid_h || wp != grid_w) grid = pad_grid(grid, hp - grid_h, wp - grid_w);
    if (s) grid = roll_grid(grid, -s, -s);

    std::vector<char> valid(static_cast<std::size_t>(hp) * wp, 1);
    if (hp != grid_h || wp != grid_w) {
        for (int y = 0; y < hp; ++y)
            for (int x = 0; x < wp; ++x) {
                int sy = y, sx = x;
                if (s) {
                    sy = (y + s) % hp;  // position before the roll
                    sx = (x + s) % wp;
                }
                valid[static_cast<std::size_t>(y) * wp + x] = (sy < grid_h && sx < grid_w) ? 1 : 0;
            }
    }

    const int nh = hp / win, nw = wp / win, l = win * win;
    TensorT<T> windows = reshape(grid, {nh, win, nw, win, c});
    windows = permute(windows, {0, 2, 1, 3, 4});
    windows = reshape(windows, {nh * nw, l, c});

    TensorT<T> mask = window_pad_mask<T>(valid, hp, wp, win, cfg.mask_value);
    TensorT<T> bias;
    if (cfg.rel_pos_bias && p.rel_bias.defined()) bias = window_rel_bias(p.rel_bias, win, cfg.heads);

    TensorT<T> attn = multihead_attention(windows, windows, windows, p.attn, cfg.heads, mask, bias);

    attn = reshape(attn, {nh, nw, win, win, c});
    attn = permute(attn, {0, 2, 1, 3, 4});
    attn = reshape(attn, {hp, wp, c});
    if (s) attn = roll_grid(attn, s, s);
    if (hp != grid_h || wp != grid_w) attn = crop_grid(attn, grid_h, grid_w);

    TensorT<T> x = add(tokens, reshape(attn, {grid_h * grid_w, c}));

    // MLP branch
    TensorT<T> m = layernorm(x, p.ln2_g, p.ln2_b);
    m = linear(m, p.fc1_w, p.fc1_b);
    m = cfg.use_gelu ? gelu(m) : relu(m);
    m = linear(m, p.fc2_w, p.fc2_b);
    return add(x, m);
}

#define PICR_INSTANTIATE_ATTN(T)                                                                       \
    template TensorT<T> multihead_attention<T>(const TensorT<T>&, const TensorT<T>&, const TensorT<T>&, \
                                               const MhaParamsT<T>&, int, const TensorT<T>&,           \
                                               const TensorT<T>&);                                     \
    template TensorT<T> masked_attention<T>(const TensorT<T>&, const TensorT<T>&, const TensorT<T>&,   \
                                            const MaskMatrix&, const AttentionConfig&,                 \
                                            const MhaParamsT<T>&);                                     \
    template TensorT<T> swin_block<T>(const TensorT<T>&, int, int, const AttentionConfig&, bool,       \
                                      const SwinBlockParamsT<T>&);

PICR_INSTANTIATE_ATTN(float)
PICR_INSTANTIATE_ATTN(double)
#undef PICR_INSTANTIATE_ATTN

}  // namespace picr

#pragma once

#include <cstdint>
#include <vector>

#include "picr/tensor.hpp"

namespace picr {

// Rough MAC/element counter accumulated by the compute-heavy ops; tests use it
// to measure how work scales with input size.
std::int64_t flop_count();
void reset_flop_count();

namespace detail {

// Shared recording boilerplate for ops: collects tracked inputs as parents,
// attaches autograd metadata to the output, and records the backward closure.
template <typename T>
class OpCtx {
public:
    OpCtx(std::initializer_list<const TensorT<T>*> inputs)
        : OpCtx(std::vector<const TensorT<T>*>(inputs)) {}

    explicit OpCtx(const std::vector<const TensorT<T>*>& inputs) {
        TapeT<T>* tape = TapeT<T>::current();
        if (!tape) return;
        bool any = false;
        for (const TensorT<T>* t : inputs)
            if (t->defined() && t->requires_grad()) any = true;
        if (!any) return;
        tape_ = tape;
        for (const TensorT<T>* t : inputs)
            if (t->defined() && t->requires_grad()) parents_.push_back(tape->ensure_node(*t));
    }

    bool active() const { return tape_ != nullptr; }

    // Grad buffer of a tracked input, or null when no gradient is needed.
    std::shared_ptr<std::vector<T>> grad_in(const TensorT<T>& t) const {
        if (!active() || !t.defined() || !t.requires_grad()) return nullptr;
        return t.grad_ptr();
    }

    // Attaches metadata to the op output and returns its grad buffer.
    std::shared_ptr<std::vector<T>> grad_out(TensorT<T>& out) {
        out_node_ = tape_->record(parents_, nullptr);
        tape_->adopt(out, out_node_);
        return out.grad_ptr();
    }

    void record(std::function<void()> fn) { tape_->set_backward(out_node_, std::move(fn)); }

private:
    TapeT<T>* tape_ = nullptr;
    std::vector<int> parents_;
    int out_node_ = -1;
};

}  // namespace detail

// --- linear algebra ---
template <typename T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b);
// Batched matmul over identical leading batch dim; transpose_b multiplies by
// the per-batch transpose of b.
template <typename T>
TensorT<T> bmm(const TensorT<T>& a, const TensorT<T>& b, bool transpose_b = false);
template <typename T>
TensorT<T> linear(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& b);

// --- elementwise, broadcasting align-right (numpy rules) ---
template <typename T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b);
template <typename T>
TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b);
template <typename T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b);
template <typename T>
TensorT<T> div(const TensorT<T>& a, const TensorT<T>& b);
template <typename T>
TensorT<T> add_scalar(const TensorT<T>& x, double v);
template <typename T>
TensorT<T> mul_scalar(const TensorT<T>& x, double v);

// --- activations / normalization ---
template <typename T>
TensorT<T> relu(const TensorT<T>& x);
template <typename T>
TensorT<T> gelu(const TensorT<T>& x);
template <typename T>
TensorT<T> sigmoid(const TensorT<T>& x);
template <typename T>
TensorT<T> softmax_lastdim(const TensorT<T>& x);
// Normalizes over the last dimension, variance epsilon 1e-5.
template <typename T>
TensorT<T> layernorm(const TensorT<T>& x, const TensorT<T>& gamma, const TensorT<T>& beta);

// --- reductions ---
template <typename T>
TensorT<T> sum_all(const TensorT<T>& x);
template <typename T>
TensorT<T> mean_all(const TensorT<T>& x);

// --- shape ops ---
template <typename T>
TensorT<T> reshape(const TensorT<T>& x, std::vector<int> shape);  // shares storage
template <typename T>
TensorT<T> permute(const TensorT<T>& x, const std::vector<int>& perm);
template <typename T>
TensorT<T> concat(const std::vector<TensorT<T>>& xs, int axis);
template <typename T>
TensorT<T> slice(const TensorT<T>& x, int axis, int start, int len);
// Gathers rows of a [R,C] table by index; backward scatter-adds.
template <typename T>
TensorT<T> take_rows(const TensorT<T>& table, const std::vector<int>& idx);

// --- spatial ops on [C,H,W] ---
template <typename T>
TensorT<T> conv2d(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& bias, int pad, int stride);
template <typename T>
TensorT<T> maxpool2x(const TensorT<T>& x);
template <typename T>
TensorT<T> global_avg_pool(const TensorT<T>& x);  // -> [C]
template <typename T>
TensorT<T> upsample2x_nearest(const TensorT<T>& x);
template <typename T>
TensorT<T> bilinear_resize(const TensorT<T>& x, int out_h, int out_w);
template <typename T>
TensorT<T> pad_reflect2d(const TensorT<T>& x, int p);  // mirror padding, edge not repeated
// Non-overlapping p x p patches: [C,H,W] -> [(H/p)*(W/p), p*p*C].
template <typename T>
TensorT<T> extract_patches(const TensorT<T>& x, int p);

// --- token-grid ops on [H,W,C] ---
template <typename T>
TensorT<T> pad_grid(const TensorT<T>& x, int pad_h, int pad_w);  // zero pad bottom/right
template <typename T>
TensorT<T> crop_grid(const TensorT<T>& x, int h, int w);         // keep top-left
template <typename T>
TensorT<T> roll_grid(const TensorT<T>& x, int shift_h, int shift_w);  // cyclic

// --- losses' numerical kernel ---
// mean(-[g log s + (1-g) log(1-s)]) with s clamped to [1e-7, 1-1e-7].
template <typename T>
TensorT<T> bce_mean(const TensorT<T>& s, const TensorT<T>& g);

#define PICR_EXTERN_OPS(T)                                                                              \
    extern template TensorT<T> matmul<T>(const TensorT<T>&, const TensorT<T>&);                        \
    extern template TensorT<T> bmm<T>(const TensorT<T>&, const TensorT<T>&, bool);                     \
    extern template TensorT<T> linear<T>(const TensorT<T>&, const TensorT<T>&, const TensorT<T>&);     \
    extern template TensorT<T> add<T>(const TensorT<T>&, const TensorT<T>&);                           \
    extern template TensorT<T> sub<T>(const TensorT<T>&, const TensorT<T>&);                           \
    extern template TensorT<T> mul<T>(const TensorT<T>&, const TensorT<T>&);                           \
    extern template TensorT<T> div<T>(const TensorT<T>&, const TensorT<T>&);                           \
    extern template TensorT<T> add_scalar<T>(const TensorT<T>&, double);                               \
    extern template TensorT<T> mul_scalar<T>(const TensorT<T>&, double);                               \
    extern template TensorT<T> relu<T>(const TensorT<T>&);                                             \
    extern template TensorT<T> gelu<T>(const TensorT<T>&);                                             \
    extern template TensorT<T> sigmoid<T>(const TensorT<T>&);                                          \
    extern template TensorT<T> softmax_lastdim<T>(const TensorT<T>&);                                  \
    extern template TensorT<T> layernorm<T>(const TensorT<T>&, const TensorT<T>&, const TensorT<T>&);  \
    extern template TensorT<T> sum_all<T>(const TensorT<T>&);                                          \
    extern template TensorT<T> mean_all<T>(const TensorT<T>&);                                         \
    extern template TensorT<T> reshape<T>(const TensorT<T>&, std::vector<int>);                        \
    extern template TensorT<T> permute<T>(const TensorT<T>&, const std::vector<int>&);                 \
    extern template TensorT<T> concat<T>(const std::vector<TensorT<T>>&, int);                         \
    extern template TensorT<T> slice<T>(const TensorT<T>&, int, int, int);                             \
    extern template TensorT<T> take_rows<T>(const TensorT<T>&, const std::vector<int>&);               \
    extern template TensorT<T> conv2d<T>(const TensorT<T>&, const TensorT<T>&, const TensorT<T>&, int, \
                                         int);                                                         \
    extern template TensorT<T> maxpool2x<T>(const TensorT<T>&);                                        \
    extern template TensorT<T> global_avg_pool<T>(const TensorT<T>&);                                  \
    extern template TensorT<T> upsample2x_nearest<T>(const TensorT<T>&);                               \
    extern template TensorT<T> bilinear_resize<T>(const TensorT<T>&, int, int);                        \
    extern template TensorT<T> pad_reflect2d<T>(const TensorT<T>&, int);                               \
    extern template TensorT<T> extract_patches<T>(const TensorT<T>&, int);                             \
    extern template TensorT<T> pad_grid<T>(const TensorT<T>&, int, int);                               \
    extern template TensorT<T> crop_grid<T>(const TensorT<T>&, int, int);                              \
    extern template TensorT<T> roll_grid<T>(const TensorT<T>&, int, int);                              \
    extern template TensorT<T> bce_mean<T>(const TensorT<T>&, const TensorT<T>&);

PICR_EXTERN_OPS(float)
PICR_EXTERN_OPS(double)
#undef PICR_EXTERN_OPS

}  // namespace picr

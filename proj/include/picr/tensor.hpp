#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "picr/errors.hpp"

namespace picr {

template <typename T>
class TapeT;

namespace detail {

template <typename T>
struct AutogradMeta {
    bool requires_grad = false;
    std::shared_ptr<std::vector<T>> grad;  // same numel as data, lazily allocated
    TapeT<T>* tape = nullptr;
    std::uint64_t tape_id = 0;
    int node = -1;
};

inline std::int64_t shape_numel(const std::vector<int>& shape) {
    std::int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
}

}  // namespace detail

inline std::string shape_str(const std::vector<int>& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

// Dense row-major tensor. Copies share the underlying buffer; ops never
// mutate their inputs, so sharing is observationally value-semantic.
template <typename T>
class TensorT {
public:
    TensorT() = default;

    explicit TensorT(std::vector<int> shape)
        : shape_(std::move(shape)), numel_(detail::shape_numel(shape_)) {
        check_shape();
        data_ = std::make_shared<std::vector<T>>(static_cast<std::size_t>(numel_), T(0));
    }

    TensorT(std::vector<int> shape, std::vector<T> values)
        : shape_(std::move(shape)), numel_(detail::shape_numel(shape_)) {
        check_shape();
        if (static_cast<std::int64_t>(values.size()) != numel_)
            throw ShapeError("tensor data length " + std::to_string(values.size()) +
                             " does not match shape " + shape_str(shape_));
        data_ = std::make_shared<std::vector<T>>(std::move(values));
    }

    static TensorT zeros(std::vector<int> shape) { return TensorT(std::move(shape)); }

    static TensorT full(std::vector<int> shape, T v) {
        TensorT t(std::move(shape));
        std::fill(t.data_->begin(), t.data_->end(), v);
        return t;
    }

    static TensorT scalar(T v) { return TensorT({1}, {v}); }

    bool defined() const { return data_ != nullptr; }
    const std::vector<int>& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
    std::int64_t numel() const { return numel_; }

    T* data() { return data_->data(); }
    const T* data() const { return data_->data(); }
    std::vector<T>& vec() { return *data_; }
    const std::vector<T>& vec() const { return *data_; }
    const std::shared_ptr<std::vector<T>>& data_ptr() const { return data_; }

    T at(std::initializer_list<int> idx) const {
        std::int64_t off = 0;
        std::size_t k = 0;
        for (int i : idx) {
            off = off * shape_[k] + i;
            ++k;
        }
        return (*data_)[static_cast<std::size_t>(off)];
    }

    T item() const {
        if (numel_ != 1) throw ShapeError("item() on non-scalar tensor " + shape_str(shape_));
        return (*data_)[0];
    }

    bool requires_grad() const { return meta_ && meta_->requires_grad; }

    void set_requires_grad(bool v) {
        if (v) {
            ensure_meta();
            meta_->requires_grad = true;
            ensure_grad();
        } else if (meta_) {
            meta_->requires_grad = false;
        }
    }

    // Null when no gradient has been tracked for this tensor.
    const std::vector<T>* grad() const { return meta_ && meta_->grad ? meta_->grad.get() : nullptr; }

    std::vector<T>& grad_vec() {
        ensure_meta();
        ensure_grad();
        return *meta_->grad;
    }

    void zero_grad() {
        if (meta_ && meta_->grad) std::fill(meta_->grad->begin(), meta_->grad->end(), T(0));
    }

    // Reshape that shares storage. numel must match.
    TensorT view(std::vector<int> shape) const {
        if (detail::shape_numel(shape) != numel_)
            throw ShapeError("view " + shape_str(shape) + " incompatible with " + shape_str(shape_));
        TensorT out = *this;
        out.shape_ = std::move(shape);
        return out;
    }

    // --- autograd plumbing (used by ops and the tape) ---
    const std::shared_ptr<detail::AutogradMeta<T>>& meta() const { return meta_; }

    void ensure_meta() const {
        if (!meta_) meta_ = std::make_shared<detail::AutogradMeta<T>>();
    }

    void ensure_grad() const {
        if (meta_ && !meta_->grad)
            meta_->grad = std::make_shared<std::vector<T>>(static_cast<std::size_t>(numel_), T(0));
    }

    std::shared_ptr<std::vector<T>> grad_ptr() const { return meta_ ? meta_->grad : nullptr; }

private:
    void check_shape() const {
        for (int d : shape_)
            if (d <= 0) throw ShapeError("non-positive dimension in shape " + shape_str(shape_));
    }

    std::vector<int> shape_;
    std::int64_t numel_ = 0;
    std::shared_ptr<std::vector<T>> data_;
    mutable std::shared_ptr<detail::AutogradMeta<T>> meta_;
};

// Reverse-mode tape. Nodes are appended in execution order, so index order is
// a topological order; backward sweeps from the loss node down to 0 visiting
// each reachable node exactly once.
template <typename T>
class TapeT {
public:
    TapeT() : id_(next_id()++) {}
    TapeT(const TapeT&) = delete;
    TapeT& operator=(const TapeT&) = delete;
    ~TapeT() {
        if (current() == this) current() = nullptr;
    }

    static TapeT*& current() {
        thread_local TapeT* cur = nullptr;
        return cur;
    }

    std::uint64_t id() const { return id_; }
    std::size_t size() const { return nodes_.size(); }

    int record(std::vector<int> parents, std::function<void()> fn) {
        nodes_.push_back(Node{std::move(parents), std::move(fn)});
        return static_cast<int>(nodes_.size()) - 1;
    }

    void set_backward(int node, std::function<void()> fn) {
        nodes_[static_cast<std::size_t>(node)].fn = std::move(fn);
    }

    // Node id of t on this tape; registers a gradient-carrying leaf if t has
    // not been seen here yet.
    int ensure_node(const TensorT<T>& t) {
        auto meta = t.meta();
        if (!meta) throw TapeError("ensure_node on tensor without autograd metadata");
        if (meta->tape == this && meta->tape_id == id_ && meta->node >= 0) return meta->node;
        t.ensure_grad();
        int node = record({}, nullptr);
        meta->tape = this;
        meta->tape_id = id_;
        meta->node = node;
        return node;
    }

    void adopt(const TensorT<T>& out, int node) {
        out.ensure_meta();
        auto meta = out.meta();
        meta->requires_grad = true;
        meta->tape = this;
        meta->tape_id = id_;
        meta->node = node;
        out.ensure_grad();
    }

    void run_backward(int root) {
        std::vector<char> reach(nodes_.size(), 0);
        std::vector<int> stack{root};
        reach[static_cast<std::size_t>(root)] = 1;
        while (!stack.empty()) {
            int n = stack.back();
            stack.pop_back();
            for (int p : nodes_[static_cast<std::size_t>(n)].parents) {
                if (!reach[static_cast<std::size_t>(p)]) {
                    reach[static_cast<std::size_t>(p)] = 1;
                    stack.push_back(p);
                }
            }
        }
        for (int n = root; n >= 0; --n) {
            if (reach[static_cast<std::size_t>(n)] && nodes_[static_cast<std::size_t>(n)].fn)
                nodes_[static_cast<std::size_t>(n)].fn();
        }
    }

private:
    struct Node {
        std::vector<int> parents;
        std::function<void()> fn;  // null for leaves
    };

    static std::uint64_t& next_id() {
        static std::uint64_t id = 1;
        return id;
    }

    std::vector<Node> nodes_;
    std::uint64_t id_;
};

// Makes a tape the recording target for the current scope.
template <typename T>
class TapeScopeT {
public:
    explicit TapeScopeT(TapeT<T>& tape) : prev_(TapeT<T>::current()) { TapeT<T>::current() = &tape; }
    ~TapeScopeT() { TapeT<T>::current() = prev_; }
    TapeScopeT(const TapeScopeT&) = delete;

private:
    TapeT<T>* prev_;
};

// Seeds d(loss)/d(loss) = 1 and propagates gradients to every tensor that
// participated in the recording with requires_grad set.
template <typename T>
void backward(const TensorT<T>& loss) {
    auto meta = loss.meta();
    if (!meta || meta->node < 0 || meta->tape == nullptr)
        throw TapeError("backward() on a tensor that is not attached to a tape");
    if (meta->tape->id() != meta->tape_id)
        throw TapeError("backward() on a tensor from a stale tape");
    if (loss.numel() != 1) throw TapeError("backward() requires a scalar loss, got " + shape_str(loss.shape()));
    loss.ensure_grad();
    (*meta->grad)[0] += T(1);
    meta->tape->run_backward(meta->node);
}

using Tensor = TensorT<float>;
using Tape = TapeT<float>;
using TapeScope = TapeScopeT<float>;

}  // namespace picr

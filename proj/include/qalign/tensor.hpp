#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "qalign/common.hpp"
#include "qalign/rng.hpp"

namespace qalign {

// A dense tensor with optional gradient buffer, parameterized on the scalar
// type: float is the default training precision, double is the verification
// mode used by the finite-difference gradient checks.
//
// Tensor is a cheap value wrapper over a shared node, so ops can capture
// their inputs by value in tape closures. Data is immutable by convention
// once an op has consumed it; grad buffers are the only thing mutated during
// a reverse pass.
template <typename S>
struct TensorNode {
    std::vector<std::size_t> shape;
    std::vector<S> data;
    std::vector<S> grad;  // empty until the first accumulation
    bool requires_grad = false;
};

template <typename S>
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(std::vector<std::size_t> shape, bool requires_grad = false) {
        Tensor t;
        t.n_ = std::make_shared<TensorNode<S>>();
        t.n_->shape = std::move(shape);
        t.n_->data.assign(numel_of(t.n_->shape), S(0));
        t.n_->requires_grad = requires_grad;
        return t;
    }

    static Tensor full(std::vector<std::size_t> shape, S value, bool requires_grad = false) {
        Tensor t = zeros(std::move(shape), requires_grad);
        for (auto& v : t.n_->data) v = value;
        return t;
    }

    static Tensor from_data(std::vector<std::size_t> shape, std::vector<S> data,
                            bool requires_grad = false) {
        if (numel_of(shape) != data.size()) {
            std::ostringstream os;
            os << "Tensor::from_data: shape wants " << numel_of(shape)
               << " values, got " << data.size();
            throw DimensionError(os.str());
        }
        Tensor t;
        t.n_ = std::make_shared<TensorNode<S>>();
        t.n_->shape = std::move(shape);
        t.n_->data = std::move(data);
        t.n_->requires_grad = requires_grad;
        return t;
    }

    static Tensor scalar(S value, bool requires_grad = false) {
        return from_data({1}, {value}, requires_grad);
    }

    // Gaussian init, mean 0 / given std, fully determined by the Rng state.
    static Tensor randn(std::vector<std::size_t> shape, Rng& rng, double stddev,
                        bool requires_grad = false) {
        Tensor t = zeros(std::move(shape), requires_grad);
        for (auto& v : t.n_->data) v = static_cast<S>(rng.next_normal() * stddev);
        return t;
    }

    bool defined() const { return static_cast<bool>(n_); }

    const std::vector<std::size_t>& shape() const { return node().shape; }
    std::size_t numel() const { return node().data.size(); }
    std::size_t rank() const { return node().shape.size(); }
    std::size_t dim(std::size_t i) const { return node().shape.at(i); }

    bool is_scalar() const { return numel() == 1; }
    S scalar_value() const {
        if (!is_scalar()) throw DimensionError("scalar_value: tensor is not scalar");
        return node().data[0];
    }

    std::vector<S>& data() { return node().data; }
    const std::vector<S>& data() const { return node().data; }

    S& operator[](std::size_t i) { return node().data[i]; }
    const S& operator[](std::size_t i) const { return node().data[i]; }

    // Row-major 2-D access.
    S& at(std::size_t r, std::size_t c) { return node().data[r * node().shape[1] + c]; }
    const S& at(std::size_t r, std::size_t c) const {
        return node().data[r * node().shape[1] + c];
    }

    bool requires_grad() const { return node().requires_grad; }
    void set_requires_grad(bool v) { node().requires_grad = v; }

    bool has_grad() const { return defined() && !n_->grad.empty(); }

    // Grad buffer, allocated (zeroed) on first touch.
    std::vector<S>& grad() {
        auto& nd = node();
        if (nd.grad.empty()) nd.grad.assign(nd.data.size(), S(0));
        return nd.grad;
    }

    const std::vector<S>& grad() const {
        if (!has_grad()) throw Error("grad(): no gradient has been accumulated");
        return n_->grad;
    }

    void zero_grad() {
        if (defined()) n_->grad.clear();
    }

    // Identity of the underlying node; used by gradient-masking checks.
    const void* node_id() const { return n_.get(); }

    bool same_node(const Tensor& other) const { return n_ == other.n_; }

    // Deep copy. Grad buffer is not copied.
    Tensor clone() const {
        Tensor t;
        t.n_ = std::make_shared<TensorNode<S>>();
        t.n_->shape = node().shape;
        t.n_->data = node().data;
        t.n_->requires_grad = node().requires_grad;
        return t;
    }

private:
    static std::size_t numel_of(const std::vector<std::size_t>& shape) {
        return std::accumulate(shape.begin(), shape.end(), std::size_t(1),
                               std::multiplies<std::size_t>());
    }

    TensorNode<S>& node() {
        if (!n_) throw Error("use of undefined Tensor");
        return *n_;
    }
    const TensorNode<S>& node() const {
        if (!n_) throw Error("use of undefined Tensor");
        return *n_;
    }

    std::shared_ptr<TensorNode<S>> n_;
};

// Dynamic op recording for one reverse pass. Ops push a closure per recorded
// operation; backward() replays them in exact reverse order. A tape is
// single-shot: running backward twice without re-recording is an error.
template <typename S>
class Tape {
public:
    void record(std::function<void()> step) { steps_.push_back(std::move(step)); }

    std::size_t size() const { return steps_.size(); }

    void backward(Tensor<S> loss) {
        if (!loss.defined() || !loss.is_scalar()) {
            throw DimensionError("backward: loss must be a defined scalar tensor");
        }
        if (spent_) {
            throw Error("backward: tape already consumed; re-record before reversing again");
        }
        spent_ = true;
        loss.grad()[0] += S(1);
        for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) (*it)();
    }

    void reset() {
        steps_.clear();
        spent_ = false;
    }

private:
    std::vector<std::function<void()>> steps_;
    bool spent_ = false;
};

namespace detail {
template <typename S>
inline Tape<S>*& active_tape_slot() {
    thread_local Tape<S>* slot = nullptr;
    return slot;
}
}  // namespace detail

template <typename S>
inline Tape<S>* active_tape() {
    return detail::active_tape_slot<S>();
}

// RAII activation of a tape on the current thread.
template <typename S>
class TapeScope {
public:
    explicit TapeScope(Tape<S>& tape) : prev_(detail::active_tape_slot<S>()) {
        detail::active_tape_slot<S>() = &tape;
    }
    ~TapeScope() { detail::active_tape_slot<S>() = prev_; }

    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    Tape<S>* prev_;
};

// Suspends recording; forward values are unaffected by construction.
template <typename S>
class NoGradScope {
public:
    NoGradScope() : prev_(detail::active_tape_slot<S>()) {
        detail::active_tape_slot<S>() = nullptr;
    }
    ~NoGradScope() { detail::active_tape_slot<S>() = prev_; }

    NoGradScope(const NoGradScope&) = delete;
    NoGradScope& operator=(const NoGradScope&) = delete;

private:
    Tape<S>* prev_;
};

// Convenience: reverse through the active tape.
template <typename S>
inline void backward(const Tensor<S>& loss) {
    Tape<S>* t = active_tape<S>();
    if (!t) throw Error("backward: no active tape on this thread");
    t->backward(loss);
}

}  // namespace qalign

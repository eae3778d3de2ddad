#pragma once

#include <cstdint>
#include <cstdlib>
#include <functional>
#include <memory>
#include <new>
#include <string>
#include <vector>

#include "d2s/error.hpp"

namespace d2s::ad {

// 64-byte-aligned storage. Vectorized kernels pick their peel/remainder split
// from the buffer address; pinning the alignment makes every tape computation
// bitwise identical run-to-run regardless of heap layout.
template <typename S>
struct AlignedAllocator {
    using value_type = S;
    AlignedAllocator() = default;
    template <typename U>
    AlignedAllocator(const AlignedAllocator<U> &) {}

    S *allocate(std::size_t n) {
        const std::size_t bytes = (n * sizeof(S) + 63) / 64 * 64;
        void *p = std::aligned_alloc(64, bytes ? bytes : 64);
        if (!p) throw std::bad_alloc();
        return static_cast<S *>(p);
    }
    void deallocate(S *p, std::size_t) { std::free(p); }

    template <typename U>
    bool operator==(const AlignedAllocator<U> &) const {
        return true;
    }
};

template <typename S>
using Buffer = std::vector<S, AlignedAllocator<S>>;

// Dense row-major matrix node. Values live behind a shared_ptr so several
// nodes may alias one buffer (e.g. read-only parameter values); the gradient
// accumulator is per-node and allocated only when requires_grad is set.
template <typename S>
struct Node {
    int rows = 0;
    int cols = 0;
    std::shared_ptr<Buffer<S>> val;
    Buffer<S> grad;
    bool requires_grad = false;

    int size() const { return rows * cols; }
    S *data() { return val->data(); }
    const S *data() const { return val->data(); }
    S scalar() const { return (*val)[0]; }
};

template <typename S>
using Var = std::shared_ptr<Node<S>>;

template <typename S>
Var<S> make_param(int rows, int cols, std::vector<S> values);

template <typename S>
Var<S> make_const(int rows, int cols, std::vector<S> values);

template <typename S>
Var<S> make_zeros(int rows, int cols, bool requires_grad);

// Records every operation with at least one grad-requiring input, in
// execution order, and replays adjoints in reverse. A tape is used for one
// forward/backward pair and is confined to a single thread.
template <typename S>
class Tape {
  public:
    Var<S> matmul(const Var<S> &a, const Var<S> &b);
    // a * b^T without materializing the transpose.
    Var<S> matmul_nt(const Var<S> &a, const Var<S> &b);
    // x * w + b with b a 1 x cols row vector broadcast over rows.
    Var<S> linear(const Var<S> &x, const Var<S> &w, const Var<S> &b);

    // add/ sub accept equal shapes; add also broadcasts a 1 x C rhs.
    Var<S> add(const Var<S> &a, const Var<S> &b);
    Var<S> sub(const Var<S> &a, const Var<S> &b);
    // Elementwise product; rhs may be R x 1 and is then broadcast per row.
    Var<S> mul(const Var<S> &a, const Var<S> &b);
    Var<S> div(const Var<S> &a, const Var<S> &b);

    Var<S> scale(const Var<S> &a, S c);
    Var<S> add_scalar(const Var<S> &a, S c);
    Var<S> reciprocal(const Var<S> &a);
    Var<S> square(const Var<S> &a);
    // sqrt(x^2 + delta^2): differentiable |x| used by the reliability loss.
    Var<S> abs_smooth(const Var<S> &a, S delta = static_cast<S>(1e-12));
    Var<S> relu(const Var<S> &a);
    Var<S> softmax_rows(const Var<S> &a);
    Var<S> concat_cols(const Var<S> &a, const Var<S> &b);
    Var<S> slice_cols(const Var<S> &a, int col_begin, int col_end);
    Var<S> sum(const Var<S> &a);
    Var<S> mean(const Var<S> &a);

    // Seeds d(loss)/d(loss) = 1 and accumulates adjoints into every
    // grad-requiring node reachable from the loss. Call once per tape.
    void backward(const Var<S> &loss);

    std::size_t recorded_ops() const { return records_.size(); }

  private:
    struct Record {
        std::function<void()> backprop;
    };
    std::vector<Record> records_;

    Var<S> out_like(int rows, int cols, bool requires_grad);
    void record(std::function<void()> fn) { records_.push_back({std::move(fn)}); }
};

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Adam with bias correction. Owns the first/second moment buffers for a fixed
// parameter list; step() consumes the gradients currently stored on the
// parameters.
template <typename S>
class Adam {
  public:
    explicit Adam(std::vector<Var<S>> params, AdamConfig cfg = {});

    void zero_grad();
    void step(double lr);
    std::int64_t step_count() const { return step_count_; }

    const std::vector<Var<S>> &params() const { return params_; }
    std::vector<Buffer<S>> &first_moments() { return m_; }
    std::vector<Buffer<S>> &second_moments() { return v_; }
    void set_step_count(std::int64_t t) { step_count_ = t; }

  private:
    std::vector<Var<S>> params_;
    std::vector<Buffer<S>> m_, v_;
    AdamConfig cfg_;
    std::int64_t step_count_ = 0;
};

// Central-difference check. `f` re-evaluates the scalar objective at the
// current parameter values; the analytic gradients are read from the params'
// grad buffers, so run forward+backward once before calling. Returns the max
// over sampled coordinates of
//   |analytic - (f(p+eps) - f(p-eps)) / (2 eps)| / max(1, |analytic|).
double gradient_check(const std::function<double()> &f, const std::vector<Var<double>> &params,
                      double eps = 1e-5, int max_coords_per_tensor = 50, std::uint64_t seed = 0);

extern template class Tape<float>;
extern template class Tape<double>;
extern template class Adam<float>;
extern template class Adam<double>;

extern template Var<float> make_param<float>(int, int, std::vector<float>);
extern template Var<double> make_param<double>(int, int, std::vector<double>);
extern template Var<float> make_const<float>(int, int, std::vector<float>);
extern template Var<double> make_const<double>(int, int, std::vector<double>);
extern template Var<float> make_zeros<float>(int, int, bool);
extern template Var<double> make_zeros<double>(int, int, bool);

}  // namespace d2s::ad

#include "d2s/tensor.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <utility>

#include "d2s/rng.hpp"

namespace d2s::ad {

namespace {

template <typename S>
using EigenMap = Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename S>
using EigenCMap =
    Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

template <typename S>
EigenMap<S> map(Node<S> &n) {
    return EigenMap<S>(n.data(), n.rows, n.cols);
}
template <typename S>
EigenCMap<S> cmap(const Node<S> &n) {
    return EigenCMap<S>(n.data(), n.rows, n.cols);
}
template <typename S>
EigenMap<S> gmap(Node<S> &n) {
    return EigenMap<S>(n.grad.data(), n.rows, n.cols);
}

template <typename S>
void check_same_shape(const char *op, const Node<S> &a, const Node<S> &b) {
    if (a.rows != b.rows || a.cols != b.cols)
        throw ShapeMismatch(op, a.rows, a.cols, b.rows, b.cols);
}

// Fixed-order column sums of src's grad into dst's 1 x C grad row. Written as
// an explicit loop: reduction order must not depend on the evaluator.
template <typename S>
void accumulate_column_sums(const Node<S> &src, Node<S> &dst) {
    const S *g = src.grad.data();
    S *gb = dst.grad.data();
    for (int r = 0; r < src.rows; ++r) {
        const S *row = g + static_cast<std::size_t>(r) * src.cols;
        for (int c = 0; c < src.cols; ++c) gb[c] += row[c];
    }
}

}  // namespace

template <typename S>
Var<S> make_param(int rows, int cols, std::vector<S> values) {
    if (static_cast<int>(values.size()) != rows * cols)
        throw ShapeMismatch("make_param", rows, cols, static_cast<int>(values.size()), 1);
    auto n = std::make_shared<Node<S>>();
    n->rows = rows;
    n->cols = cols;
    n->val = std::make_shared<Buffer<S>>(values.begin(), values.end());
    n->requires_grad = true;
    n->grad.assign(static_cast<std::size_t>(rows) * cols, S(0));
    return n;
}

template <typename S>
Var<S> make_const(int rows, int cols, std::vector<S> values) {
    if (static_cast<int>(values.size()) != rows * cols)
        throw ShapeMismatch("make_const", rows, cols, static_cast<int>(values.size()), 1);
    auto n = std::make_shared<Node<S>>();
    n->rows = rows;
    n->cols = cols;
    n->val = std::make_shared<Buffer<S>>(values.begin(), values.end());
    n->requires_grad = false;
    return n;
}

template <typename S>
Var<S> make_zeros(int rows, int cols, bool requires_grad) {
    auto n = std::make_shared<Node<S>>();
    n->rows = rows;
    n->cols = cols;
    n->val = std::make_shared<Buffer<S>>(static_cast<std::size_t>(rows) * cols, S(0));
    n->requires_grad = requires_grad;
    if (requires_grad) n->grad.assign(static_cast<std::size_t>(rows) * cols, S(0));
    return n;
}

template <typename S>
Var<S> Tape<S>::out_like(int rows, int cols, bool requires_grad) {
    return make_zeros<S>(rows, cols, requires_grad);
}

template <typename S>
Var<S> Tape<S>::matmul(const Var<S> &a, const Var<S> &b) {
    if (a->cols != b->rows) throw ShapeMismatch("matmul", a->rows, a->cols, b->rows, b->cols);
    auto out = out_like(a->rows, b->cols, a->requires_grad || b->requires_grad);
    map(*out).noalias() = cmap(*a) * cmap(*b);
    if (out->requires_grad)
        record([a, b, out] {
            if (a->requires_grad) gmap(*a).noalias() += gmap(*out) * cmap(*b).transpose();
            if (b->requires_grad) gmap(*b).noalias() += cmap(*a).transpose() * gmap(*out);
        });
    return out;
}

template <typename S>
Var<S> Tape<S>::matmul_nt(const Var<S> &a, const Var<S> &b) {
    if (a->cols != b->cols) throw ShapeMismatch("matmul_nt", a->rows, a->cols, b->rows, b->cols);
    auto out = out_like(a->rows, b->rows, a->requires_grad || b->requires_grad);
    map(*out).noalias() = cmap(*a) * cmap(*b).transpose();
    if (out->requires_grad)
        record([a, b, out] {
            if (a->requires_grad) gmap(*a).noalias() += gmap(*out) * cmap(*b);
            if (b->requires_grad) gmap(*b).noalias() += gmap(*out).transpose() * cmap(*a);
        });
    return out;
}

template <typename S>
Var<S> Tape<S>::linear(const Var<S> &x, const Var<S> &w, const Var<S> &b) {
    if (x->cols != w->rows) throw ShapeMismatch("linear", x->rows, x->cols, w->rows, w->cols);
    if (b->rows != 1 || b->cols != w->cols)
        throw ShapeMismatch("linear.bias", 1, w->cols, b->rows, b->cols);
    auto out = out_like(x->rows, w->cols, x->requires_grad || w->requires_grad || b->requires_grad);
    map(*out).noalias() = cmap(*x) * cmap(*w);
    map(*out).rowwise() += cmap(*b).row(0);
    if (out->requires_grad)
        record([x, w, b, out] {
            if (x->requires_grad) gmap(*x).noalias() += gmap(*out) * cmap(*w).transpose();
            if (w->requires_grad) gmap(*w).noalias() += cmap(*x).transpose() * gmap(*out);
            if (b->requires_grad) accumulate_column_sums(*out, *b);
        });
    return out;
}

template <typename S>
Var<S> Tape<S>::add(const Var<S> &a, const Var<S> &b) {
    const bool row_broadcast = (b->rows == 1 && a->rows != 1 && b->cols == a->cols);
    if (!row_broadcast) check_same_shape("add", *a, *b);
    auto out = out_like(a->rows, a->cols, a->requires_grad || b->requires_grad);
    if (row_broadcast)
        map(*out) = cmap(*a).rowwise() + cmap(*b).row(0);
    else
        map(*out) = cmap(*a) + cmap(*b);
    if (out->requires_grad)
        record([a, b, out, row_broadcast] {
            if (a->requires_grad) gmap(*a) += gmap(*out);
            if (b->requires_grad) {
                if (row_broadcast)
                    accumulate_column_sums(*out, *b);
                else
                    gmap(*b) += gmap(*out);
            }
        });
    return out;
}

template <typename S>
Var<S> Tape<S>::sub(const Var<S> &a, const Var<S> &b) {
    check_same_shape("sub", *a, *b);
    auto out = out_like(a->rows, a->cols, a->requires_grad || b->requires_grad);
    map(*out) = cmap(*a) - cmap(*b);
    if (out->requires_grad)
        record([a, b, out] {
            if (a->requires_grad) gmap(*a) += gmap(*out);
            if (b->requires_grad) gmap(*b) -= gmap(*out);
        });
    return out;
}

template <typename S>
Var<S> Tape<S>::mul(const Var<S> &a, const Var<S> &b) {
    const bool col_broadcast = (b->cols == 1 && a->cols != 1 && b->rows == a->rows);
    if (!col_broadcast) check_same_shape("mul", *a, *b);
    auto out = out_like(a->rows, a->cols, a->requires_grad || b->requires_grad);
    if (col_broadcast)
        map(*out) = cmap(*a).array().colwise() * cmap(*b).col(0).array();
    else
        map(*out) = cmap(*a).cwiseProduct(cmap(*b));
    if (out->requires_grad)
        record([a, b, out, col_broadcast] {
            if (col_broadcast) {
                if (a->requires_grad)
                    gmap(*a).array() += gmap(*out).array().colwise() * cmap(*b).col(0).array();
                if (b->requires_grad) {
                    // fixed-order per-row dot products
                    const S *g = out->grad.data();
                    const S *av = a->data();
                    for (int r = 0; r < out->rows; ++r) {
                        S acc = S(0);
                        const std::size_t base = static_cast<std::size_t>(r) * out->cols;
                        for (int c = 0; c < out->cols; ++c) acc += g[base + c] * av[base + c];
                        b->grad[r] += acc;
                    }
                }
            } else {
                if (a->requires_grad) gmap(*a) += gmap(*out).cwiseProduct(cmap(*b));
                if (b->requires_grad) gmap(*b) += gmap(*out).cwiseProduct(cmap(*a));
            }
        });
    return out;
}

template <typename S>
Var<S> Tape<S>::div(const Var<S> &a, const Var<S> &b) {
    check_same_shape("div", *a, *b);
    auto out = out_like(a->rows, a->cols, a->requires_grad || b->requires_grad);
    map(*out) = cmap(*a).cwiseQuotient(cmap(*b));
    if (out->requires_grad)
        record([a, b, out] {
            if (a->requires_grad) gmap(*a) += gmap(*out).cwiseQuotient(cmap(*b));
            if (b->requires_grad)
                gmap(*b).array() -=
                    gmap(*out).array() * cmap(*a).array() / (cmap(*b).array() * cmap(*b).array());
        });
    return out;
}

template <typename S>
Var<S> Tape<S>::scale(const Var<S> &a, S c) {
    auto out = out_like(a->rows, a->cols, a->requires_grad);
    map(*out) = cmap(*a) * c;
    if (out->requires_grad)
        record([a, out, c] { gmap(*a) += gmap(*out) * c; });
    return out;
}

template <typename S>
Var<S> Tape<S>::add_scalar(const Var<S> &a, S c) {
    auto out = out_like(a->rows, a->cols, a->requires_grad);
    map(*out) = cmap(*a).array() + c;
    if (out->requires_grad)
        record([a, out] { gmap(*a) += gmap(*out); });
    return out;
}

template <typename S>
Var<S> Tape<S>::reciprocal(const Var<S> &a) {
    auto out = out_like(a->rows, a->cols, a->requires_grad);
    map(*out) = cmap(*a).array().inverse();
    if (out->requires_grad)
        record([a, out] {
            gmap(*a).array() -= gmap(*out).array() * cmap(*out).array() * cmap(*out).array();
        });
    return out;
}

template <typename S>
Var<S> Tape<S>::square(const Var<S> &a) {
    auto out = out_like(a->rows, a->cols, a->requires_grad);
    map(*out) = cmap(*a).array().square();
    if (out->requires_grad)
        record([a, out] { gmap(*a).array() += gmap(*out).array() * S(2) * cmap(*a).array(); });
    return out;
}

template <typename S>
Var<S> Tape<S>::abs_smooth(const Var<S> &a, S delta) {
    auto out = out_like(a->rows, a->cols, a->requires_grad);
    map(*out) = (cmap(*a).array().square() + delta * delta).sqrt();
    if (out->requires_grad)
        record([a, out] {
            gmap(*a).array() += gmap(*out).array() * cmap(*a).array() / cmap(*out).array();
        });
    return out;
}

template <typename S>
Var<S> Tape<S>::relu(const Var<S> &a) {
    auto out = out_like(a->rows, a->cols, a->requires_grad);
    map(*out) = cmap(*a).cwiseMax(S(0));
    if (out->requires_grad)
        record([a, out] {
            gmap(*a).array() +=
                gmap(*out).array() * (cmap(*a).array() > S(0)).template cast<S>();
        });
    return out;
}

template <typename S>
Var<S> Tape<S>::softmax_rows(const Var<S> &a) {
    auto out = out_like(a->rows, a->cols, a->requires_grad);
    const S *src = a->data();
    S *dst = out->data();
    for (int i = 0; i < a->rows; ++i) {
        const S *row = src + static_cast<std::size_t>(i) * a->cols;
        S *orow = dst + static_cast<std::size_t>(i) * a->cols;
        S mx = row[0];
        for (int j = 1; j < a->cols; ++j) mx = std::max(mx, row[j]);
        S total = S(0);
        for (int j = 0; j < a->cols; ++j) {
            orow[j] = std::exp(row[j] - mx);
            total += orow[j];
        }
        for (int j = 0; j < a->cols; ++j) orow[j] /= total;
    }
    if (out->requires_grad)
        record([a, out] {
            // d x_ij = y_ij * (g_ij - sum_k g_ik y_ik)
            for (int i = 0; i < a->rows; ++i) {
                const S *y = out->data() + static_cast<std::size_t>(i) * a->cols;
                const S *g = out->grad.data() + static_cast<std::size_t>(i) * a->cols;
                S *gx = a->grad.data() + static_cast<std::size_t>(i) * a->cols;
                S dot = S(0);
                for (int j = 0; j < a->cols; ++j) dot += g[j] * y[j];
                for (int j = 0; j < a->cols; ++j) gx[j] += y[j] * (g[j] - dot);
            }
        });
    return out;
}

template <typename S>
Var<S> Tape<S>::concat_cols(const Var<S> &a, const Var<S> &b) {
    if (a->rows != b->rows) throw ShapeMismatch("concat_cols", a->rows, a->cols, b->rows, b->cols);
    auto out = out_like(a->rows, a->cols + b->cols, a->requires_grad || b->requires_grad);
    map(*out).leftCols(a->cols) = cmap(*a);
    map(*out).rightCols(b->cols) = cmap(*b);
    if (out->requires_grad)
        record([a, b, out] {
            if (a->requires_grad) gmap(*a) += gmap(*out).leftCols(a->cols);
            if (b->requires_grad) gmap(*b) += gmap(*out).rightCols(b->cols);
        });
    return out;
}

template <typename S>
Var<S> Tape<S>::slice_cols(const Var<S> &a, int col_begin, int col_end) {
    if (col_begin < 0 || col_end > a->cols || col_begin >= col_end)
        throw ShapeMismatch("slice_cols", a->rows, a->cols, col_begin, col_end);
    const int w = col_end - col_begin;
    auto out = out_like(a->rows, w, a->requires_grad);
    map(*out) = cmap(*a).middleCols(col_begin, w);
    if (out->requires_grad)
        record([a, out, col_begin, w] { gmap(*a).middleCols(col_begin, w) += gmap(*out); });
    return out;
}

template <typename S>
Var<S> Tape<S>::sum(const Var<S> &a) {
    auto out = out_like(1, 1, a->requires_grad);
    const S *src = a->data();
    S total = S(0);
    for (int i = 0; i < a->size(); ++i) total += src[i];
    (*out->val)[0] = total;
    if (out->requires_grad)
        record([a, out] { gmap(*a).array() += out->grad[0]; });
    return out;
}

template <typename S>
Var<S> Tape<S>::mean(const Var<S> &a) {
    auto s = sum(a);
    return scale(s, S(1) / static_cast<S>(a->size()));
}

template <typename S>
void Tape<S>::backward(const Var<S> &loss) {
    if (loss->rows != 1 || loss->cols != 1) throw NonScalarLoss(loss->rows, loss->cols);
    if (!loss->requires_grad)
        throw Error("backward: loss does not depend on any trainable parameter");
    loss->grad[0] = S(1);
    for (auto it = records_.rbegin(); it != records_.rend(); ++it) it->backprop();
}

template <typename S>
Adam<S>::Adam(std::vector<Var<S>> params, AdamConfig cfg)
    : params_(std::move(params)), cfg_(cfg) {
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (const auto &p : params_) {
        m_.emplace_back(p->size(), S(0));
        v_.emplace_back(p->size(), S(0));
    }
}

template <typename S>
void Adam<S>::zero_grad() {
    for (auto &p : params_) std::fill(p->grad.begin(), p->grad.end(), S(0));
}

template <typename S>
void Adam<S>::step(double lr) {
    ++step_count_;
    const S b1 = static_cast<S>(cfg_.beta1);
    const S b2 = static_cast<S>(cfg_.beta2);
    const S eps = static_cast<S>(cfg_.eps);
    const S c1 = static_cast<S>(1.0 - std::pow(cfg_.beta1, static_cast<double>(step_count_)));
    const S c2 = static_cast<S>(1.0 - std::pow(cfg_.beta2, static_cast<double>(step_count_)));
    const S rate = static_cast<S>(lr);
    for (std::size_t k = 0; k < params_.size(); ++k) {
        Node<S> &p = *params_[k];
        S *m = m_[k].data();
        S *v = v_[k].data();
        S *val = p.data();
        const S *g = p.grad.data();
        const int n = p.size();
        for (int i = 0; i < n; ++i) {
            m[i] = b1 * m[i] + (S(1) - b1) * g[i];
            v[i] = b2 * v[i] + (S(1) - b2) * g[i] * g[i];
            const S mhat = m[i] / c1;
            const S vhat = v[i] / c2;
            val[i] -= rate * mhat / (std::sqrt(vhat) + eps);
        }
    }
}

double gradient_check(const std::function<double()> &f, const std::vector<Var<double>> &params,
                      double eps, int max_coords_per_tensor, std::uint64_t seed) {
    Rng rng(Rng::mix(seed, 0x67726164));
    double worst = 0.0;
    for (const auto &p : params) {
        const int n = p->size();
        std::vector<int> coords;
        if (n <= max_coords_per_tensor) {
            coords.resize(n);
            for (int i = 0; i < n; ++i) coords[i] = i;
        } else {
            coords.reserve(max_coords_per_tensor);
            for (int i = 0; i < max_coords_per_tensor; ++i)
                coords.push_back(static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(n))));
        }
        for (int idx : coords) {
            double &slot = (*p->val)[idx];
            const double saved = slot;
            slot = saved + eps;
            const double up = f();
            slot = saved - eps;
            const double dn = f();
            slot = saved;
            const double numeric = (up - dn) / (2.0 * eps);
            const double analytic = p->grad[idx];
            const double rel =
                std::abs(analytic - numeric) / std::max(1.0, std::abs(analytic));
            worst = std::max(worst, rel);
        }
    }
    return worst;
}

template class Tape<float>;
template class Tape<double>;
template class Adam<float>;
template class Adam<double>;

template Var<float> make_param<float>(int, int, std::vector<float>);
template Var<double> make_param<double>(int, int, std::vector<double>);
template Var<float> make_const<float>(int, int, std::vector<float>);
template Var<double> make_const<double>(int, int, std::vector<double>);
template Var<float> make_zeros<float>(int, int, bool);
template Var<double> make_zeros<double>(int, int, bool);

}  // namespace d2s::ad

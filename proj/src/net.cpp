#include "d2s/net.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

#include "d2s/rng.hpp"

namespace d2s {

void Architecture::validate() const {
    if (descriptor_dim <= 0) throw BadConfig("descriptor_dim must be positive");
    if (num_layers < 0) throw BadConfig("num_layers must be >= 0");
    if (num_heads <= 0) throw BadConfig("num_heads must be positive");
    if (descriptor_dim % num_heads != 0)
        throw BadConfig("descriptor_dim " + std::to_string(descriptor_dim) +
                        " not divisible by num_heads " + std::to_string(num_heads));
    if (head_mlp_widths.empty()) throw BadConfig("head_mlp_widths must be non-empty");
    for (int w : head_mlp_widths)
        if (w <= 0) throw BadConfig("head_mlp_widths entries must be positive");
    if (head_mlp_widths.back() != 4)
        throw BadConfig("final head width must be 4 (x, y, z, p)");
    if (!(beta > 0.0)) throw BadConfig("beta must be positive");
}

Architecture full_scale_architecture() {
    Architecture a;
    a.descriptor_dim = 256;
    a.num_layers = 5;
    a.num_heads = 4;
    a.head_mlp_widths = {512, 1024, 1024, 512, 4};
    return a;
}

template <typename S>
std::vector<std::pair<std::string, ad::Var<S>>> ModelParamsT<S>::named_parameters() const {
    std::vector<std::pair<std::string, ad::Var<S>>> out;
    for (std::size_t l = 0; l < layers.size(); ++l) {
        const auto &lp = layers[l];
        const std::string base = "layers." + std::to_string(l) + ".";
        for (std::size_t h = 0; h < lp.wq.size(); ++h) {
            const std::string hb = base + "heads." + std::to_string(h) + ".";
            out.emplace_back(hb + "wq", lp.wq[h]);
            out.emplace_back(hb + "bq", lp.bq[h]);
            out.emplace_back(hb + "wk", lp.wk[h]);
            out.emplace_back(hb + "bk", lp.bk[h]);
            out.emplace_back(hb + "wv", lp.wv[h]);
            out.emplace_back(hb + "bv", lp.bv[h]);
        }
        out.emplace_back(base + "merge", lp.merge);
        out.emplace_back(base + "msg_w1", lp.msg_w1);
        out.emplace_back(base + "msg_b1", lp.msg_b1);
        out.emplace_back(base + "msg_w2", lp.msg_w2);
    }
    for (std::size_t i = 0; i < head.w.size(); ++i) {
        const std::string base = "head." + std::to_string(i) + ".";
        out.emplace_back(base + "w", head.w[i]);
        out.emplace_back(base + "b", head.b[i]);
    }
    return out;
}

template <typename S>
std::vector<ad::Var<S>> ModelParamsT<S>::parameters() const {
    std::vector<ad::Var<S>> out;
    for (auto &[name, var] : named_parameters()) out.push_back(var);
    return out;
}

template <typename S>
std::int64_t ModelParamsT<S>::parameter_count() const {
    std::int64_t n = 0;
    for (const auto &p : parameters()) n += p->size();
    return n;
}

std::vector<TensorShape> parameter_shapes(const Architecture &arch) {
    arch.validate();
    std::vector<TensorShape> out;
    const int d = arch.descriptor_dim;
    const int hd = arch.head_dim();
    for (int l = 0; l < arch.num_layers; ++l) {
        const std::string base = "layers." + std::to_string(l) + ".";
        for (int h = 0; h < arch.num_heads; ++h) {
            const std::string hb = base + "heads." + std::to_string(h) + ".";
            out.push_back({hb + "wq", d, hd});
            out.push_back({hb + "bq", 1, hd});
            out.push_back({hb + "wk", d, hd});
            out.push_back({hb + "bk", 1, hd});
            out.push_back({hb + "wv", d, hd});
            out.push_back({hb + "bv", 1, hd});
        }
        out.push_back({base + "merge", d, d});
        out.push_back({base + "msg_w1", 2 * d, 2 * d});
        out.push_back({base + "msg_b1", 1, 2 * d});
        out.push_back({base + "msg_w2", 2 * d, d});
    }
    int prev = d;
    for (std::size_t i = 0; i < arch.head_mlp_widths.size(); ++i) {
        const int w = arch.head_mlp_widths[i];
        const std::string base = "head." + std::to_string(i) + ".";
        out.push_back({base + "w", prev, w});
        out.push_back({base + "b", 1, w});
        prev = w;
    }
    return out;
}

namespace {

// fan_in = input dimension = number of rows of a right-multiplied weight.
template <typename S>
ad::Var<S> init_weight(Rng &rng, int rows, int cols) {
    const double bound = std::sqrt(6.0 / rows);
    std::vector<S> v(static_cast<std::size_t>(rows) * cols);
    for (auto &x : v) x = static_cast<S>(rng.uniform(-bound, bound));
    return ad::make_param<S>(rows, cols, std::move(v));
}

template <typename S>
ad::Var<S> init_bias(int cols) {
    return ad::make_param<S>(1, cols, std::vector<S>(cols, S(0)));
}

}  // namespace

template <typename S>
ModelParamsT<S> init_params(const Architecture &arch, std::uint64_t seed) {
    arch.validate();
    Rng rng(Rng::mix(seed, 0x696e6974));
    ModelParamsT<S> p;
    p.arch = arch;
    const int d = arch.descriptor_dim;
    const int hd = arch.head_dim();
    p.layers.resize(arch.num_layers);
    for (auto &lp : p.layers) {
        for (int h = 0; h < arch.num_heads; ++h) {
            lp.wq.push_back(init_weight<S>(rng, d, hd));
            lp.bq.push_back(init_bias<S>(hd));
            lp.wk.push_back(init_weight<S>(rng, d, hd));
            lp.bk.push_back(init_bias<S>(hd));
            lp.wv.push_back(init_weight<S>(rng, d, hd));
            lp.bv.push_back(init_bias<S>(hd));
        }
        lp.merge = init_weight<S>(rng, d, d);
        lp.msg_w1 = init_weight<S>(rng, 2 * d, 2 * d);
        lp.msg_b1 = init_bias<S>(2 * d);
        lp.msg_w2 = init_weight<S>(rng, 2 * d, d);
    }
    int prev = d;
    for (int w : arch.head_mlp_widths) {
        p.head.w.push_back(init_weight<S>(rng, prev, w));
        p.head.b.push_back(init_bias<S>(w));
        prev = w;
    }
    return p;
}

template <typename To, typename From>
ModelParamsT<To> cast_params(const ModelParamsT<From> &src) {
    auto convert = [](const ad::Var<From> &v) {
        std::vector<To> vals(v->val->begin(), v->val->end());
        return ad::make_param<To>(v->rows, v->cols, std::move(vals));
    };
    ModelParamsT<To> out;
    out.arch = src.arch;
    for (const auto &lp : src.layers) {
        AttentionLayerParamsT<To> o;
        for (std::size_t h = 0; h < lp.wq.size(); ++h) {
            o.wq.push_back(convert(lp.wq[h]));
            o.bq.push_back(convert(lp.bq[h]));
            o.wk.push_back(convert(lp.wk[h]));
            o.bk.push_back(convert(lp.bk[h]));
            o.wv.push_back(convert(lp.wv[h]));
            o.bv.push_back(convert(lp.bv[h]));
        }
        o.merge = convert(lp.merge);
        o.msg_w1 = convert(lp.msg_w1);
        o.msg_b1 = convert(lp.msg_b1);
        o.msg_w2 = convert(lp.msg_w2);
        out.layers.push_back(std::move(o));
    }
    for (std::size_t i = 0; i < src.head.w.size(); ++i) {
        out.head.w.push_back(convert(src.head.w[i]));
        out.head.b.push_back(convert(src.head.b[i]));
    }
    return out;
}

namespace {

// x_i + MLP([x_i || sum_j alpha_ij v_j]), multi-head with concat + merge.
template <typename S>
ad::Var<S> attention_layer(ad::Tape<S> &t, const ad::Var<S> &x,
                           const AttentionLayerParamsT<S> &lp, int head_dim,
                           std::vector<ad::Var<S>> *attention_rows) {
    const S inv_sqrt_d = static_cast<S>(1.0 / std::sqrt(static_cast<double>(head_dim)));
    ad::Var<S> heads;
    for (std::size_t h = 0; h < lp.wq.size(); ++h) {
        auto q = t.linear(x, lp.wq[h], lp.bq[h]);
        auto k = t.linear(x, lp.wk[h], lp.bk[h]);
        auto v = t.linear(x, lp.wv[h], lp.bv[h]);
        auto alpha = t.softmax_rows(t.scale(t.matmul_nt(q, k), inv_sqrt_d));
        if (attention_rows) attention_rows->push_back(alpha);
        auto msg = t.matmul(alpha, v);
        heads = heads ? t.concat_cols(heads, msg) : msg;
    }
    auto merged = t.matmul(heads, lp.merge);
    auto cat = t.concat_cols(x, merged);
    auto hidden = t.relu(t.linear(cat, lp.msg_w1, lp.msg_b1));
    return t.add(x, t.matmul(hidden, lp.msg_w2));
}

}  // namespace

template <typename S>
ForwardResult<S> forward_on_tape(ad::Tape<S> &tape, const ad::Var<S> &x,
                                 const ModelParamsT<S> &params,
                                 std::vector<ad::Var<S>> *attention_rows) {
    if (x->cols != params.arch.descriptor_dim)
        throw DimensionMismatch("forward: input width " + std::to_string(x->cols) +
                                " != descriptor_dim " +
                                std::to_string(params.arch.descriptor_dim));
    ad::Var<S> h = x;
    for (const auto &lp : params.layers)
        h = attention_layer(tape, h, lp, params.arch.head_dim(), attention_rows);
    const std::size_t n = params.head.w.size();
    for (std::size_t i = 0; i + 1 < n; ++i)
        h = tape.relu(tape.linear(h, params.head.w[i], params.head.b[i]));
    auto out = tape.linear(h, params.head.w[n - 1], params.head.b[n - 1]);

    ForwardResult<S> r;
    r.coords = tape.slice_cols(out, 0, 3);
    r.raw_p = tape.slice_cols(out, 3, 4);
    auto scaled = tape.scale(r.raw_p, static_cast<S>(params.arch.beta));
    r.reliability = tape.reciprocal(tape.add_scalar(tape.abs_smooth(scaled), S(1)));
    return r;
}

double reliability(double raw_p, double beta) { return 1.0 / (1.0 + std::abs(beta * raw_p)); }

std::vector<int> canonical_row_order(const MatrixRMf &descriptors) {
    const int k = static_cast<int>(descriptors.rows());
    const std::size_t row_bytes = descriptors.cols() * sizeof(float);
    std::vector<int> order(k);
    std::iota(order.begin(), order.end(), 0);
    const float *base = descriptors.data();
    const auto cols = descriptors.cols();
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        int c = std::memcmp(base + static_cast<std::ptrdiff_t>(a) * cols,
                            base + static_cast<std::ptrdiff_t>(b) * cols, row_bytes);
        return c != 0 ? c < 0 : a < b;
    });
    return order;
}

SceneCoordinateSet predict(const ModelParams &params, const DescriptorSet &input) {
    const int k = input.count();
    if (k < 1) throw EmptyDataset("predict: descriptor set is empty");
    std::vector<int> order = canonical_row_order(input.descriptors);

    std::vector<float> sorted(static_cast<std::size_t>(k) * input.dim());
    for (int i = 0; i < k; ++i)
        std::memcpy(sorted.data() + static_cast<std::size_t>(i) * input.dim(),
                    input.descriptors.row(order[i]).data(), input.dim() * sizeof(float));

    ad::Tape<float> tape;
    auto x = ad::make_const<float>(k, input.dim(), std::move(sorted));
    auto fwd = forward_on_tape(tape, x, params);

    SceneCoordinateSet out;
    out.coords.resize(k, 3);
    out.raw_p.resize(k);
    out.reliability.resize(k);
    const float beta = static_cast<float>(params.arch.beta);
    for (int i = 0; i < k; ++i) {
        const int dst = order[i];
        for (int c = 0; c < 3; ++c) out.coords(dst, c) = (*fwd.coords->val)[i * 3 + c];
        const float p = (*fwd.raw_p->val)[i];
        out.raw_p(dst) = p;
        out.reliability(dst) = 1.0f / (1.0f + std::abs(beta * p));
    }
    return out;
}

template struct ModelParamsT<float>;
template struct ModelParamsT<double>;
template ModelParamsT<float> init_params<float>(const Architecture &, std::uint64_t);
template ModelParamsT<double> init_params<double>(const Architecture &, std::uint64_t);
template ModelParamsT<double> cast_params<double, float>(const ModelParamsT<float> &);
template ModelParamsT<float> cast_params<float, double>(const ModelParamsT<double> &);
template ModelParamsT<float> cast_params<float, float>(const ModelParamsT<float> &);
template ModelParamsT<double> cast_params<double, double>(const ModelParamsT<double> &);
template ForwardResult<float> forward_on_tape<float>(ad::Tape<float> &, const ad::Var<float> &,
                                                     const ModelParamsT<float> &,
                                                     std::vector<ad::Var<float>> *);
template ForwardResult<double> forward_on_tape<double>(ad::Tape<double> &, const ad::Var<double> &,
                                                       const ModelParamsT<double> &,
                                                       std::vector<ad::Var<double>> *);

}  // namespace d2s

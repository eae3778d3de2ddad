#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "d2s/error.hpp"
#include "d2s/tensor.hpp"

namespace d2s {

using MatrixRMf = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Set of local descriptors with their keypoint pixel locations.
struct DescriptorSet {
    MatrixRMf descriptors;  // K x D
    MatrixRMf keypoints;    // K x 2 (u, v)

    int count() const { return static_cast<int>(descriptors.rows()); }
    int dim() const { return static_cast<int>(descriptors.cols()); }
};

// Per-descriptor regression output: world coordinate, raw reliability logit,
// and the mapped reliability 1 / (1 + |beta * p|).
struct SceneCoordinateSet {
    MatrixRMf coords;           // K x 3
    Eigen::VectorXf raw_p;      // K
    Eigen::VectorXf reliability;  // K, in (0, 1]
};

struct Architecture {
    int descriptor_dim = 64;             // D
    int num_layers = 2;                  // L, residual attention layers
    int num_heads = 4;                   // H
    std::vector<int> head_mlp_widths = {128, 256, 256, 128, 4};
    double beta = 100.0;

    int head_dim() const { return descriptor_dim / num_heads; }
    // Throws BadConfig on inconsistent settings (e.g. D not divisible by H,
    // final head width != 4).
    void validate() const;

    bool operator==(const Architecture &) const = default;
};

// D=256 descriptors, L=5 layers, head MLP (512, 1024, 1024, 512, 4).
Architecture full_scale_architecture();

struct TensorShape {
    std::string name;
    int rows = 0;
    int cols = 0;

    bool operator==(const TensorShape &) const = default;
};

// Name and shape of every trainable tensor, in named_parameters() order,
// without allocating a model. Lets file readers validate a checkpoint index
// before committing any parameter memory.
std::vector<TensorShape> parameter_shapes(const Architecture &arch);

template <typename S>
struct AttentionLayerParamsT {
    std::vector<ad::Var<S>> wq, bq, wk, bk, wv, bv;  // per head: D x d, 1 x d
    ad::Var<S> merge;                                // D x D, no bias
    ad::Var<S> msg_w1, msg_b1;                       // 2D x 2D, 1 x 2D
    ad::Var<S> msg_w2;                               // 2D x D, no bias
};

template <typename S>
struct HeadMlpParamsT {
    std::vector<ad::Var<S>> w, b;
};

// All trainable tensors. The order of named_parameters() is fixed and is the
// order used for seeded initialization and checkpoint serialization.
template <typename S>
struct ModelParamsT {
    Architecture arch;
    std::vector<AttentionLayerParamsT<S>> layers;
    HeadMlpParamsT<S> head;

    std::vector<std::pair<std::string, ad::Var<S>>> named_parameters() const;
    std::vector<ad::Var<S>> parameters() const;
    std::int64_t parameter_count() const;
};

using ModelParams = ModelParamsT<float>;

// Kaiming-style fan-in uniform weights (bound sqrt(6 / fan_in)), zero biases.
// The RNG is consumed in named_parameters() order, so a seed pins every value.
template <typename S>
ModelParamsT<S> init_params(const Architecture &arch, std::uint64_t seed);

template <typename To, typename From>
ModelParamsT<To> cast_params(const ModelParamsT<From> &src);

template <typename S>
struct ForwardResult {
    ad::Var<S> coords;       // K x 3
    ad::Var<S> raw_p;        // K x 1
    ad::Var<S> reliability;  // K x 1, smooth-|.| variant (differentiable)
};

// Runs L attention layers then the shared row-wise head MLP on the tape.
// `attention_rows`, when non-null, receives each layer/head's K x K attention
// matrix. Throws DimensionMismatch when x's width differs from the params'.
template <typename S>
ForwardResult<S> forward_on_tape(ad::Tape<S> &tape, const ad::Var<S> &x,
                                 const ModelParamsT<S> &params,
                                 std::vector<ad::Var<S>> *attention_rows = nullptr);

// Eq-2 mapping for a single logit, exact |.|.
double reliability(double raw_p, double beta);

// Indices that sort descriptor rows into a canonical (bytewise lexicographic)
// order; ties broken by original index.
std::vector<int> canonical_row_order(const MatrixRMf &descriptors);

// Inference entry point. Rows are canonically reordered before the forward
// pass and the outputs un-permuted, which makes predict exactly permutation
// equivariant: permuting input rows permutes outputs bitwise identically.
SceneCoordinateSet predict(const ModelParams &params, const DescriptorSet &input);

extern template struct ModelParamsT<float>;
extern template struct ModelParamsT<double>;
extern template ModelParamsT<float> init_params<float>(const Architecture &, std::uint64_t);
extern template ModelParamsT<double> init_params<double>(const Architecture &, std::uint64_t);
extern template ModelParamsT<double> cast_params<double, float>(const ModelParamsT<float> &);
extern template ModelParamsT<float> cast_params<float, double>(const ModelParamsT<double> &);
extern template ModelParamsT<float> cast_params<float, float>(const ModelParamsT<float> &);
extern template ModelParamsT<double> cast_params<double, double>(const ModelParamsT<double> &);
extern template ForwardResult<float> forward_on_tape<float>(ad::Tape<float> &,
                                                            const ad::Var<float> &,
                                                            const ModelParamsT<float> &,
                                                            std::vector<ad::Var<float>> *);
extern template ForwardResult<double> forward_on_tape<double>(ad::Tape<double> &,
                                                              const ad::Var<double> &,
                                                              const ModelParamsT<double> &,
                                                              std::vector<ad::Var<double>> *);

}  // namespace d2s

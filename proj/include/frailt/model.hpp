#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "frailt/autograd.hpp"
#include "frailt/config.hpp"
#include "frailt/ops.hpp"

namespace frailt {

// Parameters of one pre-norm decoder block. Projections use the x @ W
// convention: wq..wo are [d, d], w_gate/w_up are [d, h], w_down is [h, d].
template <class T>
struct BlockParams {
    T attn_norm;
    T wq;
    T wk;
    T wv;
    T wo;
    T mlp_norm;
    T w_gate;
    T w_up;
    T w_down;
};

template <class T>
struct GroupParams {
    std::vector<BlockParams<T>> blocks;
    // One [M, d] table per block; row m-1 is the encoding for iteration m.
    // Empty for standard models.
    std::vector<T> iteration_encodings;
};

template <class T>
struct ModelParams {
    T token_embedding;  // [V, d]
    std::vector<GroupParams<T>> groups;
    T final_norm;  // [d]
    T output;      // [d, V]
};

using BlockWeights = BlockParams<Tensor>;
using GroupWeights = GroupParams<Tensor>;
using ModelWeights = ModelParams<Tensor>;
using BoundWeights = ModelParams<Var>;

/// Visits every parameter in canonical order with its checkpoint name.
/// This order defines parameter indices everywhere (optimizer moments,
/// checkpoints, gradient buffers).
template <class P, class F>
void visit_parameters(P& params, F&& f) {
    f(std::string("tok_embedding"), params.token_embedding);
    for (std::size_t g = 0; g < params.groups.size(); ++g) {
        auto& group = params.groups[g];
        for (std::size_t l = 0; l < group.blocks.size(); ++l) {
            auto& b = group.blocks[l];
            const std::string prefix = "groups." + std::to_string(g) + ".blocks." + std::to_string(l) + ".";
            f(prefix + "attn_norm", b.attn_norm);
            f(prefix + "wq", b.wq);
            f(prefix + "wk", b.wk);
            f(prefix + "wv", b.wv);
            f(prefix + "wo", b.wo);
            f(prefix + "mlp_norm", b.mlp_norm);
            f(prefix + "w_gate", b.w_gate);
            f(prefix + "w_up", b.w_up);
            f(prefix + "w_down", b.w_down);
            if (l < group.iteration_encodings.size()) {
                f(prefix + "iter_encoding", group.iteration_encodings[l]);
            }
        }
    }
    f(std::string("final_norm"), params.final_norm);
    f(std::string("output"), params.output);
}

struct TensorCount {
    std::string name;
    Shape shape;
    std::size_t count = 0;
};

struct ParamCount {
    std::vector<TensorCount> tensors;
    std::size_t total = 0;
    std::size_t iteration_encodings = 0;
};

ParamCount param_count(const ModelConfig& config);

// Zero-filled weights with the shapes param_count describes.
ModelWeights zero_weights(const ModelConfig& config);

// Matrices ~ N(0, init_std^2), norm weights 1, iteration encodings 0.
// Draws follow visit_parameters order from one stream, so a standard and a
// FraiLT config with the same block layout start from identical blocks.
ModelWeights init_weights(const ModelConfig& config, std::uint64_t seed, double init_std = 0.02);

// Throws ConfigError when tensor names or shapes disagree with param_count.
void check_weights(const ModelConfig& config, const ModelWeights& weights);

std::vector<std::pair<std::string, Tensor*>> named_parameters(ModelWeights& weights);
std::vector<std::pair<std::string, const Tensor*>> named_parameters(const ModelWeights& weights);

// Empty parameter set with the same group/block layout as `like`.
template <class U, class T>
ModelParams<U> same_layout(const ModelParams<T>& like) {
    ModelParams<U> out;
    out.groups.resize(like.groups.size());
    for (std::size_t g = 0; g < like.groups.size(); ++g) {
        out.groups[g].blocks.resize(like.groups[g].blocks.size());
        out.groups[g].iteration_encodings.resize(like.groups[g].iteration_encodings.size());
    }
    return out;
}

// Converts every tensor to another scalar type (for precision oracles).
template <class U, class T>
ModelParams<BasicTensor<U>> cast_weights(const ModelParams<BasicTensor<T>>& weights) {
    std::vector<const BasicTensor<T>*> src;
    visit_parameters(weights, [&](const std::string&, const BasicTensor<T>& t) { src.push_back(&t); });
    auto out = same_layout<BasicTensor<U>>(weights);
    std::size_t i = 0;
    visit_parameters(out, [&](const std::string&, BasicTensor<U>& t) { t = src[i++]->template cast<U>(); });
    return out;
}

// Places every tensor on the tape as a parameter leaf.
template <class T>
ModelParams<BasicVar<T>> bind(BasicTape<T>& tape, const ModelParams<BasicTensor<T>>& weights) {
    std::vector<const BasicTensor<T>*> tensors;
    visit_parameters(weights, [&](const std::string&, const BasicTensor<T>& t) { tensors.push_back(&t); });
    auto bound = same_layout<BasicVar<T>>(weights);
    std::size_t i = 0;
    visit_parameters(bound, [&](const std::string&, BasicVar<T>& v) { v = tape.parameter(*tensors[i++]); });
    return bound;
}

struct BlockApplication {
    std::size_t group = 0;
    std::size_t block = 0;
    std::size_t iteration = 0;  // 1-based
    bool operator==(const BlockApplication&) const = default;
};
using ForwardTrace = std::vector<BlockApplication>;

// x + E_l(m), broadcast over positions. `iteration` is 1-based.
template <class T>
BasicVar<T> apply_iteration_encoding(BasicVar<T> x, BasicVar<T> table, std::size_t iteration);

// Pre-norm causal multi-head attention with rotary positions, then a
// pre-norm SwiGLU MLP; both branches are residual.
template <class T>
BasicVar<T> block_forward(BasicVar<T> x, const BlockParams<BasicVar<T>>& w, const ModelConfig& config,
                          const ops::RopeCache& rope);

// X^(m,l) = B_l(X^(m,l-1) + E_l(m)) for m = 1..M, l = 1..L. Standard
// groups skip the encoding.
template <class T>
BasicVar<T> group_forward(BasicVar<T> x, const GroupParams<BasicVar<T>>& w, const GroupSpec& spec,
                          const ModelConfig& config, const ops::RopeCache& rope, std::size_t group_index = 0,
                          ForwardTrace* trace = nullptr);

/// Decoder-only language model: embedding, groups in order, final norm,
/// output projection. Returns logits; softmax belongs to the loss/sampler.
class Model {
public:
    explicit Model(ModelConfig config);

    const ModelConfig& config() const noexcept { return config_; }
    const ops::RopeCache& rope() const noexcept { return rope_; }

    // Instantiated for float and double.
    template <class T>
    BasicVar<T> forward(BasicTape<T>& tape, const ModelParams<BasicVar<T>>& weights, std::span<const TokenId> tokens,
                        ForwardTrace* trace = nullptr) const;

    // Inference-only logits [T, V].
    Tensor logits(const ModelWeights& weights, std::span<const TokenId> tokens) const;

private:
    ModelConfig config_;
    ops::RopeCache rope_;
};

}  // namespace frailt

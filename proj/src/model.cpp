#include "frailt/model.hpp"

#include <cmath>

#include "frailt/error.hpp"
#include "frailt/rng.hpp"

namespace frailt {
namespace {

struct ShapeBuilder {
    const ModelConfig& config;

    ModelParams<Shape> build() const {
        const std::size_t d = config.embedding_dim;
        const std::size_t h = config.hidden_dim();
        const std::size_t V = config.vocab_size;
        ModelParams<Shape> shapes;
        shapes.token_embedding = {V, d};
        for (const GroupSpec& spec : config.groups) {
            GroupParams<Shape> group;
            for (std::size_t l = 0; l < spec.n_blocks; ++l) {
                group.blocks.push_back({{d}, {d, d}, {d, d}, {d, d}, {d, d}, {d}, {d, h}, {d, h}, {h, d}});
                if (config.kind == ArchitectureKind::frailt) {
                    group.iteration_encodings.push_back({spec.n_iterations, d});
                }
            }
            shapes.groups.push_back(std::move(group));
        }
        shapes.final_norm = {d};
        shapes.output = {d, V};
        return shapes;
    }
};

template <class F>
ModelWeights make_weights(const ModelConfig& config, F&& fill) {
    config.validate();
    ModelParams<Shape> shapes = ShapeBuilder{config}.build();
    ModelWeights weights;
    weights.groups.resize(shapes.groups.size());
    for (std::size_t g = 0; g < shapes.groups.size(); ++g) {
        weights.groups[g].blocks.resize(shapes.groups[g].blocks.size());
        weights.groups[g].iteration_encodings.resize(shapes.groups[g].iteration_encodings.size());
    }
    std::vector<Shape*> shape_list;
    visit_parameters(shapes, [&](const std::string&, Shape& s) { shape_list.push_back(&s); });
    std::size_t i = 0;
    visit_parameters(weights, [&](const std::string& name, Tensor& t) {
        t = Tensor(*shape_list[i++]);
        fill(name, t);
    });
    return weights;
}

bool ends_with(const std::string& s, std::string_view suffix) {
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

}  // namespace

ParamCount param_count(const ModelConfig& config) {
    config.validate();
    ModelParams<Shape> shapes = ShapeBuilder{config}.build();
    ParamCount out;
    visit_parameters(shapes, [&](const std::string& name, Shape& s) {
        const std::size_t n = shape_numel(s);
        out.tensors.push_back({name, s, n});
        out.total += n;
        if (ends_with(name, ".iter_encoding")) {
            out.iteration_encodings += n;
        }
    });
    return out;
}

ModelWeights zero_weights(const ModelConfig& config) {
    return make_weights(config, [](const std::string&, Tensor&) {});
}

ModelWeights init_weights(const ModelConfig& config, std::uint64_t seed, double init_std) {
    Rng rng(seed);
    return make_weights(config, [&](const std::string& name, Tensor& t) {
        if (ends_with(name, "norm")) {
            for (float& v : t.data()) {
                v = 1.0f;
            }
        } else if (ends_with(name, ".iter_encoding")) {
            // zero: FraiLT starts as a plain weight-shared recursion
        } else {
            for (float& v : t.data()) {
                v = static_cast<float>(rng.normal() * init_std);
            }
        }
    });
}

void check_weights(const ModelConfig& config, const ModelWeights& weights) {
    const ParamCount expected = param_count(config);
    const auto actual = named_parameters(weights);
    if (actual.size() != expected.tensors.size()) {
        throw ConfigError("weights hold " + std::to_string(actual.size()) + " tensors, config expects " +
                          std::to_string(expected.tensors.size()));
    }
    for (std::size_t i = 0; i < actual.size(); ++i) {
        if (actual[i].first != expected.tensors[i].name || actual[i].second->shape() != expected.tensors[i].shape) {
            throw ConfigError("tensor " + actual[i].first + " " + shape_to_string(actual[i].second->shape()) +
                              " does not match expected " + expected.tensors[i].name + " " +
                              shape_to_string(expected.tensors[i].shape));
        }
    }
}

std::vector<std::pair<std::string, Tensor*>> named_parameters(ModelWeights& weights) {
    std::vector<std::pair<std::string, Tensor*>> out;
    visit_parameters(weights, [&](const std::string& name, Tensor& t) { out.emplace_back(name, &t); });
    return out;
}

std::vector<std::pair<std::string, const Tensor*>> named_parameters(const ModelWeights& weights) {
    std::vector<std::pair<std::string, const Tensor*>> out;
    visit_parameters(weights, [&](const std::string& name, const Tensor& t) { out.emplace_back(name, &t); });
    return out;
}

template <class T>
BasicVar<T> apply_iteration_encoding(BasicVar<T> x, BasicVar<T> table, std::size_t iteration) {
    const BasicTensor<T>& t = table.value();
    if (t.rank() != 2 || iteration < 1 || iteration > t.dim(0)) {
        throw IndexError("iteration " + std::to_string(iteration) + " outside [1, " +
                         std::to_string(t.rank() == 2 ? t.dim(0) : 0) + "]");
    }
    return ops::add_row(x, ops::select_row(table, iteration - 1));
}

template <class T>
BasicVar<T> block_forward(BasicVar<T> x, const BlockParams<BasicVar<T>>& w, const ModelConfig& config,
                          const ops::RopeCache& rope) {
    using Var = BasicVar<T>;
    const BasicTensor<T>& X = x.value();
    if (X.rank() != 2 || X.dim(1) != config.embedding_dim) {
        throw DimensionError("block input " + shape_to_string(X.shape()) + " is not [T, " +
                             std::to_string(config.embedding_dim) + "]");
    }
    if (X.dim(0) > config.context_length) {
        throw DimensionError("block input has " + std::to_string(X.dim(0)) + " positions, context is " +
                             std::to_string(config.context_length));
    }
    Var h = ops::rms_norm(x, w.attn_norm);
    Var q = ops::rope(ops::matmul(h, w.wq), config.n_heads, rope);
    Var k = ops::rope(ops::matmul(h, w.wk), config.n_heads, rope);
    Var v = ops::matmul(h, w.wv);
    Var attn = ops::causal_attention(q, k, v, config.n_heads);
    x = ops::add(x, ops::matmul(attn, w.wo));

    Var h2 = ops::rms_norm(x, w.mlp_norm);
    Var gated = ops::mul(ops::silu(ops::matmul(h2, w.w_gate)), ops::matmul(h2, w.w_up));
    return ops::add(x, ops::matmul(gated, w.w_down));
}

template <class T>
BasicVar<T> group_forward(BasicVar<T> x, const GroupParams<BasicVar<T>>& w, const GroupSpec& spec,
                          const ModelConfig& config, const ops::RopeCache& rope, std::size_t group_index,
                          ForwardTrace* trace) {
    if (w.blocks.size() != spec.n_blocks) {
        throw DimensionError("group " + std::to_string(group_index) + " has " + std::to_string(w.blocks.size()) +
                             " blocks, spec says " + std::to_string(spec.n_blocks));
    }
    const bool encoded = config.kind == ArchitectureKind::frailt;
    if (encoded && w.iteration_encodings.size() != spec.n_blocks) {
        throw DimensionError("group " + std::to_string(group_index) + " is missing iteration encodings");
    }
    for (std::size_t m = 1; m <= spec.n_iterations; ++m) {
        for (std::size_t l = 0; l < spec.n_blocks; ++l) {
            if (encoded) {
                x = apply_iteration_encoding(x, w.iteration_encodings[l], m);
            }
            x = block_forward(x, w.blocks[l], config, rope);
            if (trace != nullptr) {
                trace->push_back({group_index, l, m});
            }
        }
    }
    return x;
}

Model::Model(ModelConfig config)
    : config_((config.validate(), std::move(config))),
      rope_(ops::RopeCache::build(config_.head_dim(), config_.context_length)) {}

template <class T>
BasicVar<T> Model::forward(BasicTape<T>& tape, const ModelParams<BasicVar<T>>& weights,
                           std::span<const TokenId> tokens, ForwardTrace* trace) const {
    if (tokens.empty()) {
        throw DimensionError("model_forward: empty token sequence");
    }
    if (tokens.size() > config_.context_length) {
        throw DimensionError("model_forward: " + std::to_string(tokens.size()) + " tokens exceed context length " +
                             std::to_string(config_.context_length));
    }
    for (TokenId t : tokens) {
        if (t < 0 || static_cast<std::size_t>(t) >= config_.vocab_size) {
            throw VocabError("token id " + std::to_string(t) + " outside vocabulary of " +
                             std::to_string(config_.vocab_size));
        }
    }
    if (weights.groups.size() != config_.groups.size()) {
        throw DimensionError("weights have " + std::to_string(weights.groups.size()) + " groups, config has " +
                             std::to_string(config_.groups.size()));
    }
    if (weights.token_embedding.tape != &tape) {
        throw EvaluationError("model_forward: weights are bound to a different tape");
    }
    BasicVar<T> x = ops::embedding(weights.token_embedding, tokens);
    for (std::size_t g = 0; g < config_.groups.size(); ++g) {
        x = group_forward(x, weights.groups[g], config_.groups[g], config_, rope_, g, trace);
    }
    x = ops::rms_norm(x, weights.final_norm);
    return ops::matmul(x, weights.output);
}

Tensor Model::logits(const ModelWeights& weights, std::span<const TokenId> tokens) const {
    Tape tape(false);
    BoundWeights bound = bind(tape, weights);
    return forward(tape, bound, tokens).value();
}

#define FRAILT_MODEL_INSTANTIATE(T)                                                                         \
    template BasicVar<T> apply_iteration_encoding(BasicVar<T>, BasicVar<T>, std::size_t);                  \
    template BasicVar<T> block_forward(BasicVar<T>, const BlockParams<BasicVar<T>>&, const ModelConfig&,   \
                                       const ops::RopeCache&);                                             \
    template BasicVar<T> group_forward(BasicVar<T>, const GroupParams<BasicVar<T>>&, const GroupSpec&,     \
                                       const ModelConfig&, const ops::RopeCache&, std::size_t, ForwardTrace*); \
    template BasicVar<T> Model::forward(BasicTape<T>&, const ModelParams<BasicVar<T>>&,                    \
                                        std::span<const TokenId>, ForwardTrace*) const;

FRAILT_MODEL_INSTANTIATE(float)
FRAILT_MODEL_INSTANTIATE(double)

}  // namespace frailt

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "frailt/data.hpp"
#include "frailt/model.hpp"

namespace frailt {

struct TrainConfig {
    double peak_lr = 5e-4;
    std::size_t warmup_steps = 100;
    std::size_t total_steps = 1000;
    std::size_t batch_size = 8;
    double weight_decay = 0.1;
    double grad_clip = 1.0;
    std::size_t eval_interval = 50;
    std::uint64_t seed = 7;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double adam_eps = 1e-8;
    double final_lr_fraction = 0.1;
    // Sequences of one batch run on this many threads. Gradients are summed
    // in batch order regardless, so results do not depend on it.
    std::size_t threads = 1;

    // Throws ConfigError naming the offending field.
    void validate() const;

    bool operator==(const TrainConfig&) const = default;
};

void to_json(nlohmann::json& j, const TrainConfig& config);
void from_json(const nlohmann::json& j, TrainConfig& config);

// Linear warmup 0 -> peak over warmup_steps, then cosine down to
// peak * final_lr_fraction at total_steps. Update number s (1-based) uses
// lr_at(s), so the first update already moves the weights.
double lr_at(std::size_t step, const TrainConfig& config);

// Matmul weights and the output projection decay; norms, iteration
// encodings and the token embedding do not.
bool decays(const std::string& parameter_name);

struct LossRecord {
    std::size_t step = 0;
    double train_loss = 0.0;
    std::optional<double> val_loss;

    bool operator==(const LossRecord&) const = default;
};

struct TrainingState {
    std::uint64_t step = 0;  // updates applied so far
    std::vector<Tensor> first_moment;
    std::vector<Tensor> second_moment;
    std::uint64_t rng_state = 0;
    std::vector<LossRecord> history;

    bool operator==(const TrainingState&) const;
};

// Zero moments shaped like `weights`, step 0.
TrainingState initial_state(const ModelWeights& weights, std::uint64_t seed);

using GradientBuffers = std::vector<std::vector<float>>;

// Scales all buffers in place so their joint L2 norm is at most max_norm.
// Returns the norm before clipping.
double clip_gradients(GradientBuffers& grads, double max_norm);

// One AdamW update with decoupled decay (PyTorch order: p -= lr*wd*p, then
// the Adam step). Advances state.step.
void adamw_update(ModelWeights& weights, const GradientBuffers& grads, TrainingState& state, double lr,
                  const TrainConfig& config);

struct LossAndGrads {
    double loss = 0.0;  // mean over sequences of per-sequence mean NLL
    GradientBuffers grads;  // averaged over the batch, canonical parameter order
};

LossAndGrads batch_gradients(const Model& model, const ModelWeights& weights, const Batch& batch,
                             std::size_t threads = 1);

struct StepResult {
    double loss = 0.0;
    double grad_norm = 0.0;  // before clipping
    double lr = 0.0;
};

// Forward, cross-entropy, backward, clip, AdamW at lr_at(state.step + 1).
// Throws TrainingError with the step and batch digest on a non-finite loss
// or gradient.
StepResult train_step(const Model& model, ModelWeights& weights, TrainingState& state, const Batch& batch,
                      const TrainConfig& config);

// Token-weighted mean NLL over all windows; weights are not touched.
// Throws DataError when there are no windows.
double evaluate_validation_loss(const Model& model, const ModelWeights& weights, std::span<const Sequence> windows,
                                std::size_t threads = 1);

struct TrainingData {
    std::vector<Sequence> train;
    std::vector<Sequence> validation;
    std::string corpus_digest;
};

TrainingData prepare_data(const Corpus& corpus, const Vocab& vocab, std::size_t context_length);

/// Drives one model through a TrainConfig. Batches depend only on
/// (seed, step), so a trainer rebuilt from a checkpoint continues exactly
/// where the original left off.
class Trainer {
public:
    using Callback = std::function<void(const LossRecord&)>;

    Trainer(ModelConfig model_config, TrainConfig train_config, ModelWeights weights, const TrainingData& data);
    Trainer(ModelConfig model_config, TrainConfig train_config, ModelWeights weights, TrainingState state,
            const TrainingData& data);

    // One update; records train loss, plus val loss on eval_interval
    // multiples and the final step.
    LossRecord step();
    // Steps until state.step == until (default: total_steps).
    void run(std::optional<std::size_t> until = std::nullopt, const Callback& on_record = {});
    double validation_loss() const;

    const Model& model() const noexcept { return model_; }
    const TrainConfig& train_config() const noexcept { return train_config_; }
    const ModelWeights& weights() const noexcept { return weights_; }
    const TrainingState& state() const noexcept { return state_; }

private:
    Model model_;
    TrainConfig train_config_;
    ModelWeights weights_;
    TrainingState state_;
    const TrainingData* data_;
    BatchStream batches_;
};

// Loss history as "step,train_loss,val_loss"; missing val losses are empty.
std::string history_csv(std::span<const LossRecord> history);

// Digest of every parameter's bytes in canonical order.
std::string weights_digest(const ModelWeights& weights);

// Standard layers over FraiLT blocks; BudgetError when they do not divide,
// listing nearby valid pairs.
std::size_t equalize_budget(std::size_t standard_layers, std::size_t frailt_blocks);

}  // namespace frailt

#include "frailt/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numbers>
#include <sstream>
#include <thread>

#include "frailt/digest.hpp"
#include "frailt/error.hpp"

namespace frailt {
namespace {

bool finite(double x) { return std::isfinite(x); }

template <class F>
void parallel_for(std::size_t n, std::size_t threads, F&& f) {
    threads = std::clamp<std::size_t>(threads, 1, n);
    if (threads == 1) {
        for (std::size_t i = 0; i < n; ++i) {
            f(i);
        }
        return;
    }
    std::vector<std::exception_ptr> errors(threads);
    {
        std::vector<std::jthread> pool;
        for (std::size_t t = 0; t < threads; ++t) {
            pool.emplace_back([&, t] {
                try {
                    for (std::size_t i = t; i < n; i += threads) {
                        f(i);
                    }
                } catch (...) {
                    errors[t] = std::current_exception();
                }
            });
        }
    }
    for (const auto& e : errors) {
        if (e) {
            std::rethrow_exception(e);
        }
    }
}

struct SequenceResult {
    double loss = 0.0;
    GradientBuffers grads;
};

SequenceResult sequence_gradients(const Model& model, const ModelWeights& weights, const Sequence& seq) {
    Tape tape;
    const BoundWeights bound = bind(tape, weights);
    const Var loss = ops::cross_entropy(model.forward(tape, bound, seq.inputs), seq.targets);
    tape.backward(loss);
    SequenceResult out;
    out.loss = tape.scalar(loss);
    visit_parameters(bound, [&](const std::string&, const Var& v) {
        const auto g = tape.grad(v);
        if (g.empty()) {
            out.grads.emplace_back(v.value().numel(), 0.0f);
        } else {
            out.grads.emplace_back(g.begin(), g.end());
        }
    });
    return out;
}

}  // namespace

void TrainConfig::validate() const {
    auto positive = [](double v, const char* field) {
        if (!(v > 0.0) || !finite(v)) {
            throw ConfigError(std::string(field) + ": must be positive");
        }
    };
    if (!(peak_lr >= 0.0) || !finite(peak_lr)) {
        throw ConfigError("peak_lr: must be a non-negative number");
    }
    if (total_steps == 0) {
        throw ConfigError("total_steps: must be positive");
    }
    if (warmup_steps > total_steps) {
        throw ConfigError("warmup_steps: " + std::to_string(warmup_steps) + " exceeds total_steps " +
                          std::to_string(total_steps));
    }
    if (batch_size == 0) {
        throw ConfigError("batch_size: must be positive");
    }
    if (eval_interval == 0) {
        throw ConfigError("eval_interval: must be positive");
    }
    if (threads == 0) {
        throw ConfigError("threads: must be positive");
    }
    if (!(weight_decay >= 0.0) || !finite(weight_decay)) {
        throw ConfigError("weight_decay: must be non-negative");
    }
    positive(grad_clip, "grad_clip");
    positive(adam_eps, "adam_eps");
    if (!(beta1 >= 0.0 && beta1 < 1.0)) {
        throw ConfigError("beta1: must lie in [0, 1)");
    }
    if (!(beta2 >= 0.0 && beta2 < 1.0)) {
        throw ConfigError("beta2: must lie in [0, 1)");
    }
    if (!(final_lr_fraction >= 0.0 && final_lr_fraction <= 1.0)) {
        throw ConfigError("final_lr_fraction: must lie in [0, 1]");
    }
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = {{"peak_lr", c.peak_lr},
         {"warmup_steps", c.warmup_steps},
         {"total_steps", c.total_steps},
         {"batch_size", c.batch_size},
         {"weight_decay", c.weight_decay},
         {"grad_clip", c.grad_clip},
         {"eval_interval", c.eval_interval},
         {"seed", c.seed},
         {"beta1", c.beta1},
         {"beta2", c.beta2},
         {"adam_eps", c.adam_eps},
         {"final_lr_fraction", c.final_lr_fraction},
         {"threads", c.threads}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
    if (!j.is_object()) {
        throw ConfigError("train: expected an object");
    }
    TrainConfig out;
    for (const auto& [key, value] : j.items()) {
        auto number = [&](double& field) {
            if (!value.is_number()) {
                throw ConfigError("train." + key + ": expected a number");
            }
            field = value.get<double>();
        };
        auto count = [&](auto& field) {
            if (!value.is_number_integer() || value.get<std::int64_t>() < 0) {
                throw ConfigError("train." + key + ": expected a non-negative integer");
            }
            field = value.get<std::remove_reference_t<decltype(field)>>();
        };
        if (key == "peak_lr") number(out.peak_lr);
        else if (key == "warmup_steps") count(out.warmup_steps);
        else if (key == "total_steps") count(out.total_steps);
        else if (key == "batch_size") count(out.batch_size);
        else if (key == "weight_decay") number(out.weight_decay);
        else if (key == "grad_clip") number(out.grad_clip);
        else if (key == "eval_interval") count(out.eval_interval);
        else if (key == "seed") count(out.seed);
        else if (key == "beta1") number(out.beta1);
        else if (key == "beta2") number(out.beta2);
        else if (key == "adam_eps") number(out.adam_eps);
        else if (key == "final_lr_fraction") number(out.final_lr_fraction);
        else if (key == "threads") count(out.threads);
        else throw ConfigError("train." + key + ": unknown field");
    }
    c = out;
}

double lr_at(std::size_t step, const TrainConfig& c) {
    if (step > c.total_steps) {
        throw ConfigError("lr_at: step " + std::to_string(step) + " beyond total_steps " +
                          std::to_string(c.total_steps));
    }
    if (step < c.warmup_steps) {
        return c.peak_lr * static_cast<double>(step) / static_cast<double>(c.warmup_steps);
    }
    const std::size_t decay_steps = c.total_steps - c.warmup_steps;
    if (decay_steps == 0) {
        return c.peak_lr;
    }
    const double progress = static_cast<double>(step - c.warmup_steps) / static_cast<double>(decay_steps);
    const double floor = c.peak_lr * c.final_lr_fraction;
    return floor + (c.peak_lr - floor) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

bool decays(const std::string& name) {
    if (name == "output") {
        return true;
    }
    static constexpr std::string_view kMatrices[] = {".wq", ".wk", ".wv", ".wo", ".w_gate", ".w_up", ".w_down"};
    return std::any_of(std::begin(kMatrices), std::end(kMatrices), [&](std::string_view s) { return name.ends_with(s); });
}

bool TrainingState::operator==(const TrainingState& o) const {
    auto same = [](const std::vector<Tensor>& a, const std::vector<Tensor>& b) {
        if (a.size() != b.size()) {
            return false;
        }
        for (std::size_t i = 0; i < a.size(); ++i) {
            if (a[i].shape() != b[i].shape() || !a[i].same_values(b[i])) {
                return false;
            }
        }
        return true;
    };
    auto same_history = [](const std::vector<LossRecord>& a, const std::vector<LossRecord>& b) {
        if (a.size() != b.size()) {
            return false;
        }
        for (std::size_t i = 0; i < a.size(); ++i) {
            // Bitwise, so NaN losses compare equal to themselves.
            if (a[i].step != b[i].step || std::memcmp(&a[i].train_loss, &b[i].train_loss, sizeof(double)) != 0 ||
                a[i].val_loss.has_value() != b[i].val_loss.has_value() ||
                (a[i].val_loss && std::memcmp(&*a[i].val_loss, &*b[i].val_loss, sizeof(double)) != 0)) {
                return false;
            }
        }
        return true;
    };
    return step == o.step && rng_state == o.rng_state && same(first_moment, o.first_moment) &&
           same(second_moment, o.second_moment) && same_history(history, o.history);
}

TrainingState initial_state(const ModelWeights& weights, std::uint64_t seed) {
    TrainingState s;
    visit_parameters(weights, [&](const std::string&, const Tensor& t) {
        s.first_moment.push_back(Tensor::zeros(t.shape()));
        s.second_moment.push_back(Tensor::zeros(t.shape()));
    });
    s.rng_state = seed;
    return s;
}

double clip_gradients(GradientBuffers& grads, double max_norm) {
    double sq = 0.0;
    for (const auto& g : grads) {
        for (float v : g) {
            sq += static_cast<double>(v) * v;
        }
    }
    const double norm = std::sqrt(sq);
    if (norm > max_norm) {
        const double scale = max_norm / norm;
        for (auto& g : grads) {
            for (float& v : g) {
                v = static_cast<float>(v * scale);
            }
        }
    }
    return norm;
}

void adamw_update(ModelWeights& weights, const GradientBuffers& grads, TrainingState& state, double lr,
                  const TrainConfig& c) {
    const auto params = named_parameters(weights);
    if (grads.size() != params.size() || state.first_moment.size() != params.size() ||
        state.second_moment.size() != params.size()) {
        throw DimensionError("adamw_update: " + std::to_string(params.size()) + " parameters, " +
                             std::to_string(grads.size()) + " gradients, " + std::to_string(state.first_moment.size()) +
                             " moments");
    }
    const double t = static_cast<double>(state.step + 1);
    const double bc1 = 1.0 - std::pow(c.beta1, t);
    const double bc2 = 1.0 - std::pow(c.beta2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto p = params[i].second->data();
        auto m = state.first_moment[i].data();
        auto v = state.second_moment[i].data();
        const auto& g = grads[i];
        if (g.size() != p.size() || m.size() != p.size() || v.size() != p.size()) {
            throw DimensionError("adamw_update: size mismatch for " + params[i].first);
        }
        const double wd = decays(params[i].first) ? c.weight_decay : 0.0;
        for (std::size_t k = 0; k < p.size(); ++k) {
            const double gk = g[k];
            const double mk = c.beta1 * m[k] + (1.0 - c.beta1) * gk;
            const double vk = c.beta2 * v[k] + (1.0 - c.beta2) * gk * gk;
            m[k] = static_cast<float>(mk);
            v[k] = static_cast<float>(vk);
            double pk = p[k];
            if (wd != 0.0) {
                pk -= lr * wd * pk;
            }
            pk -= lr * (mk / bc1) / (std::sqrt(vk / bc2) + c.adam_eps);
            p[k] = static_cast<float>(pk);
        }
    }
    ++state.step;
}

LossAndGrads batch_gradients(const Model& model, const ModelWeights& weights, const Batch& batch,
                             std::size_t threads) {
    if (batch.empty()) {
        throw DataError("empty batch");
    }
    std::vector<SequenceResult> results(batch.size());
    parallel_for(batch.size(), threads,
                 [&](std::size_t i) { results[i] = sequence_gradients(model, weights, batch[i]); });
    LossAndGrads out;
    out.grads = std::move(results[0].grads);
    out.loss = results[0].loss;
    for (std::size_t b = 1; b < results.size(); ++b) {
        out.loss += results[b].loss;
        for (std::size_t i = 0; i < out.grads.size(); ++i) {
            auto& acc = out.grads[i];
            const auto& g = results[b].grads[i];
            for (std::size_t k = 0; k < acc.size(); ++k) {
                acc[k] += g[k];
            }
        }
    }
    const double inv = 1.0 / static_cast<double>(batch.size());
    out.loss *= inv;
    for (auto& g : out.grads) {
        for (float& v : g) {
            v = static_cast<float>(v * inv);
        }
    }
    return out;
}

StepResult train_step(const Model& model, ModelWeights& weights, TrainingState& state, const Batch& batch,
                      const TrainConfig& config) {
    LossAndGrads lg = batch_gradients(model, weights, batch, config.threads);
    auto fail = [&](const std::string& what) {
        throw TrainingError(what + " at step " + std::to_string(state.step + 1) + " (batch " +
                            BatchStream::digest(batch) + ")");
    };
    if (!finite(lg.loss)) {
        fail("non-finite loss " + std::to_string(lg.loss));
    }
    StepResult r;
    r.loss = lg.loss;
    r.grad_norm = clip_gradients(lg.grads, config.grad_clip);
    if (!finite(r.grad_norm)) {
        fail("non-finite gradient norm");
    }
    r.lr = lr_at(std::min<std::size_t>(state.step + 1, config.total_steps), config);
    adamw_update(weights, lg.grads, state, r.lr, config);
    return r;
}

double evaluate_validation_loss(const Model& model, const ModelWeights& weights, std::span<const Sequence> windows,
                                std::size_t threads) {
    if (windows.empty()) {
        throw DataError("validation set has no windows");
    }
    std::vector<double> nll(windows.size());
    std::vector<std::size_t> tokens(windows.size());
    parallel_for(windows.size(), threads, [&](std::size_t i) {
        Tape tape(false);
        const BoundWeights bound = bind(tape, weights);
        const Var loss = ops::cross_entropy(model.forward(tape, bound, windows[i].inputs), windows[i].targets);
        tokens[i] = windows[i].targets.size();
        nll[i] = tape.scalar(loss) * static_cast<double>(tokens[i]);
    });
    double total = 0.0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < windows.size(); ++i) {
        total += nll[i];
        count += tokens[i];
    }
    return total / static_cast<double>(count);
}

TrainingData prepare_data(const Corpus& corpus, const Vocab& vocab, std::size_t context_length) {
    TrainingData d;
    d.train = make_windows(token_stream(vocab, corpus.train()), context_length);
    d.validation = make_windows(token_stream(vocab, corpus.validation()), context_length);
    d.corpus_digest = corpus.digest;
    return d;
}

Trainer::Trainer(ModelConfig model_config, TrainConfig train_config, ModelWeights weights, const TrainingData& data)
    : Trainer(model_config, train_config, std::move(weights), initial_state(ModelWeights{}, train_config.seed), data) {
    state_ = initial_state(weights_, train_config_.seed);
}

Trainer::Trainer(ModelConfig model_config, TrainConfig train_config, ModelWeights weights, TrainingState state,
                 const TrainingData& data)
    : model_(std::move(model_config)),
      train_config_(train_config),
      weights_(std::move(weights)),
      state_(std::move(state)),
      data_(&data),
      batches_(data.train, train_config.batch_size, train_config.seed) {
    train_config_.validate();
    check_weights(model_.config(), weights_);
    if (!data.train.empty() && data.train.front().inputs.size() > model_.config().context_length) {
        throw ConfigError("context_length: windows of " + std::to_string(data.train.front().inputs.size()) +
                          " tokens exceed the model context " + std::to_string(model_.config().context_length));
    }
}

LossRecord Trainer::step() {
    if (state_.step >= train_config_.total_steps) {
        throw TrainingError("training already reached total_steps " + std::to_string(train_config_.total_steps));
    }
    const StepResult r = train_step(model_, weights_, state_, batches_.batch(state_.step), train_config_);
    LossRecord rec{static_cast<std::size_t>(state_.step), r.loss, std::nullopt};
    if (rec.step % train_config_.eval_interval == 0 || rec.step == train_config_.total_steps) {
        rec.val_loss = validation_loss();
    }
    state_.history.push_back(rec);
    return rec;
}

void Trainer::run(std::optional<std::size_t> until, const Callback& on_record) {
    const std::size_t end = std::min(until.value_or(train_config_.total_steps), train_config_.total_steps);
    while (state_.step < end) {
        const LossRecord rec = step();
        if (on_record) {
            on_record(rec);
        }
    }
}

double Trainer::validation_loss() const {
    return evaluate_validation_loss(model_, weights_, data_->validation, train_config_.threads);
}

std::string history_csv(std::span<const LossRecord> history) {
    std::ostringstream out;
    out.precision(9);
    out << "step,train_loss,val_loss\n";
    for (const LossRecord& r : history) {
        out << r.step << ',' << r.train_loss << ',';
        if (r.val_loss) {
            out << *r.val_loss;
        }
        out << '\n';
    }
    return out.str();
}

std::string weights_digest(const ModelWeights& weights) {
    Fnv1a h;
    visit_parameters(weights, [&](const std::string& name, const Tensor& t) {
        h.update(name);
        h.update(std::as_bytes(t.data()));
    });
    return h.hex();
}

std::size_t equalize_budget(std::size_t standard_layers, std::size_t frailt_blocks) {
    if (standard_layers == 0 || frailt_blocks == 0) {
        throw BudgetError("layer and block counts must be positive");
    }
    if (standard_layers % frailt_blocks == 0) {
        return standard_layers / frailt_blocks;
    }
    std::string msg = std::to_string(standard_layers) + " standard layers cannot be split evenly over " +
                      std::to_string(frailt_blocks) + " FraiLT blocks; valid block counts:";
    for (std::size_t b = 1; b <= standard_layers; ++b) {
        if (standard_layers % b == 0) {
            msg += " " + std::to_string(b) + "x" + std::to_string(standard_layers / b);
        }
    }
    const std::size_t lower = standard_layers - standard_layers % frailt_blocks;
    const std::size_t upper = lower + frailt_blocks;
    msg += "; nearest standard depths for " + std::to_string(frailt_blocks) + " blocks:";
    if (lower > 0) {
        msg += " " + std::to_string(lower);
    }
    msg += " " + std::to_string(upper);
    throw BudgetError(msg);
}

}  // namespace frailt

#include "frailt/generator.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "frailt/error.hpp"

namespace frailt {

void SamplerConfig::validate() const {
    if (!std::isfinite(temperature) || temperature < 0.0) {
        throw ConfigError("temperature: must be finite and non-negative");
    }
    if (max_new_tokens < 1) {
        throw ConfigError("max_new_tokens: must be at least 1");
    }
}

void to_json(nlohmann::json& j, const SamplerConfig& c) {
    j = {{"temperature", c.temperature}, {"top_k", c.top_k}, {"max_new_tokens", c.max_new_tokens}, {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, SamplerConfig& c) {
    if (!j.is_object()) {
        throw ConfigError("sampler: expected an object");
    }
    SamplerConfig out;
    for (const auto& [key, value] : j.items()) {
        auto count = [&](auto& field) {
            if (!value.is_number_integer() || value.get<std::int64_t>() < 0) {
                throw ConfigError("sampler." + key + ": expected a non-negative integer");
            }
            field = value.get<std::remove_reference_t<decltype(field)>>();
        };
        if (key == "temperature") {
            if (!value.is_number()) {
                throw ConfigError("sampler.temperature: expected a number");
            }
            out.temperature = value.get<double>();
        } else if (key == "top_k") {
            count(out.top_k);
        } else if (key == "max_new_tokens") {
            count(out.max_new_tokens);
        } else if (key == "seed") {
            count(out.seed);
        } else {
            throw ConfigError("sampler." + key + ": unknown field");
        }
    }
    c = out;
}

TokenId sample_token(std::span<const float> logits, const SamplerConfig& config, Rng& rng, TokenId pad,
                     std::size_t valid_ids) {
    const std::size_t n = std::min(logits.size(), valid_ids);
    std::vector<TokenId> candidates;
    for (std::size_t i = 0; i < n; ++i) {
        if (static_cast<TokenId>(i) != pad && !std::isnan(logits[i])) {
            candidates.push_back(static_cast<TokenId>(i));
        }
    }
    if (candidates.empty()) {
        throw EvaluationError("sample_token: no admissible token");
    }
    auto better = [&](TokenId a, TokenId b) {
        return logits[a] > logits[b] || (logits[a] == logits[b] && a < b);
    };
    if (config.greedy()) {
        return *std::min_element(candidates.begin(), candidates.end(), better);
    }
    if (config.top_k > 0 && config.top_k < candidates.size()) {
        std::nth_element(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(config.top_k - 1),
                         candidates.end(), better);
        candidates.resize(config.top_k);
        std::sort(candidates.begin(), candidates.end());
    }
    double mx = -std::numeric_limits<double>::infinity();
    for (TokenId id : candidates) {
        mx = std::max(mx, logits[id] / config.temperature);
    }
    std::vector<double> weights(candidates.size());
    double total = 0.0;
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        weights[i] = std::exp(logits[candidates[i]] / config.temperature - mx);
        total += weights[i];
    }
    const double target = rng.uniform() * total;
    double running = 0.0;
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        running += weights[i];
        if (running > target) {
            return candidates[i];
        }
    }
    return candidates.back();
}

Generation generate(const Model& model, const ModelWeights& weights, const Vocab& vocab, std::string_view prompt,
                    const SamplerConfig& config) {
    config.validate();
    const std::size_t ctx = model.config().context_length;
    std::vector<TokenId> seq{vocab.specials().bos};
    const std::vector<TokenId> prompt_ids = vocab.encode(prompt);
    if (prompt_ids.size() >= ctx) {
        throw ContextError("prompt is " + std::to_string(prompt_ids.size()) + " tokens; context length is " +
                           std::to_string(ctx));
    }
    seq.insert(seq.end(), prompt_ids.begin(), prompt_ids.end());

    Rng rng(config.seed);
    Generation out;
    const std::size_t valid = std::min(vocab.size(), model.config().vocab_size);
    for (std::size_t i = 0; i < config.max_new_tokens; ++i) {
        const std::size_t start = seq.size() > ctx ? seq.size() - ctx : 0;
        const std::span<const TokenId> window(seq.data() + start, seq.size() - start);
        const Tensor logits = model.logits(weights, window);
        const std::span<const float> last = logits.data().subspan((window.size() - 1) * logits.dim(1), logits.dim(1));
        const TokenId next = sample_token(last, config, rng, vocab.specials().pad, valid);
        if (next == vocab.specials().eos) {
            out.hit_eos = true;
            break;
        }
        out.tokens.push_back(next);
        seq.push_back(next);
    }
    out.text = vocab.decode(out.tokens);
    return out;
}

std::string complete_story(const Model& model, const ModelWeights& weights, const Vocab& vocab,
                           std::string_view beginning, const SamplerConfig& config) {
    if (beginning.empty()) {
        throw ContextError("story beginning is empty");
    }
    const Generation g = generate(model, weights, vocab, beginning, config);
    std::string out(beginning);
    out += kStorySeparator;
    out += g.text;
    return out;
}

std::uint64_t completion_seed(std::uint64_t base_seed, std::size_t prompt_index, std::size_t completion_index) {
    return mix_seed(mix_seed(base_seed, prompt_index), completion_index);
}

}  // namespace frailt

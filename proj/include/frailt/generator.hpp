#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "frailt/model.hpp"
#include "frailt/rng.hpp"
#include "frailt/tokenizer.hpp"

namespace frailt {

struct SamplerConfig {
    double temperature = 1.0;  // 0 selects greedy decoding
    std::size_t top_k = 40;    // 0 disables the restriction
    std::size_t max_new_tokens = 200;
    std::uint64_t seed = 0;

    void validate() const;  // ConfigError
    bool greedy() const noexcept { return temperature == 0.0 || top_k == 1; }
    bool operator==(const SamplerConfig&) const = default;
};

void to_json(nlohmann::json& j, const SamplerConfig& config);
void from_json(const nlohmann::json& j, SamplerConfig& config);

/// Picks the next token from one row of logits.
///
/// Ids that are PAD or at least `valid_ids` are excluded. Greedy mode
/// returns the argmax, lowest id on ties. Otherwise logits are divided by
/// the temperature, restricted to the top_k largest (ties to lower ids),
/// exponentiated relative to their max in double precision, and one
/// rng.uniform() draw u picks the first id, ascending, whose running sum
/// exceeds u times the total.
TokenId sample_token(std::span<const float> logits, const SamplerConfig& config, Rng& rng, TokenId pad,
                     std::size_t valid_ids);

struct Generation {
    std::vector<TokenId> tokens;  // new tokens only, EOS excluded
    std::string text;
    bool hit_eos = false;
};

// Feeds BOS + prompt, then samples until EOS or max_new_tokens. Once the
// sequence fills the context the oldest tokens drop out of the window.
// Throws ContextError when the prompt needs context_length tokens or more.
Generation generate(const Model& model, const ModelWeights& weights, const Vocab& vocab, std::string_view prompt,
                    const SamplerConfig& config);

inline constexpr std::string_view kStorySeparator = "\n***\n";

// beginning + "\n***\n" + completion. Throws ContextError on an empty
// beginning.
std::string complete_story(const Model& model, const ModelWeights& weights, const Vocab& vocab,
                           std::string_view beginning, const SamplerConfig& config);

// Seed for completion `index` of a prompt, so completions differ but each
// is reproducible on its own.
std::uint64_t completion_seed(std::uint64_t base_seed, std::size_t prompt_index, std::size_t completion_index);

}  // namespace frailt

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "frailt/tokenizer.hpp"

namespace frailt {

inline constexpr double kDefaultValidationFraction = 0.05;

/// Stories in file order; the last n_validation of them are held out.
struct Corpus {
    std::vector<std::string> stories;
    std::size_t n_validation = 0;
    std::string digest;  // FNV-1a over length-prefixed stories

    std::size_t n_train() const noexcept { return stories.size() - n_validation; }
    std::span<const std::string> train() const { return std::span(stories).first(n_train()); }
    std::span<const std::string> validation() const { return std::span(stories).last(n_validation); }
};

// Validation split: llround(n * fraction) stories, at least one; at least
// one story stays in training. Throws DataError below two stories.
Corpus make_corpus(std::vector<std::string> stories, double validation_fraction = kDefaultValidationFraction);

// .jsonl: one object per line with a "story" string field. Anything else is
// plain text with stories separated by blank lines.
Corpus load_corpus(const std::filesystem::path& path, double validation_fraction = kDefaultValidationFraction);

std::vector<std::string> split_stories(std::string_view text);

// BOS story EOS for each story, concatenated.
std::vector<TokenId> token_stream(const Vocab& vocab, std::span<const std::string> stories);

struct Sequence {
    std::vector<TokenId> inputs;
    std::vector<TokenId> targets;  // inputs shifted left by one
};

// Windows of context_length + 1 tokens at stride context_length; there are
// (N - 1) / context_length of them. Throws DataError when there are none.
std::vector<Sequence> make_windows(std::span<const TokenId> stream, std::size_t context_length);

using Batch = std::vector<Sequence>;

/// Shuffled training batches. batch(step) depends only on (windows, batch
/// size, seed, step): window order is a fresh Fisher-Yates permutation per
/// epoch drawn from mix_seed(seed, epoch), and step s takes the global
/// sample indices s*B .. s*B+B-1 of that endless sequence of epochs.
class BatchStream {
public:
    BatchStream(std::vector<Sequence> windows, std::size_t batch_size, std::uint64_t seed);

    Batch batch(std::uint64_t step) const;

    std::size_t n_windows() const noexcept { return windows_.size(); }
    std::size_t batch_size() const noexcept { return batch_size_; }
    // FNV-1a of a batch's token ids, for diagnostics.
    static std::string digest(const Batch& batch);

private:
    const std::vector<std::size_t>& permutation(std::uint64_t epoch) const;

    std::vector<Sequence> windows_;
    std::size_t batch_size_;
    std::uint64_t seed_;
    mutable std::map<std::uint64_t, std::vector<std::size_t>> permutations_;
};

}  // namespace frailt

#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "frailt/tensor.hpp"

namespace frailt {

inline constexpr std::size_t kByteTokens = 256;
inline constexpr std::size_t kMaxVocabSize = 512;

struct SpecialIds {
    TokenId bos = 256;
    TokenId eos = 257;
    TokenId pad = 258;
    bool operator==(const SpecialIds&) const = default;
};

inline constexpr std::size_t kSpecialTokens = 3;
inline constexpr std::size_t kFirstMergeId = kByteTokens + kSpecialTokens;

using MergePair = std::pair<TokenId, TokenId>;

/// Byte-level BPE vocabulary. Ids 0..255 are the raw bytes, 256..258 the
/// specials, and every later id is the merge of an earlier pair, in merge
/// order.
class Vocab {
public:
    // 256 byte tokens plus the three specials, no merges.
    Vocab();

    std::size_t size() const noexcept { return tokens_.size(); }
    const SpecialIds& specials() const noexcept { return specials_; }
    bool is_special(TokenId id) const noexcept { return id >= 256 && id < static_cast<TokenId>(kFirstMergeId); }
    const std::vector<MergePair>& merges() const noexcept { return merges_; }

    // Bytes a token decodes to; specials map to "<|bos|>"-style labels.
    const std::string& token_bytes(TokenId id) const;

    // Appends merge (left, right) as the next id.
    TokenId add_merge(TokenId left, TokenId right);

    std::vector<TokenId> encode(std::string_view text) const;
    // Special tokens decode to nothing. Throws VocabError on an unknown id.
    std::string decode(std::span<const TokenId> ids) const;

    nlohmann::json to_json() const;
    static Vocab from_json(const nlohmann::json& j);
    void save(const std::filesystem::path& path) const;
    static Vocab load(const std::filesystem::path& path);

    bool operator==(const Vocab& other) const {
        return tokens_ == other.tokens_ && merges_ == other.merges_ && specials_ == other.specials_;
    }

    // Applies the merges to one whitespace-delimited chunk.
    void encode_chunk(std::string_view chunk, std::vector<TokenId>& out) const;

private:
    std::vector<std::string> tokens_;
    std::vector<MergePair> merges_;
    std::unordered_map<std::uint64_t, TokenId> merge_ids_;
    SpecialIds specials_;
};

// Splits text so that every whitespace byte starts a new chunk: "a cat  sat"
// -> "a", " cat", " ", " sat". Merges never cross chunk boundaries.
std::vector<std::string_view> split_chunks(std::string_view text);

struct BpeResult {
    Vocab vocab;
    // True when the corpus ran out of repeated pairs before target_size.
    bool truncated = false;
};

/// Greedy BPE: repeatedly merges the most frequent adjacent pair, ties going
/// to the smallest (left, right) id pair, until the vocabulary reaches
/// target_size or no pair occurs at least twice.
BpeResult train_bpe(std::span<const std::string> texts, std::size_t target_size = kMaxVocabSize);

std::string base64_encode(std::string_view bytes);
std::string base64_decode(std::string_view text);

}  // namespace frailt

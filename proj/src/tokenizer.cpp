#include "frailt/tokenizer.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>

#include "frailt/error.hpp"

namespace frailt {
namespace {

std::uint64_t pair_key(TokenId a, TokenId b) {
    return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(a)) << 32) | static_cast<std::uint32_t>(b);
}

bool is_space(char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; }

// Replaces every non-overlapping (a, b) with `merged`, scanning left to right.
void apply_merge(std::vector<TokenId>& ids, TokenId a, TokenId b, TokenId merged) {
    std::size_t w = 0;
    for (std::size_t r = 0; r < ids.size(); ++w) {
        if (r + 1 < ids.size() && ids[r] == a && ids[r + 1] == b) {
            ids[w] = merged;
            r += 2;
        } else {
            ids[w] = ids[r];
            ++r;
        }
    }
    ids.resize(w);
}

}  // namespace

Vocab::Vocab() {
    tokens_.reserve(kFirstMergeId);
    for (std::size_t b = 0; b < kByteTokens; ++b) {
        tokens_.emplace_back(1, static_cast<char>(b));
    }
    tokens_.emplace_back("<|bos|>");
    tokens_.emplace_back("<|eos|>");
    tokens_.emplace_back("<|pad|>");
}

const std::string& Vocab::token_bytes(TokenId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
        throw VocabError("token id " + std::to_string(id) + " outside vocabulary of " + std::to_string(tokens_.size()));
    }
    return tokens_[static_cast<std::size_t>(id)];
}

TokenId Vocab::add_merge(TokenId left, TokenId right) {
    const auto n = static_cast<TokenId>(tokens_.size());
    if (left < 0 || right < 0 || left >= n || right >= n || is_special(left) || is_special(right)) {
        throw VocabError("merge (" + std::to_string(left) + ", " + std::to_string(right) +
                         ") references an unknown or special id");
    }
    if (tokens_.size() >= kMaxVocabSize) {
        throw VocabError("vocabulary is full at " + std::to_string(kMaxVocabSize) + " tokens");
    }
    if (merge_ids_.contains(pair_key(left, right))) {
        throw VocabError("duplicate merge (" + std::to_string(left) + ", " + std::to_string(right) + ")");
    }
    tokens_.push_back(tokens_[static_cast<std::size_t>(left)] + tokens_[static_cast<std::size_t>(right)]);
    merges_.emplace_back(left, right);
    merge_ids_[pair_key(left, right)] = n;
    return n;
}

std::vector<std::string_view> split_chunks(std::string_view text) {
    std::vector<std::string_view> chunks;
    std::size_t start = 0;
    for (std::size_t i = 1; i <= text.size(); ++i) {
        if (i == text.size() || is_space(text[i])) {
            chunks.push_back(text.substr(start, i - start));
            start = i;
        }
    }
    return chunks;
}

void Vocab::encode_chunk(std::string_view chunk, std::vector<TokenId>& out) const {
    std::vector<TokenId> ids;
    ids.reserve(chunk.size());
    for (char c : chunk) {
        ids.push_back(static_cast<TokenId>(static_cast<unsigned char>(c)));
    }
    // Merge ids increase with rank, so the lowest present id is the merge
    // training applied first.
    while (ids.size() > 1) {
        TokenId best = -1;
        for (std::size_t i = 0; i + 1 < ids.size(); ++i) {
            auto it = merge_ids_.find(pair_key(ids[i], ids[i + 1]));
            if (it != merge_ids_.end() && (best < 0 || it->second < best)) {
                best = it->second;
            }
        }
        if (best < 0) {
            break;
        }
        const MergePair& m = merges_[static_cast<std::size_t>(best) - kFirstMergeId];
        apply_merge(ids, m.first, m.second, best);
    }
    out.insert(out.end(), ids.begin(), ids.end());
}

std::vector<TokenId> Vocab::encode(std::string_view text) const {
    std::vector<TokenId> out;
    out.reserve(text.size());
    for (std::string_view chunk : split_chunks(text)) {
        encode_chunk(chunk, out);
    }
    return out;
}

std::string Vocab::decode(std::span<const TokenId> ids) const {
    std::string out;
    for (TokenId id : ids) {
        const std::string& bytes = token_bytes(id);
        if (!is_special(id)) {
            out += bytes;
        }
    }
    return out;
}

nlohmann::json Vocab::to_json() const {
    nlohmann::json tokens = nlohmann::json::array();
    for (const std::string& t : tokens_) {
        tokens.push_back(base64_encode(t));
    }
    nlohmann::json merges = nlohmann::json::array();
    for (const auto& [a, b] : merges_) {
        merges.push_back({a, b});
    }
    return {{"tokens", tokens},
            {"merges", merges},
            {"specials", {{"bos", specials_.bos}, {"eos", specials_.eos}, {"pad", specials_.pad}}}};
}

Vocab Vocab::from_json(const nlohmann::json& j) {
    try {
        Vocab v;
        const SpecialIds specials{j.at("specials").at("bos").get<TokenId>(), j.at("specials").at("eos").get<TokenId>(),
                                  j.at("specials").at("pad").get<TokenId>()};
        if (specials != SpecialIds{}) {
            throw VocabError("specials must be bos=256, eos=257, pad=258");
        }
        for (const auto& m : j.at("merges")) {
            v.add_merge(m.at(0).get<TokenId>(), m.at(1).get<TokenId>());
        }
        const auto& tokens = j.at("tokens");
        if (tokens.size() != v.size()) {
            throw VocabError("vocab file lists " + std::to_string(tokens.size()) + " tokens but its merges imply " +
                             std::to_string(v.size()));
        }
        for (std::size_t i = 0; i < tokens.size(); ++i) {
            if (base64_decode(tokens[i].get<std::string>()) != v.tokens_[i]) {
                throw VocabError("token " + std::to_string(i) + " bytes disagree with the merge table");
            }
        }
        return v;
    } catch (const nlohmann::json::exception& e) {
        throw VocabError(std::string("malformed vocab file: ") + e.what());
    }
}

void Vocab::save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw Error("cannot write vocab file " + path.string());
    }
    out << to_json().dump(1) << '\n';
}

Vocab Vocab::load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw VocabError("cannot read vocab file " + path.string());
    }
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw VocabError("vocab file " + path.string() + " is not JSON: " + e.what());
    }
    return from_json(j);
}

BpeResult train_bpe(std::span<const std::string> texts, std::size_t target_size) {
    if (target_size < kFirstMergeId || target_size > kMaxVocabSize) {
        throw VocabError("target vocabulary size " + std::to_string(target_size) + " outside [" +
                         std::to_string(kFirstMergeId) + ", " + std::to_string(kMaxVocabSize) + "]");
    }
    // Identical chunks are merged identically, so train on distinct chunks
    // weighted by frequency.
    std::map<std::string_view, std::size_t> chunk_counts;
    for (const std::string& text : texts) {
        for (std::string_view chunk : split_chunks(text)) {
            ++chunk_counts[chunk];
        }
    }
    std::vector<std::vector<TokenId>> words;
    std::vector<std::size_t> freq;
    for (const auto& [chunk, count] : chunk_counts) {
        std::vector<TokenId> ids;
        for (char c : chunk) {
            ids.push_back(static_cast<TokenId>(static_cast<unsigned char>(c)));
        }
        words.push_back(std::move(ids));
        freq.push_back(count);
    }

    BpeResult result;
    while (result.vocab.size() < target_size) {
        std::unordered_map<std::uint64_t, std::size_t> pair_counts;
        for (std::size_t w = 0; w < words.size(); ++w) {
            const auto& ids = words[w];
            for (std::size_t i = 0; i + 1 < ids.size(); ++i) {
                pair_counts[pair_key(ids[i], ids[i + 1])] += freq[w];
            }
        }
        std::uint64_t best_key = 0;
        std::size_t best_count = 0;
        for (const auto& [key, count] : pair_counts) {
            // Keys order exactly as (left, right) pairs do.
            if (count > best_count || (count == best_count && key < best_key)) {
                best_key = key;
                best_count = count;
            }
        }
        if (best_count < 2) {
            result.truncated = true;
            break;
        }
        const auto left = static_cast<TokenId>(best_key >> 32);
        const auto right = static_cast<TokenId>(best_key & 0xffffffffu);
        const TokenId merged = result.vocab.add_merge(left, right);
        for (auto& ids : words) {
            apply_merge(ids, left, right, merged);
        }
    }
    return result;
}

std::string base64_encode(std::string_view bytes) {
    std::string out(4 * ((bytes.size() + 2) / 3) + 1, '\0');
    const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()),
                                  reinterpret_cast<const unsigned char*>(bytes.data()), static_cast<int>(bytes.size()));
    out.resize(static_cast<std::size_t>(n));
    return out;
}

std::string base64_decode(std::string_view text) {
    if (text.size() % 4 != 0) {
        throw VocabError("base64 text length " + std::to_string(text.size()) + " is not a multiple of 4");
    }
    std::string out(3 * text.size() / 4 + 1, '\0');
    const int n = EVP_DecodeBlock(reinterpret_cast<unsigned char*>(out.data()),
                                  reinterpret_cast<const unsigned char*>(text.data()), static_cast<int>(text.size()));
    if (n < 0) {
        throw VocabError("invalid base64 \"" + std::string(text) + "\"");
    }
    // EVP_DecodeBlock counts padding as zero bytes.
    std::size_t len = static_cast<std::size_t>(n);
    for (std::size_t i = text.size(); i > 0 && text[i - 1] == '='; --i) {
        --len;
    }
    out.resize(len);
    return out;
}

}  // namespace frailt

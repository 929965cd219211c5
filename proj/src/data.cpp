#include "frailt/data.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "frailt/digest.hpp"
#include "frailt/error.hpp"
#include "frailt/rng.hpp"

namespace frailt {
namespace {

std::string trim(std::string_view s) {
    std::size_t b = 0;
    std::size_t e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) {
        ++b;
    }
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) {
        --e;
    }
    return std::string(s.substr(b, e - b));
}

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError("cannot read corpus " + path.string());
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

std::vector<std::string> split_stories(std::string_view text) {
    std::vector<std::string> stories;
    std::string current;
    std::size_t pos = 0;
    auto flush = [&] {
        std::string story = trim(current);
        if (!story.empty()) {
            stories.push_back(std::move(story));
        }
        current.clear();
    };
    while (pos <= text.size()) {
        std::size_t nl = text.find('\n', pos);
        if (nl == std::string_view::npos) {
            nl = text.size();
        }
        std::string_view line = text.substr(pos, nl - pos);
        if (!line.empty() && line.back() == '\r') {
            line.remove_suffix(1);
        }
        if (trim(line).empty()) {
            flush();
        } else {
            if (!current.empty()) {
                current += '\n';
            }
            current += line;
        }
        pos = nl + 1;
    }
    flush();
    return stories;
}

Corpus make_corpus(std::vector<std::string> stories, double validation_fraction) {
    if (stories.size() < 2) {
        throw DataError("corpus needs at least two stories for a train/validation split, got " +
                        std::to_string(stories.size()));
    }
    if (!(validation_fraction > 0.0 && validation_fraction < 1.0)) {
        throw DataError("validation fraction must lie in (0, 1)");
    }
    Corpus c;
    const auto n = static_cast<double>(stories.size());
    std::size_t n_val = static_cast<std::size_t>(std::llround(n * validation_fraction));
    n_val = std::clamp<std::size_t>(n_val, 1, stories.size() - 1);
    c.n_validation = n_val;
    Fnv1a h;
    for (const std::string& s : stories) {
        h.update_pod(static_cast<std::uint64_t>(s.size()));
        h.update(s);
    }
    c.digest = h.hex();
    c.stories = std::move(stories);
    return c;
}

Corpus load_corpus(const std::filesystem::path& path, double validation_fraction) {
    const std::string text = read_file(path);
    std::vector<std::string> stories;
    if (path.extension() == ".jsonl") {
        std::istringstream lines(text);
        std::string line;
        std::size_t line_no = 0;
        while (std::getline(lines, line)) {
            ++line_no;
            if (trim(line).empty()) {
                continue;
            }
            try {
                const auto j = nlohmann::json::parse(line);
                stories.push_back(j.at("story").get<std::string>());
            } catch (const nlohmann::json::exception& e) {
                throw DataError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
            }
        }
    } else {
        stories = split_stories(text);
    }
    return make_corpus(std::move(stories), validation_fraction);
}

std::vector<TokenId> token_stream(const Vocab& vocab, std::span<const std::string> stories) {
    std::vector<TokenId> out;
    for (const std::string& s : stories) {
        out.push_back(vocab.specials().bos);
        const std::vector<TokenId> ids = vocab.encode(s);
        out.insert(out.end(), ids.begin(), ids.end());
        out.push_back(vocab.specials().eos);
    }
    return out;
}

std::vector<Sequence> make_windows(std::span<const TokenId> stream, std::size_t context_length) {
    if (context_length == 0) {
        throw DataError("context length must be positive");
    }
    const std::size_t count = stream.empty() ? 0 : (stream.size() - 1) / context_length;
    if (count == 0) {
        throw DataError("token stream of " + std::to_string(stream.size()) + " tokens is shorter than one window of " +
                        std::to_string(context_length + 1));
    }
    std::vector<Sequence> windows(count);
    for (std::size_t w = 0; w < count; ++w) {
        const auto begin = stream.begin() + static_cast<std::ptrdiff_t>(w * context_length);
        windows[w].inputs.assign(begin, begin + static_cast<std::ptrdiff_t>(context_length));
        windows[w].targets.assign(begin + 1, begin + static_cast<std::ptrdiff_t>(context_length) + 1);
    }
    return windows;
}

BatchStream::BatchStream(std::vector<Sequence> windows, std::size_t batch_size, std::uint64_t seed)
    : windows_(std::move(windows)), batch_size_(batch_size), seed_(seed) {
    if (windows_.empty()) {
        throw DataError("batch stream needs at least one window");
    }
    if (batch_size_ == 0) {
        throw DataError("batch size must be positive");
    }
}

const std::vector<std::size_t>& BatchStream::permutation(std::uint64_t epoch) const {
    auto it = permutations_.find(epoch);
    if (it != permutations_.end()) {
        return it->second;
    }
    std::vector<std::size_t> perm(windows_.size());
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    Rng rng(mix_seed(seed_, epoch));
    for (std::size_t i = perm.size(); i > 1; --i) {
        std::swap(perm[i - 1], perm[static_cast<std::size_t>(rng.below(i))]);
    }
    // Only a couple of epochs are live at a time.
    while (permutations_.size() > 2) {
        permutations_.erase(permutations_.begin());
    }
    return permutations_.emplace(epoch, std::move(perm)).first->second;
}

Batch BatchStream::batch(std::uint64_t step) const {
    Batch out;
    out.reserve(batch_size_);
    const std::uint64_t n = windows_.size();
    for (std::size_t b = 0; b < batch_size_; ++b) {
        const std::uint64_t index = step * batch_size_ + b;
        out.push_back(windows_[permutation(index / n)[index % n]]);
    }
    return out;
}

std::string BatchStream::digest(const Batch& batch) {
    Fnv1a h;
    for (const Sequence& s : batch) {
        for (TokenId t : s.inputs) {
            h.update_pod(t);
        }
        h.update_pod(s.targets.back());
    }
    return h.hex();
}

}  // namespace frailt

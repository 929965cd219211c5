#include "frailt/config.hpp"

#include <cctype>

#include "frailt/error.hpp"

namespace frailt {

std::string to_string(ArchitectureKind kind) {
    return kind == ArchitectureKind::standard ? "standard" : "frailt";
}

ArchitectureKind architecture_kind_from_string(std::string_view text) {
    if (text == "standard") {
        return ArchitectureKind::standard;
    }
    if (text == "frailt") {
        return ArchitectureKind::frailt;
    }
    throw ConfigError("kind: expected \"standard\" or \"frailt\", got \"" + std::string(text) + "\"");
}

void ModelConfig::validate() const {
    if (embedding_dim == 0) {
        throw ConfigError("embedding_dim: must be positive");
    }
    if (n_heads == 0) {
        throw ConfigError("n_heads: must be positive");
    }
    if (embedding_dim % n_heads != 0) {
        throw ConfigError("embedding_dim: " + std::to_string(embedding_dim) + " is not divisible by n_heads " +
                          std::to_string(n_heads));
    }
    if (head_dim() % 2 != 0) {
        throw ConfigError("n_heads: head dimension " + std::to_string(head_dim()) +
                          " must be even for rotary embeddings");
    }
    if (vocab_size < 2) {
        throw ConfigError("vocab_size: must be at least 2");
    }
    if (context_length < 1) {
        throw ConfigError("context_length: must be at least 1");
    }
    if (groups.empty()) {
        throw ConfigError("groups: at least one group is required");
    }
    for (std::size_t i = 0; i < groups.size(); ++i) {
        const GroupSpec& g = groups[i];
        const std::string where = "groups[" + std::to_string(i) + "]";
        if (g.n_blocks < 1) {
            throw ConfigError(where + ".n_blocks: must be at least 1");
        }
        if (g.n_iterations < 1) {
            throw ConfigError(where + ".n_iterations: must be at least 1");
        }
        if (g.n_blocks * g.n_iterations > max_effective_depth) {
            throw ConfigError(where + ": L*M = " + std::to_string(g.n_blocks * g.n_iterations) +
                              " exceeds the effective-depth cap " + std::to_string(max_effective_depth));
        }
        if (kind == ArchitectureKind::standard && g.n_iterations != 1) {
            throw ConfigError(where + ".n_iterations: standard models iterate each group exactly once");
        }
    }
}

std::size_t ModelConfig::hidden_dim() const {
    const std::size_t raw = 4 * embedding_dim;
    return n_heads == 0 ? raw : (raw + n_heads - 1) / n_heads * n_heads;
}

std::size_t effective_depth(const std::vector<GroupSpec>& groups) {
    std::size_t depth = 0;
    for (const GroupSpec& g : groups) {
        depth += g.n_blocks * g.n_iterations;
    }
    return depth;
}

std::size_t effective_depth(const ModelConfig& config) { return effective_depth(config.groups); }

namespace {

class ArchParser {
public:
    explicit ArchParser(std::string_view text) : text_(text) {}

    ArchSpec parse() {
        if (text_.empty()) {
            fail("empty architecture string");
        }
        ArchSpec spec;
        bool any_iterated = false;
        bool any_plain = false;
        while (true) {
            if (peek() == '[') {
                ++pos_;
                const std::size_t blocks = number();
                expect('x');
                const std::size_t iters = number();
                expect(']');
                spec.groups.push_back({blocks, iters});
                any_iterated = true;
            } else {
                const std::size_t count = number();
                if (peek() == 'x') {
                    ++pos_;
                    const std::size_t iters = number();
                    for (std::size_t i = 0; i < count; ++i) {
                        spec.groups.push_back({1, iters});
                    }
                    any_iterated = true;
                } else {
                    for (std::size_t i = 0; i < count; ++i) {
                        spec.groups.push_back({1, 1});
                    }
                    any_plain = true;
                }
            }
            if (pos_ == text_.size()) {
                break;
            }
            expect(',');
        }
        if (any_iterated && any_plain) {
            fail("cannot mix plain layer counts with LxM terms");
        }
        spec.kind = any_iterated ? ArchitectureKind::frailt : ArchitectureKind::standard;
        if (spec.kind == ArchitectureKind::standard && spec.groups.size() > 1 && text_.find(',') != std::string_view::npos) {
            fail("a standard architecture is a single layer count");
        }
        return spec;
    }

private:
    char peek() const { return pos_ < text_.size() ? text_[pos_] : '\0'; }

    [[noreturn]] void fail(const std::string& what) const {
        throw ParseError("architecture \"" + std::string(text_) + "\" at position " + std::to_string(pos_) + ": " +
                         what);
    }

    void expect(char c) {
        if (peek() != c) {
            fail(std::string("expected '") + c + "'");
        }
        ++pos_;
    }

    std::size_t number() {
        const std::size_t start = pos_;
        std::size_t value = 0;
        while (pos_ < text_.size() && std::isdigit(static_cast<unsigned char>(text_[pos_]))) {
            value = value * 10 + static_cast<std::size_t>(text_[pos_] - '0');
            if (value > 1'000'000) {
                fail("number too large");
            }
            ++pos_;
        }
        if (pos_ == start) {
            fail("expected a number");
        }
        if (value == 0) {
            pos_ = start;
            fail("counts must be at least 1");
        }
        return value;
    }

    std::string_view text_;
    std::size_t pos_ = 0;
};

}  // namespace

ArchSpec parse_arch_spec(std::string_view text) { return ArchParser(text).parse(); }

std::string arch_spec_string(const ModelConfig& config) {
    if (config.kind == ArchitectureKind::standard) {
        return std::to_string(config.groups.size());
    }
    std::string out;
    std::size_t i = 0;
    while (i < config.groups.size()) {
        if (!out.empty()) {
            out += ",";
        }
        const GroupSpec& g = config.groups[i];
        if (g.n_blocks == 1) {
            std::size_t run = 1;
            while (i + run < config.groups.size() && config.groups[i + run] == g) {
                ++run;
            }
            out += std::to_string(run) + "x" + std::to_string(g.n_iterations);
            i += run;
        } else {
            out += "[" + std::to_string(g.n_blocks) + "x" + std::to_string(g.n_iterations) + "]";
            ++i;
        }
    }
    return out;
}

std::string arch_label(const ModelConfig& config) {
    if (config.kind == ArchitectureKind::standard) {
        return std::to_string(config.groups.size()) + "-layer";
    }
    const GroupSpec& first = config.groups.front();
    bool uniform = first.n_blocks == 1;
    for (const GroupSpec& g : config.groups) {
        uniform = uniform && g == first;
    }
    if (uniform) {
        return std::to_string(config.groups.size()) + "^" + std::to_string(first.n_iterations);
    }
    return arch_spec_string(config);
}

ModelConfig make_config(std::string_view arch, std::size_t embedding_dim, std::size_t n_heads,
                        std::size_t vocab_size, std::size_t context_length) {
    ArchSpec spec = parse_arch_spec(arch);
    ModelConfig config;
    config.embedding_dim = embedding_dim;
    config.n_heads = n_heads;
    config.vocab_size = vocab_size;
    config.context_length = context_length;
    config.groups = std::move(spec.groups);
    config.kind = spec.kind;
    config.validate();
    return config;
}

void to_json(nlohmann::json& j, const ModelConfig& config) {
    nlohmann::json groups = nlohmann::json::array();
    for (const GroupSpec& g : config.groups) {
        groups.push_back({{"n_blocks", g.n_blocks}, {"n_iterations", g.n_iterations}});
    }
    j = nlohmann::json{{"embedding_dim", config.embedding_dim},
                       {"n_heads", config.n_heads},
                       {"vocab_size", config.vocab_size},
                       {"context_length", config.context_length},
                       {"kind", to_string(config.kind)},
                       {"groups", groups},
                       {"max_effective_depth", config.max_effective_depth}};
}

namespace {

std::size_t read_count(const nlohmann::json& j, const std::string& key, const std::string& path) {
    if (!j.contains(key)) {
        throw ConfigError(path + key + ": missing");
    }
    const auto& v = j.at(key);
    if (!v.is_number_unsigned()) {
        throw ConfigError(path + key + ": expected a non-negative integer");
    }
    return v.get<std::size_t>();
}

}  // namespace

void from_json(const nlohmann::json& j, ModelConfig& config) {
    if (!j.is_object()) {
        throw ConfigError("model: expected an object");
    }
    config.embedding_dim = read_count(j, "embedding_dim", "");
    config.n_heads = read_count(j, "n_heads", "");
    config.vocab_size = read_count(j, "vocab_size", "");
    config.context_length = read_count(j, "context_length", "");
    if (!j.contains("kind") || !j.at("kind").is_string()) {
        throw ConfigError("kind: expected a string");
    }
    config.kind = architecture_kind_from_string(j.at("kind").get<std::string>());
    config.max_effective_depth = j.contains("max_effective_depth") ? read_count(j, "max_effective_depth", "")
                                                                   : kDefaultDepthCap;
    if (!j.contains("groups") || !j.at("groups").is_array()) {
        throw ConfigError("groups: expected an array");
    }
    config.groups.clear();
    const auto& groups = j.at("groups");
    for (std::size_t i = 0; i < groups.size(); ++i) {
        const std::string path = "groups[" + std::to_string(i) + "].";
        config.groups.push_back({read_count(groups[i], "n_blocks", path), read_count(groups[i], "n_iterations", path)});
    }
    config.validate();
}

}  // namespace frailt

#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace frailt {

/// L blocks traversed M times with weights shared across iterations.
struct GroupSpec {
    std::size_t n_blocks = 1;
    std::size_t n_iterations = 1;

    bool operator==(const GroupSpec&) const = default;
};

enum class ArchitectureKind { standard, frailt };

std::string to_string(ArchitectureKind kind);
ArchitectureKind architecture_kind_from_string(std::string_view text);

inline constexpr std::size_t kDefaultDepthCap = 64;

struct ModelConfig {
    std::size_t embedding_dim = 64;
    std::size_t n_heads = 8;
    std::size_t vocab_size = 512;
    std::size_t context_length = 512;
    std::vector<GroupSpec> groups;
    ArchitectureKind kind = ArchitectureKind::standard;
    std::size_t max_effective_depth = kDefaultDepthCap;

    // Throws ConfigError naming the offending field.
    void validate() const;

    std::size_t head_dim() const { return embedding_dim / n_heads; }
    // SwiGLU width: 4d rounded up to a multiple of n_heads.
    std::size_t hidden_dim() const;

    bool operator==(const ModelConfig&) const = default;
};

// Sum over groups of L * M: block applications per forward pass.
std::size_t effective_depth(const ModelConfig& config);
std::size_t effective_depth(const std::vector<GroupSpec>& groups);

/// Architecture fragment parsed from the L^M shorthand.
///
///   "N"          standard model, N groups of (1, 1)
///   "LxM"        L single-block groups, each iterated M times
///   "[LxM]"      one group of L blocks iterated M times as a unit
///   terms may be joined with commas: "1x2,1x2", "[2x2],1x3"
struct ArchSpec {
    ArchitectureKind kind = ArchitectureKind::standard;
    std::vector<GroupSpec> groups;
};

ArchSpec parse_arch_spec(std::string_view text);

// Short label: "8-layer" for standard stacks, "2^4" for uniform
// single-block FraiLT stacks, the comma form otherwise.
std::string arch_label(const ModelConfig& config);
std::string arch_spec_string(const ModelConfig& config);

ModelConfig make_config(std::string_view arch, std::size_t embedding_dim, std::size_t n_heads = 8,
                        std::size_t vocab_size = 512, std::size_t context_length = 512);

void to_json(nlohmann::json& j, const ModelConfig& config);
void from_json(const nlohmann::json& j, ModelConfig& config);

}  // namespace frailt

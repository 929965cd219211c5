#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "frailt/trainer.hpp"

namespace frailt {

/// Reference validation losses, rows by embedding dimension.
struct ReferenceTable {
    std::string name;
    ArchitectureKind kind;
    std::array<std::string, 4> columns;  // arch_label() spellings
    std::array<std::size_t, 5> dims;
    std::array<std::array<double, 4>, 5> losses;
};

const ReferenceTable& standard_reference();  // 1/2/4/8 layers
const ReferenceTable& frailt_reference();    // 1^2, 1^8, 2^4, 4^2

// Loss for (label, d) in either table, if listed.
std::optional<double> reference_loss(std::string_view arch_label, std::size_t embedding_dim);

nlohmann::json reference_json();

enum class Pairing {
    equal_depth,   // same effective depth: 8-layer vs 2^4
    equal_blocks,  // same distinct blocks, so equal parameters up to encodings: 1-layer vs 1^2
};

std::string to_string(Pairing pairing);
Pairing pairing_from_string(std::string_view text);

struct ExperimentSide {
    ModelConfig config;
    std::string label;
    std::size_t parameters = 0;
    std::size_t effective_depth = 0;
    double initial_val_loss = 0.0;
    double final_val_loss = 0.0;
    std::optional<double> reference_val_loss;
    std::vector<LossRecord> history;
    std::string weights_digest;
};

struct ExperimentReport {
    TrainConfig train;
    Pairing pairing = Pairing::equal_depth;
    std::string corpus_digest;
    std::size_t train_windows = 0;
    std::size_t validation_windows = 0;
    ExperimentSide standard;
    ExperimentSide frailt;

    nlohmann::json to_json() const;
    // Markdown table mirroring the reference layout, desk results next to
    // the reference values.
    std::string table() const;
};

using ExperimentProgress = std::function<void(const std::string& side, const LossRecord&)>;

// Trains both configs on identical data, seed and schedule. Throws
// BudgetError when the pair does not satisfy `pairing` and ConfigError when
// d, heads, vocabulary or context disagree.
ExperimentReport run_experiment(const ModelConfig& standard, const ModelConfig& frailt, const TrainConfig& train,
                                const TrainingData& data, const ExperimentProgress& progress = {},
                                Pairing pairing = Pairing::equal_depth);

// report.json plus one <label>_loss.csv per side.
void write_experiment(const std::filesystem::path& dir, const ExperimentReport& report);

}  // namespace frailt

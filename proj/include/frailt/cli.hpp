#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "frailt/config.hpp"
#include "frailt/evaluator.hpp"
#include "frailt/generator.hpp"
#include "frailt/trainer.hpp"

namespace frailt::cli {

// Stable process exit codes.
enum ExitCode : int {
    kOk = 0,
    kFailure = 1,              // anything not listed below
    kConfigError = 2,          // bad flags, config schema violation, budget mismatch
    kBadCheckpoint = 3,        // checkpoint or vocab file unreadable or inconsistent
    kMissingApiKey = 4,        // gpt-eval without EVAL_API_KEY and without --mock
    kInsufficientPoints = 5,   // fit has fewer than two usable points
};

inline constexpr const char* kApiKeyVariable = "EVAL_API_KEY";

// Every config key with its default. Config files and --set overrides may
// only name keys that appear here.
nlohmann::json default_config();
// JSON Schema (draft 2020-12) describing default_config().
nlohmann::json config_schema();

// Deep-merges `overlay` into `base`; ConfigError names the first unknown key.
void merge_config(nlohmann::json& base, const nlohmann::json& overlay, const std::string& path = "");
// Applies "section.key=value". The value is read as JSON when it parses and
// the target is not a string; otherwise it is taken verbatim.
void apply_override(nlohmann::json& config, std::string_view assignment);

struct DataSettings {
    std::filesystem::path corpus;
    double validation_fraction = 0.05;
    std::filesystem::path vocab;  // empty: train BPE on the training split
};

struct GenerateSettings {
    std::filesystem::path prompts;
    std::size_t completions_per_prompt = 3;
    std::string model_tag;  // empty: derived from the checkpoint config
};

struct CompareSettings {
    std::string standard = "1";
    std::string frailt = "1x2";
    std::string pairing = "auto";  // auto, equal_depth or equal_blocks
};

struct RunConfig {
    std::string arch;
    ModelConfig model;
    TrainConfig train;
    DataSettings data;
    SamplerConfig sampler;
    GenerateSettings generate;
    ClientConfig eval;
    CompareSettings compare;
    nlohmann::json json;  // the merged document the fields were read from
};

// ConfigError with a dotted field path on any violation.
RunConfig resolve_config(const nlohmann::json& config);

struct Artifact {
    std::string role;
    std::filesystem::path path;
    std::optional<std::string> sha256;
};

/// Written before a command starts work and rewritten when it ends.
struct RunManifest {
    std::string command;
    std::vector<std::string> argv;
    nlohmann::json config;
    std::uint64_t seed = 0;
    std::optional<std::string> corpus_digest;
    std::vector<Artifact> inputs;
    std::vector<Artifact> artifacts;
    std::string started_at;
    std::optional<std::string> finished_at;
    std::string status = "running";
    std::string code_version;
    nlohmann::json results = nlohmann::json::object();
};

void to_json(nlohmann::json& j, const RunManifest& m);
std::string code_version();
std::string sha256_file(const std::filesystem::path& path);

// Entry point. args excludes the program name. Data goes to out,
// diagnostics to err; the return value is an ExitCode.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace frailt::cli

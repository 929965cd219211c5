#include "frailt/experiment.hpp"

#include <fstream>
#include <iomanip>
#include <sstream>

#include "frailt/error.hpp"

namespace frailt {
namespace {

constexpr std::array<std::size_t, 5> kDims = {64, 128, 256, 512, 1024};

const ReferenceTable kStandard{
    "standard",
    ArchitectureKind::standard,
    {"1-layer", "2-layer", "4-layer", "8-layer"},
    kDims,
    {{{1.685, 1.409, 1.212, 1.067},
      {1.401, 1.077, 0.923, 0.817},
      {1.209, 0.874, 0.739, 0.661},
      {1.071, 0.751, 0.632, 0.582},
      {0.967, 0.670, 0.590, 0.524}}},
};

const ReferenceTable kFrailt{
    "frailt",
    ArchitectureKind::frailt,
    {"1^2", "1^8", "2^4", "4^2"},
    kDims,
    {{{1.586, 1.522, 1.348, 1.190},
      {1.215, 1.136, 1.007, 0.895},
      {0.969, 0.887, 0.791, 0.716},
      {0.796, 0.712, 0.648, 0.601},
      {0.681, 0.596, 0.559, 0.533}}},
};

std::optional<double> lookup(const ReferenceTable& t, std::string_view label, std::size_t d) {
    for (std::size_t c = 0; c < t.columns.size(); ++c) {
        if (t.columns[c] != label) {
            continue;
        }
        for (std::size_t r = 0; r < t.dims.size(); ++r) {
            if (t.dims[r] == d) {
                return t.losses[r][c];
            }
        }
    }
    return std::nullopt;
}

nlohmann::json table_json(const ReferenceTable& t) {
    nlohmann::json rows = nlohmann::json::array();
    for (std::size_t r = 0; r < t.dims.size(); ++r) {
        rows.push_back({{"embedding_dim", t.dims[r]}, {"losses", t.losses[r]}});
    }
    return {{"name", t.name}, {"columns", t.columns}, {"rows", rows}};
}

nlohmann::json side_json(const ExperimentSide& s) {
    nlohmann::json history = nlohmann::json::array();
    for (const LossRecord& r : s.history) {
        history.push_back({{"step", r.step},
                           {"train_loss", r.train_loss},
                           {"val_loss", r.val_loss ? nlohmann::json(*r.val_loss) : nlohmann::json(nullptr)}});
    }
    return {{"config", s.config},
            {"label", s.label},
            {"parameters", s.parameters},
            {"effective_depth", s.effective_depth},
            {"initial_val_loss", s.initial_val_loss},
            {"final_val_loss", s.final_val_loss},
            {"reference_val_loss", s.reference_val_loss ? nlohmann::json(*s.reference_val_loss) : nlohmann::json(nullptr)},
            {"weights_digest", s.weights_digest},
            {"history", history}};
}

ExperimentSide train_side(const ModelConfig& config, const TrainConfig& train, const TrainingData& data,
                          const std::string& side, const ExperimentProgress& progress) {
    Trainer trainer(config, train, init_weights(config, train.seed), data);
    ExperimentSide s;
    s.config = config;
    s.label = arch_label(config);
    s.parameters = param_count(config).total;
    s.effective_depth = effective_depth(config);
    s.initial_val_loss = trainer.validation_loss();
    trainer.run(std::nullopt, [&](const LossRecord& r) {
        if (progress) {
            progress(side, r);
        }
    });
    s.history = trainer.state().history;
    s.final_val_loss = s.history.back().val_loss.value();
    s.reference_val_loss = reference_loss(s.label, config.embedding_dim);
    s.weights_digest = weights_digest(trainer.weights());
    return s;
}

}  // namespace

const ReferenceTable& standard_reference() { return kStandard; }
const ReferenceTable& frailt_reference() { return kFrailt; }

std::optional<double> reference_loss(std::string_view label, std::size_t d) {
    if (auto v = lookup(kStandard, label, d)) {
        return v;
    }
    return lookup(kFrailt, label, d);
}

nlohmann::json reference_json() { return {{"standard", table_json(kStandard)}, {"frailt", table_json(kFrailt)}}; }

nlohmann::json ExperimentReport::to_json() const {
    return {{"train", train},
            {"pairing", frailt::to_string(pairing)},
            {"corpus_digest", corpus_digest},
            {"train_windows", train_windows},
            {"validation_windows", validation_windows},
            {"standard", side_json(standard)},
            {"frailt", side_json(frailt)}};
}

std::string ExperimentReport::table() const {
    std::ostringstream out;
    out << std::fixed << std::setprecision(3);
    out << "| model | d | eff. depth | params | val loss (start) | val loss (final) | reference |\n";
    out << "|---|---|---|---|---|---|---|\n";
    for (const ExperimentSide* s : {&standard, &frailt}) {
        out << "| " << s->label << " | " << s->config.embedding_dim << " | " << s->effective_depth << " | "
            << s->parameters << " | " << s->initial_val_loss << " | " << s->final_val_loss << " | ";
        if (s->reference_val_loss) {
            out << *s->reference_val_loss;
        } else {
            out << "-";
        }
        out << " |\n";
    }
    out << "\nReference values come from a much longer training run and are shown for direction only.\n";
    return out.str();
}

std::string to_string(Pairing pairing) {
    return pairing == Pairing::equal_depth ? "equal_depth" : "equal_blocks";
}

Pairing pairing_from_string(std::string_view text) {
    if (text == "equal_depth") {
        return Pairing::equal_depth;
    }
    if (text == "equal_blocks") {
        return Pairing::equal_blocks;
    }
    throw ConfigError("pairing: expected \"equal_depth\" or \"equal_blocks\", got \"" + std::string(text) + "\"");
}

ExperimentReport run_experiment(const ModelConfig& standard, const ModelConfig& frailt, const TrainConfig& train,
                                const TrainingData& data, const ExperimentProgress& progress, Pairing pairing) {
    standard.validate();
    frailt.validate();
    train.validate();
    auto blocks = [](const ModelConfig& c) {
        std::size_t n = 0;
        for (const GroupSpec& g : c.groups) {
            n += g.n_blocks;
        }
        return n;
    };
    if (pairing == Pairing::equal_blocks) {
        if (blocks(standard) != blocks(frailt)) {
            throw BudgetError(std::to_string(blocks(standard)) + " distinct blocks (" + arch_label(standard) +
                              ") vs " + std::to_string(blocks(frailt)) + " (" + arch_label(frailt) +
                              "); equal_blocks pairing needs the same count");
        }
    } else if (effective_depth(standard) != effective_depth(frailt)) {
        throw BudgetError("effective depth " + std::to_string(effective_depth(standard)) + " (" +
                          arch_label(standard) + ") differs from " + std::to_string(effective_depth(frailt)) + " (" +
                          arch_label(frailt) + "); refusing an unmatched comparison");
    }
    auto same = [](std::size_t a, std::size_t b, const char* field) {
        if (a != b) {
            throw ConfigError(std::string(field) + ": " + std::to_string(a) + " vs " + std::to_string(b) +
                              " across the compared models");
        }
    };
    same(standard.embedding_dim, frailt.embedding_dim, "embedding_dim");
    same(standard.n_heads, frailt.n_heads, "n_heads");
    same(standard.vocab_size, frailt.vocab_size, "vocab_size");
    same(standard.context_length, frailt.context_length, "context_length");

    ExperimentReport report;
    report.train = train;
    report.pairing = pairing;
    report.corpus_digest = data.corpus_digest;
    report.train_windows = data.train.size();
    report.validation_windows = data.validation.size();
    report.standard = train_side(standard, train, data, "standard", progress);
    report.frailt = train_side(frailt, train, data, "frailt", progress);
    return report;
}

void write_experiment(const std::filesystem::path& dir, const ExperimentReport& report) {
    std::filesystem::create_directories(dir);
    auto write = [&](const std::filesystem::path& path, const std::string& text) {
        std::ofstream out(path, std::ios::binary);
        if (!out) {
            throw Error("cannot write " + path.string());
        }
        out << text;
    };
    write(dir / "report.json", report.to_json().dump(2) + "\n");
    write(dir / "table.md", report.table());
    for (const ExperimentSide* s : {&report.standard, &report.frailt}) {
        std::string name = s->label;
        std::replace(name.begin(), name.end(), '^', 'x');
        std::replace(name.begin(), name.end(), ',', '_');
        write(dir / (name + "_loss.csv"), history_csv(s->history));
    }
}

}  // namespace frailt

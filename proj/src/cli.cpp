#include "frailt/cli.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <list>
#include <map>
#include <ostream>
#include <sstream>

#include <CLI11.hpp>

#include "frailt/checkpoint.hpp"
#include "frailt/data.hpp"
#include "frailt/error.hpp"
#include "frailt/experiment.hpp"

#ifndef FRAILT_CODE_VERSION
#define FRAILT_CODE_VERSION "unknown"
#endif
#ifndef FRAILT_DATA_DIR
#define FRAILT_DATA_DIR "data"
#endif

namespace frailt::cli {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

// Carries an exit code other than the one the exception type maps to.
struct ExitError : Error {
    ExitError(int code, const std::string& message) : Error(message), code(code) {}
    int code;
};

std::string read_text(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw Error("cannot read " + path.string());
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_text(const fs::path& path, std::string_view text) {
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) {
            throw Error("cannot write " + path.string());
        }
        out.write(text.data(), static_cast<std::streamsize>(text.size()));
        if (!out) {
            throw Error("write failed for " + path.string());
        }
    }
    fs::rename(tmp, path);
}

std::string utc_now() {
    const std::time_t t = std::time(nullptr);
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) {
        return s;
    }
    std::string out = "\"";
    for (char c : s) {
        out += c == '"' ? std::string("\"\"") : std::string(1, c);
    }
    return out + "\"";
}

std::string fmt(double v) {
    std::ostringstream ss;
    ss << std::setprecision(17) << v;
    return ss.str();
}

std::string fixed3(double v) {
    std::ostringstream ss;
    ss << std::fixed << std::setprecision(3) << v;
    return ss.str();
}

// ---- config plumbing ----

const json& section(const json& config, const char* name) {
    if (!config.contains(name) || !config[name].is_object()) {
        throw ConfigError(std::string(name) + ": expected an object");
    }
    return config[name];
}

std::string get_string(const json& s, const std::string& where, const char* key) {
    if (!s.at(key).is_string()) {
        throw ConfigError(where + "." + key + ": expected a string");
    }
    return s[key].get<std::string>();
}

std::size_t get_count(const json& s, const std::string& where, const char* key) {
    const json& v = s.at(key);
    if (!v.is_number_integer() || v.get<std::int64_t>() < 0) {
        throw ConfigError(where + "." + key + ": expected a non-negative integer");
    }
    return v.get<std::size_t>();
}

double get_number(const json& s, const std::string& where, const char* key) {
    if (!s.at(key).is_number()) {
        throw ConfigError(where + "." + key + ": expected a number");
    }
    return s[key].get<double>();
}

json schema_for(const json& value) {
    switch (value.type()) {
        case json::value_t::object: {
            json props = json::object();
            for (const auto& [k, v] : value.items()) {
                props[k] = schema_for(v);
            }
            return {{"type", "object"}, {"additionalProperties", false}, {"properties", props}};
        }
        case json::value_t::number_integer:
        case json::value_t::number_unsigned:
            return {{"type", "integer"}, {"minimum", 0}};
        case json::value_t::number_float:
            return {{"type", "number"}};
        case json::value_t::boolean:
            return {{"type", "boolean"}};
        case json::value_t::null:
            return {{"type", {"integer", "null"}}, {"minimum", 0}};
        default:
            return {{"type", "string"}};
    }
}

// ---- manifest ----

class ManifestWriter {
public:
    ManifestWriter(fs::path path, RunManifest m) : path_(std::move(path)), m_(std::move(m)) {
        m_.started_at = utc_now();
        m_.code_version = code_version();
        m_.artifacts.push_back({"manifest", path_, std::nullopt});
        flush();
    }

    RunManifest& manifest() { return m_; }

    void finish(const std::string& status) {
        m_.status = status;
        m_.finished_at = utc_now();
        for (Artifact& a : m_.artifacts) {
            if (a.path != path_ && fs::exists(a.path)) {
                a.sha256 = sha256_file(a.path);
            }
        }
        flush();
    }

    void fail(const std::string& message) {
        m_.results["error"] = message;
        finish("failed");
    }

private:
    void flush() { write_text(path_, json(m_).dump(2) + "\n"); }

    fs::path path_;
    RunManifest m_;
};

// Runs body under a manifest, marking it failed when body throws.
template <class F>
void with_manifest(ManifestWriter& writer, F&& body) {
    try {
        body();
    } catch (const std::exception& e) {
        try {
            writer.fail(e.what());
        } catch (...) {
        }
        throw;
    }
    writer.finish("complete");
}

// ---- shared command pieces ----

Vocab build_vocab(const RunConfig& rc, const Corpus& corpus, std::ostream& err) {
    Vocab vocab;
    if (!rc.data.vocab.empty()) {
        try {
            vocab = Vocab::load(rc.data.vocab);
        } catch (const VocabError& e) {
            throw ExitError(kBadCheckpoint, e.what());
        }
    } else {
        if (rc.model.vocab_size < kFirstMergeId) {
            throw ConfigError("model.vocab_size: must be at least " + std::to_string(kFirstMergeId) +
                              " to hold the byte and special tokens");
        }
        const std::size_t target = std::min(rc.model.vocab_size, kMaxVocabSize);
        const BpeResult bpe = train_bpe(corpus.train(), target);
        if (bpe.truncated) {
            err << "note: corpus supports only " << bpe.vocab.size() << " of " << target << " tokens\n";
        }
        vocab = bpe.vocab;
    }
    if (vocab.size() > rc.model.vocab_size) {
        throw ConfigError("model.vocab_size: " + std::to_string(rc.model.vocab_size) +
                          " is smaller than the tokenizer's " + std::to_string(vocab.size()) + " tokens");
    }
    return vocab;
}

Corpus read_corpus(const RunConfig& rc) {
    if (!fs::exists(rc.data.corpus)) {
        throw ConfigError("data.corpus: " + rc.data.corpus.string() + " does not exist");
    }
    return load_corpus(rc.data.corpus, rc.data.validation_fraction);
}

Checkpoint read_checkpoint(const fs::path& path) {
    try {
        return load_checkpoint(path);
    } catch (const FormatError& e) {
        throw ExitError(kBadCheckpoint, e.what());
    } catch (const IntegrityError& e) {
        throw ExitError(kBadCheckpoint, e.what());
    } catch (const ConfigError& e) {
        throw ExitError(kBadCheckpoint, std::string("checkpoint config: ") + e.what());
    }
}

std::optional<double> last_val_loss(const Checkpoint& c) {
    if (!c.state) {
        return std::nullopt;
    }
    for (auto it = c.state->history.rbegin(); it != c.state->history.rend(); ++it) {
        if (it->val_loss) {
            return it->val_loss;
        }
    }
    return std::nullopt;
}

std::string default_tag(const ModelConfig& config) {
    std::string label = arch_label(config);
    std::replace(label.begin(), label.end(), ',', '+');
    return label + "@d" + std::to_string(config.embedding_dim);
}

// "model_tag,val_loss" rows; the tag is everything before the last comma.
std::map<std::string, double> read_losses(const fs::path& path) {
    std::istringstream in(read_text(path));
    std::string line;
    std::map<std::string, double> out;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || (line_no == 1 && line.starts_with("model_tag"))) {
            continue;
        }
        const std::size_t comma = line.rfind(',');
        std::string tag = line.substr(0, comma);
        if (tag.size() >= 2 && tag.front() == '"' && tag.back() == '"') {
            tag = tag.substr(1, tag.size() - 2);
        }
        try {
            if (comma == std::string::npos) {
                throw std::invalid_argument("no comma");
            }
            out[tag] = std::stod(line.substr(comma + 1));
        } catch (const std::exception&) {
            throw ConfigError(path.string() + ":" + std::to_string(line_no) + ": expected model_tag,val_loss");
        }
    }
    return out;
}

// ---- option binding ----

struct Binding {
    std::string path;
    std::string value;
    CLI::Option* option = nullptr;
};

struct ConfigOptions {
    std::string config_file;
    std::vector<std::string> sets;
    std::list<Binding> bindings;

    void attach(CLI::App* app) {
        app->add_option("--config", config_file, "JSON config file (see `frailt schema`)");
        app->add_option("--set", sets, "override a config field, e.g. --set train.peak_lr=1e-3")
            ->allow_extra_args(false);
    }

    void bind(CLI::App* app, const std::string& flag, const std::string& path, const std::string& help) {
        Binding& b = bindings.emplace_back();
        b.path = path;
        b.option = app->add_option(flag, b.value, help + " [" + path + "]");
    }

    // defaults <- config file <- named flags <- --set
    json resolve() const {
        json config = default_config();
        if (!config_file.empty()) {
            json file;
            try {
                file = json::parse(read_text(config_file));
            } catch (const json::exception& e) {
                throw ConfigError(config_file + ": " + e.what());
            } catch (const Error& e) {
                throw ConfigError(e.what());
            }
            merge_config(config, file);
        }
        for (const Binding& b : bindings) {
            if (b.option->count() > 0) {
                apply_override(config, b.path + "=" + b.value);
            }
        }
        for (const std::string& s : sets) {
            apply_override(config, s);
        }
        return config;
    }
};

void bind_model(ConfigOptions& o, CLI::App* app) {
    o.bind(app, "--dim", "model.embedding_dim", "embedding dimension");
    o.bind(app, "--heads", "model.n_heads", "attention heads");
    o.bind(app, "--vocab-size", "model.vocab_size", "vocabulary size");
    o.bind(app, "--ctx", "model.context_length", "context length");
}

void bind_training(ConfigOptions& o, CLI::App* app) {
    o.bind(app, "--steps", "train.total_steps", "optimizer steps");
    o.bind(app, "--warmup", "train.warmup_steps", "linear warmup steps (default: min(100, steps/10))");
    o.bind(app, "--lr", "train.peak_lr", "peak learning rate");
    o.bind(app, "--batch", "train.batch_size", "sequences per batch");
    o.bind(app, "--seed", "train.seed", "seed for init and batch order");
    o.bind(app, "--eval-interval", "train.eval_interval", "steps between validation passes");
    o.bind(app, "--threads", "train.threads", "threads per batch");
    o.bind(app, "--corpus", "data.corpus", "story corpus (.txt or .jsonl)");
    o.bind(app, "--vocab", "data.vocab", "reuse this vocab.json instead of training BPE");
}

// ---- commands ----

struct Context {
    std::vector<std::string> argv;
    std::ostream& out;
    std::ostream& err;
};

RunManifest base_manifest(const Context& ctx, const std::string& command, const RunConfig& rc, std::uint64_t seed) {
    RunManifest m;
    m.command = command;
    m.argv = ctx.argv;
    m.config = rc.json;
    m.seed = seed;
    return m;
}

struct TrainArgs {
    ConfigOptions config;
    fs::path out_dir;
    std::optional<std::size_t> compare;
    fs::path resume;
    std::optional<std::size_t> stop_at;
    bool dry_run = false;
};

int cmd_train(const Context& ctx, const TrainArgs& args) {
    const RunConfig rc = resolve_config(args.config.resolve());
    const std::size_t depth = effective_depth(rc.model);
    if (args.compare) {
        if (depth != *args.compare) {
            throw BudgetError("effective depth of " + rc.arch + " is " + std::to_string(depth) + ", not " +
                              std::to_string(*args.compare));
        }
        ctx.err << "effective depth " << depth << " = " << *args.compare << "\n";
    }
    if (args.stop_at && *args.stop_at > rc.train.total_steps) {
        throw ConfigError("--stop-at: " + std::to_string(*args.stop_at) + " exceeds train.total_steps " +
                          std::to_string(rc.train.total_steps));
    }
    fs::create_directories(args.out_dir);
    const Corpus corpus = read_corpus(rc);

    const fs::path vocab_path = args.out_dir / "vocab.json";
    const fs::path ckpt_path = args.out_dir / "checkpoint.bin";
    const fs::path loss_path = args.out_dir / "loss.csv";
    RunManifest m = base_manifest(ctx, "train", rc, rc.train.seed);
    m.corpus_digest = corpus.digest;
    m.inputs.push_back({"corpus", rc.data.corpus, sha256_file(rc.data.corpus)});
    if (!args.resume.empty()) {
        m.inputs.push_back({"resume", args.resume, sha256_file(args.resume)});
    }
    if (!args.dry_run) {
        m.artifacts = {{"vocab", vocab_path, {}}, {"checkpoint", ckpt_path, {}}, {"loss_csv", loss_path, {}}};
    }
    ManifestWriter writer(args.out_dir / "train_manifest.json", std::move(m));

    json summary = {{"arch", rc.arch},
                    {"label", arch_label(rc.model)},
                    {"effective_depth", depth},
                    {"parameters", param_count(rc.model).total},
                    {"model", rc.model}};
    with_manifest(writer, [&] {
        if (args.dry_run) {
            summary["config"] = rc.json;
            writer.manifest().results = summary;
            return;
        }
        const Vocab vocab = build_vocab(rc, corpus, ctx.err);
        vocab.save(vocab_path);
        const TrainingData data = prepare_data(corpus, vocab, rc.model.context_length);
        ctx.err << "train windows " << data.train.size() << ", validation windows " << data.validation.size()
                << "\n";

        std::optional<Trainer> trainer;
        if (args.resume.empty()) {
            trainer.emplace(rc.model, rc.train, init_weights(rc.model, rc.train.seed), data);
        } else {
            Checkpoint c = read_checkpoint(args.resume);
            if (!c.state) {
                throw ExitError(kBadCheckpoint, "checkpoint " + args.resume.string() + " has no training state");
            }
            if (!(c.config == rc.model)) {
                throw ConfigError("model: differs from the configuration stored in " + args.resume.string());
            }
            if (c.state->step > rc.train.total_steps) {
                throw ConfigError("train.total_steps: checkpoint is already at step " +
                                  std::to_string(c.state->step));
            }
            trainer.emplace(c.config, rc.train, std::move(c.weights), std::move(*c.state), data);
        }
        if (args.stop_at && *args.stop_at < trainer->state().step) {
            throw ConfigError("--stop-at: checkpoint is already at step " + std::to_string(trainer->state().step));
        }
        trainer->run(args.stop_at, [&](const LossRecord& r) {
            if (r.val_loss) {
                ctx.err << "step " << r.step << "  train " << std::fixed << std::setprecision(4) << r.train_loss
                        << "  val " << *r.val_loss << std::defaultfloat << "\n";
            }
        });
        save_checkpoint(ckpt_path, {trainer->model().config(), trainer->weights(), trainer->state()});
        write_text(loss_path, history_csv(trainer->state().history));

        const auto& h = trainer->state().history;
        summary["steps"] = trainer->state().step;
        summary["final_train_loss"] = h.empty() ? json(nullptr) : json(h.back().train_loss);
        summary["final_val_loss"] = h.empty() || !h.back().val_loss ? json(nullptr) : json(*h.back().val_loss);
        summary["weights_digest"] = weights_digest(trainer->weights());
        summary["checkpoint"] = ckpt_path.string();
        writer.manifest().results = summary;
    });
    ctx.out << summary.dump(2) << "\n";
    return kOk;
}

struct GenerateArgs {
    ConfigOptions config;
    fs::path checkpoint;
    fs::path vocab;
    fs::path out_dir;
    bool greedy = false;
};

std::vector<std::string> read_prompts(const fs::path& path) {
    if (!fs::exists(path)) {
        throw ConfigError("generate.prompts: " + path.string() + " does not exist");
    }
    std::istringstream in(read_text(path));
    std::vector<std::string> prompts;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') {
            line.pop_back();
        }
        if (line.find_first_not_of(" \t") != std::string::npos) {
            prompts.push_back(line);
        }
    }
    if (prompts.empty()) {
        throw ConfigError("generate.prompts: " + path.string() + " holds no prompts");
    }
    return prompts;
}

int cmd_generate(const Context& ctx, GenerateArgs& args) {
    json merged = args.config.resolve();
    if (args.greedy) {
        apply_override(merged, "sampler.temperature=0");
    }
    const RunConfig rc = resolve_config(merged);
    const std::vector<std::string> prompts = read_prompts(rc.generate.prompts);
    Checkpoint ckpt = read_checkpoint(args.checkpoint);
    const fs::path vocab_path = args.vocab.empty() ? args.checkpoint.parent_path() / "vocab.json" : args.vocab;
    Vocab vocab;
    try {
        vocab = Vocab::load(vocab_path);
    } catch (const VocabError& e) {
        throw ExitError(kBadCheckpoint, e.what());
    }
    if (vocab.size() > ckpt.config.vocab_size) {
        throw ExitError(kBadCheckpoint, "vocab " + vocab_path.string() + " has " + std::to_string(vocab.size()) +
                                            " tokens; the checkpoint model has " +
                                            std::to_string(ckpt.config.vocab_size));
    }
    const std::string tag = rc.generate.model_tag.empty() ? default_tag(ckpt.config) : rc.generate.model_tag;

    fs::create_directories(args.out_dir);
    const fs::path completions_path = args.out_dir / "completions.jsonl";
    const fs::path losses_path = args.out_dir / "losses.csv";
    RunManifest m = base_manifest(ctx, "generate", rc, rc.sampler.seed);
    m.inputs = {{"checkpoint", args.checkpoint, sha256_file(args.checkpoint)},
                {"vocab", vocab_path, sha256_file(vocab_path)},
                {"prompts", rc.generate.prompts, sha256_file(rc.generate.prompts)}};
    m.artifacts = {{"completions", completions_path, {}}, {"losses_csv", losses_path, {}}};
    m.results["model"] = ckpt.config;
    m.results["model_tag"] = tag;
    ManifestWriter writer(args.out_dir / "generate_manifest.json", std::move(m));

    json summary;
    with_manifest(writer, [&] {
        const Model model(ckpt.config);
        std::vector<EvalItem> items;
        for (std::size_t p = 0; p < prompts.size(); ++p) {
            for (std::size_t k = 0; k < rc.generate.completions_per_prompt; ++k) {
                SamplerConfig s = rc.sampler;
                s.seed = completion_seed(rc.sampler.seed, p, k);
                items.push_back({"p" + std::to_string(p), k, tag,
                                 complete_story(model, ckpt.weights, vocab, prompts[p], s)});
            }
            ctx.err << "prompt " << p + 1 << "/" << prompts.size() << "\n";
        }
        save_completions(completions_path, items);
        std::string losses = "model_tag,val_loss\n";
        const std::optional<double> loss = last_val_loss(ckpt);
        if (loss) {
            losses += csv_field(tag) + "," + fmt(*loss) + "\n";
        }
        write_text(losses_path, losses);
        summary = {{"model_tag", tag},
                   {"prompts", prompts.size()},
                   {"completions", items.size()},
                   {"seed", rc.sampler.seed},
                   {"val_loss", loss ? json(*loss) : json(nullptr)},
                   {"path", completions_path.string()}};
        writer.manifest().results.update(summary);
    });
    ctx.out << summary.dump(2) << "\n";
    return kOk;
}

struct EvalArgs {
    ConfigOptions config;
    fs::path completions;
    fs::path out_dir;
    bool mock = false;
};

int cmd_gpt_eval(const Context& ctx, const EvalArgs& args) {
    const RunConfig rc = resolve_config(args.config.resolve());
    std::string key;
    if (!args.mock) {
        const char* env = std::getenv(kApiKeyVariable);
        if (env == nullptr || *env == '\0') {
            throw ExitError(kMissingApiKey, std::string(kApiKeyVariable) +
                                                " is not set; export it or pass --mock for the offline judge");
        }
        key = env;
    }
    const std::vector<EvalItem> items = load_completions(args.completions);

    std::optional<MockJudgeServer> mock;
    ClientConfig client = rc.eval;
    if (args.mock) {
        mock.emplace();
        client.base_url = mock->base_url();
    }

    fs::create_directories(args.out_dir);
    const fs::path scores_path = args.out_dir / "scores.jsonl";
    const fs::path report_path = args.out_dir / "report.json";
    RunManifest m = base_manifest(ctx, "gpt-eval", rc, 0);
    m.inputs = {{"completions", args.completions, sha256_file(args.completions)}};
    m.artifacts = {{"scores", scores_path, {}}, {"report", report_path, {}}};
    m.results["judge"] = args.mock ? "mock" : client.base_url;
    ManifestWriter writer(args.out_dir / "gpt-eval_manifest.json", std::move(m));

    json report;
    EvalRunSummary run;
    with_manifest(writer, [&] {
        Judge judge(client, make_http_transport(client, key));
        run = run_gpt_eval(items, judge, scores_path);
        const std::vector<ScoreRecord> scores = load_scores(scores_path);
        json models = json::array();
        for (const EvalReport& r : aggregate_by_model(scores)) {
            models.push_back(r);
        }
        report = {{"models", models},
                  {"all", scores.empty() ? json(nullptr) : json(aggregate_scores(scores))},
                  {"scored", run.scored},
                  {"skipped", run.skipped},
                  {"rejected", run.rejected},
                  {"judge_requests", judge.attempts()}};
        write_text(report_path, report.dump(2) + "\n");
        writer.manifest().results["summary"] = {
            {"scored", run.scored}, {"skipped", run.skipped}, {"rejected", run.rejected}};
    });
    for (const std::string& e : run.errors) {
        ctx.err << "rejected: " << e << "\n";
    }
    ctx.out << report.dump(2) << "\n";
    return run.rejected > 0 ? kFailure : kOk;
}

struct FitArgs {
    std::vector<fs::path> reports;
    std::vector<fs::path> losses;
    std::string threshold = "1.0";
    fs::path out_dir;
};

int cmd_fit(const Context& ctx, const FitArgs& args) {
    double threshold = 0.0;
    try {
        threshold = std::stod(args.threshold);
    } catch (const std::exception&) {
        throw ConfigError("--threshold: expected a number or inf, got \"" + args.threshold + "\"");
    }
    std::map<std::string, double> losses;
    for (const fs::path& p : args.losses) {
        losses.merge(read_losses(p));
    }
    std::vector<EvalReport> reports;
    for (const fs::path& p : args.reports) {
        try {
            const json doc = json::parse(read_text(p));
            for (const json& r : doc.at("models")) {
                reports.push_back(r.get<EvalReport>());
            }
        } catch (const json::exception& e) {
            throw ConfigError(p.string() + ": not a gpt-eval report: " + e.what());
        }
    }

    std::vector<std::pair<double, EvalReport>> points;
    for (EvalReport& r : reports) {
        if (!r.val_loss) {
            const auto it = losses.find(r.model_tag);
            if (it == losses.end()) {
                ctx.err << "skipping " << r.model_tag << ": no validation loss\n";
                continue;
            }
            r.val_loss = it->second;
        }
        points.emplace_back(*r.val_loss, r);
    }
    const auto kept = filter_by_loss(points, threshold);
    if (kept.size() < 2) {
        throw ExitError(kInsufficientPoints, "need at least 2 models with validation loss <= " + args.threshold +
                                                 "; have " + std::to_string(kept.size()) + " of " +
                                                 std::to_string(points.size()));
    }

    fs::create_directories(args.out_dir);
    const fs::path fit_path = args.out_dir / "fit.csv";
    const fs::path points_path = args.out_dir / "points.csv";
    const fs::path curve_path = args.out_dir / "fit_curve.csv";
    const fs::path reference_path = args.out_dir / "reference_losses.csv";
    RunManifest m;
    m.command = "fit";
    m.argv = ctx.argv;
    m.config = {{"threshold", args.threshold}};
    for (const fs::path& p : args.reports) {
        m.inputs.push_back({"report", p, sha256_file(p)});
    }
    for (const fs::path& p : args.losses) {
        m.inputs.push_back({"losses", p, sha256_file(p)});
    }
    m.artifacts = {{"fit", fit_path, {}},
                   {"points", points_path, {}},
                   {"fit_curve", curve_path, {}},
                   {"reference_losses", reference_path, {}}};
    ManifestWriter writer(args.out_dir / "fit_manifest.json", std::move(m));

    json fits = json::array();
    with_manifest(writer, [&] {
        static constexpr std::array<std::string_view, 5> kMetrics = {"overall", "grammar", "creativity",
                                                                      "consistency", "plot"};
        std::string fit_csv = "metric,slope,intercept,r_squared,n\n";
        std::string curve_csv = "metric,val_loss,score\n";
        double lo = kept.front().first;
        double hi = lo;
        for (const auto& [loss, r] : kept) {
            lo = std::min(lo, loss);
            hi = std::max(hi, loss);
        }
        for (std::size_t i = 0; i < kMetrics.size(); ++i) {
            std::vector<std::pair<double, double>> xy;
            for (const auto& [loss, r] : kept) {
                xy.emplace_back(loss, i == 0 ? r.overall : r.means[i - 1]);
            }
            PowerLawFit f;
            try {
                f = fit_power_law(xy);
            } catch (const FitError& e) {
                throw ExitError(kInsufficientPoints, e.what());
            }
            f.threshold = threshold;
            const std::string metric(kMetrics[i]);
            fit_csv += metric + "," + fmt(f.slope) + "," + fmt(f.intercept) + "," + fmt(f.r_squared) + "," +
                       std::to_string(f.n) + "\n";
            for (int s = 0; s <= 24; ++s) {
                const double loss = lo + (hi - lo) * s / 24.0;
                curve_csv += metric + "," + fmt(loss) + "," + fmt(f.intercept + f.slope * std::log(loss)) + "\n";
            }
            fits.push_back({{"metric", metric},
                            {"slope", f.slope},
                            {"intercept", f.intercept},
                            {"r_squared", f.r_squared},
                            {"n", f.n}});
        }
        std::string points_csv = "model_tag,val_loss,grammar,creativity,consistency,plot,overall,included\n";
        for (const auto& [loss, r] : points) {
            points_csv += csv_field(r.model_tag) + "," + fmt(loss);
            for (double v : r.means) {
                points_csv += "," + fmt(v);
            }
            points_csv += "," + fmt(r.overall) + "," + (loss <= threshold ? "1" : "0") + "\n";
        }
        std::string ref_csv = "table,label,embedding_dim,val_loss\n";
        for (const ReferenceTable* t : {&standard_reference(), &frailt_reference()}) {
            for (std::size_t row = 0; row < t->dims.size(); ++row) {
                for (std::size_t col = 0; col < t->columns.size(); ++col) {
                    ref_csv += t->name + "," + t->columns[col] + "," + std::to_string(t->dims[row]) + "," +
                               fixed3(t->losses[row][col]) + "\n";
                }
            }
        }
        write_text(fit_path, fit_csv);
        write_text(points_path, points_csv);
        write_text(curve_path, curve_csv);
        write_text(reference_path, ref_csv);
        writer.manifest().results = {{"fits", fits}, {"points", points.size()}, {"included", kept.size()}};
    });
    ctx.out << json{{"threshold", threshold}, {"points", points.size()}, {"included", kept.size()}, {"fits", fits}}
                   .dump(2)
            << "\n";
    return kOk;
}

void print_reference(std::ostream& out, const ReferenceTable& t) {
    out << "## " << t.name << " (validation loss)\n\n| d |";
    for (const std::string& c : t.columns) {
        out << " " << c << " |";
    }
    out << "\n|---|---|---|---|---|\n";
    out << std::fixed << std::setprecision(3);
    for (std::size_t r = 0; r < t.dims.size(); ++r) {
        out << "| " << t.dims[r] << " |";
        for (double v : t.losses[r]) {
            out << " " << v << " |";
        }
        out << "\n";
    }
    out << std::defaultfloat;
}

struct CompareArgs {
    ConfigOptions config;
    fs::path out_dir;
};

int cmd_compare(const Context& ctx, const CompareArgs& args) {
    const RunConfig rc = resolve_config(args.config.resolve());
    const ModelConfig standard = make_config(rc.compare.standard, rc.model.embedding_dim, rc.model.n_heads,
                                             rc.model.vocab_size, rc.model.context_length);
    const ModelConfig frailt = make_config(rc.compare.frailt, rc.model.embedding_dim, rc.model.n_heads,
                                           rc.model.vocab_size, rc.model.context_length);
    Pairing pairing = Pairing::equal_depth;
    if (rc.compare.pairing != "auto") {
        pairing = pairing_from_string(rc.compare.pairing);
    } else if (effective_depth(standard) != effective_depth(frailt)) {
        pairing = Pairing::equal_blocks;
    }

    fs::create_directories(args.out_dir);
    const Corpus corpus = read_corpus(rc);
    RunManifest m = base_manifest(ctx, "compare", rc, rc.train.seed);
    m.corpus_digest = corpus.digest;
    m.inputs.push_back({"corpus", rc.data.corpus, sha256_file(rc.data.corpus)});
    const auto csv_name = [](std::string label) {
        std::replace(label.begin(), label.end(), '^', 'x');
        std::replace(label.begin(), label.end(), ',', '_');
        return label + "_loss.csv";
    };
    m.artifacts = {{"report", args.out_dir / "report.json", {}},
                   {"table", args.out_dir / "table.md", {}},
                   {"standard_loss", args.out_dir / csv_name(arch_label(standard)), {}},
                   {"frailt_loss", args.out_dir / csv_name(arch_label(frailt)), {}}};
    m.results["pairing"] = to_string(pairing);
    ManifestWriter writer(args.out_dir / "compare_manifest.json", std::move(m));

    std::string table;
    with_manifest(writer, [&] {
        RunConfig vocab_rc = rc;
        vocab_rc.model = standard;
        const Vocab vocab = build_vocab(vocab_rc, corpus, ctx.err);
        const TrainingData data = prepare_data(corpus, vocab, rc.model.context_length);
        const ExperimentReport report = run_experiment(
            standard, frailt, rc.train, data,
            [&](const std::string& side, const LossRecord& r) {
                if (r.val_loss) {
                    ctx.err << side << " step " << r.step << "  val " << std::fixed << std::setprecision(4)
                            << *r.val_loss << std::defaultfloat << "\n";
                }
            },
            pairing);
        write_experiment(args.out_dir, report);
        table = report.table();
        writer.manifest().results["standard_final_val_loss"] = report.standard.final_val_loss;
        writer.manifest().results["frailt_final_val_loss"] = report.frailt.final_val_loss;
    });
    ctx.out << table;
    return kOk;
}

}  // namespace

json default_config() {
    return {
        {"model",
         {{"arch", "1x2"},
          {"embedding_dim", 64},
          {"n_heads", 8},
          {"vocab_size", 512},
          {"context_length", 512},
          {"max_effective_depth", kDefaultDepthCap}}},
        {"train", [] {
             json t = TrainConfig{};
             t["warmup_steps"] = nullptr;  // auto
             return t;
         }()},
        {"data",
         {{"corpus", (fs::path(FRAILT_DATA_DIR) / "mini_corpus.txt").string()},
          {"validation_fraction", kDefaultValidationFraction},
          {"vocab", ""}}},
        {"sampler", SamplerConfig{}},
        {"generate",
         {{"prompts", (fs::path(FRAILT_DATA_DIR) / "prompts.txt").string()},
          {"completions_per_prompt", 3},
          {"model_tag", ""}}},
        {"eval", ClientConfig{}},
        {"compare", {{"standard", "1"}, {"frailt", "1x2"}, {"pairing", "auto"}}},
    };
}

json config_schema() {
    json s = schema_for(default_config());
    s["$schema"] = "https://json-schema.org/draft/2020-12/schema";
    s["title"] = "frailt run configuration";
    s["properties"]["model"]["properties"]["arch"]["description"] =
        "\"N\" for a standard stack, \"LxM\" for L blocks each iterated M times, \"[LxM]\" for one group";
    s["properties"]["compare"]["properties"]["pairing"]["enum"] = {"auto", "equal_depth", "equal_blocks"};
    s["properties"]["sampler"]["properties"]["temperature"]["minimum"] = 0;
    return s;
}

void merge_config(json& base, const json& overlay, const std::string& path) {
    if (!overlay.is_object()) {
        throw ConfigError((path.empty() ? std::string("config") : path) + ": expected an object");
    }
    for (const auto& [key, value] : overlay.items()) {
        const std::string where = path.empty() ? key : path + "." + key;
        if (!base.contains(key)) {
            throw ConfigError(where + ": unknown field");
        }
        if (base[key].is_object()) {
            merge_config(base[key], value, where);
        } else {
            base[key] = value;
        }
    }
}

void apply_override(json& config, std::string_view assignment) {
    const std::size_t eq = assignment.find('=');
    if (eq == std::string_view::npos || eq == 0) {
        throw ConfigError("override \"" + std::string(assignment) + "\": expected path=value");
    }
    const std::string path(assignment.substr(0, eq));
    const std::string text(assignment.substr(eq + 1));
    json* node = &config;
    std::size_t start = 0;
    while (true) {
        const std::size_t dot = path.find('.', start);
        const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        const std::string where = path.substr(0, dot);
        if (!node->is_object() || !node->contains(key)) {
            throw ConfigError(where + ": unknown field");
        }
        node = &(*node)[key];
        if (dot == std::string::npos) {
            break;
        }
        start = dot + 1;
    }
    if (node->is_object()) {
        throw ConfigError(path + ": is a section, not a field");
    }
    if (node->is_string()) {
        *node = text;
        return;
    }
    json value = json::parse(text, nullptr, false);
    *node = value.is_discarded() ? json(text) : value;
}

RunConfig resolve_config(const json& config) {
    json merged = default_config();
    merge_config(merged, config);
    RunConfig rc;
    rc.json = merged;

    const json& m = section(merged, "model");
    rc.arch = get_string(m, "model", "arch");
    try {
        const std::size_t d = get_count(m, "model", "embedding_dim");
        const std::size_t heads = get_count(m, "model", "n_heads");
        const std::size_t v = get_count(m, "model", "vocab_size");
        const std::size_t ctx = get_count(m, "model", "context_length");
        ArchSpec spec = parse_arch_spec(rc.arch);
        rc.model.embedding_dim = d;
        rc.model.n_heads = heads;
        rc.model.vocab_size = v;
        rc.model.context_length = ctx;
        rc.model.kind = spec.kind;
        rc.model.groups = std::move(spec.groups);
        rc.model.max_effective_depth = get_count(m, "model", "max_effective_depth");
        rc.model.validate();
    } catch (const ParseError& e) {
        throw ConfigError(std::string("model.arch: ") + e.what());
    } catch (const ConfigError& e) {
        const std::string what = e.what();
        throw ConfigError(what.starts_with("model.") ? what : "model." + what);
    }

    json train = section(merged, "train");
    const bool auto_warmup = train["warmup_steps"].is_null();
    if (auto_warmup) {
        train.erase("warmup_steps");
    }
    rc.train = train.get<TrainConfig>();
    if (auto_warmup) {
        rc.train.warmup_steps = std::min<std::size_t>(100, rc.train.total_steps / 10);
        rc.json["train"]["warmup_steps"] = rc.train.warmup_steps;
    }
    rc.sampler = section(merged, "sampler").get<SamplerConfig>();
    try {
        rc.train.validate();
    } catch (const ConfigError& e) {
        throw ConfigError(std::string("train.") + e.what());
    }
    try {
        rc.sampler.validate();
    } catch (const ConfigError& e) {
        throw ConfigError(std::string("sampler.") + e.what());
    }

    const json& d = section(merged, "data");
    rc.data.corpus = get_string(d, "data", "corpus");
    rc.data.vocab = get_string(d, "data", "vocab");
    rc.data.validation_fraction = get_number(d, "data", "validation_fraction");
    if (!(rc.data.validation_fraction > 0.0 && rc.data.validation_fraction < 1.0)) {
        throw ConfigError("data.validation_fraction: must lie strictly between 0 and 1");
    }

    const json& g = section(merged, "generate");
    rc.generate.prompts = get_string(g, "generate", "prompts");
    rc.generate.completions_per_prompt = get_count(g, "generate", "completions_per_prompt");
    rc.generate.model_tag = get_string(g, "generate", "model_tag");
    if (rc.generate.completions_per_prompt < 1) {
        throw ConfigError("generate.completions_per_prompt: must be at least 1");
    }

    const json& e = section(merged, "eval");
    rc.eval.base_url = get_string(e, "eval", "base_url");
    rc.eval.path = get_string(e, "eval", "path");
    rc.eval.model = get_string(e, "eval", "model");
    rc.eval.max_retries = get_count(e, "eval", "max_retries");
    rc.eval.initial_backoff = std::chrono::milliseconds(get_count(e, "eval", "initial_backoff_ms"));
    rc.eval.timeout = std::chrono::seconds(get_count(e, "eval", "timeout_s"));
    rc.eval.max_concurrency = get_count(e, "eval", "max_concurrency");
    if (rc.eval.max_concurrency < 1) {
        throw ConfigError("eval.max_concurrency: must be at least 1");
    }

    const json& c = section(merged, "compare");
    rc.compare.standard = get_string(c, "compare", "standard");
    rc.compare.frailt = get_string(c, "compare", "frailt");
    rc.compare.pairing = get_string(c, "compare", "pairing");
    if (rc.compare.pairing != "auto" && rc.compare.pairing != "equal_depth" && rc.compare.pairing != "equal_blocks") {
        throw ConfigError("compare.pairing: expected auto, equal_depth or equal_blocks");
    }
    return rc;
}

void to_json(json& j, const RunManifest& m) {
    auto artifacts = [](const std::vector<Artifact>& list) {
        json out = json::array();
        for (const Artifact& a : list) {
            out.push_back({{"role", a.role},
                           {"path", a.path.string()},
                           {"sha256", a.sha256 ? json(*a.sha256) : json(nullptr)}});
        }
        return out;
    };
    j = {{"command", m.command},
         {"argv", m.argv},
         {"config", m.config},
         {"seed", m.seed},
         {"corpus_digest", m.corpus_digest ? json(*m.corpus_digest) : json(nullptr)},
         {"inputs", artifacts(m.inputs)},
         {"artifacts", artifacts(m.artifacts)},
         {"started_at", m.started_at},
         {"finished_at", m.finished_at ? json(*m.finished_at) : json(nullptr)},
         {"status", m.status},
         {"code_version", m.code_version},
         {"results", m.results}};
}

std::string code_version() { return FRAILT_CODE_VERSION; }

std::string sha256_file(const fs::path& path) {
    const std::string bytes = read_text(path);
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1) {
        throw Error("sha256 failed for " + path.string());
    }
    std::ostringstream hex;
    for (unsigned int i = 0; i < len; ++i) {
        hex << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[i]);
    }
    return hex.str();
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Recursive transformer experiments: train, sample, grade and fit."};
    app.name("frailt");
    app.require_subcommand(1);
    app.set_version_flag("--version", code_version());

    TrainArgs train;
    auto* train_cmd = app.add_subcommand("train", "train one model and save vocab, checkpoint and loss curve");
    train.config.attach(train_cmd);
    train.config.bind(train_cmd, "--arch", "model.arch", "architecture, e.g. 8, 1x2, 2x4");
    bind_model(train.config, train_cmd);
    bind_training(train.config, train_cmd);
    train_cmd->add_option("--out", train.out_dir, "output directory")->required();
    train_cmd->add_option("--compare", train.compare, "require this standard depth to equal the effective depth");
    train_cmd->add_option("--resume", train.resume, "continue from a checkpoint with training state");
    train_cmd->add_option("--stop-at", train.stop_at, "save and exit after this step (resume later)");
    train_cmd->add_flag("--dry-run", train.dry_run, "resolve the config and write the manifest only");

    GenerateArgs gen;
    auto* gen_cmd = app.add_subcommand("generate", "complete story beginnings with a trained model");
    gen.config.attach(gen_cmd);
    gen_cmd->add_option("--checkpoint", gen.checkpoint, "trained checkpoint")->required();
    gen_cmd->add_option("--vocab", gen.vocab, "vocab.json (default: next to the checkpoint)");
    gen.config.bind(gen_cmd, "--prompts", "generate.prompts", "one story beginning per line");
    gen.config.bind(gen_cmd, "-n,--completions", "generate.completions_per_prompt", "completions per prompt");
    gen.config.bind(gen_cmd, "--tag", "generate.model_tag", "model tag recorded with each completion");
    gen.config.bind(gen_cmd, "--temperature", "sampler.temperature", "0 selects greedy decoding");
    gen.config.bind(gen_cmd, "--top-k", "sampler.top_k", "0 disables the restriction");
    gen.config.bind(gen_cmd, "--max-new-tokens", "sampler.max_new_tokens", "token budget per completion");
    gen.config.bind(gen_cmd, "--seed", "sampler.seed", "base sampling seed");
    gen_cmd->add_flag("--greedy", gen.greedy, "deterministic argmax decoding");
    gen_cmd->add_option("--out", gen.out_dir, "output directory")->required();

    EvalArgs eval;
    auto* eval_cmd = app.add_subcommand("gpt-eval", "grade completions with an LLM judge (key from EVAL_API_KEY)");
    eval.config.attach(eval_cmd);
    eval_cmd->add_option("--completions", eval.completions, "completions.jsonl from generate")->required();
    eval_cmd->add_option("--out", eval.out_dir, "output directory")->required();
    eval_cmd->add_flag("--mock", eval.mock, "grade with the built-in offline judge");
    eval.config.bind(eval_cmd, "--base-url", "eval.base_url", "chat-completions endpoint origin");
    eval.config.bind(eval_cmd, "--model", "eval.model", "judge model name");
    eval.config.bind(eval_cmd, "--concurrency", "eval.max_concurrency", "requests in flight");
    eval.config.bind(eval_cmd, "--max-retries", "eval.max_retries", "retries per completion");

    FitArgs fit;
    auto* fit_cmd = app.add_subcommand("fit", "fit score against ln(validation loss)");
    fit_cmd->add_option("--report", fit.reports, "report.json from gpt-eval")->required()->allow_extra_args(false);
    fit_cmd->add_option("--losses", fit.losses, "CSV of model_tag,val_loss")->allow_extra_args(false);
    fit_cmd->add_option("--threshold", fit.threshold, "drop points with a larger loss (inf keeps all)")
        ->capture_default_str();
    fit_cmd->add_option("--out", fit.out_dir, "output directory")->required();

    bool reference_json_out = false;
    auto* ref_cmd = app.add_subcommand("reference", "print the reference validation-loss tables");
    ref_cmd->add_flag("--json", reference_json_out, "emit JSON instead of markdown");

    CompareArgs compare;
    auto* cmp_cmd = app.add_subcommand("compare", "train a standard and a recursive model side by side");
    compare.config.attach(cmp_cmd);
    compare.config.bind(cmp_cmd, "--standard", "compare.standard", "standard architecture, e.g. 8");
    compare.config.bind(cmp_cmd, "--frailt", "compare.frailt", "recursive architecture, e.g. 2x4");
    compare.config.bind(cmp_cmd, "--pairing", "compare.pairing", "auto, equal_depth or equal_blocks");
    bind_model(compare.config, cmp_cmd);
    bind_training(compare.config, cmp_cmd);
    cmp_cmd->add_option("--out", compare.out_dir, "output directory")->required();

    bool schema_defaults = false;
    auto* schema_cmd = app.add_subcommand("schema", "print the config JSON schema");
    schema_cmd->add_flag("--defaults", schema_defaults, "print the default config instead");

    std::vector<std::string> argv_storage{"frailt"};
    argv_storage.insert(argv_storage.end(), args.begin(), args.end());
    std::vector<char*> argv;
    for (std::string& s : argv_storage) {
        argv.push_back(s.data());
    }
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) {
            app.exit(e, out, err);
            return kOk;
        }
        err << "error: " << e.what() << "\n";
        return kConfigError;
    }

    const Context ctx{args, out, err};
    try {
        if (*train_cmd) {
            return cmd_train(ctx, train);
        }
        if (*gen_cmd) {
            return cmd_generate(ctx, gen);
        }
        if (*eval_cmd) {
            return cmd_gpt_eval(ctx, eval);
        }
        if (*fit_cmd) {
            return cmd_fit(ctx, fit);
        }
        if (*ref_cmd) {
            if (reference_json_out) {
                out << reference_json().dump(2) << "\n";
            } else {
                print_reference(out, standard_reference());
                out << "\n";
                print_reference(out, frailt_reference());
            }
            return kOk;
        }
        if (*cmp_cmd) {
            return cmd_compare(ctx, compare);
        }
        out << (schema_defaults ? default_config() : config_schema()).dump(2) << "\n";
        return kOk;
    } catch (const ExitError& e) {
        err << "error: " << e.what() << "\n";
        return e.code;
    } catch (const ConfigError& e) {
        err << "error: " << e.what() << "\n";
        return kConfigError;
    } catch (const BudgetError& e) {
        err << "error: " << e.what() << "\n";
        return kConfigError;
    } catch (const ParseError& e) {
        err << "error: " << e.what() << "\n";
        return kConfigError;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kFailure;
    }
}

}  // namespace frailt::cli

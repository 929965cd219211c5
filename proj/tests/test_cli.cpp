#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "frailt/cli.hpp"
#include "frailt/data.hpp"
#include "frailt/evaluator.hpp"
#include "frailt/model.hpp"

using namespace frailt;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Result {
    int code;
    std::string out;
    std::string err;
};

Result run(std::vector<std::string> args) {
    std::ostringstream out;
    std::ostringstream err;
    const int code = cli::run(args, out, err);
    return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void spit(const fs::path& p, const std::string& text) {
    std::ofstream(p, std::ios::binary) << text;
}

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / ("frailt_cli_" + name)) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string operator/(const std::string& leaf) const { return (path / leaf).string(); }
};

// Small enough to train in well under a second.
std::vector<std::string> tiny_train(const std::string& out, std::vector<std::string> extra = {}) {
    std::vector<std::string> args{"train", "--arch", "1x2", "--dim", "16", "--heads", "2", "--ctx", "32",
                                  "--steps", "12", "--warmup", "2", "--eval-interval", "4", "--batch", "4",
                                  "--out", out};
    args.insert(args.end(), extra.begin(), extra.end());
    return args;
}

json report_with(const std::vector<std::pair<std::string, double>>& models) {
    json list = json::array();
    for (const auto& [tag, overall] : models) {
        list.push_back({{"model_tag", tag},
                        {"n", 3},
                        {"grammar", overall},
                        {"creativity", overall},
                        {"consistency", overall},
                        {"plot", overall},
                        {"overall", overall},
                        {"val_loss", nullptr}});
    }
    return {{"models", list}};
}

}  // namespace

TEST_CASE("reference tables") {
    const Result r = run({"reference"});
    REQUIRE(r.code == cli::kOk);
    CHECK(r.out.find("| 64 | 1.685 | 1.409 | 1.212 | 1.067 |") != std::string::npos);
    CHECK(r.out.find("| d | 1^2 | 1^8 | 2^4 | 4^2 |") != std::string::npos);
    CHECK(r.out.find("| 1024 | 0.681 | 0.596 | 0.559 | 0.533 |") != std::string::npos);
    std::size_t rows = 0;
    for (std::size_t pos = 0; (pos = r.out.find("\n| ", pos)) != std::string::npos; ++pos) {
        ++rows;
    }
    CHECK(rows == 2 * (1 + 5));  // header + 5 dims per table

    const json j = json::parse(run({"reference", "--json"}).out);
    std::size_t values = 0;
    for (const char* t : {"standard", "frailt"}) {
        for (const json& row : j[t]["rows"]) {
            values += row["losses"].size();
        }
    }
    CHECK(values == 40);
}

TEST_CASE("config schema and overrides") {
    CHECK(json::parse(run({"schema"}).out) == json::parse(slurp(fs::path(FRAILT_SOURCE_DIR) / "docs/config.schema.json")));
    const json schema = cli::config_schema();
    const json defaults = cli::default_config();
    for (const auto& [section, fields] : defaults.items()) {
        for (const auto& [key, value] : fields.items()) {
            CAPTURE(section + "." + key);
            CHECK(schema["properties"][section]["properties"].contains(key));
        }
    }

    json c = cli::default_config();
    cli::apply_override(c, "model.arch=8");
    CHECK(c["model"]["arch"] == "8");  // stays a string
    cli::apply_override(c, "train.peak_lr=1e-3");
    CHECK(c["train"]["peak_lr"] == 1e-3);
    cli::apply_override(c, "data.vocab=some/path.json");
    CHECK(c["data"]["vocab"] == "some/path.json");
    CHECK_THROWS_WITH_AS(cli::apply_override(c, "train.nope=1"), doctest::Contains("train.nope"), ConfigError);
    CHECK_THROWS_WITH_AS(cli::apply_override(c, "nope.x=1"), doctest::Contains("nope"), ConfigError);
    CHECK_THROWS_AS(cli::apply_override(c, "train=1"), ConfigError);
    CHECK_THROWS_AS(cli::apply_override(c, "no-equals"), ConfigError);

    json base = cli::default_config();
    CHECK_THROWS_WITH_AS(cli::merge_config(base, json{{"sampler", {{"topk", 3}}}}), doctest::Contains("sampler.topk"),
                         ConfigError);

    const cli::RunConfig rc = cli::resolve_config(json::object());
    CHECK(rc.train.warmup_steps == 100);
    CHECK(rc.model.context_length == 512);
    CHECK(rc.model.vocab_size == 512);
    CHECK(rc.generate.completions_per_prompt == 3);
    CHECK(cli::resolve_config(json{{"train", {{"total_steps", 50}}}}).train.warmup_steps == 5);
    CHECK_THROWS_WITH_AS(cli::resolve_config(json{{"model", {{"arch", "2y"}}}}), doctest::Contains("model.arch"),
                         ConfigError);
    CHECK_THROWS_WITH_AS(cli::resolve_config(json{{"model", {{"embedding_dim", 30}}}}),
                         doctest::Contains("model.embedding_dim"), ConfigError);
    CHECK_THROWS_WITH_AS(cli::resolve_config(json{{"train", {{"batch_size", 0}}}}),
                         doctest::Contains("train.batch_size"), ConfigError);
    CHECK_THROWS_WITH_AS(cli::resolve_config(json{{"eval", {{"model", 4}}}}), doctest::Contains("eval.model"),
                         ConfigError);
}

TEST_CASE("usage and config errors exit 2") {
    TempDir dir("usage");
    CHECK(run({}).code == cli::kConfigError);
    CHECK(run({"train"}).code == cli::kConfigError);  // --out is required
    CHECK(run({"train", "--out", dir / "x", "--bogus"}).code == cli::kConfigError);
    CHECK(run({"--help"}).code == cli::kOk);

    const Result bad_field = run({"train", "--out", dir / "x", "--set", "train.peak_lr=-1"});
    CHECK(bad_field.code == cli::kConfigError);
    CHECK(bad_field.err.find("train.peak_lr") != std::string::npos);

    spit(dir / "cfg.json", R"({"model": {"arch": "1x2", "n_head": 4}})");
    const Result bad_file = run({"train", "--out", dir / "x", "--config", dir / "cfg.json"});
    CHECK(bad_file.code == cli::kConfigError);
    CHECK(bad_file.err.find("model.n_head: unknown field") != std::string::npos);

    spit(dir / "broken.json", "{ not json");
    CHECK(run({"train", "--out", dir / "x", "--config", dir / "broken.json"}).code == cli::kConfigError);
    CHECK(run({"train", "--out", dir / "x", "--corpus", dir / "missing.txt"}).code == cli::kConfigError);
}

TEST_CASE("train dry runs resolve architectures") {
    TempDir dir("dry");
    const Result eight = run({"train", "--arch", "8", "--dim", "64", "--dry-run", "--out", dir / "eight"});
    REQUIRE(eight.code == cli::kOk);
    const json j = json::parse(eight.out);
    CHECK(j["label"] == "8-layer");
    CHECK(j["effective_depth"] == 8);
    CHECK(j["model"]["kind"] == "standard");
    CHECK(j["model"]["groups"].size() == 8);
    CHECK(j["parameters"] == param_count(make_config("8", 64)).total);

    const Result parity = run({"train", "--arch", "2x4", "--compare", "8", "--dry-run", "--out", dir / "p"});
    CHECK(parity.code == cli::kOk);
    CHECK(parity.err.find("effective depth 8 = 8") != std::string::npos);
    const Result mismatch = run({"train", "--arch", "2x4", "--compare", "6", "--dry-run", "--out", dir / "q"});
    CHECK(mismatch.code == cli::kConfigError);
    CHECK(mismatch.err.find("is 8, not 6") != std::string::npos);
}

TEST_CASE("train is reproducible and documents itself") {
    TempDir dir("train");
    const Result a = run(tiny_train(dir / "a"));
    REQUIRE_MESSAGE(a.code == cli::kOk, a.err);
    REQUIRE(run(tiny_train(dir / "b")).code == cli::kOk);
    CHECK(slurp(dir / "a/checkpoint.bin") == slurp(dir / "b/checkpoint.bin"));
    CHECK(slurp(dir / "a/vocab.json") == slurp(dir / "b/vocab.json"));
    CHECK(slurp(dir / "a/loss.csv").starts_with("step,train_loss,val_loss\n1,"));

    const json m = json::parse(slurp(dir / "a/train_manifest.json"));
    CHECK(m["command"] == "train");
    CHECK(m["status"] == "complete");
    CHECK(m["seed"] == 7);
    CHECK(m["config"]["train"]["total_steps"] == 12);
    CHECK(m["config"]["model"]["embedding_dim"] == 16);
    CHECK(m["corpus_digest"] == load_corpus(fs::path(FRAILT_DATA_DIR) / "mini_corpus.txt").digest);
    CHECK(m["code_version"].get<std::string>() == cli::code_version());
    CHECK(!m["started_at"].get<std::string>().empty());
    std::set<std::string> listed;
    for (const json& art : m["artifacts"]) {
        const fs::path p = art["path"].get<std::string>();
        listed.insert(p.filename().string());
        REQUIRE(fs::exists(p));
        if (p.filename() != "train_manifest.json") {
            CHECK(art["sha256"] == cli::sha256_file(p));
        }
    }
    std::set<std::string> present;
    for (const auto& e : fs::directory_iterator(dir.path / "a")) {
        present.insert(e.path().filename().string());
    }
    CHECK(listed == present);

    SUBCASE("an interrupted run resumes to the same bytes") {
        REQUIRE(run(tiny_train(dir / "half", {"--stop-at", "5"})).code == cli::kOk);
        const Result resumed = run(tiny_train(dir / "resumed", {"--resume", dir / "half/checkpoint.bin"}));
        REQUIRE_MESSAGE(resumed.code == cli::kOk, resumed.err);
        CHECK(slurp(dir / "resumed/checkpoint.bin") == slurp(dir / "a/checkpoint.bin"));
        CHECK(slurp(dir / "resumed/loss.csv") == slurp(dir / "a/loss.csv"));
        CHECK(run(tiny_train(dir / "r2", {"--resume", dir / "half/checkpoint.bin", "--dim", "32"})).code ==
              cli::kConfigError);
    }
    SUBCASE("the manifest exists before work starts and records failure") {
        const Result r = run(tiny_train(dir / "small", {"--vocab-size", "100"}));
        CHECK(r.code == cli::kConfigError);
        const json failed = json::parse(slurp(dir / "small/train_manifest.json"));
        CHECK(failed["status"] == "failed");
        CHECK(failed["results"]["error"].get<std::string>().find("model.vocab_size") != std::string::npos);
    }
}

TEST_CASE("generate") {
    TempDir dir("generate");
    REQUIRE(run(tiny_train(dir / "model")).code == cli::kOk);
    const std::string ckpt = dir / "model/checkpoint.bin";
    spit(dir / "prompts.txt", "Tom had a ball.\n\nLily saw a cat.\nThe sun was warm.\n");

    const std::vector<std::string> greedy{"generate", "--checkpoint", ckpt, "--prompts", dir / "prompts.txt",
                                          "--greedy", "-n", "1", "--max-new-tokens", "12", "--seed", "41"};
    auto with_out = [](std::vector<std::string> a, const std::string& out) {
        a.push_back("--out");
        a.push_back(out);
        return a;
    };
    const Result g1 = run(with_out(greedy, dir / "g1"));
    REQUIRE_MESSAGE(g1.code == cli::kOk, g1.err);
    REQUIRE(run(with_out(greedy, dir / "g2")).code == cli::kOk);
    CHECK(slurp(dir / "g1/completions.jsonl") == slurp(dir / "g2/completions.jsonl"));

    const auto items = load_completions(dir / "g1/completions.jsonl");
    REQUIRE(items.size() == 3);  // the blank line is not a prompt
    const std::vector<std::string> prompts{"Tom had a ball.", "Lily saw a cat.", "The sun was warm."};
    for (std::size_t i = 0; i < items.size(); ++i) {
        CHECK(items[i].story.starts_with(prompts[i] + "\n***\n"));
        CHECK(items[i].story.find("***", prompts[i].size() + 5) == std::string::npos);
        CHECK(items[i].model_tag == "1^2@d16");
    }
    const json m = json::parse(slurp(dir / "g1/generate_manifest.json"));
    CHECK(m["seed"] == 41);
    CHECK(m["config"]["sampler"]["seed"] == 41);
    CHECK(m["config"]["sampler"]["temperature"] == 0.0);
    CHECK(slurp(dir / "g1/losses.csv").starts_with("model_tag,val_loss\n1^2@d16,"));

    const Result sampled = run({"generate", "--checkpoint", ckpt, "--prompts", dir / "prompts.txt", "--max-new-tokens",
                                "8", "--out", dir / "g3"});
    REQUIRE(sampled.code == cli::kOk);
    CHECK(load_completions(dir / "g3/completions.jsonl").size() == 9);  // three per prompt by default

    spit(dir / "garbage.bin", "not a checkpoint at all");
    CHECK(run({"generate", "--checkpoint", dir / "garbage.bin", "--out", dir / "x"}).code == cli::kBadCheckpoint);
    CHECK(run({"generate", "--checkpoint", dir / "absent.bin", "--out", dir / "x"}).code == cli::kBadCheckpoint);
    std::string flipped = slurp(ckpt);
    flipped[flipped.size() / 2] ^= 0x10;
    spit(dir / "flipped.bin", flipped);
    CHECK(run({"generate", "--checkpoint", dir / "flipped.bin", "--vocab", dir / "model/vocab.json", "--out",
               dir / "x"})
              .code == cli::kBadCheckpoint);
    spit(dir / "empty.txt", "\n  \n");
    CHECK(run({"generate", "--checkpoint", ckpt, "--prompts", dir / "empty.txt", "--out", dir / "x"}).code ==
          cli::kConfigError);
}

TEST_CASE("gpt-eval") {
    TempDir dir("eval");
    std::vector<EvalItem> items;
    for (int p = 0; p < 3; ++p) {
        for (std::size_t k = 0; k < 2; ++k) {
            items.push_back({"p" + std::to_string(p), k, "1^2@d64",
                             "Tom had a ball.\n***\nTom threw the ball. It went far. Tom " +
                                 std::string(k ? "ran" : "smiled") + "."});
        }
    }
    save_completions(dir / "completions.jsonl", items);

    ::unsetenv(cli::kApiKeyVariable);
    const Result no_key = run({"gpt-eval", "--completions", dir / "completions.jsonl", "--out", dir / "e0"});
    CHECK(no_key.code == cli::kMissingApiKey);
    CHECK(no_key.err.find("EVAL_API_KEY") != std::string::npos);
    CHECK(!fs::exists(dir / "e0/scores.jsonl"));

    const Result mock = run({"gpt-eval", "--completions", dir / "completions.jsonl", "--out", dir / "e1", "--mock"});
    REQUIRE_MESSAGE(mock.code == cli::kOk, mock.err);
    const json report = json::parse(slurp(dir / "e1/report.json"));
    CHECK(report["scored"] == 6);
    REQUIRE(report["models"].size() == 1);
    for (const char* k : {"grammar", "creativity", "consistency", "plot", "overall"}) {
        CHECK(report["models"][0][k].get<double>() >= 1.0);
        CHECK(report["models"][0][k].get<double>() <= 10.0);
    }
    const std::string scores_before = slurp(dir / "e1/scores.jsonl");
    const Result again = run({"gpt-eval", "--completions", dir / "completions.jsonl", "--out", dir / "e1", "--mock"});
    CHECK(json::parse(again.out)["skipped"] == 6);
    CHECK(json::parse(again.out)["scored"] == 0);
    CHECK(slurp(dir / "e1/scores.jsonl") == scores_before);

    SUBCASE("the key travels only in the Authorization header") {
        MockJudgeServer server;
        const std::string secret = "sk-test-0123456789abcdef";
        ::setenv(cli::kApiKeyVariable, secret.c_str(), 1);
        const Result live = run({"gpt-eval", "--completions", dir / "completions.jsonl", "--out", dir / "e2",
                                 "--base-url", server.base_url()});
        ::unsetenv(cli::kApiKeyVariable);
        REQUIRE_MESSAGE(live.code == cli::kOk, live.err);
        REQUIRE(server.authorization_headers().size() == 6);
        for (const std::string& h : server.authorization_headers()) {
            CHECK(h == "Bearer " + secret);
        }
        CHECK(live.out.find(secret) == std::string::npos);
        CHECK(live.err.find(secret) == std::string::npos);
        for (const auto& e : fs::recursive_directory_iterator(dir.path)) {
            if (e.is_regular_file()) {
                CAPTURE(e.path());
                CHECK(slurp(e.path()).find(secret) == std::string::npos);
            }
        }
    }
}

TEST_CASE("fit") {
    TempDir dir("fit");
    // score = 3 - 2 ln(loss) for every metric
    std::vector<std::pair<std::string, double>> models;
    std::string losses = "model_tag,val_loss\n";
    for (double loss : {0.524, 0.661, 0.817, 0.967, 1.409}) {
        const std::string tag = "m" + std::to_string(models.size());
        models.emplace_back(tag, 3.0 - 2.0 * std::log(loss));
        losses += tag + "," + std::to_string(loss) + "\n";
    }
    spit(dir / "report.json", report_with(models).dump());
    spit(dir / "losses.csv", losses);

    const Result r = run({"fit", "--report", dir / "report.json", "--losses", dir / "losses.csv", "--out", dir / "f"});
    REQUIRE_MESSAGE(r.code == cli::kOk, r.err);
    const json j = json::parse(r.out);
    CHECK(j["included"] == 4);  // 1.409 exceeds the default threshold
    for (const json& f : j["fits"]) {
        CAPTURE(f["metric"]);
        CHECK(std::abs(f["slope"].get<double>() + 2.0) < 1e-6);  // losses.csv carries 6 digits
        CHECK(std::abs(f["intercept"].get<double>() - 3.0) < 1e-6);
        CHECK(std::abs(f["r_squared"].get<double>() - 1.0) < 1e-9);
    }
    CHECK(slurp(dir / "f/fit.csv").starts_with("metric,slope,intercept,r_squared,n\noverall,"));
    const std::string ref = slurp(dir / "f/reference_losses.csv");
    CHECK(std::count(ref.begin(), ref.end(), '\n') == 41);
    CHECK(ref.find("frailt,1^8,1024,0.596\n") != std::string::npos);
    CHECK(ref.find("standard,8-layer,64,1.067\n") != std::string::npos);
    CHECK(slurp(dir / "f/points.csv").find("m4,1.409,") != std::string::npos);

    const Result all = run({"fit", "--report", dir / "report.json", "--losses", dir / "losses.csv", "--threshold",
                            "inf", "--out", dir / "g"});
    CHECK(json::parse(all.out)["included"] == 5);

    const Result tight = run({"fit", "--report", dir / "report.json", "--losses", dir / "losses.csv", "--threshold",
                              "0.6", "--out", dir / "h"});
    CHECK(tight.code == cli::kInsufficientPoints);
    const Result no_losses = run({"fit", "--report", dir / "report.json", "--out", dir / "i"});
    CHECK(no_losses.code == cli::kInsufficientPoints);
    CHECK(no_losses.err.find("skipping m0") != std::string::npos);

    spit(dir / "same.csv", "model_tag,val_loss\nm0,0.5\nm1,0.5\n");
    CHECK(run({"fit", "--report", dir / "report.json", "--losses", dir / "same.csv", "--out", dir / "j"}).code ==
          cli::kInsufficientPoints);
}

TEST_CASE("compare") {
    TempDir dir("compare");
    const Result r = run({"compare", "--standard", "1", "--frailt", "1x2", "--dim", "16", "--heads", "2", "--ctx",
                          "32", "--steps", "4", "--warmup", "1", "--eval-interval", "2", "--batch", "2", "--out",
                          dir / "c"});
    REQUIRE_MESSAGE(r.code == cli::kOk, r.err);
    CHECK(r.out.find("| 1-layer | 16 | 1 |") != std::string::npos);
    CHECK(r.out.find("| 1^2 | 16 | 2 |") != std::string::npos);
    for (const char* f : {"report.json", "table.md", "1-layer_loss.csv", "1x2_loss.csv", "compare_manifest.json"}) {
        CHECK(fs::exists(dir.path / "c" / f));
    }
    CHECK(json::parse(slurp(dir / "c/compare_manifest.json"))["results"]["pairing"] == "equal_blocks");
    CHECK(run({"compare", "--standard", "8", "--frailt", "2x4", "--pairing", "equal_blocks", "--dim", "16", "--heads",
               "2", "--steps", "4", "--out", dir / "d"})
              .code == cli::kConfigError);
}

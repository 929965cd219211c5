#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

#include "frailt/checkpoint.hpp"
#include "frailt/error.hpp"
#include "frailt/experiment.hpp"
#include "frailt/trainer.hpp"

using namespace frailt;

namespace {

constexpr std::size_t kCtx = 16;

const TrainingData& tiny_data() {
    static const TrainingData data = [] {
        std::vector<std::string> stories;
        for (int i = 0; i < 40; ++i) {
            stories.push_back("Tom had a red ball " + std::to_string(i % 7) + ". Lily saw the ball and smiled.");
        }
        const Corpus corpus = make_corpus(std::move(stories));
        return prepare_data(corpus, Vocab(), kCtx);
    }();
    return data;
}

ModelConfig tiny(std::string_view arch) { return make_config(arch, 16, 2, 300, kCtx); }

TrainConfig quick(std::size_t total) {
    TrainConfig t;
    t.total_steps = total;
    t.warmup_steps = 2;
    t.batch_size = 2;
    t.eval_interval = 4;
    t.peak_lr = 3e-3;
    return t;
}

std::string file_bytes(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::filesystem::path temp_path(const std::string& name) { return std::filesystem::temp_directory_path() / name; }

// Token-weighted NLL from inference logits, log-sum-exp in double.
double reference_nll(const Model& model, const ModelWeights& w, std::span<const Sequence> windows) {
    double total = 0.0;
    std::size_t count = 0;
    for (const Sequence& s : windows) {
        const Tensor logits = model.logits(w, s.inputs);
        const std::size_t V = logits.dim(1);
        for (std::size_t t = 0; t < s.targets.size(); ++t) {
            double mx = -1e300;
            for (std::size_t c = 0; c < V; ++c) {
                mx = std::max(mx, static_cast<double>(logits.at(t, c)));
            }
            double z = 0.0;
            for (std::size_t c = 0; c < V; ++c) {
                z += std::exp(static_cast<double>(logits.at(t, c)) - mx);
            }
            total += mx + std::log(z) - logits.at(t, static_cast<std::size_t>(s.targets[t]));
            ++count;
        }
    }
    return total / static_cast<double>(count);
}

}  // namespace

TEST_CASE("lr_at") {
    TrainConfig c;
    c.peak_lr = 5e-4;
    c.warmup_steps = 100;
    c.total_steps = 1000;
    CHECK(lr_at(0, c) == 0.0);
    CHECK(lr_at(50, c) == doctest::Approx(2.5e-4).epsilon(1e-12));
    CHECK(lr_at(100, c) == 5e-4);
    CHECK(lr_at(1000, c) == doctest::Approx(5e-5).epsilon(1e-12));
    // Halfway through the decay the cosine term is zero: mean of peak and floor.
    CHECK(lr_at(550, c) == doctest::Approx(0.5 * (5e-4 + 5e-5)).epsilon(1e-12));
    for (std::size_t s = 100; s < 1000; ++s) {
        REQUIRE(lr_at(s + 1, c) <= lr_at(s, c));
    }
    CHECK_THROWS_AS(lr_at(1001, c), ConfigError);
    c.warmup_steps = c.total_steps;
    CHECK(lr_at(1000, c) == 5e-4);
}

TEST_CASE("equalize_budget") {
    CHECK(equalize_budget(8, 2) == 4);
    CHECK(equalize_budget(4, 4) == 1);
    CHECK(equalize_budget(8, 8) == 1);
    try {
        equalize_budget(8, 3);
        FAIL("expected BudgetError");
    } catch (const BudgetError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("2x4") != std::string::npos);
        CHECK(msg.find("4x2") != std::string::npos);
        CHECK(msg.find(" 6 9") != std::string::npos);
    }
    CHECK_THROWS_AS(equalize_budget(8, 0), BudgetError);
}

TEST_CASE("TrainConfig validation and JSON") {
    TrainConfig c;
    CHECK_NOTHROW(c.validate());
    const nlohmann::json j = c;
    CHECK(j.get<TrainConfig>() == c);
    CHECK(nlohmann::json{{"total_steps", 300}}.get<TrainConfig>().total_steps == 300);
    CHECK_THROWS_WITH_AS(nlohmann::json({{"lr", 1.0}}).get<TrainConfig>(), "train.lr: unknown field", ConfigError);
    CHECK_THROWS_AS(nlohmann::json({{"batch_size", -1}}).get<TrainConfig>(), ConfigError);
    c.warmup_steps = c.total_steps + 1;
    CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("warmup_steps"), ConfigError);
    c = TrainConfig{};
    c.grad_clip = 0;
    CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("grad_clip"), ConfigError);
}

TEST_CASE("gradient clipping") {
    GradientBuffers g{{6.0f}, {0.0f, 8.0f}};
    CHECK(clip_gradients(g, 1.0) == 10.0);
    CHECK(g[0][0] == doctest::Approx(0.6).epsilon(1e-7));
    CHECK(g[1][1] == doctest::Approx(0.8).epsilon(1e-7));
    GradientBuffers small{{0.3f, 0.4f}};
    CHECK(clip_gradients(small, 1.0) == doctest::Approx(0.5));
    CHECK(small[0][0] == 0.3f);
}

TEST_CASE("weight decay applies to matmul weights and the output only") {
    const ModelConfig cfg = tiny("1x2");
    ModelWeights w = init_weights(cfg, 3);
    // Give encodings and norms non-zero values so a decay would show.
    for (auto& [name, t] : named_parameters(w)) {
        if (!decays(name)) {
            for (float& v : t->data()) {
                v += 0.25f;
            }
        }
    }
    const ModelWeights before = w;
    std::set<std::string> decayed;
    for (const auto& [name, t] : named_parameters(w)) {
        if (decays(name)) {
            decayed.insert(name);
        }
    }
    CHECK(decayed == std::set<std::string>{"groups.0.blocks.0.wq", "groups.0.blocks.0.wk", "groups.0.blocks.0.wv",
                                           "groups.0.blocks.0.wo", "groups.0.blocks.0.w_gate", "groups.0.blocks.0.w_up",
                                           "groups.0.blocks.0.w_down", "output"});

    TrainingState state = initial_state(w, 0);
    GradientBuffers zero;
    for (const auto& [name, t] : named_parameters(w)) {
        zero.emplace_back(t->numel(), 0.0f);
    }
    TrainConfig c;
    const double lr = 0.01;
    adamw_update(w, zero, state, lr, c);
    CHECK(state.step == 1);
    const auto a = named_parameters(before);
    const auto b = named_parameters(w);
    for (std::size_t i = 0; i < a.size(); ++i) {
        CAPTURE(a[i].first);
        for (std::size_t k = 0; k < a[i].second->numel(); ++k) {
            const float p = a[i].second->data()[k];
            const float want = decays(a[i].first) ? static_cast<float>(p - lr * c.weight_decay * p) : p;
            REQUIRE(b[i].second->data()[k] == want);
        }
    }
}

TEST_CASE("AdamW matches a hand-computed two-step update") {
    const ModelConfig cfg = tiny("1");
    ModelWeights w = init_weights(cfg, 5);
    TrainingState state = initial_state(w, 0);
    TrainConfig c;
    GradientBuffers g;
    for (const auto& [name, t] : named_parameters(w)) {
        g.emplace_back(t->numel(), 0.0f);
    }
    auto named = named_parameters(w);
    const std::size_t wq = 2;  // tok_embedding, attn_norm, wq
    REQUIRE(named[wq].first == "groups.0.blocks.0.wq");
    const double p0 = named[wq].second->data()[0];
    const double g1 = 0.3;
    const double g2 = -0.1;
    g[wq][0] = static_cast<float>(g1);
    adamw_update(w, g, state, 1e-3, c);
    const double p1_f = named_parameters(w)[wq].second->data()[0];
    g[wq][0] = static_cast<float>(g2);
    adamw_update(w, g, state, 2e-3, c);
    const double p2_f = named_parameters(w)[wq].second->data()[0];

    double m = (1 - 0.9) * g1;
    double v = (1 - 0.95) * g1 * g1;
    double p1 = p0 - 1e-3 * 0.1 * p0;
    p1 -= 1e-3 * (m / (1 - 0.9)) / (std::sqrt(v / (1 - 0.95)) + 1e-8);
    CHECK(p1_f == doctest::Approx(p1).epsilon(1e-6));
    m = 0.9 * m + 0.1 * g2;
    v = 0.95 * v + 0.05 * g2 * g2;
    double p2 = p1_f - 2e-3 * 0.1 * p1_f;
    p2 -= 2e-3 * (m / (1 - 0.81)) / (std::sqrt(v / (1 - 0.95 * 0.95)) + 1e-8);
    CHECK(p2_f == doctest::Approx(p2).epsilon(1e-6));
}

TEST_CASE("train_step") {
    const ModelConfig cfg = tiny("1x2");
    const Model model(cfg);
    const TrainingData& data = tiny_data();
    const Batch batch{data.train[0], data.train[1]};

    SUBCASE("zero learning rate leaves weights bit-identical") {
        TrainConfig c = quick(10);
        c.peak_lr = 0.0;
        ModelWeights w = init_weights(cfg, 1);
        const std::string before = weights_digest(w);
        TrainingState s = initial_state(w, 0);
        for (int i = 0; i < 3; ++i) {
            train_step(model, w, s, batch, c);
        }
        CHECK(weights_digest(w) == before);
        CHECK(s.step == 3);
    }
    SUBCASE("one step at the default peak LR lowers that batch's loss") {
        TrainConfig c;
        c.warmup_steps = 0;
        for (std::uint64_t seed = 0; seed < 5; ++seed) {
            ModelWeights w = init_weights(cfg, seed);
            TrainingState s = initial_state(w, 0);
            const StepResult r = train_step(model, w, s, batch, c);
            const double after = batch_gradients(model, w, batch).loss;
            CAPTURE(seed);
            CHECK(after < r.loss);
            CHECK(r.lr == doctest::Approx(lr_at(1, c)));
        }
    }
    SUBCASE("batch gradient is the mean of per-sequence gradients") {
        const ModelWeights w = init_weights(cfg, 2);
        const LossAndGrads a = batch_gradients(model, w, Batch{data.train[0]});
        const LossAndGrads b = batch_gradients(model, w, Batch{data.train[1]});
        const LossAndGrads ab = batch_gradients(model, w, batch);
        CHECK(ab.loss == doctest::Approx(0.5 * (a.loss + b.loss)).epsilon(1e-12));
        for (std::size_t i = 0; i < ab.grads.size(); ++i) {
            for (std::size_t k = 0; k < ab.grads[i].size(); ++k) {
                REQUIRE(ab.grads[i][k] ==
                        doctest::Approx(0.5 * (a.grads[i][k] + b.grads[i][k])).epsilon(1e-5).scale(1e-6));
            }
        }
    }
    SUBCASE("thread count does not change the result") {
        const ModelWeights w = init_weights(cfg, 2);
        const Batch four{data.train[0], data.train[1], data.train[2], data.train[3]};
        const LossAndGrads one = batch_gradients(model, w, four, 1);
        const LossAndGrads three = batch_gradients(model, w, four, 3);
        CHECK(one.loss == three.loss);
        CHECK(one.grads == three.grads);
    }
    SUBCASE("non-finite loss reports step and batch digest") {
        ModelWeights w = init_weights(cfg, 1);
        w.output.data()[0] = std::numeric_limits<float>::quiet_NaN();
        TrainingState s = initial_state(w, 0);
        s.step = 41;
        const std::string digest = BatchStream::digest(batch);
        CHECK_THROWS_WITH_AS(train_step(model, w, s, batch, quick(100)),
                             doctest::Contains(("step 42 (batch " + digest + ")").c_str()), TrainingError);
    }
}

TEST_CASE("evaluate_validation_loss") {
    const Corpus corpus = load_corpus(std::filesystem::path(FRAILT_DATA_DIR) / "mini_corpus.txt");
    const Vocab vocab;  // byte level keeps this test independent of BPE training
    const auto windows = make_windows(token_stream(vocab, corpus.validation()), 64);
    const ModelConfig cfg = make_config("1x2", 32, 4, 512, 64);
    const Model model(cfg);
    const ModelWeights w = init_weights(cfg, 11);
    const std::string before = weights_digest(w);

    const double loss = evaluate_validation_loss(model, w, windows);
    CHECK(std::abs(loss - std::log(512.0)) < 0.3);
    CHECK(evaluate_validation_loss(model, w, windows) == loss);
    CHECK(evaluate_validation_loss(model, w, windows, 3) == loss);
    CHECK(weights_digest(w) == before);
    CHECK(loss == doctest::Approx(reference_nll(model, w, windows)).epsilon(1e-6));
    CHECK_THROWS_AS(evaluate_validation_loss(model, w, std::span<const Sequence>{}), DataError);
}

TEST_CASE("checkpoints") {
    const ModelConfig cfg = tiny("[2x1],1x2");
    const TrainingData& data = tiny_data();
    Trainer trainer(cfg, quick(6), init_weights(cfg, 9), data);
    trainer.run(3);
    const Checkpoint ck{cfg, trainer.weights(), trainer.state()};
    const auto p1 = temp_path("frailt_ck1.bin");
    const auto p2 = temp_path("frailt_ck2.bin");

    SUBCASE("save, load, save is byte-identical") {
        save_checkpoint(p1, ck);
        const Checkpoint back = load_checkpoint(p1);
        CHECK(back.config == cfg);
        CHECK(weights_digest(back.weights) == weights_digest(ck.weights));
        REQUIRE(back.state.has_value());
        CHECK(*back.state == *ck.state);
        save_checkpoint(p2, back);
        CHECK(file_bytes(p1) == file_bytes(p2));

        std::vector<std::string> names;
        for (const auto& [name, t] : named_parameters(back.weights)) {
            names.push_back(name);
        }
        std::vector<std::string> expected;
        for (const TensorCount& tc : param_count(cfg).tensors) {
            expected.push_back(tc.name);
        }
        CHECK(names == expected);
    }
    SUBCASE("weights-only checkpoints") {
        const std::string bytes = serialize_checkpoint({cfg, ck.weights, std::nullopt});
        CHECK_FALSE(parse_checkpoint(bytes).state.has_value());
        CHECK(bytes.substr(0, 4) == "FRLT");
    }
    SUBCASE("corruption") {
        const std::string good = serialize_checkpoint(ck);
        std::string bad = good;
        bad[4] ^= 1;  // version
        CHECK_THROWS_AS(parse_checkpoint(bad), FormatError);
        bad = good;
        bad[0] = 'X';
        CHECK_THROWS_AS(parse_checkpoint(bad), FormatError);
        CHECK_THROWS_AS(parse_checkpoint(good.substr(0, good.size() - 100)), IntegrityError);
        CHECK_THROWS_AS(parse_checkpoint(good.substr(0, 10)), IntegrityError);
        bad = good;
        bad[good.size() / 2] ^= 0x40;
        CHECK_THROWS_AS(parse_checkpoint(bad), IntegrityError);
        CHECK_THROWS_AS(load_checkpoint(temp_path("frailt_missing.bin")), FormatError);
    }
    SUBCASE("resumed training matches the uninterrupted run") {
        TrainConfig c = quick(10);
        c.eval_interval = 3;
        Trainer straight(cfg, c, init_weights(cfg, 4), data);
        straight.run();

        Trainer first(cfg, c, init_weights(cfg, 4), data);
        first.run(4);
        save_checkpoint(p1, {cfg, first.weights(), first.state()});
        Checkpoint loaded = load_checkpoint(p1);
        Trainer resumed(loaded.config, c, std::move(loaded.weights), std::move(*loaded.state), data);
        resumed.run();

        const auto& h1 = straight.state().history;
        const auto& h2 = resumed.state().history;
        REQUIRE(h1.size() == 10);
        CHECK(h1 == h2);
        CHECK(weights_digest(straight.weights()) == weights_digest(resumed.weights()));
        CHECK(straight.state() == resumed.state());
    }
    std::filesystem::remove(p1);
    std::filesystem::remove(p2);
}

TEST_CASE("trainer history and determinism") {
    const ModelConfig cfg = tiny("1x2");
    TrainConfig c = quick(9);
    Trainer a(cfg, c, init_weights(cfg, 1), tiny_data());
    Trainer b(cfg, c, init_weights(cfg, 1), tiny_data());
    std::vector<std::size_t> seen;
    a.run(std::nullopt, [&](const LossRecord& r) { seen.push_back(r.step); });
    b.run();
    CHECK(seen == std::vector<std::size_t>{1, 2, 3, 4, 5, 6, 7, 8, 9});
    CHECK(weights_digest(a.weights()) == weights_digest(b.weights()));
    CHECK(a.state() == b.state());
    for (const LossRecord& r : a.state().history) {
        CHECK(r.val_loss.has_value() == (r.step == 4 || r.step == 8 || r.step == 9));
    }
    CHECK_THROWS_AS(a.step(), TrainingError);

    const std::string csv = history_csv(a.state().history);
    CHECK(csv.starts_with("step,train_loss,val_loss\n1,"));
    std::istringstream lines(csv);
    std::string line;
    std::getline(lines, line);
    std::getline(lines, line);
    CHECK(line.back() == ',');
}

TEST_CASE("reference tables") {
    CHECK(reference_loss("1-layer", 64) == 1.685);
    CHECK(reference_loss("2-layer", 64) == 1.409);
    CHECK(reference_loss("1^2", 64) == 1.586);
    CHECK(reference_loss("8-layer", 1024) == 0.524);
    CHECK(reference_loss("4^2", 1024) == 0.533);
    CHECK_FALSE(reference_loss("1^3", 64).has_value());
    CHECK_FALSE(reference_loss("1-layer", 32).has_value());
    const nlohmann::json j = reference_json();
    CHECK(j["standard"]["rows"].size() == 5);
    CHECK(j["frailt"]["columns"][1] == "1^8");
}

TEST_CASE("run_experiment") {
    const TrainingData& data = tiny_data();
    TrainConfig c = quick(4);

    SUBCASE("budget-matched pair with reference row") {
        const ModelConfig standard = make_config("2", 64, 8, 300, kCtx);
        const ModelConfig frailt = make_config("1x2", 64, 8, 300, kCtx);
        const ExperimentReport r = run_experiment(standard, frailt, c, data);
        CHECK(r.standard.effective_depth == 2);
        CHECK(r.frailt.effective_depth == 2);
        CHECK(r.standard.reference_val_loss == 1.409);
        CHECK(r.frailt.reference_val_loss == 1.586);
        CHECK(r.standard.final_val_loss == r.standard.history.back().val_loss);
        CHECK(r.frailt.parameters < r.standard.parameters);
        const std::string table = r.table();
        CHECK(table.find("| 2-layer | 64 | 2 |") != std::string::npos);
        CHECK(table.find("1.586") != std::string::npos);
        const nlohmann::json j = r.to_json();
        CHECK(j["frailt"]["label"] == "1^2");
        CHECK(j["train"]["peak_lr"] == c.peak_lr);

        const auto dir = temp_path("frailt_experiment_test");
        write_experiment(dir, r);
        CHECK(std::filesystem::exists(dir / "report.json"));
        CHECK(file_bytes(dir / "1x2_loss.csv").starts_with("step,train_loss,val_loss\n"));
        CHECK(std::filesystem::exists(dir / "2-layer_loss.csv"));
        std::filesystem::remove_all(dir);
    }
    SUBCASE("identical configs give identical curves") {
        const ModelConfig m = tiny("1x2");
        const ExperimentReport r = run_experiment(m, m, c, data);
        CHECK(r.standard.history == r.frailt.history);
        CHECK(r.standard.weights_digest == r.frailt.weights_digest);
    }
    SUBCASE("mismatched budgets are refused") {
        CHECK_THROWS_AS(run_experiment(tiny("1"), tiny("1x2"), c, data), BudgetError);
        CHECK_THROWS_AS(run_experiment(tiny("2"), tiny("1x2"), c, data, {}, Pairing::equal_blocks), BudgetError);
        CHECK_THROWS_AS(run_experiment(tiny("2"), make_config("1x2", 32, 2, 300, kCtx), c, data), ConfigError);
        c.total_steps = 1;
        c.warmup_steps = 0;
        CHECK_NOTHROW(run_experiment(tiny("1"), tiny("1x2"), c, data, {}, Pairing::equal_blocks));
    }
}

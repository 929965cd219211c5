#pragma once

#include <array>
#include <atomic>
#include <chrono>
#include <cstddef>
#include <filesystem>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "frailt/error.hpp"

namespace frailt {

// Grading instructions sent to the judge; "{story}" is replaced by the
// beginning, the separator line and the completion.
extern const std::string_view kEvalPromptTemplate;

// Throws FormatError when the story lacks the "***" separator.
std::string build_eval_prompt(std::string_view story);

inline constexpr std::array<std::string_view, 4> kCategories = {"grammar", "creativity", "consistency", "plot"};

struct ScoreRecord {
    int grammar = 0;
    int creativity = 0;
    int consistency = 0;
    int plot = 0;
    std::string prompt_id;
    std::size_t completion_id = 0;
    std::string model_tag;
    std::string judge_text;  // free-form prose from the judge, kept verbatim

    // ValidationError unless every category lies in 1..10.
    void validate() const;
    int category(std::size_t i) const;
    bool operator==(const ScoreRecord&) const = default;
};

void to_json(nlohmann::json& j, const ScoreRecord& r);
void from_json(const nlohmann::json& j, ScoreRecord& r);  // validates

/// One completion awaiting a grade.
struct EvalItem {
    std::string prompt_id;
    std::size_t completion_id = 0;
    std::string model_tag;
    std::string story;  // beginning + "\n***\n" + completion

    std::string key() const;
};

void to_json(nlohmann::json& j, const EvalItem& item);
void from_json(const nlohmann::json& j, EvalItem& item);

std::vector<EvalItem> load_completions(const std::filesystem::path& path);  // JSON lines
void save_completions(const std::filesystem::path& path, const std::vector<EvalItem>& items);

struct EvalReport {
    std::string model_tag;
    std::size_t n = 0;
    std::array<double, 4> means{};  // kCategories order
    double overall = 0.0;           // mean of the four category means
    std::optional<double> val_loss;
};

void to_json(nlohmann::json& j, const EvalReport& r);
void from_json(const nlohmann::json& j, EvalReport& r);

// Throws AggregationError on an empty list.
EvalReport aggregate_scores(const std::vector<ScoreRecord>& records);
// One report per model tag, sorted by tag.
std::vector<EvalReport> aggregate_by_model(const std::vector<ScoreRecord>& records);

// Keeps points with loss <= threshold, order preserved.
template <class T>
std::vector<std::pair<double, T>> filter_by_loss(const std::vector<std::pair<double, T>>& points,
                                                 double threshold = 1.0) {
    std::vector<std::pair<double, T>> out;
    for (const auto& p : points) {
        if (p.first <= threshold) {
            out.push_back(p);
        }
    }
    return out;
}

struct PowerLawFit {
    double slope = 0.0;
    double intercept = 0.0;
    double r_squared = 0.0;
    std::size_t n = 0;
    double threshold = std::numeric_limits<double>::infinity();
};

// Least squares of score against ln(loss). Points are sorted first so the
// result does not depend on their order. FitError below two points, on a
// non-positive loss, or when every loss is equal.
PowerLawFit fit_power_law(std::vector<std::pair<double, double>> points);

// Score-record persistence: one JSON object per line, appended as grades
// arrive so an interrupted run can resume. Loading re-validates every line.
std::vector<ScoreRecord> load_scores(const std::filesystem::path& path);
void append_score(const std::filesystem::path& path, const ScoreRecord& record);

// ---- judge client ----

struct HttpResponse {
    int status = 0;
    std::string body;
};

/// Moves one request body to an endpoint. Throws EvalError on a transport
/// failure (connection refused, timeout).
class Transport {
public:
    virtual ~Transport() = default;
    virtual HttpResponse post(const std::string& path, const std::string& body) = 0;
};

struct ClientConfig {
    std::string base_url = "https://api.openai.com";
    std::string path = "/v1/chat/completions";
    std::string model = "gpt-4-1106-preview";
    std::size_t max_retries = 3;
    std::chrono::milliseconds initial_backoff{1000};  // doubled after each retry
    std::chrono::seconds timeout{120};
    std::size_t max_concurrency = 4;
};

void to_json(nlohmann::json& j, const ClientConfig& c);

// httplib-backed transport. The key only ever lives in the Authorization
// header of outgoing requests.
std::unique_ptr<Transport> make_http_transport(const ClientConfig& config, const std::string& api_key);

nlohmann::json grading_tool_schema();
nlohmann::json build_chat_request(const std::string& model, const std::string& prompt);

struct ParsedGrades {
    std::optional<ScoreRecord> record;  // empty when the reply had no tool call
    std::string content;
};

// Reads the submit_grades call out of a chat-completions reply. Missing call:
// empty record. Malformed or out-of-range arguments: ValidationError.
ParsedGrades parse_chat_response(const std::string& body);

class Judge {
public:
    using Sleep = std::function<void(std::chrono::milliseconds)>;

    Judge(ClientConfig config, std::shared_ptr<Transport> transport, Sleep sleep = {});

    // Retries transport failures, 429/5xx replies and replies without a
    // tool call, up to max_retries times with exponential backoff.
    // ValidationError for out-of-range grades, EvalError once retries are
    // exhausted or on other HTTP errors.
    ScoreRecord score(const std::string& prompt);

    const ClientConfig& config() const noexcept { return config_; }
    std::size_t attempts() const noexcept { return attempts_; }

private:
    ClientConfig config_;
    std::shared_ptr<Transport> transport_;
    Sleep sleep_;
    std::atomic<std::size_t> attempts_{0};
};

struct EvalRunSummary {
    std::size_t scored = 0;
    std::size_t skipped = 0;   // already present in the scores file
    std::size_t rejected = 0;  // validation or exhausted retries
    std::vector<std::string> errors;
};

// Grades every item not yet in scores_path, at most max_concurrency at once,
// appending each record as it arrives.
EvalRunSummary run_gpt_eval(const std::vector<EvalItem>& items, Judge& judge,
                            const std::filesystem::path& scores_path);

// ---- offline judge ----

/// Local chat-completions endpoint speaking the same tool-call protocol.
/// By default grades come from simple text statistics of the completion;
/// scripted replies (raw response bodies or status codes) are served first
/// when queued.
class MockJudgeServer {
public:
    MockJudgeServer();
    ~MockJudgeServer();
    MockJudgeServer(const MockJudgeServer&) = delete;
    MockJudgeServer& operator=(const MockJudgeServer&) = delete;

    std::string base_url() const;
    void push_reply(int status, std::string body);
    std::size_t requests() const;
    std::vector<std::string> authorization_headers() const;

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

// The heuristic grades the mock judge assigns to a prompt's story.
std::array<int, 4> mock_grades(std::string_view story);

// Chat reply whose tool call carries the given grades.
std::string tool_call_reply(const std::array<int, 4>& grades, std::string_view content = "");

}  // namespace frailt

#define CPPHTTPLIB_OPENSSL_SUPPORT
#include <httplib.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <deque>
#include <mutex>
#include <set>
#include <thread>

#include "frailt/evaluator.hpp"

namespace frailt {
namespace {

class HttpTransport final : public Transport {
public:
    HttpTransport(ClientConfig config, std::string api_key) : config_(std::move(config)), key_(std::move(api_key)) {}

    HttpResponse post(const std::string& path, const std::string& body) override {
        // One client per request keeps concurrent calls independent.
        httplib::Client cli(config_.base_url);
        cli.set_connection_timeout(config_.timeout);
        cli.set_read_timeout(config_.timeout);
        cli.set_write_timeout(config_.timeout);
        if (!key_.empty()) {
            cli.set_bearer_token_auth(key_);
        }
        auto res = cli.Post(path, body, "application/json");
        if (!res) {
            throw EvalError("request to " + config_.base_url + path + " failed: " + httplib::to_string(res.error()));
        }
        return {res->status, res->body};
    }

private:
    ClientConfig config_;
    std::string key_;
};

bool retryable_status(int status) { return status == 408 || status == 429 || status >= 500; }

std::string lower_word(std::string_view w) {
    std::string out;
    for (char c : w) {
        if (std::isalpha(static_cast<unsigned char>(c))) {
            out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
        }
    }
    return out;
}

std::vector<std::string_view> words_of(std::string_view text) {
    std::vector<std::string_view> out;
    std::size_t i = 0;
    while (i < text.size()) {
        while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) {
            ++i;
        }
        const std::size_t start = i;
        while (i < text.size() && !std::isspace(static_cast<unsigned char>(text[i]))) {
            ++i;
        }
        if (i > start) {
            out.push_back(text.substr(start, i - start));
        }
    }
    return out;
}

int to_grade(double fraction) { return 1 + static_cast<int>(std::lround(9.0 * std::clamp(fraction, 0.0, 1.0))); }

}  // namespace

void to_json(nlohmann::json& j, const ClientConfig& c) {
    j = {{"base_url", c.base_url},
         {"path", c.path},
         {"model", c.model},
         {"max_retries", c.max_retries},
         {"initial_backoff_ms", c.initial_backoff.count()},
         {"timeout_s", c.timeout.count()},
         {"max_concurrency", c.max_concurrency}};
}

std::unique_ptr<Transport> make_http_transport(const ClientConfig& config, const std::string& api_key) {
    return std::make_unique<HttpTransport>(config, api_key);
}

nlohmann::json grading_tool_schema() {
    nlohmann::json properties = nlohmann::json::object();
    nlohmann::json required = nlohmann::json::array();
    for (std::string_view c : kCategories) {
        std::string label(c);
        label[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(label[0])));
        properties[std::string(c)] = {{"type", "integer"},
                                      {"minimum", 1},
                                      {"maximum", 10},
                                      {"description", label + " score from 1 to 10"}};
        required.push_back(c);
    }
    return {{"type", "function"},
            {"function",
             {{"name", "submit_grades"},
              {"description", "Submit the grades for the student's completion."},
              {"parameters", {{"type", "object"}, {"properties", properties}, {"required", required}}}}}};
}

nlohmann::json build_chat_request(const std::string& model, const std::string& prompt) {
    return {{"model", model},
            {"messages", nlohmann::json::array({{{"role", "user"}, {"content", prompt}}})},
            {"tools", nlohmann::json::array({grading_tool_schema()})},
            {"tool_choice", {{"type", "function"}, {"function", {{"name", "submit_grades"}}}}}};
}

ParsedGrades parse_chat_response(const std::string& body) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(body);
    } catch (const nlohmann::json::exception&) {
        throw EvalError("judge reply is not JSON");
    }
    ParsedGrades out;
    const nlohmann::json* message = nullptr;
    if (j.contains("choices") && j["choices"].is_array() && !j["choices"].empty() &&
        j["choices"][0].contains("message")) {
        message = &j["choices"][0]["message"];
    }
    if (message == nullptr || !message->is_object()) {
        throw EvalError("judge reply has no choices[0].message");
    }
    if (message->contains("content") && (*message)["content"].is_string()) {
        out.content = (*message)["content"].get<std::string>();
    }
    const nlohmann::json* arguments = nullptr;
    if (message->contains("tool_calls") && (*message)["tool_calls"].is_array()) {
        for (const auto& call : (*message)["tool_calls"]) {
            if (call.contains("function") && call["function"].value("name", "") == "submit_grades") {
                arguments = &call["function"]["arguments"];
                break;
            }
        }
    }
    if (arguments == nullptr) {
        return out;
    }
    nlohmann::json args;
    try {
        args = arguments->is_string() ? nlohmann::json::parse(arguments->get<std::string>()) : *arguments;
    } catch (const nlohmann::json::exception&) {
        throw ValidationError("submit_grades arguments are not JSON");
    }
    ScoreRecord r = args.get<ScoreRecord>();  // validates ranges
    r.judge_text = out.content;
    r.prompt_id.clear();
    r.model_tag.clear();
    r.completion_id = 0;
    out.record = std::move(r);
    return out;
}

Judge::Judge(ClientConfig config, std::shared_ptr<Transport> transport, Sleep sleep)
    : config_(std::move(config)), transport_(std::move(transport)), sleep_(std::move(sleep)) {
    if (!transport_) {
        throw EvalError("judge needs a transport");
    }
    if (config_.max_concurrency == 0) {
        throw ConfigError("max_concurrency: must be positive");
    }
    if (!sleep_) {
        sleep_ = [](std::chrono::milliseconds d) { std::this_thread::sleep_for(d); };
    }
}

ScoreRecord Judge::score(const std::string& prompt) {
    // Byte-level decoding can split a UTF-8 sequence; send U+FFFD instead.
    const std::string body =
        build_chat_request(config_.model, prompt).dump(-1, ' ', false, nlohmann::json::error_handler_t::replace);
    std::string last_error;
    auto backoff = config_.initial_backoff;
    for (std::size_t attempt = 0; attempt <= config_.max_retries; ++attempt) {
        if (attempt > 0) {
            sleep_(backoff);
            backoff *= 2;
        }
        ++attempts_;
        HttpResponse res;
        try {
            res = transport_->post(config_.path, body);
        } catch (const EvalError& e) {
            last_error = e.what();
            continue;
        }
        if (res.status != 200) {
            last_error = "judge returned HTTP " + std::to_string(res.status);
            if (retryable_status(res.status)) {
                continue;
            }
            throw EvalError(last_error);
        }
        ParsedGrades parsed;
        try {
            parsed = parse_chat_response(res.body);
        } catch (const EvalError& e) {
            last_error = e.what();
            continue;
        }
        if (!parsed.record) {
            last_error = "judge reply carried no submit_grades call";
            continue;
        }
        return *parsed.record;
    }
    throw EvalError("giving up after " + std::to_string(config_.max_retries + 1) + " attempts: " + last_error);
}

EvalRunSummary run_gpt_eval(const std::vector<EvalItem>& items, Judge& judge, const std::filesystem::path& scores_path) {
    EvalRunSummary summary;
    std::set<std::string> done;
    for (const ScoreRecord& r : load_scores(scores_path)) {
        done.insert(EvalItem{r.prompt_id, r.completion_id, r.model_tag, {}}.key());
    }
    std::vector<const EvalItem*> todo;
    for (const EvalItem& item : items) {
        if (done.contains(item.key())) {
            ++summary.skipped;
        } else {
            done.insert(item.key());  // duplicates in the input are graded once
            todo.push_back(&item);
        }
    }

    std::mutex mu;
    std::size_t next = 0;
    auto worker = [&] {
        for (;;) {
            const EvalItem* item = nullptr;
            {
                std::lock_guard lock(mu);
                if (next == todo.size()) {
                    return;
                }
                item = todo[next++];
            }
            try {
                ScoreRecord r = judge.score(build_eval_prompt(item->story));
                r.prompt_id = item->prompt_id;
                r.completion_id = item->completion_id;
                r.model_tag = item->model_tag;
                std::lock_guard lock(mu);
                append_score(scores_path, r);
                ++summary.scored;
            } catch (const Error& e) {
                std::lock_guard lock(mu);
                ++summary.rejected;
                summary.errors.push_back(item->model_tag + "/" + item->prompt_id + "/" +
                                         std::to_string(item->completion_id) + ": " + e.what());
            }
        }
    };
    const std::size_t n_workers = std::min(judge.config().max_concurrency, std::max<std::size_t>(todo.size(), 1));
    {
        std::vector<std::jthread> pool;
        for (std::size_t i = 0; i < n_workers; ++i) {
            pool.emplace_back(worker);
        }
    }
    std::sort(summary.errors.begin(), summary.errors.end());
    return summary;
}

std::array<int, 4> mock_grades(std::string_view story) {
    const std::size_t sep = story.find("***");
    const std::string_view beginning = sep == std::string_view::npos ? std::string_view{} : story.substr(0, sep);
    const std::string_view completion = sep == std::string_view::npos ? story : story.substr(sep + 3);
    const auto words = words_of(completion);
    if (words.empty()) {
        return {1, 1, 1, 1};
    }
    std::set<std::string> seen;
    std::set<std::string> context;
    for (std::string_view w : words_of(beginning)) {
        context.insert(lower_word(w));
    }
    std::size_t clean = 0;
    std::size_t echoed = 0;
    std::size_t sentences = 0;
    for (std::string_view w : words) {
        const std::string lw = lower_word(w);
        std::size_t letters = lw.size();
        if (letters > 0 && letters + 3 >= w.size()) {
            ++clean;
        }
        if (!lw.empty() && context.contains(lw)) {
            ++echoed;
        }
        seen.insert(lw);
        const char last = w.back();
        if (last == '.' || last == '!' || last == '?' || (w.size() > 1 && w[w.size() - 2] == '.')) {
            ++sentences;
        }
    }
    const double n = static_cast<double>(words.size());
    const double length = std::min(1.0, n / 12.0);  // fragments cannot score high
    return {to_grade(length * clean / n), to_grade(length * static_cast<double>(seen.size()) / n), to_grade(echoed / n),
            to_grade(static_cast<double>(sentences) / 4.0)};
}

std::string tool_call_reply(const std::array<int, 4>& grades, std::string_view content) {
    nlohmann::json args;
    for (std::size_t i = 0; i < kCategories.size(); ++i) {
        args[std::string(kCategories[i])] = grades[i];
    }
    const nlohmann::json message = {
        {"role", "assistant"},
        {"content", content.empty() ? nlohmann::json(nullptr) : nlohmann::json(std::string(content))},
        {"tool_calls",
         nlohmann::json::array({{{"id", "call_0"},
                                 {"type", "function"},
                                 {"function", {{"name", "submit_grades"}, {"arguments", args.dump()}}}}})}};
    return nlohmann::json{{"id", "mock"},
                          {"object", "chat.completion"},
                          {"choices", nlohmann::json::array({{{"index", 0},
                                                              {"message", message},
                                                              {"finish_reason", "tool_calls"}}})}}
        .dump();
}

struct MockJudgeServer::Impl {
    httplib::Server server;
    int port = 0;
    std::thread thread;
    mutable std::mutex mu;
    std::deque<std::pair<int, std::string>> scripted;
    std::size_t requests = 0;
    std::vector<std::string> auth;

    std::pair<int, std::string> handle(const httplib::Request& req) {
        {
            std::lock_guard lock(mu);
            ++requests;
            auth.push_back(req.get_header_value("Authorization"));
            if (!scripted.empty()) {
                auto reply = std::move(scripted.front());
                scripted.pop_front();
                return reply;
            }
        }
        nlohmann::json body;
        try {
            body = nlohmann::json::parse(req.body);
        } catch (const nlohmann::json::exception&) {
            return {400, R"({"error":{"message":"body is not JSON"}})"};
        }
        const bool has_tool = body.contains("tools") && body["tools"].is_array() && !body["tools"].empty() &&
                              body["tools"][0]["function"].value("name", "") == "submit_grades" &&
                              body.contains("tool_choice");
        if (!has_tool || !body.contains("messages") || body["messages"].empty()) {
            return {400, R"({"error":{"message":"expected messages, tools and tool_choice"}})"};
        }
        const std::string prompt = body["messages"].back().value("content", "");
        const std::size_t at = kEvalPromptTemplate.find("{story}");
        const std::string_view head = kEvalPromptTemplate.substr(0, at);
        const std::string_view tail = kEvalPromptTemplate.substr(at + 7);
        if (!prompt.starts_with(head) || !prompt.ends_with(tail) || prompt.size() < head.size() + tail.size()) {
            return {400, R"({"error":{"message":"prompt does not follow the grading template"}})"};
        }
        const std::string_view story =
            std::string_view(prompt).substr(head.size(), prompt.size() - head.size() - tail.size());
        return {200, tool_call_reply(mock_grades(story), "Mock assessment based on surface statistics.")};
    }
};

MockJudgeServer::MockJudgeServer() : impl_(std::make_unique<Impl>()) {
    impl_->server.Post(".*", [this](const httplib::Request& req, httplib::Response& res) {
        auto [status, body] = impl_->handle(req);
        res.status = status;
        res.set_content(body, "application/json");
    });
    impl_->port = impl_->server.bind_to_any_port("127.0.0.1");
    if (impl_->port <= 0) {
        throw EvalError("mock judge could not bind a local port");
    }
    impl_->thread = std::thread([this] { impl_->server.listen_after_bind(); });
    impl_->server.wait_until_ready();
}

MockJudgeServer::~MockJudgeServer() {
    impl_->server.stop();
    if (impl_->thread.joinable()) {
        impl_->thread.join();
    }
}

std::string MockJudgeServer::base_url() const { return "http://127.0.0.1:" + std::to_string(impl_->port); }

void MockJudgeServer::push_reply(int status, std::string body) {
    std::lock_guard lock(impl_->mu);
    impl_->scripted.emplace_back(status, std::move(body));
}

std::size_t MockJudgeServer::requests() const {
    std::lock_guard lock(impl_->mu);
    return impl_->requests;
}

std::vector<std::string> MockJudgeServer::authorization_headers() const {
    std::lock_guard lock(impl_->mu);
    return impl_->auth;
}

}  // namespace frailt

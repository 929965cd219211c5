#include "frailt/evaluator.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

namespace frailt {

const std::string_view kEvalPromptTemplate = R"TEMPLATE(In the following exercise, the student is given a beginning of a story along with specific instructions for how the story should be completed. The student needs to complete it into a full story that adheres to these instructions. The exercise tests the student's language abilities, creativity, and ability to follow directions. The symbol *** marks the separator between the prescribed beginning and the student's completion.


{story}


Please provide your general assessment about the part written by the student (the one after the *** symbol). Consider the following aspects:


1. Grammar: Is the completion grammatically correct?
2. Creativity: Does the completion show creativity and original thought?
3. Consistency: Is the completion consistent with the beginning of the story?
4. Plot: Does the plot of the completion make sense and is it coherent throughout?


Now, grade the student's completion in terms of the following categories, each on a scale from 1 to 10.)TEMPLATE";

namespace {

constexpr std::string_view kPlaceholder = "{story}";

int grade_field(const nlohmann::json& j, std::string_view key) {
    const auto it = j.find(key);
    if (it == j.end()) {
        throw ValidationError("grades: missing \"" + std::string(key) + "\"");
    }
    if (it->is_number_integer()) {
        return it->get<int>();
    }
    // Some endpoints send whole numbers as 8.0.
    if (it->is_number_float() && std::floor(it->get<double>()) == it->get<double>() &&
        std::abs(it->get<double>()) < 1e6) {
        return static_cast<int>(it->get<double>());
    }
    throw ValidationError("grades: \"" + std::string(key) + "\" is not an integer: " + it->dump());
}

std::vector<std::string> read_lines(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw EvalError("cannot read " + path.string());
    }
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') {
            line.pop_back();
        }
        lines.push_back(line);
    }
    return lines;
}

}  // namespace

std::string build_eval_prompt(std::string_view story) {
    if (story.find("***") == std::string_view::npos) {
        throw FormatError("story has no *** separator between beginning and completion");
    }
    const std::size_t at = kEvalPromptTemplate.find(kPlaceholder);
    std::string out;
    out.reserve(kEvalPromptTemplate.size() + story.size());
    out += kEvalPromptTemplate.substr(0, at);
    out += story;
    out += kEvalPromptTemplate.substr(at + kPlaceholder.size());
    return out;
}

void ScoreRecord::validate() const {
    for (std::size_t i = 0; i < kCategories.size(); ++i) {
        const int v = category(i);
        if (v < 1 || v > 10) {
            throw ValidationError(std::string(kCategories[i]) + " score " + std::to_string(v) + " outside 1..10");
        }
    }
}

int ScoreRecord::category(std::size_t i) const {
    switch (i) {
        case 0: return grammar;
        case 1: return creativity;
        case 2: return consistency;
        case 3: return plot;
        default: throw IndexError("score category " + std::to_string(i));
    }
}

void to_json(nlohmann::json& j, const ScoreRecord& r) {
    j = {{"prompt_id", r.prompt_id}, {"completion_id", r.completion_id}, {"model_tag", r.model_tag},
         {"grammar", r.grammar},     {"creativity", r.creativity},       {"consistency", r.consistency},
         {"plot", r.plot},           {"judge_text", r.judge_text}};
}

void from_json(const nlohmann::json& j, ScoreRecord& r) {
    if (!j.is_object()) {
        throw ValidationError("score record is not an object");
    }
    ScoreRecord out;
    out.grammar = grade_field(j, "grammar");
    out.creativity = grade_field(j, "creativity");
    out.consistency = grade_field(j, "consistency");
    out.plot = grade_field(j, "plot");
    try {
        out.prompt_id = j.value("prompt_id", std::string());
        out.completion_id = j.value("completion_id", std::size_t{0});
        out.model_tag = j.value("model_tag", std::string());
        out.judge_text = j.value("judge_text", std::string());
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("score record metadata: ") + e.what());
    }
    out.validate();
    r = std::move(out);
}

std::string EvalItem::key() const { return model_tag + "\x1f" + prompt_id + "\x1f" + std::to_string(completion_id); }

void to_json(nlohmann::json& j, const EvalItem& item) {
    j = {{"prompt_id", item.prompt_id},
         {"completion_id", item.completion_id},
         {"model_tag", item.model_tag},
         {"story", item.story}};
}

void from_json(const nlohmann::json& j, EvalItem& item) {
    item.prompt_id = j.at("prompt_id").get<std::string>();
    item.completion_id = j.at("completion_id").get<std::size_t>();
    item.model_tag = j.at("model_tag").get<std::string>();
    item.story = j.at("story").get<std::string>();
}

std::vector<EvalItem> load_completions(const std::filesystem::path& path) {
    std::vector<EvalItem> items;
    std::size_t line_no = 0;
    for (const std::string& line : read_lines(path)) {
        ++line_no;
        if (line.empty()) {
            continue;
        }
        try {
            items.push_back(nlohmann::json::parse(line).get<EvalItem>());
        } catch (const nlohmann::json::exception& e) {
            throw FormatError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
    return items;
}

void save_completions(const std::filesystem::path& path, const std::vector<EvalItem>& items) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw EvalError("cannot write " + path.string());
    }
    for (const EvalItem& item : items) {
        out << nlohmann::json(item).dump(-1, ' ', false, nlohmann::json::error_handler_t::replace) << '\n';
    }
}

void to_json(nlohmann::json& j, const EvalReport& r) {
    j = {{"model_tag", r.model_tag}, {"n", r.n}, {"overall", r.overall}};
    for (std::size_t i = 0; i < kCategories.size(); ++i) {
        j[std::string(kCategories[i])] = r.means[i];
    }
    j["val_loss"] = r.val_loss ? nlohmann::json(*r.val_loss) : nlohmann::json(nullptr);
}

void from_json(const nlohmann::json& j, EvalReport& r) {
    r.model_tag = j.at("model_tag").get<std::string>();
    r.n = j.at("n").get<std::size_t>();
    r.overall = j.at("overall").get<double>();
    for (std::size_t i = 0; i < kCategories.size(); ++i) {
        r.means[i] = j.at(std::string(kCategories[i])).get<double>();
    }
    r.val_loss.reset();
    if (j.contains("val_loss") && !j["val_loss"].is_null()) {
        r.val_loss = j["val_loss"].get<double>();
    }
}

EvalReport aggregate_scores(const std::vector<ScoreRecord>& records) {
    if (records.empty()) {
        throw AggregationError("no score records to aggregate");
    }
    EvalReport r;
    r.model_tag = records.front().model_tag;
    r.n = records.size();
    for (const ScoreRecord& rec : records) {
        rec.validate();
        if (rec.model_tag != r.model_tag) {
            r.model_tag = "mixed";
        }
        for (std::size_t i = 0; i < kCategories.size(); ++i) {
            r.means[i] += rec.category(i);
        }
    }
    for (double& m : r.means) {
        m /= static_cast<double>(records.size());
    }
    r.overall = std::accumulate(r.means.begin(), r.means.end(), 0.0) / static_cast<double>(r.means.size());
    return r;
}

std::vector<EvalReport> aggregate_by_model(const std::vector<ScoreRecord>& records) {
    std::map<std::string, std::vector<ScoreRecord>> groups;
    for (const ScoreRecord& r : records) {
        groups[r.model_tag].push_back(r);
    }
    std::vector<EvalReport> out;
    for (const auto& [tag, recs] : groups) {
        out.push_back(aggregate_scores(recs));
    }
    return out;
}

PowerLawFit fit_power_law(std::vector<std::pair<double, double>> points) {
    if (points.size() < 2) {
        throw FitError("power-law fit needs at least 2 points, got " + std::to_string(points.size()));
    }
    for (const auto& [loss, score] : points) {
        if (!(loss > 0.0) || !std::isfinite(loss) || !std::isfinite(score)) {
            throw FitError("power-law fit needs positive finite losses and finite scores");
        }
    }
    std::sort(points.begin(), points.end());
    const double n = static_cast<double>(points.size());
    double mx = 0.0;
    double my = 0.0;
    for (const auto& [loss, score] : points) {
        mx += std::log(loss);
        my += score;
    }
    mx /= n;
    my /= n;
    double sxx = 0.0;
    double sxy = 0.0;
    double syy = 0.0;
    for (const auto& [loss, score] : points) {
        const double dx = std::log(loss) - mx;
        const double dy = score - my;
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    if (sxx == 0.0) {
        throw FitError("all losses are equal; ln(loss) has no variance");
    }
    PowerLawFit fit;
    fit.n = points.size();
    fit.slope = sxy / sxx;
    fit.intercept = my - fit.slope * mx;
    if (syy == 0.0) {
        fit.r_squared = 1.0;
    } else {
        double ss_res = 0.0;
        for (const auto& [loss, score] : points) {
            const double e = score - (fit.intercept + fit.slope * std::log(loss));
            ss_res += e * e;
        }
        fit.r_squared = std::clamp(1.0 - ss_res / syy, 0.0, 1.0);
    }
    return fit;
}

std::vector<ScoreRecord> load_scores(const std::filesystem::path& path) {
    std::vector<ScoreRecord> records;
    if (!std::filesystem::exists(path)) {
        return records;
    }
    std::size_t line_no = 0;
    for (const std::string& line : read_lines(path)) {
        ++line_no;
        if (line.empty()) {
            continue;
        }
        try {
            records.push_back(nlohmann::json::parse(line).get<ScoreRecord>());
        } catch (const nlohmann::json::exception& e) {
            throw ValidationError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
        } catch (const ValidationError& e) {
            throw ValidationError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
    return records;
}

void append_score(const std::filesystem::path& path, const ScoreRecord& record) {
    record.validate();
    std::ofstream out(path, std::ios::binary | std::ios::app);
    if (!out) {
        throw EvalError("cannot append to " + path.string());
    }
    out << nlohmann::json(record).dump(-1, ' ', false, nlohmann::json::error_handler_t::replace) << '\n';
    out.flush();
}

}  // namespace frailt

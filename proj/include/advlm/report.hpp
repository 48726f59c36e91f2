#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "advlm/ppm.hpp"
#include "advlm/vqa_eval.hpp"

namespace advlm {

namespace detail {

inline std::string format(const char* fmt, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, fmt, v);
    return buf;
}

/// Tenths, with -0.0 folded into 0.0.
inline double round_tenths(double v) {
    const double r = std::round(v * 10.0) / 10.0;
    return r == 0.0 ? 0.0 : r;
}

inline bool same_tenths(double a, double b) { return round_tenths(a) == round_tenths(b); }

}  // namespace detail

/// "8/255" for multiples of 1/255, otherwise a plain decimal.
inline std::string epsilon_label(double epsilon) {
    const double k = epsilon * 255.0;
    if (std::abs(k - std::round(k)) < 1e-6) return detail::format("%.0f", std::round(k)) + "/255";
    return detail::format("%.6g", epsilon);
}

inline std::string format_percent(double v) { return detail::format("%.1f", detail::round_tenths(v)); }

/// "(–7.0)" for a positive drop, "(+1.2)" when adversarial accuracy is higher.
inline std::string format_drop(double drop, const std::string& marker = "") {
    const double r = detail::round_tenths(drop);
    const char* sign = r > 0.0 ? "–" : (r < 0.0 ? "+" : "");
    return "(" + std::string(sign) + detail::format("%.1f", std::abs(r)) + marker + ")";
}

inline constexpr std::string_view kCsvHeader = "model,epsilon,n,clean_acc,adv_acc,drop,margin";

inline std::string render_csv(const std::vector<EvalReport>& reports) {
    std::string out(kCsvHeader);
    out += '\n';
    for (const auto& r : reports) {
        for (const auto& e : r.entries) {
            out += r.model + ',' + detail::format("%.6f", e.epsilon) + ',' + std::to_string(e.n) + ',' +
                   format_percent(e.clean_accuracy) + ',' + format_percent(e.adversarial_accuracy) + ',' +
                   format_percent(e.accuracy_drop) + ',' + detail::format("%.2f", e.margin_of_error) + '\n';
        }
    }
    return out;
}

/// The clean accuracy shown in a model's Clean column: the most frequent
/// per-budget clean accuracy (at one decimal), earliest budget on ties.
inline double reference_clean_accuracy(const EvalReport& report) {
    std::optional<double> best;
    std::size_t best_count = 0;
    for (const auto& e : report.entries) {
        const auto count = static_cast<std::size_t>(
            std::count_if(report.entries.begin(), report.entries.end(),
                          [&](const EvalEntry& o) { return detail::same_tenths(o.clean_accuracy, e.clean_accuracy); }));
        if (count > best_count) {
            best = e.clean_accuracy;
            best_count = count;
        }
    }
    return best.value_or(0.0);
}

inline constexpr double kSubtleLimit = 16.0 / 255.0 + 1e-9;
inline constexpr double kLargeLimit = 128.0 / 255.0 - 1e-9;

namespace detail {

inline std::string render_band(const std::vector<EvalReport>& reports, const std::string& title,
                               bool (*in_band)(double), std::vector<std::string>& footnotes) {
    std::set<double> budgets;
    for (const auto& r : reports)
        for (const auto& e : r.entries)
            if (in_band(e.epsilon)) budgets.insert(e.epsilon);
    if (budgets.empty()) return {};

    std::string out = "### " + title + "\n\n| Model | Clean Acc. (%) |";
    std::string rule = "|---|---|";
    for (double eps : budgets) {
        out += " ε=" + epsilon_label(eps) + " |";
        rule += "---|";
    }
    out += "\n" + rule + "\n";
    for (const auto& r : reports) {
        const double reference = reference_clean_accuracy(r);
        out += "| " + r.model + " | " + format_percent(reference) + " |";
        for (double eps : budgets) {
            const auto it = std::find_if(r.entries.begin(), r.entries.end(),
                                         [&](const EvalEntry& e) { return e.epsilon == eps; });
            if (it == r.entries.end()) {
                out += " – |";
                continue;
            }
            std::string marker;
            if (!same_tenths(it->clean_accuracy, reference)) {
                marker = "‡";
                footnotes.push_back("‡ " + r.model + ": clean accuracy was " + format_percent(it->clean_accuracy) +
                                    "% in the ε=" + epsilon_label(eps) + " run.");
            }
            out += " " + format_percent(it->adversarial_accuracy) + marker + " " +
                   format_drop(it->accuracy_drop, marker) + " |";
        }
        out += "\n";
    }
    return out + "\n";
}

}  // namespace detail

/// Tables of "adversarial accuracy (drop)" split into subtle (eps <= 16/255) and
/// large (eps >= 128/255) budgets; anything in between gets its own table.
/// Entries whose clean accuracy differs from the model's reference are marked
/// with a double dagger and footnoted. No table is produced for empty reports.
inline std::string render_markdown(const std::vector<EvalReport>& reports) {
    std::string out = "# VQA accuracy under adversarial perturbation\n\n";
    std::vector<std::string> footnotes;
    std::string tables;
    tables += detail::render_band(reports, "Subtle perturbations (ε ≤ 16/255)",
                                  [](double e) { return e <= kSubtleLimit; }, footnotes);
    tables += detail::render_band(reports, "Intermediate perturbations",
                                  [](double e) { return e > kSubtleLimit && e < kLargeLimit; }, footnotes);
    tables += detail::render_band(reports, "Large perturbations (ε ≥ 128/255)",
                                  [](double e) { return e >= kLargeLimit; }, footnotes);
    if (tables.empty()) return out + "No results.\n";
    out += "Cells show adversarial accuracy (%) with the accuracy drop in percentage points.\n\n" + tables;
    for (const auto& f : footnotes) out += f + "\n";
    if (!footnotes.empty()) out += "\n";
    out += "Scorer: " + std::string(kScorerVersion) + "\n";
    return out;
}

inline nlohmann::ordered_json record_json(const std::string& model, const EvalRecord& r) {
    nlohmann::ordered_json j{{"model", model},
                             {"sample_id", r.sample_id},
                             {"epsilon", r.epsilon},
                             {"clean_answer", r.clean_answer},
                             {"adversarial_answer", r.adversarial_answer},
                             {"clean_correct", r.clean_correct},
                             {"adversarial_correct", r.adversarial_correct}};
    if (r.failed()) j["error"] = r.error;
    return j;
}

inline EvalRecord record_from_json(const nlohmann::json& j) {
    EvalRecord r;
    r.sample_id = j.at("sample_id").get<std::string>();
    r.epsilon = j.at("epsilon").get<double>();
    r.clean_answer = j.at("clean_answer").get<std::string>();
    r.adversarial_answer = j.at("adversarial_answer").get<std::string>();
    r.clean_correct = j.at("clean_correct").get<bool>();
    r.adversarial_correct = j.at("adversarial_correct").get<bool>();
    if (j.contains("error")) r.error = j.at("error").get<std::string>();
    return r;
}

inline std::string render_records(const std::vector<EvalReport>& reports) {
    std::string out;
    for (const auto& r : reports)
        for (const auto& rec : r.records) out += record_json(r.model, rec).dump() + "\n";
    return out;
}

namespace detail {

inline void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError(path, "cannot open for writing");
    out << text;
    if (!out) throw IoError(path, "write failed");
}

}  // namespace detail

/// Writes report.csv and report.md, plus records.jsonl unless in fixture mode.
/// Fixture mode takes externally supplied accuracies and skips the record replay check.
inline void emit_report(const std::vector<EvalReport>& reports, const std::filesystem::path& dir, bool fixture_mode) {
    for (const auto& r : reports) check_report(r, !fixture_mode);
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError(dir, "cannot create directory: " + ec.message());
    detail::write_text(dir / "report.csv", render_csv(reports));
    detail::write_text(dir / "report.md", render_markdown(reports));
    if (!fixture_mode) detail::write_text(dir / "records.jsonl", render_records(reports));
}

/// Fixture report from published numbers: one clean accuracy per budget.
inline EvalReport fixture_report(std::string model, const std::vector<double>& epsilons,
                                 const std::vector<double>& clean, const std::vector<double>& adversarial,
                                 std::size_t n = 500) {
    if (epsilons.size() != clean.size() || epsilons.size() != adversarial.size()) {
        throw ContractViolation("fixture columns differ in length");
    }
    EvalReport r{std::move(model), {}, {}};
    for (std::size_t i = 0; i < epsilons.size(); ++i) {
        EvalEntry e;
        e.epsilon = epsilons[i];
        e.n = n;
        e.clean_accuracy = clean[i];
        e.adversarial_accuracy = adversarial[i];
        e.accuracy_drop = accuracy_drop(clean[i], adversarial[i]);
        e.margin_of_error = margin_of_error(n, clean[i] / 100.0);
        r.entries.push_back(e);
    }
    return r;
}

}  // namespace advlm

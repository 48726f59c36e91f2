#pragma once

// VQA answer scoring: normalisation, the match-or-substring rule, accuracy
// aggregation, reproducible subsetting and the sampling-error estimate.

#include <cctype>
#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "advlm/rng.hpp"
#include "advlm/tensor.hpp"

namespace advlm {

/// Version tag of the normalisation rules, written into reports.
inline constexpr std::string_view kScorerVersion = "match-substring-v1";

inline bool is_stripped_punctuation(char c) {
    switch (c) {
        case '.': case ',': case '?': case '!': case '\'': case '"': case ';': case ':': case '(': case ')':
            return true;
        default:
            return false;
    }
}

/// Lowercase, drop . , ? ! ' " ; : ( ), collapse whitespace, trim, and remove
/// the standalone words a / an / the.
inline std::string normalize_answer(std::string_view raw) {
    std::vector<std::string> words;
    std::string current;
    const auto flush = [&] {
        if (!current.empty() && current != "a" && current != "an" && current != "the") words.push_back(current);
        current.clear();
    };
    for (char ch : raw) {
        const auto c = static_cast<unsigned char>(ch);
        if (is_stripped_punctuation(ch)) continue;
        if (std::isspace(c)) {
            flush();
        } else {
            current.push_back(static_cast<char>(std::tolower(c)));
        }
    }
    flush();
    std::string out;
    for (const auto& w : words) {
        if (!out.empty()) out += ' ';
        out += w;
    }
    return out;
}

/// True iff the normalised prediction is non-empty and equals, contains, or is
/// contained in some normalised ground truth. Ground truths that normalise to
/// the empty string never match.
inline bool vqa_match(std::string_view prediction, const std::vector<std::string>& ground_truths) {
    if (ground_truths.empty()) throw ContractViolation("vqa_match needs at least one ground truth");
    const std::string p = normalize_answer(prediction);
    if (p.empty()) return false;
    for (const auto& raw : ground_truths) {
        const std::string g = normalize_answer(raw);
        if (g.empty()) continue;
        if (p == g || g.find(p) != std::string::npos || p.find(g) != std::string::npos) return true;
    }
    return false;
}

/// Percentage of true entries.
inline double vqa_accuracy(const std::vector<bool>& correct) {
    if (correct.empty()) throw ContractViolation("vqa_accuracy of an empty record list");
    std::size_t hits = 0;
    for (bool c : correct) hits += c ? 1 : 0;
    return 100.0 * static_cast<double>(hits) / static_cast<double>(correct.size());
}

/// Clean minus adversarial accuracy in percentage points; may be negative.
inline double accuracy_drop(double clean, double adversarial) {
    if (!(clean >= 0.0 && clean <= 100.0 && adversarial >= 0.0 && adversarial <= 100.0)) {
        throw ContractViolation("accuracies must lie in [0, 100]");
    }
    return clean - adversarial;
}

/// First n elements of a partial Fisher-Yates shuffle: for i < n, swap slot i
/// with slot i + below(size - i) drawn from SplitMix64(seed).
template <class Id>
std::vector<Id> sample_subset(std::vector<Id> ids, std::size_t n, std::uint64_t seed) {
    if (n > ids.size()) {
        throw ContractViolation("subset of " + std::to_string(n) + " from " + std::to_string(ids.size()) + " ids");
    }
    SplitMix64 rng(seed);
    for (std::size_t i = 0; i < n; ++i) std::swap(ids[i], ids[i + rng.below(ids.size() - i)]);
    ids.resize(n);
    return ids;
}

/// Normal-approximation 95% half-width, in percent.
inline double margin_of_error(std::size_t n, double p) {
    if (n == 0) throw ContractViolation("margin_of_error needs n >= 1");
    if (!(p >= 0.0 && p <= 1.0)) throw ContractViolation("proportion must lie in [0, 1]");
    return 100.0 * 1.96 * std::sqrt(p * (1.0 - p) / static_cast<double>(n));
}

struct EvalRecord {
    std::string sample_id;
    std::string clean_answer;
    std::string adversarial_answer;
    bool clean_correct = false;
    bool adversarial_correct = false;
    double epsilon = 0.0;
    /// Set when the attack raised; such records do not count toward accuracies.
    std::string error;

    bool failed() const { return !error.empty(); }
};

struct EvalEntry {
    double epsilon = 0.0;
    std::size_t n = 0;
    double clean_accuracy = 0.0;
    double adversarial_accuracy = 0.0;
    double accuracy_drop = 0.0;
    double margin_of_error = 0.0;
    std::size_t failures = 0;
};

struct EvalReport {
    std::string model;
    std::vector<EvalEntry> entries;
    std::vector<EvalRecord> records;
};

/// Aggregates the records of one budget. Failed records are counted in
/// `failures` and excluded from n and both accuracies.
inline EvalEntry aggregate(double epsilon, const std::vector<EvalRecord>& records) {
    std::vector<bool> clean, adv;
    EvalEntry e;
    e.epsilon = epsilon;
    for (const auto& r : records) {
        if (r.epsilon != epsilon) continue;
        if (r.failed()) {
            ++e.failures;
            continue;
        }
        clean.push_back(r.clean_correct);
        adv.push_back(r.adversarial_correct);
    }
    e.n = clean.size();
    if (e.n == 0) return e;
    e.clean_accuracy = vqa_accuracy(clean);
    e.adversarial_accuracy = vqa_accuracy(adv);
    e.accuracy_drop = accuracy_drop(e.clean_accuracy, e.adversarial_accuracy);
    e.margin_of_error = margin_of_error(e.n, e.clean_accuracy / 100.0);
    return e;
}

/// Checks the report invariants; with `replay` the stored aggregates must also
/// be reproduced exactly by re-aggregating the records.
inline void check_report(const EvalReport& report, bool replay) {
    for (const auto& e : report.entries) {
        for (double acc : {e.clean_accuracy, e.adversarial_accuracy}) {
            if (!(acc >= 0.0 && acc <= 100.0)) {
                throw ContractViolation(report.model + ": accuracy " + std::to_string(acc) + " outside [0, 100]");
            }
        }
        if (std::abs(e.accuracy_drop - (e.clean_accuracy - e.adversarial_accuracy)) > 0.05) {
            throw ContractViolation(report.model + ": drop does not equal clean minus adversarial");
        }
        if (replay) {
            const auto again = aggregate(e.epsilon, report.records);
            if (again.n != e.n || again.failures != e.failures || again.clean_accuracy != e.clean_accuracy ||
                again.adversarial_accuracy != e.adversarial_accuracy || again.accuracy_drop != e.accuracy_drop) {
                throw ContractViolation(report.model + ": stored aggregates do not replay from records");
            }
        }
    }
}

}  // namespace advlm

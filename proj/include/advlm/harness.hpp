#pragma once

// Config-driven orchestration: synthetic data generation, training, and the
// attack-and-evaluate sweep over PGD budgets.

#include <atomic>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "advlm/attacks.hpp"
#include "advlm/checkpoint.hpp"
#include "advlm/dataset.hpp"
#include "advlm/report.hpp"
#include "advlm/toy_vlm.hpp"
#include "advlm/train.hpp"
#include "advlm/vqa_eval.hpp"

namespace advlm {

/// Invalid or inconsistent run configuration (CLI exit code 2).
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline constexpr int kRunConfigVersion = 1;

struct PgdParameterSet {
    double epsilon = 0.0;
    double alpha = 0.0;
    std::size_t iterations = 0;
    bool random_start = false;
};

/// Budget-only sets take alpha and iterations from hyperparameter_schedule.
/// A zero budget is allowed and evaluates the identity attack.
inline PgdParameterSet make_parameter_set(double epsilon, std::optional<double> alpha,
                                          std::optional<std::size_t> iterations, bool random_start) {
    if (!(epsilon >= 0.0 && epsilon <= 1.0)) {
        throw ConfigError("parameter set epsilon " + std::to_string(epsilon) + " outside [0, 1]");
    }
    PgdParameterSet p{epsilon, 1.0, 1, random_start};
    if (epsilon > 0.0) {
        const auto s = hyperparameter_schedule(epsilon);
        p.alpha = s.alpha;
        p.iterations = s.iterations;
    }
    if (alpha) p.alpha = *alpha;
    if (iterations) p.iterations = *iterations;
    if (!(p.alpha > 0.0) || p.iterations == 0 || (epsilon > 0.0 && p.alpha > epsilon)) {
        throw ConfigError("parameter set for epsilon " + epsilon_label(epsilon) +
                          " needs 0 < alpha <= epsilon and iterations >= 1");
    }
    return p;
}

inline std::vector<PgdParameterSet> default_parameter_sets(bool random_start = true) {
    std::vector<PgdParameterSet> out;
    for (double eps : kEpsilonGrid) out.push_back(make_parameter_set(eps, std::nullopt, std::nullopt, random_start));
    return out;
}

struct DatasetSource {
    std::filesystem::path manifest;
    std::optional<SyntheticSpec> synthetic;
};

struct ModelEntry {
    std::string label;
    ToyVlmConfig config;
    std::filesystem::path checkpoint;
};

struct RunConfig {
    std::uint64_t seed = 0;
    std::filesystem::path output_dir = "out";
    DatasetSource train_data;
    DatasetSource eval_data;
    std::vector<ModelEntry> models;
    TrainOptions training;
    std::size_t subset_size = 500;
    std::size_t workers = 1;
    std::vector<PgdParameterSet> pgd_parameter_sets;
    bool verbose = false;

    void validate() const {
        if (subset_size == 0) throw ConfigError("subset_size must be at least 1");
        if (models.empty()) throw ConfigError("config lists no models");
        for (const auto& m : models) {
            if (m.label.empty()) throw ConfigError("model label must be non-empty");
            try {
                m.config.validate();
            } catch (const ContractViolation& e) {
                throw ConfigError("model " + m.label + ": " + e.what());
            }
        }
        for (const auto& p : pgd_parameter_sets) make_parameter_set(p.epsilon, p.alpha, p.iterations, p.random_start);
    }
};

namespace detail {

inline std::filesystem::path resolve(const std::filesystem::path& base, const std::string& p) {
    const std::filesystem::path path(p);
    return path.is_absolute() ? path : base / path;
}

inline DatasetSource parse_dataset(const nlohmann::json& j, const std::filesystem::path& base) {
    DatasetSource d;
    d.manifest = resolve(base, j.at("manifest").get<std::string>());
    if (j.contains("synthetic")) d.synthetic = j.at("synthetic").get<SyntheticSpec>();
    return d;
}

}  // namespace detail

/// Parses a run config. Relative paths resolve against `base` (normally the
/// directory holding the config file).
inline RunConfig parse_run_config(const nlohmann::json& j, const std::filesystem::path& base) {
    RunConfig c;
    try {
        const int version = j.value("version", kRunConfigVersion);
        if (version != kRunConfigVersion) throw ConfigError("unsupported config version " + std::to_string(version));
        c.seed = j.value("seed", std::uint64_t{0});
        if (j.contains("output_dir")) c.output_dir = detail::resolve(base, j.at("output_dir").get<std::string>());
        if (j.contains("train_data")) c.train_data = detail::parse_dataset(j.at("train_data"), base);
        if (j.contains("eval_data")) c.eval_data = detail::parse_dataset(j.at("eval_data"), base);
        for (const auto& m : j.at("models")) {
            ModelEntry e;
            e.config = m.at("config").get<ToyVlmConfig>();
            e.label = m.value("label", to_string(e.config.fusion_kind));
            e.checkpoint = detail::resolve(base, m.at("checkpoint").get<std::string>());
            c.models.push_back(std::move(e));
        }
        if (j.contains("training")) {
            const auto& t = j.at("training");
            c.training.epochs = t.value("epochs", c.training.epochs);
            c.training.learning_rate = t.value("learning_rate", c.training.learning_rate);
            c.training.batch_size = t.value("batch_size", c.training.batch_size);
            if (t.contains("optimizer")) c.training.optimizer = parse_optimizer(t.at("optimizer").get<std::string>());
            c.training.linear_decay = t.value("linear_decay", c.training.linear_decay);
        }
        c.subset_size = j.value("subset_size", c.subset_size);
        c.workers = std::max<std::size_t>(1, j.value("workers", c.workers));
        c.verbose = j.value("verbose", false);
        if (j.contains("pgd_parameter_sets")) {
            for (const auto& p : j.at("pgd_parameter_sets")) {
                std::optional<double> alpha;
                std::optional<std::size_t> iterations;
                if (p.contains("alpha")) alpha = p.at("alpha").get<double>();
                if (p.contains("iterations")) iterations = p.at("iterations").get<std::size_t>();
                c.pgd_parameter_sets.push_back(
                    make_parameter_set(p.at("epsilon").get<double>(), alpha, iterations, p.value("random_start", true)));
            }
        } else {
            c.pgd_parameter_sets = default_parameter_sets();
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("malformed run config: ") + e.what());
    } catch (const ContractViolation& e) {
        throw ConfigError(e.what());
    }
    c.validate();
    return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError(path, "cannot open config");
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
    return parse_run_config(j, path.parent_path());
}

inline SyntheticSpec effective_spec(const RunConfig& c, const DatasetSource& d, const std::string& role) {
    SyntheticSpec spec = *d.synthetic;
    spec.seed = derive_seed(c.seed ^ spec.seed, role);
    return spec;
}

/// Generates every synthetic dataset the config declares; returns their manifests.
inline std::vector<std::filesystem::path> run_gen_data(const RunConfig& c) {
    std::vector<std::filesystem::path> out;
    const std::pair<const DatasetSource*, const char*> sources[] = {{&c.train_data, "train"}, {&c.eval_data, "eval"}};
    for (const auto& [src, role] : sources) {
        if (!src->synthetic) continue;
        auto spec = effective_spec(c, *src, role);
        spec.id_prefix = std::string(role) + "-";
        for (const auto& m : c.models) {
            try {
                spec.validate_against(m.config);
            } catch (const ContractViolation& e) {
                throw ConfigError(std::string(role) + " data: " + e.what());
            }
        }
        out.push_back(gen_dataset(spec, src->manifest.parent_path()));
    }
    return out;
}

inline std::vector<VqaSample> load_for_model(const DatasetSource& src, const ToyVlmConfig& config) {
    try {
        return load_dataset(src.manifest, config);
    } catch (const ContractViolation& e) {
        throw ConfigError(e.what());
    }
}

/// Trains every model on the training manifest, saves each checkpoint and a
/// per-model loss log under output_dir.
inline std::vector<TrainResult> run_train(const RunConfig& c) {
    std::vector<TrainResult> results;
    std::filesystem::create_directories(c.output_dir);
    for (const auto& m : c.models) {
        const auto samples = load_for_model(c.train_data, m.config);
        if (samples.empty()) throw ConfigError("training manifest is empty");
        const auto examples = training_examples(samples, m.config);
        if (c.verbose) std::fprintf(stderr, "training %s on %zu samples\n", m.label.c_str(), examples.size());
        auto result = train_toy(examples, m.config, c.training);
        if (!m.checkpoint.parent_path().empty()) std::filesystem::create_directories(m.checkpoint.parent_path());
        save_checkpoint(m.checkpoint, result.params);
        nlohmann::ordered_json log{{"model", m.label},
                                   {"optimizer", to_string(c.training.optimizer)},
                                   {"learning_rate", c.training.learning_rate},
                                   {"epoch_losses", result.epoch_losses}};
        detail::write_text(c.output_dir / ("train_" + m.label + ".json"), log.dump(2) + "\n");
        results.push_back(std::move(result));
    }
    return results;
}

/// Attack applied to one sample: (params, sample, self-label, set, seed) -> adversarial image.
using AttackFn = std::function<Tensor(const ToyVlmParams<float>&, const VqaSample&, const AnswerText&,
                                      const PgdParameterSet&, std::uint64_t)>;

inline Tensor pgd_self_label_attack(const ToyVlmParams<float>& params, const VqaSample& sample,
                                    const AnswerText& clean, const PgdParameterSet& set, std::uint64_t seed) {
    if (set.epsilon == 0.0) return sample.image;
    const auto loss = vlm_loss_map(params, sample.question, clean);
    PgdParams p{ThreatModel{.epsilon = set.epsilon}, set.alpha, set.iterations, set.random_start, seed};
    return pgd(loss, sample.image, p).adversarial_image;
}

/// Runs fn(i) for i in [0, n) on `workers` threads. Results must be written by index.
template <class Fn>
void parallel_for(std::size_t n, std::size_t workers, Fn&& fn) {
    workers = std::max<std::size_t>(1, std::min(workers, n));
    if (workers == 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&] {
            for (std::size_t i = next++; i < n; i = next++) fn(i);
        });
    }
    for (auto& t : pool) t.join();
}

/// Clean-vs-adversarial evaluation of one model over a fixed subset. Attack
/// errors are captured per sample and never abort the sweep.
inline EvalReport evaluate_model(const std::string& label, const ToyVlmParams<float>& params,
                                 const std::vector<VqaSample>& subset, const std::vector<PgdParameterSet>& sets,
                                 std::uint64_t run_seed, std::size_t workers, const AttackFn& attack = pgd_self_label_attack,
                                 bool verbose = false) {
    std::vector<AnswerText> clean(subset.size());
    parallel_for(subset.size(), workers,
                 [&](std::size_t i) { clean[i] = generate_answer(params, subset[i].image, subset[i].question); });

    EvalReport report{label, {}, {}};
    for (const auto& set : sets) {
        std::vector<EvalRecord> records(subset.size());
        parallel_for(subset.size(), workers, [&](std::size_t i) {
            const auto& s = subset[i];
            EvalRecord& r = records[i];
            r.sample_id = s.sample_id;
            r.epsilon = set.epsilon;
            r.clean_answer = clean[i].text;
            r.clean_correct = vqa_match(r.clean_answer, s.ground_truth_answers);
            try {
                const auto adv = attack(params, s, clean[i], set, derive_seed(run_seed, s.sample_id));
                r.adversarial_answer = generate_answer(params, adv, s.question).text;
                r.adversarial_correct = vqa_match(r.adversarial_answer, s.ground_truth_answers);
            } catch (const std::exception& e) {
                r.error = e.what();
                r.adversarial_answer.clear();
                r.adversarial_correct = false;
            }
        });
        report.entries.push_back(aggregate(set.epsilon, records));
        if (verbose) {
            const auto& e = report.entries.back();
            std::fprintf(stderr, "%s eps=%s clean=%.1f adv=%.1f failures=%zu\n", label.c_str(),
                         epsilon_label(set.epsilon).c_str(), e.clean_accuracy, e.adversarial_accuracy, e.failures);
        }
        report.records.insert(report.records.end(), records.begin(), records.end());
    }
    return report;
}

inline void check_checkpoint_matches(const ModelEntry& m, const ToyVlmParams<float>& params) {
    if (params.config.fusion_kind != m.config.fusion_kind) {
        throw ConfigError("checkpoint " + m.checkpoint.string() + " has fusion kind " +
                          to_string(params.config.fusion_kind) + ", config expects " + to_string(m.config.fusion_kind));
    }
    if (params.config.image_size != m.config.image_size || params.config.patch_size != m.config.patch_size ||
        params.config.d_model != m.config.d_model || params.config.d_ff != m.config.d_ff ||
        params.config.vocab != m.config.vocab || params.config.max_answer_len != m.config.max_answer_len) {
        throw ConfigError("checkpoint " + m.checkpoint.string() + " dimensions differ from model " + m.label);
    }
}

/// Full sweep for every configured model; persists report.csv, report.md and records.jsonl.
inline std::vector<EvalReport> run_eval(const RunConfig& c, const AttackFn& attack = pgd_self_label_attack) {
    std::vector<EvalReport> reports;
    for (const auto& m : c.models) {
        const auto params = load_checkpoint(m.checkpoint);
        check_checkpoint_matches(m, params);
        const auto samples = load_for_model(c.eval_data, params.config);
        if (c.subset_size > samples.size()) {
            throw ConfigError("subset_size " + std::to_string(c.subset_size) + " exceeds the " +
                              std::to_string(samples.size()) + " evaluation samples");
        }
        std::vector<std::size_t> ids(samples.size());
        std::iota(ids.begin(), ids.end(), std::size_t{0});
        std::vector<VqaSample> subset;
        for (std::size_t i : sample_subset(ids, c.subset_size, derive_seed(c.seed, "subset"))) subset.push_back(samples[i]);
        reports.push_back(evaluate_model(m.label, params, subset, c.pgd_parameter_sets, c.seed, c.workers, attack,
                                         c.verbose));
    }
    emit_report(reports, c.output_dir, false);
    return reports;
}

/// Re-derives reports from a records file, grouping by model and budget in
/// first-seen order.
inline std::vector<EvalReport> reports_from_records(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError(path, "cannot open records");
    std::vector<EvalReport> reports;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError(path.string() + ": " + e.what());
        }
        const auto model = j.at("model").get<std::string>();
        auto it = std::find_if(reports.begin(), reports.end(), [&](const EvalReport& r) { return r.model == model; });
        if (it == reports.end()) it = reports.insert(reports.end(), EvalReport{model, {}, {}});
        it->records.push_back(record_from_json(j));
    }
    for (auto& r : reports) {
        std::vector<double> budgets;
        for (const auto& rec : r.records)
            if (std::find(budgets.begin(), budgets.end(), rec.epsilon) == budgets.end()) budgets.push_back(rec.epsilon);
        for (double eps : budgets) r.entries.push_back(aggregate(eps, r.records));
    }
    return reports;
}

/// Fixture file: {"models": [{"label", "epsilons", "clean", "adversarial", "n"?}]}.
inline std::vector<EvalReport> reports_from_fixture(const nlohmann::json& j) {
    std::vector<EvalReport> out;
    try {
        for (const auto& m : j.at("models")) {
            out.push_back(fixture_report(m.at("label").get<std::string>(), m.at("epsilons").get<std::vector<double>>(),
                                         m.at("clean").get<std::vector<double>>(),
                                         m.at("adversarial").get<std::vector<double>>(), m.value("n", std::size_t{500})));
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("malformed fixture: ") + e.what());
    } catch (const ContractViolation& e) {
        throw ConfigError(e.what());
    }
    return out;
}

}  // namespace advlm

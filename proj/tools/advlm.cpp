// advlm: synthetic data, toy-model training and PGD robustness sweeps.
//
//   advlm gen-data    --config run.json
//   advlm train       --config run.json
//   advlm attack-eval --config run.json [--workers N]
//   advlm report      --config run.json [--records FILE | --fixture FILE]
//
// Exit codes: 0 success, 2 config or usage error, 3 I/O error, 1 anything else.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "advlm/harness.hpp"

namespace fs = std::filesystem;

namespace {

struct CommonOptions {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> output_dir;
};

advlm::RunConfig load(const CommonOptions& o) {
    auto c = advlm::load_run_config(o.config);
    if (o.seed) c.seed = *o.seed;
    if (o.output_dir) c.output_dir = *o.output_dir;
    return c;
}

void add_common(CLI::App* cmd, CommonOptions& o) {
    cmd->add_option("-c,--config", o.config, "Run configuration (JSON)")->required();
    cmd->add_option("--seed", o.seed, "Override the run seed");
    cmd->add_option("--output-dir", o.output_dir, "Override the output directory");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Adversarial robustness sweeps for toy vision-language models"};
    app.require_subcommand(1);

    CommonOptions gen_opts, train_opts, eval_opts, report_opts;
    auto* gen = app.add_subcommand("gen-data", "Render the synthetic datasets declared in the config");
    add_common(gen, gen_opts);

    auto* train = app.add_subcommand("train", "Train every configured model and write its checkpoint");
    add_common(train, train_opts);

    auto* eval = app.add_subcommand(
        "attack-eval",
        "Clean vs PGD accuracy over the configured budgets. Budgets without explicit alpha/iterations use the "
        "tabulated schedule; budgets between 2/255 and 255/255 are interpolated, which extends the published grid.");
    add_common(eval, eval_opts);
    std::optional<std::size_t> workers;
    eval->add_option("--workers", workers, "Evaluation threads (results do not depend on this)");
    bool verbose = false;
    eval->add_flag("-v,--verbose", verbose, "Print per-budget progress");

    auto* report = app.add_subcommand("report", "Re-render report.csv and report.md");
    add_common(report, report_opts);
    std::optional<std::string> records, fixture;
    auto* records_opt = report->add_option("--records", records, "records.jsonl to aggregate (default: output dir)");
    report->add_option("--fixture", fixture, "Fixture JSON with externally supplied accuracies")
        ->excludes(records_opt);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        // Usage errors count as configuration errors; --help exits 0.
        return app.exit(e) == 0 ? 0 : 2;
    }

    try {
        if (*gen) {
            for (const auto& m : advlm::run_gen_data(load(gen_opts))) std::cout << m.string() << "\n";
        } else if (*train) {
            const auto c = load(train_opts);
            const auto results = advlm::run_train(c);
            for (std::size_t i = 0; i < results.size(); ++i) {
                const auto& losses = results[i].epoch_losses;
                std::printf("%s: %zu epochs, final loss %.4f -> %s\n", c.models[i].label.c_str(), losses.size(),
                            losses.empty() ? 0.0 : losses.back(), c.models[i].checkpoint.string().c_str());
            }
        } else if (*eval) {
            auto c = load(eval_opts);
            if (workers) c.workers = std::max<std::size_t>(1, *workers);
            c.verbose = c.verbose || verbose;
            advlm::run_eval(c);
            std::cout << (c.output_dir / "report.md").string() << "\n";
        } else if (*report) {
            const auto c = load(report_opts);
            if (fixture) {
                std::ifstream in(*fixture);
                if (!in) throw advlm::IoError(*fixture, "cannot open fixture");
                nlohmann::json j;
                try {
                    j = nlohmann::json::parse(in);
                } catch (const nlohmann::json::exception& e) {
                    throw advlm::ConfigError(*fixture + ": " + e.what());
                }
                advlm::emit_report(advlm::reports_from_fixture(j), c.output_dir, true);
            } else {
                const fs::path path = records ? fs::path(*records) : c.output_dir / "records.jsonl";
                advlm::emit_report(advlm::reports_from_records(path), c.output_dir, false);
            }
            std::cout << (c.output_dir / "report.md").string() << "\n";
        }
    } catch (const advlm::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const advlm::IoError& e) {
        std::cerr << "i/o error: " << e.what() << "\n";
        return 3;
    } catch (const std::filesystem::filesystem_error& e) {
        std::cerr << "i/o error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

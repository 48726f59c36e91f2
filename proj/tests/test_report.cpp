#include <filesystem>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>

#include "advlm/harness.hpp"
#include "advlm/report.hpp"

using namespace advlm;
namespace fs = std::filesystem;

namespace {

const std::vector<double> kBudgets{2.0 / 255, 4.0 / 255, 8.0 / 255, 16.0 / 255, 128.0 / 255, 1.0};

std::vector<EvalReport> published_tables() {
    return {fixture_report("LLaVA-1.5-13B", kBudgets, std::vector<double>(6, 87.4),
                           {80.4, 80.6, 79.0, 76.8, 67.4, 51.4}),
            fixture_report("Llama 3.2 Vision-8B-2", kBudgets, {42.8, 42.8, 42.8, 42.8, 42.8, 41.6},
                           {36.2, 32.4, 33.0, 36.2, 37.4, 31.4})};
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST(Report, PublishedDropsReproduceExactly) {
    const auto reports = published_tables();
    const std::vector<std::vector<std::string>> expected{{"7.0", "6.8", "8.4", "10.6", "20.0", "36.0"},
                                                         {"6.6", "10.4", "9.8", "6.6", "5.4", "10.2"}};
    for (std::size_t m = 0; m < 2; ++m) {
        for (std::size_t k = 0; k < 6; ++k) EXPECT_EQ(format_percent(reports[m].entries[k].accuracy_drop), expected[m][k]);
    }
}

TEST(Report, MarkdownCellsAndFootnote) {
    const auto md = render_markdown(published_tables());
    for (const char* cell : {"80.4 (–7.0)", "80.6 (–6.8)", "79.0 (–8.4)", "76.8 (–10.6)", "67.4 (–20.0)",
                             "51.4 (–36.0)", "36.2 (–6.6)", "32.4 (–10.4)", "33.0 (–9.8)", "37.4 (–5.4)",
                             "31.4‡ (–10.2‡)"}) {
        EXPECT_NE(md.find(cell), std::string::npos) << cell;
    }
    EXPECT_NE(md.find("| LLaVA-1.5-13B | 87.4 |"), std::string::npos);
    EXPECT_NE(md.find("| Llama 3.2 Vision-8B-2 | 42.8 |"), std::string::npos);
    EXPECT_NE(md.find("clean accuracy was 41.6% in the ε=255/255 run"), std::string::npos);
    EXPECT_NE(md.find("ε ≤ 16/255"), std::string::npos);
    EXPECT_NE(md.find("ε ≥ 128/255"), std::string::npos);
    EXPECT_EQ(md.find("Intermediate"), std::string::npos);
    EXPECT_NE(md.find(std::string(kScorerVersion)), std::string::npos);
}

TEST(Report, CsvRows) {
    const auto csv = render_csv(published_tables());
    EXPECT_EQ(csv.substr(0, csv.find('\n')), kCsvHeader);
    EXPECT_NE(csv.find("LLaVA-1.5-13B,0.007843,500,87.4,80.4,7.0,2.91\n"), std::string::npos);
    EXPECT_NE(csv.find("Llama 3.2 Vision-8B-2,1.000000,500,41.6,31.4,10.2,4.32\n"), std::string::npos);
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 13);
}

TEST(Report, NegativeDropShowsPlus) {
    EXPECT_EQ(format_drop(-1.23), "(+1.2)");
    EXPECT_EQ(format_drop(0.04), "(0.0)");
    EXPECT_EQ(format_drop(-0.04), "(0.0)");
    EXPECT_EQ(format_drop(7.0), "(–7.0)");
}

TEST(Report, EpsilonLabels) {
    EXPECT_EQ(epsilon_label(8.0 / 255), "8/255");
    EXPECT_EQ(epsilon_label(1.0), "255/255");
    EXPECT_EQ(epsilon_label(0.0), "0/255");
    EXPECT_EQ(epsilon_label(0.1), "0.1");
}

TEST(Report, IntermediateBudgetsGetTheirOwnTable) {
    const auto md = render_markdown({fixture_report("m", {32.0 / 255}, {50.0}, {40.0})});
    EXPECT_NE(md.find("Intermediate"), std::string::npos);
    EXPECT_NE(md.find("40.0 (–10.0)"), std::string::npos);
}

TEST(Report, EmptyReportHasHeaderOnly) {
    TempDir dir("advlm_report_empty");
    emit_report({}, dir.path, false);
    EXPECT_EQ(slurp(dir.path / "report.csv"), std::string(kCsvHeader) + "\n");
    const auto md = slurp(dir.path / "report.md");
    EXPECT_NE(md.find("No results."), std::string::npos);
    EXPECT_EQ(md.find('|'), std::string::npos);
    EXPECT_EQ(slurp(dir.path / "records.jsonl"), "");
}

TEST(Report, FixtureModeSkipsRecords) {
    TempDir dir("advlm_report_fixture");
    emit_report(published_tables(), dir.path, true);
    EXPECT_TRUE(fs::exists(dir.path / "report.csv"));
    EXPECT_TRUE(fs::exists(dir.path / "report.md"));
    EXPECT_FALSE(fs::exists(dir.path / "records.jsonl"));
}

TEST(Report, FixtureFileMatchesInlineTables) {
    std::ifstream in(fs::path(ADVLM_SOURCE_DIR) / "configs" / "fixture_tables.json");
    ASSERT_TRUE(in);
    const auto from_file = reports_from_fixture(nlohmann::json::parse(in));
    EXPECT_EQ(render_csv(from_file), render_csv(published_tables()));
    EXPECT_EQ(render_markdown(from_file), render_markdown(published_tables()));
}

TEST(Report, RecordsReplayThroughFile) {
    std::vector<EvalRecord> records;
    for (int i = 0; i < 40; ++i) {
        for (double eps : {0.0, 4.0 / 255}) {
            EvalRecord r;
            r.sample_id = "s" + std::to_string(i);
            r.epsilon = eps;
            r.clean_answer = i % 5 ? "red" : "blue";
            r.clean_correct = i % 5 != 0;
            r.adversarial_answer = eps > 0 && i % 3 == 0 ? "green" : r.clean_answer;
            r.adversarial_correct = r.clean_correct && r.adversarial_answer == r.clean_answer;
            if (eps > 0 && i == 7) r.error = "non-finite gradient";
            records.push_back(r);
        }
    }
    EvalReport report{"toy", {aggregate(0.0, records), aggregate(4.0 / 255, records)}, records};
    TempDir dir("advlm_report_replay");
    emit_report({report}, dir.path, false);
    const auto back = reports_from_records(dir.path / "records.jsonl");
    ASSERT_EQ(back.size(), 1u);
    EXPECT_EQ(render_csv(back), render_csv({report}));
    EXPECT_EQ(back[0].entries[1].failures, 1u);
    EXPECT_EQ(back[0].entries[0].adversarial_accuracy, back[0].entries[0].clean_accuracy);
}

TEST(Report, RejectsInconsistentDrop) {
    auto r = fixture_report("m", {0.1}, {50.0}, {40.0});
    r.entries[0].accuracy_drop = 3.0;
    TempDir dir("advlm_report_bad");
    EXPECT_THROW(emit_report({r}, dir.path, true), ContractViolation);
}

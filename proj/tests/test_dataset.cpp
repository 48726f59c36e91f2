#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include <gtest/gtest.h>

#include "advlm/dataset.hpp"
#include "advlm/vqa_eval.hpp"
#include "test_support.hpp"

using namespace advlm;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write(const fs::path& p, const std::string& text) {
    std::ofstream out(p, std::ios::binary);
    out << text;
}

SyntheticSpec small_spec(std::size_t n, std::uint64_t seed = 5) {
    SyntheticSpec s;
    s.n_samples = n;
    s.seed = seed;
    return s;
}

std::array<float, 3> pixel(const Tensor& img, std::size_t y, std::size_t x) {
    const std::size_t w = img.shape()[1];
    return {img[(y * w + x) * 3], img[(y * w + x) * 3 + 1], img[(y * w + x) * 3 + 2]};
}

}  // namespace

TEST(Dataset, ZeroSamplesWritesEmptyManifestOnly) {
    TempDir dir("advlm_ds_empty");
    const auto manifest = gen_dataset(small_spec(0), dir.path / "d");
    EXPECT_EQ(slurp(manifest), "");
    EXPECT_FALSE(fs::exists(dir.path / "d" / "images"));
    EXPECT_TRUE(read_manifest(manifest).empty());
}

TEST(Dataset, SameSeedGivesByteIdenticalFiles) {
    TempDir dir("advlm_ds_det");
    const auto a = gen_dataset(small_spec(40), dir.path / "a");
    const auto b = gen_dataset(small_spec(40), dir.path / "b");
    EXPECT_EQ(slurp(a), slurp(b));
    for (const auto& e : read_manifest(a)) {
        EXPECT_EQ(slurp(e.image), slurp(dir.path / "b" / "images" / e.image.filename()));
    }
    const auto c = gen_dataset(small_spec(40, 6), dir.path / "c");
    EXPECT_NE(slurp(a), slurp(c));
}

TEST(Dataset, SampleDependsOnlyOnSeedAndId) {
    // Growing the dataset must not change earlier samples.
    auto small = small_spec(10);
    auto large = small_spec(90);
    for (std::size_t i = 0; i < 10; ++i) {
        const auto x = draw_sample(small, i), y = draw_sample(large, i);
        EXPECT_EQ(x.question, y.question);
        EXPECT_EQ(x.answer, y.answer);
    }
}

TEST(Dataset, GoldAnswerMatchesItselfAndTokenizes) {
    TempDir dir("advlm_ds_reflexive");
    const ToyVlmConfig config;
    const auto manifest = gen_dataset(small_spec(200), dir.path);
    const auto samples = load_dataset(manifest, config);
    ASSERT_EQ(samples.size(), 200u);
    std::map<std::string, int> answers;
    for (const auto& s : samples) {
        ASSERT_EQ(s.ground_truth_answers.size(), 1u);
        EXPECT_TRUE(vqa_match(s.ground_truth_answers[0], s.ground_truth_answers)) << s.sample_id;
        EXPECT_EQ(s.image.shape(), config.image_shape());
        ++answers[s.ground_truth_answers[0]];
    }
    EXPECT_GT(answers.size(), 10u);
    EXPECT_NO_THROW(training_examples(samples, config));
}

TEST(Dataset, AnswersAgreeWithRenderedScene) {
    // Independent check from pixels: an object's cell centre carries its colour,
    // and counts follow the number of target-shaped objects.
    const auto spec = small_spec(300, 9);
    const std::size_t grid_w = spec.image_size.width / spec.cell_size;
    for (std::size_t i = 0; i < spec.n_samples; ++i) {
        const auto s = draw_sample(spec, i);
        const auto img = render_scene(spec, s.objects);
        for (const auto& o : s.objects) {
            const std::size_t y = (o.cell / grid_w) * spec.cell_size + spec.cell_size / 2;
            const std::size_t x = (o.cell % grid_w) * spec.cell_size + spec.cell_size / 2;
            const auto rgb = spec.colors[o.color].rgb;
            const auto p = pixel(img, y, x);
            for (int ch = 0; ch < 3; ++ch) ASSERT_FLOAT_EQ(p[ch], rgb[ch] / 255.0f) << s.sample_id;
        }
        std::string shape;
        if (s.question.rfind("how many ", 0) == 0) {
            shape = s.question.substr(9, s.question.size() - 9 - 2);
            const auto n = std::count_if(s.objects.begin(), s.objects.end(), [&](const SceneObject& o) { return o.shape == shape; });
            EXPECT_EQ(s.answer, std::to_string(n)) << s.question;
        } else if (s.question.rfind("is there a ", 0) == 0) {
            shape = s.question.substr(11, s.question.size() - 11 - 1);
            const bool present = std::any_of(s.objects.begin(), s.objects.end(), [&](const SceneObject& o) { return o.shape == shape; });
            EXPECT_EQ(s.answer, present ? "yes" : "no") << s.question;
        } else {
            ASSERT_EQ(s.question.rfind("what color is the ", 0), 0u);
            shape = s.question.substr(18, s.question.size() - 18 - 1);
            const auto n = std::count_if(s.objects.begin(), s.objects.end(), [&](const SceneObject& o) { return o.shape == shape; });
            EXPECT_EQ(n, 1);
            EXPECT_EQ(s.answer, spec.colors[s.objects[0].color].name);
        }
        std::set<std::size_t> cells;
        for (const auto& o : s.objects) cells.insert(o.cell);
        EXPECT_EQ(cells.size(), s.objects.size()) << "objects overlap in " << s.sample_id;
    }
}

TEST(Dataset, SpecJsonRoundTrip) {
    auto spec = small_spec(17, 99);
    spec.colors = {{"red", {255, 0, 0}}, {"blue", {0, 0, 255}}};
    spec.question_kinds = {QuestionKind::Count};
    nlohmann::json j = spec;
    const auto back = j.get<SyntheticSpec>();
    EXPECT_EQ(nlohmann::json(back), j);
    EXPECT_EQ(back.colors, spec.colors);
}

TEST(Dataset, SpecValidation) {
    const ToyVlmConfig config;
    EXPECT_NO_THROW(small_spec(1).validate_against(config));
    auto bad_shape = small_spec(1);
    bad_shape.shapes = {"hexagon"};
    EXPECT_THROW(bad_shape.validate(), ContractViolation);
    auto unknown_word = small_spec(1);
    unknown_word.colors.push_back({"magenta", {255, 0, 128}});
    EXPECT_THROW(unknown_word.validate_against(config), ContractViolation);
    auto crowded = small_spec(1);
    crowded.image_size = {8, 16, 3};
    EXPECT_THROW(crowded.validate(), ContractViolation);
}

TEST(Ppm, RoundTripIsExactAfterQuantisation) {
    TempDir dir("advlm_ppm");
    SplitMix64 rng(1);
    const auto img = advlm::testing::random_tensor<float>({5, 7, 3}, rng, 0, 1);
    write_ppm(dir.path / "x.ppm", img);
    const auto back = read_ppm(dir.path / "x.ppm");
    ASSERT_EQ(back.shape(), img.shape());
    for (std::size_t i = 0; i < img.numel(); ++i) {
        EXPECT_EQ(back[i], static_cast<float>(quantize_pixel(img[i])) / 255.0f);
        EXPECT_LE(std::abs(back[i] - img[i]), 0.5f / 255.0f + 1e-6f);
    }
    write_ppm(dir.path / "y.ppm", back);
    EXPECT_EQ(slurp(dir.path / "x.ppm"), slurp(dir.path / "y.ppm"));
}

TEST(Ppm, HeaderCommentsAreSkipped) {
    TempDir dir("advlm_ppm_comment");
    write(dir.path / "c.ppm", std::string("P6\n# made by hand\n1 1\n255\n") + std::string("\x10\x20\x30", 3));
    const auto img = read_ppm(dir.path / "c.ppm");
    EXPECT_EQ(img[2], 48.0f / 255.0f);
}

TEST(Ppm, Errors) {
    TempDir dir("advlm_ppm_err");
    EXPECT_THROW(read_ppm(dir.path / "missing.ppm"), IoError);
    write(dir.path / "p3.ppm", "P3\n1 1\n255\n0 0 0\n");
    EXPECT_THROW(read_ppm(dir.path / "p3.ppm"), IoError);
    write(dir.path / "short.ppm", "P6\n2 2\n255\n\x01\x02");
    EXPECT_THROW(read_ppm(dir.path / "short.ppm"), IoError);
    write(dir.path / "deep.ppm", "P6\n1 1\n65535\n");
    EXPECT_THROW(read_ppm(dir.path / "deep.ppm"), IoError);
    EXPECT_THROW(encode_ppm(Tensor({2, 2})), ContractViolation);
}

TEST(Manifest, RejectsMalformedEntries) {
    TempDir dir("advlm_manifest");
    const auto m = dir.path / "manifest.jsonl";
    EXPECT_THROW(read_manifest(m), IoError);

    write(m, R"({"sample_id":"a","image":"a.ppm","question":"q","answers":[]})" "\n");
    EXPECT_THROW(read_manifest(m), ContractViolation);

    write(m, R"({"sample_id":"a","image":"a.ppm","question":"q","answers":["x"]})" "\n"
             R"({"sample_id":"a","image":"b.ppm","question":"q","answers":["y"]})" "\n");
    EXPECT_THROW(read_manifest(m), ContractViolation);

    write(m, "{not json}\n");
    EXPECT_THROW(read_manifest(m), ContractViolation);

    write(m, R"({"sample_id":"a","image":"a.ppm","answers":["x"]})" "\n");
    EXPECT_THROW(read_manifest(m), ContractViolation);
}

TEST(Manifest, ResolvesImagesAndChecksShape) {
    TempDir dir("advlm_manifest_shape");
    write_ppm(dir.path / "tiny.ppm", Tensor({4, 4, 3}));
    write(dir.path / "manifest.jsonl",
          R"({"sample_id":"t","image":"tiny.ppm","question":"is there a circle?","answers":["no","nope"]})" "\n\n");
    const auto entries = read_manifest(dir.path / "manifest.jsonl");
    ASSERT_EQ(entries.size(), 1u);
    EXPECT_EQ(entries[0].image, dir.path / "tiny.ppm");
    EXPECT_EQ(entries[0].answers.size(), 2u);
    EXPECT_THROW(load_sample(entries[0], ToyVlmConfig{}), ContractViolation);
    ToyVlmConfig small;
    small.image_size = {8, 8, 3};
    EXPECT_THROW(load_sample(entries[0], small), ContractViolation);
    small.image_size = {4, 4, 3};
    small.patch_size = 4;
    EXPECT_EQ(load_sample(entries[0], small).ground_truth_answers[1], "nope");
}

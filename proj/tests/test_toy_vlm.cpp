#include <cmath>

#include <gtest/gtest.h>

#include "advlm/toy_vlm.hpp"
#include "advlm/train.hpp"
#include "test_support.hpp"

using namespace advlm;
using advlm::testing::random_tensor;

namespace {

ToyVlmConfig config_for(FusionKind kind, std::uint64_t seed = 1) {
    ToyVlmConfig c;
    c.fusion_kind = kind;
    c.seed = seed;
    return c;
}

template <class T = float>
BasicTensor<T> random_image(const ToyVlmConfig& c, SplitMix64& rng, double lo = 0.0, double hi = 1.0) {
    return random_tensor<T>(c.image_shape(), rng, lo, hi);
}

class BothFusionKinds : public ::testing::TestWithParam<FusionKind> {};

std::string kind_name(const ::testing::TestParamInfo<FusionKind>& info) { return to_string(info.param); }

}  // namespace

TEST(ToyVlmConfigTest, ValidatesGeometryAndReservedTokens) {
    ToyVlmConfig c;
    EXPECT_NO_THROW(c.validate());
    c.image_size.width = 30;
    EXPECT_THROW(c.validate(), ContractViolation);
    c = ToyVlmConfig{};
    c.vocab.erase(c.vocab.begin());
    EXPECT_THROW(c.validate(), ContractViolation);
    c = ToyVlmConfig{};
    c.vocab.push_back("red");
    EXPECT_THROW(c.validate(), ContractViolation);
}

TEST(ToyVlmConfigTest, JsonRoundTrip) {
    auto c = config_for(FusionKind::CrossAttention, 99);
    c.d_model = 16;
    c.patch_input_scale = 0.25;
    const nlohmann::json j = c;
    EXPECT_EQ(j.get<ToyVlmConfig>(), c);
}

TEST(QuestionTest, TokenizesAndRejectsUnknownWords) {
    const ToyVlmConfig c;
    const auto q = tokenize_question(c, "What color is the Circle?");
    ASSERT_EQ(q.ids.size(), 5u);
    EXPECT_EQ(c.vocab[q.ids[4]], "circle");
    EXPECT_THROW(tokenize_question(c, "what colour is the circle"), ContractViolation);
}

TEST(AnswerTextTest, RenderingSkipsReservedTokens) {
    const ToyVlmConfig c;
    const auto a = make_answer(c, {c.token_id("red"), c.pad_id(), c.token_id("circle")});
    EXPECT_EQ(a.text, "red circle");
    EXPECT_EQ(a.tokens.back(), c.eos_id());
    EXPECT_EQ(answer_from_text(c, "Yes").tokens, (std::vector<std::size_t>{c.token_id("yes"), c.eos_id()}));
}

TEST(InitTest, DeterministicBoundedAndSeedSensitive) {
    const auto c = config_for(FusionKind::Projection, 5);
    const auto a = init_params(c);
    const auto b = init_params(c);
    const auto other = init_params(config_for(FusionKind::Projection, 6));
    bool differs = false;
    for_each_slot(
        [&](const std::string& name, const Tensor& x, const Tensor& y, const Tensor& z) {
            EXPECT_EQ(x, y) << name;
            differs = differs || !(x == z);
            if (x.rank() == 2) {
                const double s = std::sqrt(6.0 / static_cast<double>(x.shape()[0] + x.shape()[1]));
                for (float v : x.data()) EXPECT_LE(std::abs(v), s) << name;
            } else {
                for (float v : x.data()) EXPECT_EQ(v, 0.0f) << name;
            }
        },
        a.weights, b.weights, other.weights);
    EXPECT_TRUE(differs);
}

TEST(InitTest, ParameterSetMatchesFusionKind) {
    std::vector<std::string> projection_names, attention_names;
    for_each_slot([&](const std::string& n, const Tensor&) { projection_names.push_back(n); },
                  init_params(config_for(FusionKind::Projection)).weights);
    for_each_slot([&](const std::string& n, const Tensor&) { attention_names.push_back(n); },
                  init_params(config_for(FusionKind::CrossAttention)).weights);
    const auto has = [](const std::vector<std::string>& names, std::string_view prefix) {
        return std::any_of(names.begin(), names.end(), [&](const std::string& n) { return n.starts_with(prefix); });
    };
    EXPECT_TRUE(has(projection_names, "fusion.projection"));
    EXPECT_FALSE(has(projection_names, "fusion.adapter"));
    EXPECT_TRUE(has(attention_names, "fusion.adapter"));
    EXPECT_FALSE(has(attention_names, "fusion.projection"));

    auto mismatched = init_params(config_for(FusionKind::Projection));
    mismatched.config.fusion_kind = FusionKind::CrossAttention;
    EXPECT_THROW(mismatched.validate(), ContractViolation);
}

TEST(EncodeImageTest, ShapeArithmetic) {
    const auto c = config_for(FusionKind::Projection);
    const auto p = init_params(c);
    SplitMix64 rng(1);
    Graph<float> g;
    auto m = bind(g, p);
    auto features = encode_image(m, g.input(random_image(c, rng)));
    EXPECT_EQ(features.value().shape(), (Shape{16, 32}));
}

TEST(EncodeImageTest, ZeroImageWithZeroBiasGivesZeroFeatures) {
    const auto p = init_params(config_for(FusionKind::Projection));
    Graph<float> g;
    auto m = bind(g, p);
    auto features = encode_image(m, g.input(Tensor(p.config.image_shape())));
    for (float v : features.value().data()) EXPECT_EQ(v, 0.0f);
}

TEST(EncodeImageTest, MatchesManualPatchFlattenOracle) {
    const auto c = config_for(FusionKind::CrossAttention, 3);
    auto p = init_params(c);
    SplitMix64 rng(2);
    for (float& v : p.weights.patch_bias.data()) v = static_cast<float>(rng.uniform(-1, 1));
    const auto image = random_image<double>(c, rng);
    const auto pd = p.cast<double>();
    Graph<double> g;
    auto m = bind(g, pd);
    const auto& features = encode_image(m, g.input(image)).value();

    const std::size_t ps = c.patch_size, w = c.image_size.width, ch = c.image_size.channels;
    for (std::size_t gy = 0; gy < c.grid_rows(); ++gy) {
        for (std::size_t gx = 0; gx < c.grid_cols(); ++gx) {
            std::vector<double> flat;
            for (std::size_t y = 0; y < ps; ++y)
                for (std::size_t x = 0; x < ps; ++x)
                    for (std::size_t k = 0; k < ch; ++k)
                        flat.push_back(image[((gy * ps + y) * w + gx * ps + x) * ch + k] * c.patch_input_scale);
            const std::size_t row = gy * c.grid_cols() + gx;
            for (std::size_t j = 0; j < c.d_model; ++j) {
                double expected = pd.weights.patch_bias[j];
                for (std::size_t i = 0; i < flat.size(); ++i) expected += flat[i] * pd.weights.patch_weight.at(i, j);
                EXPECT_NEAR(features.at(row, j), expected, 1e-12);
            }
        }
    }
}

TEST(EncodeImageTest, RejectsWrongImageShape) {
    const auto p = init_params(config_for(FusionKind::Projection));
    Graph<float> g;
    auto m = bind(g, p);
    EXPECT_THROW(encode_image(m, g.input(Tensor({16, 16, 3}))), ContractViolation);
}

TEST(FuseTest, IdentityProjectionPrependsPatchesVerbatim) {
    auto p = init_params(config_for(FusionKind::Projection));
    auto& proj = std::get<ProjectionSlots<Tensor>>(p.weights.fusion);
    proj.weight = Tensor({32, 32});
    for (std::size_t i = 0; i < 32; ++i) proj.weight.at(i, i) = 1.0f;
    SplitMix64 rng(3);
    Graph<float> g;
    auto m = bind(g, p);
    const auto patches = random_tensor<float>({16, 32}, rng);
    const auto question = random_tensor<float>({5, 32}, rng);
    const auto fused = fuse(m, g.input(patches), g.input(question));
    EXPECT_EQ(fused.text_offset, 16u);
    ASSERT_EQ(fused.states.value().shape(), (Shape{21, 32}));
    for (std::size_t r = 0; r < 21; ++r)
        for (std::size_t j = 0; j < 32; ++j)
            EXPECT_EQ(fused.states.value().at(r, j), r < 16 ? patches.at(r, j) : question.at(r - 16, j));
}

TEST(FuseTest, ZeroAdapterOutputLeavesQuestionStates) {
    auto p = init_params(config_for(FusionKind::CrossAttention));
    std::get<AttentionSlots<Tensor>>(p.weights.fusion).output = Tensor({32, 32});
    SplitMix64 rng(4);
    Graph<float> g;
    auto m = bind(g, p);
    const auto question = random_tensor<float>({4, 32}, rng);
    const auto fused = fuse(m, g.input(random_tensor<float>({16, 32}, rng)), g.input(question));
    EXPECT_EQ(fused.text_offset, 0u);
    EXPECT_EQ(fused.states.value(), question);
}

TEST_P(BothFusionKinds, FuseGradientWrtPatchFeaturesMatchesFiniteDifferences) {
    const auto p = init_params(config_for(GetParam(), 8)).cast<double>();
    SplitMix64 rng(5);
    const auto patches = random_tensor({16, 32}, rng);
    const auto question = random_tensor({5, 32}, rng);
    const auto probe = random_tensor({1, 32}, rng);
    auto f = graph_map<double>([&](Graph<double>& g, BasicVar<double> x) {
        auto m = bind(g, p);
        const auto fused = fuse(m, x, g.input(question));
        const std::size_t rows = fused.states.value().rows();
        auto row_weights = g.input(BasicTensor<double>::filled({1, rows}, 1.0));
        return ops::matmul(ops::matmul(row_weights, fused.states), g.input(BasicTensor<double>({32, 1}, std::vector<double>(probe.data().begin(), probe.data().end()))));
    });
    EXPECT_LT(grad_check(f, patches, 1e-3), 1e-3);
}

TEST_P(BothFusionKinds, UniformHeadGivesLogVocabLoss) {
    auto p = init_params(config_for(GetParam()));
    p.weights.head_weight = Tensor(p.weights.head_weight.shape());
    p.weights.head_bias = Tensor(p.weights.head_bias.shape());
    SplitMix64 rng(6);
    const auto q = tokenize_question(p.config, "how many squares");
    const double loss = vlm_loss(p, random_image(p.config, rng), q, answer_from_text(p.config, "2"));
    EXPECT_NEAR(loss, std::log(static_cast<double>(p.config.vocab.size())), 1e-6);
}

TEST_P(BothFusionKinds, ImageGradientMatchesFiniteDifferences) {
    const auto p = init_params(config_for(GetParam(), 21)).cast<double>();
    SplitMix64 rng(7);
    const auto q = tokenize_question(p.config, "is there a triangle");
    auto f = vlm_loss_map(p, q, answer_from_text(p.config, "no"));
    const auto image = random_image<double>(p.config, rng, 0.05, 0.95);
    const auto pattern = f.relu_pattern(image);
    const auto report = grad_check_report(f, image, 1e-3, [&](const auto& plus, const auto& minus) {
        return f.relu_pattern(plus) != pattern || f.relu_pattern(minus) != pattern;
    });
    EXPECT_LT(report.max_relative_error, 1e-3) << "worst coordinate " << report.worst_coordinate;
    EXPECT_LT(report.skipped, image.numel() / 10);
}

TEST_P(BothFusionKinds, ImageReachesLossThroughFusion) {
    const auto p = init_params(config_for(GetParam(), 4));
    SplitMix64 rng(8);
    const auto q = tokenize_question(p.config, "what color is the square");
    const auto grad = vlm_loss_map(p, q, answer_from_text(p.config, "blue"))
                          .value_and_gradient(random_image(p.config, rng))
                          .gradient;
    EXPECT_TRUE(std::any_of(grad.data().begin(), grad.data().end(), [](float v) { return v != 0.0f; }));
}

TEST(CrossAttentionTest, ZeroAdapterOutputMakesImageIrrelevant) {
    auto p = init_params(config_for(FusionKind::CrossAttention, 9));
    std::get<AttentionSlots<Tensor>>(p.weights.fusion).output = Tensor({32, 32});
    SplitMix64 rng(9);
    const auto q = tokenize_question(p.config, "what color is the circle");
    const auto grad =
        vlm_loss_map(p, q, answer_from_text(p.config, "red")).value_and_gradient(random_image(p.config, rng)).gradient;
    for (float v : grad.data()) ASSERT_EQ(v, 0.0f);
}

TEST_P(BothFusionKinds, LossFallsWhenGoldLogitsRise) {
    auto p = init_params(config_for(GetParam(), 10));
    SplitMix64 rng(10);
    const auto image = random_image(p.config, rng);
    const auto q = tokenize_question(p.config, "how many circles");
    const auto answer = answer_from_text(p.config, "3");
    double previous = vlm_loss(p, image, q, answer);
    for (int step = 0; step < 5; ++step) {
        for (std::size_t id : answer.tokens) p.weights.head_bias[id] += 0.5f;
        const double now = vlm_loss(p, image, q, answer);
        EXPECT_LT(now, previous);
        previous = now;
    }
}

TEST_P(BothFusionKinds, LossRejectsBadAnswers) {
    const auto p = init_params(config_for(GetParam()));
    const Tensor image(p.config.image_shape());
    const auto q = tokenize_question(p.config, "how many circles");
    const std::size_t red = p.config.token_id("red");
    EXPECT_THROW(vlm_loss(p, image, q, make_answer(p.config, {red, red, red, red})), ContractViolation);
    AnswerText unknown{{999, p.config.eos_id()}, "?"};
    EXPECT_THROW(vlm_loss(p, image, q, unknown), ContractViolation);
    EXPECT_THROW(vlm_loss(p, image, Question{{999}}, answer_from_text(p.config, "red")), ContractViolation);
}

TEST_P(BothFusionKinds, ForcedHeadGeneratesRedThenStops) {
    auto p = init_params(config_for(GetParam()));
    auto& w = p.weights;
    const std::size_t d = p.config.d_model;
    w.token_embed = Tensor(w.token_embed.shape());
    w.answer_pos = Tensor(w.answer_pos.shape());
    w.answer_pos.at(1, 0) = 1.0f;  // marks the second decoding step
    w.dec_value = Tensor({d, d});
    w.dec_ffn.w2 = Tensor(w.dec_ffn.w2.shape());
    w.head_weight = Tensor(w.head_weight.shape());
    w.head_weight.at(0, p.config.eos_id()) = 3000.0f;
    w.head_bias = Tensor(w.head_bias.shape());
    w.head_bias[p.config.token_id("red")] = 1000.0f;
    SplitMix64 rng(11);
    const auto a = generate_answer(p, random_image(p.config, rng), tokenize_question(p.config, "what color is the circle"));
    EXPECT_EQ(a.text, "red");
    EXPECT_EQ(a.tokens, (std::vector<std::size_t>{p.config.token_id("red"), p.config.eos_id()}));
}

TEST_P(BothFusionKinds, TiesGoToLowestTokenIdAndLengthIsCapped) {
    auto p = init_params(config_for(GetParam()));
    p.weights.head_weight = Tensor(p.weights.head_weight.shape());
    p.weights.head_bias = Tensor(p.weights.head_bias.shape());
    const auto a = generate_answer(p, Tensor(p.config.image_shape()), tokenize_question(p.config, "is there a square"));
    ASSERT_EQ(a.tokens.size(), p.config.max_answer_len + 1);
    for (std::size_t i = 0; i < p.config.max_answer_len; ++i) EXPECT_EQ(a.tokens[i], 0u);
    EXPECT_EQ(a.text, "");
}

TEST_P(BothFusionKinds, GenerationIsPure) {
    const auto p = init_params(config_for(GetParam(), 12));
    SplitMix64 rng(12);
    for (int trial = 0; trial < 10; ++trial) {
        const auto image = random_image(p.config, rng);
        const auto q = tokenize_question(p.config, "what color is the triangle");
        EXPECT_EQ(generate_answer(p, image, q), generate_answer(p, image, q));
    }
}

INSTANTIATE_TEST_SUITE_P(ToyVlm, BothFusionKinds,
                         ::testing::Values(FusionKind::Projection, FusionKind::CrossAttention), kind_name);

TEST(TrainToyTest, ZeroEpochsReturnsInitialization) {
    const auto c = config_for(FusionKind::Projection, 13);
    std::vector<TrainingExample> data{{Tensor(c.image_shape()), tokenize_question(c, "is there a circle"),
                                       answer_from_text(c, "no")}};
    TrainOptions o;
    o.epochs = 0;
    const auto r = train_toy(data, c, o);
    EXPECT_TRUE(r.epoch_losses.empty());
    for_each_slot([](const std::string& name, const Tensor& a, const Tensor& b) { EXPECT_EQ(a, b) << name; },
                  r.params.weights, init_params(c).weights);
}

TEST(TrainToyTest, RejectsEmptyDataAndBadLearningRate) {
    const auto c = config_for(FusionKind::Projection);
    EXPECT_THROW(train_toy({}, c, TrainOptions{}), ContractViolation);
    std::vector<TrainingExample> data{{Tensor(c.image_shape()), tokenize_question(c, "is there a circle"),
                                       answer_from_text(c, "no")}};
    TrainOptions o;
    o.learning_rate = 0.0;
    EXPECT_THROW(train_toy(data, c, o), ContractViolation);
}

TEST(TrainToyTest, DivergenceAbortsWithEpochAndBatch) {
    const auto c = config_for(FusionKind::CrossAttention);
    SplitMix64 rng(14);
    std::vector<TrainingExample> data;
    for (int i = 0; i < 4; ++i) {
        data.push_back({random_image(c, rng), tokenize_question(c, "how many squares"), answer_from_text(c, "1")});
    }
    TrainOptions o;
    o.optimizer = OptimizerKind::Sgd;
    o.learning_rate = 1e30;
    o.epochs = 3;
    o.batch_size = 2;
    try {
        train_toy(data, c, o);
        FAIL() << "expected divergence";
    } catch (const TrainingError& e) {
        EXPECT_NE(std::string(e.what()).find("epoch"), std::string::npos);
        EXPECT_NE(std::string(e.what()).find("batch"), std::string::npos);
    }
}

TEST(TrainToyTest, DeterministicForFixedSeed) {
    const auto c = config_for(FusionKind::Projection, 15);
    SplitMix64 rng(15);
    std::vector<TrainingExample> data;
    const char* answers[] = {"red", "blue", "green"};
    for (int i = 0; i < 12; ++i) {
        data.push_back({random_image(c, rng), tokenize_question(c, "what color is the circle"),
                        answer_from_text(c, answers[i % 3])});
    }
    TrainOptions o;
    o.epochs = 2;
    o.batch_size = 4;
    const auto a = train_toy(data, c, o);
    const auto b = train_toy(data, c, o);
    EXPECT_EQ(a.epoch_losses, b.epoch_losses);
    for_each_slot([](const std::string& name, const Tensor& x, const Tensor& y) { EXPECT_EQ(x, y) << name; },
                  a.params.weights, b.params.weights);
}

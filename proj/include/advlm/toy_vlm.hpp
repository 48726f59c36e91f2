#pragma once

// Two small generative vision-language models that differ only in how image
// features reach the text stream:
//   Projection      patch features -> one linear layer -> prepended to the question tokens
//   CrossAttention  question tokens attend to patch features through a residual adapter
// Everything after fusion (language-model block, answer decoder, head) is shared.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>
#include <tuple>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "advlm/autodiff.hpp"
#include "advlm/grad_check.hpp"
#include "advlm/rng.hpp"
#include "advlm/tensor.hpp"

namespace advlm {

enum class FusionKind { Projection, CrossAttention };

inline std::string to_string(FusionKind kind) {
    return kind == FusionKind::Projection ? "projection" : "cross_attention";
}

inline FusionKind parse_fusion_kind(std::string_view text) {
    if (text == "projection") return FusionKind::Projection;
    if (text == "cross_attention") return FusionKind::CrossAttention;
    throw ContractViolation("unknown fusion kind '" + std::string(text) + "'");
}

inline constexpr std::string_view kPadToken = "<pad>";
inline constexpr std::string_view kEosToken = "<eos>";

inline bool is_reserved_token(std::string_view token) { return token == kPadToken || token == kEosToken; }

/// Vocabulary covering the synthetic shapes task with its default palettes.
inline std::vector<std::string> default_vocab() {
    return {"<pad>",  "<eos>",   "red",     "green",     "blue",     "yellow", "purple", "cyan",
            "white",  "orange",  "circle",  "square",    "triangle", "circles", "squares", "triangles",
            "0",      "1",       "2",       "3",         "yes",      "no",     "what",   "color",
            "is",     "the",     "how",     "many",      "there",    "a"};
}

struct ImageSize {
    std::size_t height = 32;
    std::size_t width = 32;
    std::size_t channels = 3;

    friend bool operator==(const ImageSize&, const ImageSize&) = default;
};

struct ToyVlmConfig {
    FusionKind fusion_kind = FusionKind::Projection;
    ImageSize image_size;
    std::size_t patch_size = 8;
    std::size_t d_model = 32;
    std::size_t d_ff = 64;
    std::vector<std::string> vocab = default_vocab();
    std::size_t max_answer_len = 3;
    std::uint64_t seed = 0;
    /// Fixed factor applied to flattened patch pixels before the patch embedding.
    double patch_input_scale = 0.3;

    friend bool operator==(const ToyVlmConfig&, const ToyVlmConfig&) = default;

    std::size_t grid_rows() const { return image_size.height / patch_size; }
    std::size_t grid_cols() const { return image_size.width / patch_size; }
    std::size_t n_patches() const { return grid_rows() * grid_cols(); }
    std::size_t patch_dim() const { return patch_size * patch_size * image_size.channels; }
    Shape image_shape() const { return {image_size.height, image_size.width, image_size.channels}; }

    std::size_t token_id(std::string_view token) const {
        const auto it = std::find(vocab.begin(), vocab.end(), token);
        if (it == vocab.end()) throw ContractViolation("token '" + std::string(token) + "' is not in the vocabulary");
        return static_cast<std::size_t>(it - vocab.begin());
    }
    bool has_token(std::string_view token) const { return std::find(vocab.begin(), vocab.end(), token) != vocab.end(); }
    std::size_t pad_id() const { return token_id(kPadToken); }
    std::size_t eos_id() const { return token_id(kEosToken); }

    void validate() const {
        if (patch_size == 0 || image_size.height == 0 || image_size.width == 0 || image_size.channels == 0 ||
            image_size.height % patch_size != 0 || image_size.width % patch_size != 0) {
            throw ContractViolation("image size " + std::to_string(image_size.height) + "x" +
                                    std::to_string(image_size.width) + " is not divisible by patch size " +
                                    std::to_string(patch_size));
        }
        if (d_model == 0 || d_ff == 0 || max_answer_len == 0) {
            throw ContractViolation("d_model, d_ff and max_answer_len must be positive");
        }
        if (!has_token(kPadToken) || !has_token(kEosToken)) {
            throw ContractViolation("vocabulary must contain <pad> and <eos>");
        }
        std::vector<std::string> sorted = vocab;
        std::sort(sorted.begin(), sorted.end());
        if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
            throw ContractViolation("vocabulary contains duplicate tokens");
        }
        if (!(patch_input_scale > 0.0) || !std::isfinite(patch_input_scale)) {
            throw ContractViolation("patch_input_scale must be positive");
        }
    }
};

inline void to_json(nlohmann::json& j, const ToyVlmConfig& c) {
    j = nlohmann::json{
        {"fusion_kind", to_string(c.fusion_kind)},
        {"image_size", {c.image_size.height, c.image_size.width, c.image_size.channels}},
        {"patch_size", c.patch_size},
        {"d_model", c.d_model},
        {"d_ff", c.d_ff},
        {"vocab", c.vocab},
        {"max_answer_len", c.max_answer_len},
        {"seed", c.seed},
        {"patch_input_scale", c.patch_input_scale},
    };
}

/// Missing keys keep their defaults, so run configs only spell out what differs.
inline void from_json(const nlohmann::json& j, ToyVlmConfig& c) {
    if (j.contains("fusion_kind")) c.fusion_kind = parse_fusion_kind(j.at("fusion_kind").get<std::string>());
    if (j.contains("image_size")) {
        const auto dims = j.at("image_size").get<std::vector<std::size_t>>();
        if (dims.size() != 3) throw ContractViolation("image_size must be [height, width, channels]");
        c.image_size = {dims[0], dims[1], dims[2]};
    }
    if (j.contains("patch_size")) c.patch_size = j.at("patch_size").get<std::size_t>();
    if (j.contains("d_model")) c.d_model = j.at("d_model").get<std::size_t>();
    if (j.contains("d_ff")) c.d_ff = j.at("d_ff").get<std::size_t>();
    if (j.contains("vocab")) c.vocab = j.at("vocab").get<std::vector<std::string>>();
    if (j.contains("max_answer_len")) c.max_answer_len = j.at("max_answer_len").get<std::size_t>();
    if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("patch_input_scale")) c.patch_input_scale = j.at("patch_input_scale").get<double>();
}

struct Question {
    std::vector<std::size_t> ids;
};

/// Generated or gold answer. `tokens` always ends with <eos>; `text` is the
/// space-join of the non-reserved tokens.
struct AnswerText {
    std::vector<std::size_t> tokens;
    std::string text;

    friend bool operator==(const AnswerText&, const AnswerText&) = default;
};

namespace detail {

inline std::vector<std::string> split_words(std::string_view text) {
    std::vector<std::string> words;
    std::string current;
    for (char ch : text) {
        const auto c = static_cast<unsigned char>(ch);
        if (std::isspace(c)) {
            if (!current.empty()) words.push_back(std::move(current));
            current.clear();
        } else if (ch == '?' || ch == '.' || ch == ',' || ch == '!') {
            continue;
        } else {
            current.push_back(static_cast<char>(std::tolower(c)));
        }
    }
    if (!current.empty()) words.push_back(std::move(current));
    return words;
}

}  // namespace detail

/// Whitespace tokenisation with lowercasing and trailing punctuation dropped.
inline Question tokenize_question(const ToyVlmConfig& config, std::string_view text) {
    Question q;
    for (const auto& word : detail::split_words(text)) q.ids.push_back(config.token_id(word));
    if (q.ids.empty()) throw ContractViolation("question '" + std::string(text) + "' has no tokens");
    return q;
}

inline AnswerText make_answer(const ToyVlmConfig& config, std::vector<std::size_t> tokens) {
    const std::size_t eos = config.eos_id();
    if (tokens.empty() || tokens.back() != eos) tokens.push_back(eos);
    AnswerText answer;
    for (std::size_t i = 0; i + 1 < tokens.size(); ++i) {
        if (tokens[i] >= config.vocab.size()) {
            throw ContractViolation("answer token id " + std::to_string(tokens[i]) + " outside the vocabulary");
        }
        const auto& word = config.vocab[tokens[i]];
        if (is_reserved_token(word)) continue;
        if (!answer.text.empty()) answer.text += ' ';
        answer.text += word;
    }
    answer.tokens = std::move(tokens);
    return answer;
}

inline AnswerText answer_from_text(const ToyVlmConfig& config, std::string_view text) {
    std::vector<std::size_t> ids;
    for (const auto& word : detail::split_words(text)) ids.push_back(config.token_id(word));
    return make_answer(config, std::move(ids));
}

// ---------------------------------------------------------------------------
// Weight layout. One template describes the layout for tensors, graph handles,
// shapes and optimizer state alike.

template <class S>
struct AttentionSlots {
    S query, key, value, output;
};

template <class S>
struct ProjectionSlots {
    S weight, bias;
};

template <class S>
struct FeedForwardSlots {
    S w1, b1, w2;
};

template <class S>
struct VlmWeights {
    S patch_weight, patch_bias, token_embed, answer_pos;
    std::variant<ProjectionSlots<S>, AttentionSlots<S>> fusion;
    AttentionSlots<S> lm_attn1;
    FeedForwardSlots<S> lm_ffn;
    AttentionSlots<S> lm_attn2;
    S dec_query, dec_key, dec_value;
    FeedForwardSlots<S> dec_ffn;
    S head_weight, head_bias;

    FusionKind fusion_kind() const {
        return fusion.index() == 0 ? FusionKind::Projection : FusionKind::CrossAttention;
    }
};

namespace detail {

template <class F, class... A>
void attention_slots(F& f, const std::string& prefix, A&... a) {
    f(prefix + ".query", a.query...);
    f(prefix + ".key", a.key...);
    f(prefix + ".value", a.value...);
    f(prefix + ".output", a.output...);
}

template <class F, class... A>
void feed_forward_slots(F& f, const std::string& prefix, A&... a) {
    f(prefix + ".w1", a.w1...);
    f(prefix + ".b1", a.b1...);
    f(prefix + ".w2", a.w2...);
}

}  // namespace detail

/// Calls f(name, slot_of_w0, slot_of_w1, ...) for every slot in canonical
/// (checkpoint) order. All weight sets must use the same fusion kind.
template <class F, class W0, class... W>
void for_each_slot(F&& f, W0&& w0, W&&... w) {
    if (((w.fusion.index() != w0.fusion.index()) || ...)) {
        throw ContractViolation("weight sets disagree on fusion kind");
    }
    f(std::string("patch_embed.weight"), w0.patch_weight, w.patch_weight...);
    f(std::string("patch_embed.bias"), w0.patch_bias, w.patch_bias...);
    f(std::string("token_embed"), w0.token_embed, w.token_embed...);
    f(std::string("answer_pos"), w0.answer_pos, w.answer_pos...);
    if (w0.fusion.index() == 0) {
        [&](auto&... p) {
            f(std::string("fusion.projection.weight"), p.weight...);
            f(std::string("fusion.projection.bias"), p.bias...);
        }(std::get<0>(w0.fusion), std::get<0>(w.fusion)...);
    } else {
        [&](auto&... a) { detail::attention_slots(f, "fusion.adapter", a...); }(std::get<1>(w0.fusion),
                                                                              std::get<1>(w.fusion)...);
    }
    detail::attention_slots(f, "lm.attn1", w0.lm_attn1, w.lm_attn1...);
    detail::feed_forward_slots(f, "lm.ffn", w0.lm_ffn, w.lm_ffn...);
    detail::attention_slots(f, "lm.attn2", w0.lm_attn2, w.lm_attn2...);
    f(std::string("decoder.query"), w0.dec_query, w.dec_query...);
    f(std::string("decoder.key"), w0.dec_key, w.dec_key...);
    f(std::string("decoder.value"), w0.dec_value, w.dec_value...);
    detail::feed_forward_slots(f, "decoder.ffn", w0.dec_ffn, w.dec_ffn...);
    f(std::string("head.weight"), w0.head_weight, w.head_weight...);
    f(std::string("head.bias"), w0.head_bias, w.head_bias...);
}

template <class S>
VlmWeights<S> empty_weights(FusionKind kind) {
    VlmWeights<S> w;
    if (kind == FusionKind::Projection) {
        w.fusion = ProjectionSlots<S>{};
    } else {
        w.fusion = AttentionSlots<S>{};
    }
    return w;
}

/// Builds a weight set of slot type To by applying fn(name, from_slot) to every slot.
template <class To, class From, class Fn>
VlmWeights<To> map_weights(const VlmWeights<From>& src, Fn&& fn) {
    auto dst = empty_weights<To>(src.fusion_kind());
    for_each_slot([&](const std::string& name, const From& s, To& d) { d = fn(name, s); }, src, dst);
    return dst;
}

inline VlmWeights<Shape> weight_shapes(const ToyVlmConfig& c) {
    const std::size_t d = c.d_model, ff = c.d_ff, v = c.vocab.size();
    auto w = empty_weights<Shape>(c.fusion_kind);
    w.patch_weight = {c.patch_dim(), d};
    w.patch_bias = {d};
    w.token_embed = {v, d};
    w.answer_pos = {c.max_answer_len + 1, d};
    if (auto* p = std::get_if<ProjectionSlots<Shape>>(&w.fusion)) {
        *p = {{d, d}, {d}};
    } else {
        std::get<AttentionSlots<Shape>>(w.fusion) = {{d, d}, {d, d}, {d, d}, {d, d}};
    }
    w.lm_attn1 = {{d, d}, {d, d}, {d, d}, {d, d}};
    w.lm_ffn = {{d, ff}, {ff}, {ff, d}};
    w.lm_attn2 = {{d, d}, {d, d}, {d, d}, {d, d}};
    w.dec_query = {d, d};
    w.dec_key = {d, d};
    w.dec_value = {d, d};
    w.dec_ffn = {{d, ff}, {ff}, {ff, d}};
    w.head_weight = {d, v};
    w.head_bias = {v};
    return w;
}

/// All learnable weights of one toy model, tagged by its config.
template <class T>
struct ToyVlmParams {
    ToyVlmConfig config;
    VlmWeights<BasicTensor<T>> weights;

    template <class U>
    ToyVlmParams<U> cast() const {
        return {config, map_weights<BasicTensor<U>>(
                            weights, [](const std::string&, const BasicTensor<T>& t) { return t.template cast<U>(); })};
    }

    void validate() const {
        config.validate();
        if (weights.fusion_kind() != config.fusion_kind) {
            throw ContractViolation("weights do not match fusion kind " + to_string(config.fusion_kind));
        }
        const auto shapes = weight_shapes(config);
        for_each_slot(
            [](const std::string& name, const BasicTensor<T>& t, const Shape& expected) {
                if (t.shape() != expected) {
                    throw ContractViolation("weight " + name + " has shape " + shape_string(t.shape()) +
                                            ", expected " + shape_string(expected));
                }
                if (!t.all_finite()) throw ContractViolation("weight " + name + " is not finite");
            },
            weights, shapes);
    }
};

/// Uniform(-s, s) with s = sqrt(6 / (fan_in + fan_out)) for matrices, zeros for
/// bias vectors; one generator stream seeded from config.seed, canonical slot order.
inline ToyVlmParams<float> init_params(const ToyVlmConfig& config) {
    config.validate();
    SplitMix64 rng(config.seed);
    auto weights = map_weights<Tensor>(weight_shapes(config), [&](const std::string&, const Shape& shape) {
        Tensor t(shape);
        if (shape.size() == 2) {
            const double s = std::sqrt(6.0 / static_cast<double>(shape[0] + shape[1]));
            for (float& v : t.data()) v = static_cast<float>(rng.uniform(-s, s));
        }
        return t;
    });
    return {config, std::move(weights)};
}

// ---------------------------------------------------------------------------
// Forward pass

template <class T>
VlmWeights<BasicVar<T>> bind_weights(Graph<T>& g, const VlmWeights<BasicTensor<T>>& w, bool trainable) {
    return map_weights<BasicVar<T>>(
        w, [&](const std::string&, const BasicTensor<T>& t) { return g.parameter(t, trainable); });
}

template <class T>
struct BoundModel {
    const ToyVlmConfig& config;
    VlmWeights<BasicVar<T>> w;
};

template <class T>
BoundModel<T> bind(Graph<T>& g, const ToyVlmParams<T>& params, bool trainable = false) {
    return {params.config, bind_weights(g, params.weights, trainable)};
}

namespace detail {

template <class T>
BasicVar<T> self_attention_block(BasicVar<T> states, const AttentionSlots<BasicVar<T>>& a) {
    using namespace ops;
    auto mixed = attention(matmul(states, a.query), matmul(states, a.key), matmul(states, a.value));
    return add(states, matmul(mixed, a.output));
}

template <class T>
BasicVar<T> feed_forward_block(BasicVar<T> states, const FeedForwardSlots<BasicVar<T>>& f) {
    using namespace ops;
    return add(states, matmul(relu(linear(states, f.w1, f.b1)), f.w2));
}

template <class T>
void check_image(const ToyVlmConfig& config, const BasicTensor<T>& image) {
    if (image.shape() != config.image_shape()) {
        throw ContractViolation("image shape " + shape_string(image.shape()) + " does not match model input " +
                                shape_string(config.image_shape()));
    }
}

}  // namespace detail

/// Non-overlapping patches, each flattened, scaled and linearly embedded:
/// [n_patches x d_model].
template <class T>
BasicVar<T> encode_image(const BoundModel<T>& m, BasicVar<T> image) {
    detail::check_image(m.config, image.value());
    auto patches = ops::patchify(image, m.config.patch_size);
    patches = ops::scale(patches, static_cast<T>(m.config.patch_input_scale));
    return ops::linear(patches, m.w.patch_weight, m.w.patch_bias);
}

template <class T>
BasicVar<T> question_states(const BoundModel<T>& m, const Question& q) {
    return ops::embedding(m.w.token_embed, std::span<const std::size_t>(q.ids));
}

template <class T>
struct FusedStates {
    BasicVar<T> states;
    /// Index of the first text row in `states`.
    std::size_t text_offset = 0;
};

template <class T>
FusedStates<T> fuse(const BoundModel<T>& m, BasicVar<T> patch_features, BasicVar<T> question) {
    using namespace ops;
    if (const auto* p = std::get_if<ProjectionSlots<BasicVar<T>>>(&m.w.fusion)) {
        auto projected = linear(patch_features, p->weight, p->bias);
        return {concat_rows(projected, question), patch_features.value().rows()};
    }
    const auto& a = std::get<AttentionSlots<BasicVar<T>>>(m.w.fusion);
    auto attended = attention(matmul(question, a.query), matmul(patch_features, a.key),
                              matmul(patch_features, a.value));
    return {add(question, matmul(attended, a.output)), 0};
}

/// Shared language-model block over the fused sequence; returns the text rows.
template <class T>
BasicVar<T> language_model(const BoundModel<T>& m, const FusedStates<T>& fused) {
    auto s = detail::self_attention_block(fused.states, m.w.lm_attn1);
    s = detail::feed_forward_block(s, m.w.lm_ffn);
    s = detail::self_attention_block(s, m.w.lm_attn2);
    if (fused.text_offset == 0) return s;
    return ops::slice_rows(s, fused.text_offset, s.value().rows());
}

template <class T>
struct Context {
    BasicVar<T> text;
    BasicVar<T> question;
};

template <class T>
Context<T> build_context(const BoundModel<T>& m, BasicVar<T> image, const Question& q) {
    auto patches = encode_image(m, image);
    auto question = question_states(m, q);
    return {language_model(m, fuse(m, patches, question)), question};
}

/// Logits [prev.size() x vocab]; row t predicts answer token t given token t-1
/// (or <pad> for t = 0), its position and the question mean.
template <class T>
BasicVar<T> answer_logits(const BoundModel<T>& m, const Context<T>& ctx, std::span<const std::size_t> prev) {
    using namespace ops;
    auto& g = *ctx.text.graph;
    const std::size_t steps = prev.size();
    if (steps == 0 || steps > m.config.max_answer_len + 1) {
        throw ContractViolation("answer length " + std::to_string(steps) + " outside [1, max_answer_len + 1]");
    }
    const std::size_t nq = ctx.question.value().rows();
    auto averaging = g.input(BasicTensor<T>::filled({steps, nq}, T{1} / static_cast<T>(nq)));
    auto u = add(add(embedding(m.w.token_embed, prev), slice_rows(m.w.answer_pos, 0, steps)),
                 matmul(averaging, ctx.question));
    auto read = attention(matmul(u, m.w.dec_query), matmul(ctx.text, m.w.dec_key), matmul(ctx.text, m.w.dec_value));
    auto h = advlm::detail::feed_forward_block(add(u, read), m.w.dec_ffn);
    return linear(h, m.w.head_weight, m.w.head_bias);
}

template <class T>
std::vector<std::size_t> teacher_inputs(const ToyVlmConfig& config, const AnswerText& answer) {
    if (answer.tokens.empty() || answer.tokens.back() != config.eos_id()) {
        throw ContractViolation("answer tokens must end with <eos>");
    }
    if (answer.tokens.size() > config.max_answer_len + 1) {
        throw ContractViolation("answer longer than max_answer_len");
    }
    std::vector<std::size_t> prev{config.pad_id()};
    prev.insert(prev.end(), answer.tokens.begin(), answer.tokens.end() - 1);
    return prev;
}

/// Teacher-forced mean cross-entropy of `answer` (including <eos>).
template <class T>
BasicVar<T> vlm_loss_var(const BoundModel<T>& m, BasicVar<T> image, const Question& q, const AnswerText& answer) {
    for (std::size_t id : answer.tokens) {
        if (id >= m.config.vocab.size()) throw ContractViolation("answer token id " + std::to_string(id) + " unknown");
    }
    for (std::size_t id : q.ids) {
        if (id >= m.config.vocab.size()) throw ContractViolation("question token id " + std::to_string(id) + " unknown");
    }
    const auto prev = teacher_inputs<T>(m.config, answer);
    auto logits = answer_logits(m, build_context(m, image, q), prev);
    return ops::cross_entropy(logits, std::span<const std::size_t>(answer.tokens));
}

template <class T>
double vlm_loss(const ToyVlmParams<T>& params, const BasicTensor<T>& image, const Question& q,
                const AnswerText& answer) {
    Graph<T> g;
    auto m = bind(g, params);
    return static_cast<double>(vlm_loss_var(m, g.input(image), q, answer).value().item());
}

/// vlm_loss as a function of the image, for attacks and gradient checks.
template <class T>
auto vlm_loss_map(const ToyVlmParams<T>& params, Question q, AnswerText answer) {
    return graph_map<T>([&params, q = std::move(q), answer = std::move(answer)](Graph<T>& g, BasicVar<T> image) {
        return vlm_loss_var(bind(g, params), image, q, answer);
    });
}

/// Margin of the first answer token: gold logit minus best rival logit.
/// Non-positive iff the first generated token differs from `answer`'s.
template <class T>
auto first_token_margin_map(const ToyVlmParams<T>& params, Question q, AnswerText answer) {
    return graph_map<T>([&params, q = std::move(q), answer = std::move(answer)](Graph<T>& g, BasicVar<T> image) {
        auto m = bind(g, params);
        const std::size_t pad = params.config.pad_id();
        auto logits = answer_logits(m, build_context(m, image, q), std::span<const std::size_t>(&pad, 1));
        return ops::logit_margin(logits, 0, answer.tokens.front());
    });
}

/// Greedy decoding; ties go to the lowest token id. Stops at <eos> or after
/// max_answer_len tokens.
template <class T>
AnswerText generate_answer(const ToyVlmParams<T>& params, const BasicTensor<T>& image, const Question& q) {
    Graph<T> g;
    auto m = bind(g, params);
    const auto ctx = build_context(m, g.input(image), q);
    const std::size_t eos = params.config.eos_id();
    std::vector<std::size_t> prev{params.config.pad_id()};
    std::vector<std::size_t> out;
    while (out.size() < params.config.max_answer_len) {
        const auto& logits = answer_logits(m, ctx, prev).value();
        const std::size_t v = logits.cols();
        const T* row = logits.data().data() + (logits.rows() - 1) * v;
        std::size_t best = 0;
        for (std::size_t j = 1; j < v; ++j)
            if (row[j] > row[best]) best = j;
        out.push_back(best);
        if (best == eos) break;
        prev.push_back(best);
    }
    return make_answer(params.config, std::move(out));
}

}  // namespace advlm

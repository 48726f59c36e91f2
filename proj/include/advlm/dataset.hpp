#pragma once

// Synthetic shapes VQA data and the JSON-lines manifest format shared with
// user-supplied datasets.

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "advlm/ppm.hpp"
#include "advlm/rng.hpp"
#include "advlm/toy_vlm.hpp"
#include "advlm/train.hpp"

namespace advlm {

struct ColorSpec {
    std::string name;
    std::array<std::uint8_t, 3> rgb{};

    friend bool operator==(const ColorSpec&, const ColorSpec&) = default;
};

enum class QuestionKind { Color, Count, Exists };

inline std::string to_string(QuestionKind kind) {
    switch (kind) {
        case QuestionKind::Color: return "color";
        case QuestionKind::Count: return "count";
        case QuestionKind::Exists: return "exists";
    }
    return "?";
}

inline QuestionKind parse_question_kind(std::string_view text) {
    if (text == "color") return QuestionKind::Color;
    if (text == "count") return QuestionKind::Count;
    if (text == "exists") return QuestionKind::Exists;
    throw ContractViolation("unknown question kind '" + std::string(text) + "'");
}

inline std::vector<ColorSpec> default_colors() {
    return {{"red", {255, 0, 0}},     {"green", {0, 255, 0}},  {"blue", {0, 0, 255}},    {"yellow", {255, 255, 0}},
            {"purple", {255, 0, 255}}, {"cyan", {0, 255, 255}}, {"white", {255, 255, 255}}, {"orange", {255, 128, 0}}};
}

/// Shapes the renderer knows how to draw.
inline const std::vector<std::string>& known_shapes() {
    static const std::vector<std::string> shapes{"circle", "square", "triangle"};
    return shapes;
}

struct SyntheticSpec {
    std::size_t n_samples = 5000;
    ImageSize image_size;
    /// Side of one grid cell; every object fills one cell.
    std::size_t cell_size = 8;
    std::vector<std::string> shapes = known_shapes();
    std::vector<ColorSpec> colors = default_colors();
    std::vector<QuestionKind> question_kinds{QuestionKind::Color, QuestionKind::Count, QuestionKind::Exists};
    std::size_t max_count = 3;
    std::size_t max_distractors = 2;
    std::uint64_t seed = 0;
    std::string id_prefix = "s";

    std::size_t n_cells() const { return (image_size.height / cell_size) * (image_size.width / cell_size); }

    /// Every word a generated question or answer can contain.
    std::vector<std::string> words() const {
        std::vector<std::string> out{"what", "color", "is", "the", "how", "many", "there", "a", "yes", "no"};
        for (const auto& s : shapes) {
            out.push_back(s);
            out.push_back(s + "s");
        }
        for (const auto& c : colors) out.push_back(c.name);
        for (std::size_t k = 0; k <= max_count; ++k) out.push_back(std::to_string(k));
        return out;
    }

    void validate() const {
        if (shapes.empty() || colors.empty() || question_kinds.empty()) {
            throw ContractViolation("synthetic palettes and question kinds must be non-empty");
        }
        for (const auto& s : shapes) {
            if (std::find(known_shapes().begin(), known_shapes().end(), s) == known_shapes().end()) {
                throw ContractViolation("cannot render shape '" + s + "'");
            }
        }
        if (image_size.channels != 3) throw ContractViolation("synthetic images are RGB");
        if (cell_size == 0 || image_size.height % cell_size != 0 || image_size.width % cell_size != 0) {
            throw ContractViolation("image size must be a multiple of cell_size");
        }
        if (n_cells() < std::max<std::size_t>(max_count, 2) + max_distractors) {
            throw ContractViolation("image grid has too few cells for max_count plus distractors");
        }
    }

    /// Every generated question and answer word must be known to the model.
    void validate_against(const ToyVlmConfig& config) const {
        validate();
        for (const auto& w : words()) {
            if (!config.has_token(w)) throw ContractViolation("synthetic word '" + w + "' missing from model vocab");
        }
        if (config.image_size != image_size) throw ContractViolation("synthetic image size differs from model input");
    }
};

inline void to_json(nlohmann::json& j, const SyntheticSpec& s) {
    nlohmann::json colors = nlohmann::json::array();
    for (const auto& c : s.colors) colors.push_back({{"name", c.name}, {"rgb", c.rgb}});
    std::vector<std::string> kinds;
    for (auto k : s.question_kinds) kinds.push_back(to_string(k));
    j = {{"n_samples", s.n_samples},
         {"image_size", {s.image_size.height, s.image_size.width, s.image_size.channels}},
         {"cell_size", s.cell_size},
         {"shapes", s.shapes},
         {"colors", colors},
         {"question_kinds", kinds},
         {"max_count", s.max_count},
         {"max_distractors", s.max_distractors},
         {"seed", s.seed},
         {"id_prefix", s.id_prefix}};
}

inline void from_json(const nlohmann::json& j, SyntheticSpec& s) {
    if (j.contains("n_samples")) s.n_samples = j.at("n_samples").get<std::size_t>();
    if (j.contains("image_size")) {
        const auto d = j.at("image_size").get<std::vector<std::size_t>>();
        if (d.size() != 3) throw ContractViolation("image_size must be [height, width, channels]");
        s.image_size = {d[0], d[1], d[2]};
    }
    if (j.contains("cell_size")) s.cell_size = j.at("cell_size").get<std::size_t>();
    if (j.contains("shapes")) s.shapes = j.at("shapes").get<std::vector<std::string>>();
    if (j.contains("colors")) {
        s.colors.clear();
        for (const auto& c : j.at("colors")) {
            s.colors.push_back({c.at("name").get<std::string>(), c.at("rgb").get<std::array<std::uint8_t, 3>>()});
        }
    }
    if (j.contains("question_kinds")) {
        s.question_kinds.clear();
        for (const auto& k : j.at("question_kinds")) s.question_kinds.push_back(parse_question_kind(k.get<std::string>()));
    }
    if (j.contains("max_count")) s.max_count = j.at("max_count").get<std::size_t>();
    if (j.contains("max_distractors")) s.max_distractors = j.at("max_distractors").get<std::size_t>();
    if (j.contains("seed")) s.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("id_prefix")) s.id_prefix = j.at("id_prefix").get<std::string>();
}

/// Coverage mask of a shape inside a `cell` x `cell` square, row-major.
inline std::vector<bool> shape_mask(std::string_view shape, std::size_t cell) {
    std::vector<bool> m(cell * cell, false);
    const double unit = 8.0 / static_cast<double>(cell);
    for (std::size_t y = 0; y < cell; ++y) {
        for (std::size_t x = 0; x < cell; ++x) {
            const double u = (static_cast<double>(x) + 0.5) * unit;
            const double v = (static_cast<double>(y) + 0.5) * unit;
            bool on = false;
            if (shape == "square") {
                on = u >= 1.5 && u <= 6.5 && v >= 1.5 && v <= 6.5;
            } else if (shape == "circle") {
                on = (u - 4.0) * (u - 4.0) + (v - 4.0) * (v - 4.0) <= 3.2 * 3.2;
            } else if (shape == "triangle") {
                on = v >= 1.5 && v <= 6.5 && std::abs(u - 4.0) <= (v - 1.0) * 0.6 + 0.3;
            } else {
                throw ContractViolation("cannot render shape '" + std::string(shape) + "'");
            }
            m[y * cell + x] = on;
        }
    }
    return m;
}

struct SceneObject {
    std::size_t cell = 0;
    std::string shape;
    std::size_t color = 0;
};

struct SyntheticSample {
    std::string sample_id;
    std::string question;
    std::string answer;
    std::vector<SceneObject> objects;
};

inline Tensor render_scene(const SyntheticSpec& spec, const std::vector<SceneObject>& objects) {
    const std::size_t h = spec.image_size.height, w = spec.image_size.width, c = spec.cell_size;
    const std::size_t grid_w = w / c;
    Tensor image({h, w, 3});
    for (const auto& obj : objects) {
        const auto mask = shape_mask(obj.shape, c);
        const auto& rgb = spec.colors.at(obj.color).rgb;
        const std::size_t y0 = (obj.cell / grid_w) * c, x0 = (obj.cell % grid_w) * c;
        for (std::size_t y = 0; y < c; ++y)
            for (std::size_t x = 0; x < c; ++x)
                if (mask[y * c + x])
                    for (std::size_t ch = 0; ch < 3; ++ch)
                        image[((y0 + y) * w + x0 + x) * 3 + ch] = static_cast<float>(rgb[ch]) / 255.0f;
    }
    return image;
}

inline std::string sample_id_for(const SyntheticSpec& spec, std::size_t index) {
    std::string digits = std::to_string(index);
    const std::size_t width = std::max<std::size_t>(5, std::to_string(spec.n_samples).size());
    if (digits.size() < width) digits.insert(0, width - digits.size(), '0');
    return spec.id_prefix + digits;
}

/// Scene and question for one sample, drawn from a stream keyed by its id.
inline SyntheticSample draw_sample(const SyntheticSpec& spec, std::size_t index) {
    SyntheticSample s;
    s.sample_id = sample_id_for(spec, index);
    SplitMix64 rng(derive_seed(spec.seed, s.sample_id));
    const auto kind = spec.question_kinds[rng.below(spec.question_kinds.size())];
    const auto& shape = spec.shapes[rng.below(spec.shapes.size())];
    std::vector<std::string> others;
    for (const auto& o : spec.shapes)
        if (o != shape) others.push_back(o);

    std::vector<std::size_t> cells(spec.n_cells());
    std::iota(cells.begin(), cells.end(), std::size_t{0});
    const std::size_t slots = std::max<std::size_t>(spec.max_count, 2) + spec.max_distractors;
    for (std::size_t i = 0; i < slots; ++i) std::swap(cells[i], cells[i + rng.below(cells.size() - i)]);
    const std::size_t distractors = others.empty() ? 0 : rng.below(spec.max_distractors + 1);
    const auto pick_color = [&] { return static_cast<std::size_t>(rng.below(spec.colors.size())); };

    std::size_t targets = 0;
    switch (kind) {
        case QuestionKind::Color: {
            const std::size_t color = pick_color();
            s.objects.push_back({cells[0], shape, color});
            s.question = "what color is the " + shape + "?";
            s.answer = spec.colors[color].name;
            break;
        }
        case QuestionKind::Count:
            targets = rng.below(spec.max_count + 1);
            for (std::size_t i = 0; i < targets; ++i) s.objects.push_back({cells[i], shape, pick_color()});
            s.question = "how many " + shape + "s?";
            s.answer = std::to_string(targets);
            break;
        case QuestionKind::Exists: {
            static constexpr std::array<std::size_t, 4> kPresence{0, 1, 1, 2};
            targets = std::min(kPresence[rng.below(kPresence.size())], std::max<std::size_t>(spec.max_count, 2));
            for (std::size_t i = 0; i < targets; ++i) s.objects.push_back({cells[i], shape, pick_color()});
            s.question = "is there a " + shape + "?";
            s.answer = targets > 0 ? "yes" : "no";
            break;
        }
    }
    const std::size_t base = std::max<std::size_t>(spec.max_count, 2);
    for (std::size_t j = 0; j < distractors; ++j) {
        const auto& other = others[rng.below(others.size())];
        s.objects.push_back({cells[base + j], other, pick_color()});
    }
    return s;
}

/// Writes manifest.jsonl and images/<id>.ppm under `dir`; returns the manifest path.
/// With n_samples = 0 the manifest is empty and no image directory is created.
inline std::filesystem::path gen_dataset(const SyntheticSpec& spec, const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    spec.validate();
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError(dir, "cannot create directory: " + ec.message());
    if (spec.n_samples > 0) {
        fs::create_directories(dir / "images", ec);
        if (ec) throw IoError(dir / "images", "cannot create directory: " + ec.message());
    }
    const fs::path manifest = dir / "manifest.jsonl";
    std::ofstream out(manifest, std::ios::binary);
    if (!out) throw IoError(manifest, "cannot open for writing");
    for (std::size_t i = 0; i < spec.n_samples; ++i) {
        const auto s = draw_sample(spec, i);
        const std::string rel = "images/" + s.sample_id + ".ppm";
        write_ppm(dir / rel, render_scene(spec, s.objects));
        nlohmann::ordered_json line{
            {"sample_id", s.sample_id}, {"image", rel}, {"question", s.question}, {"answers", {s.answer}}};
        out << line.dump() << '\n';
    }
    if (!out) throw IoError(manifest, "write failed");
    return manifest;
}

struct ManifestEntry {
    std::string sample_id;
    std::filesystem::path image;
    std::string question;
    std::vector<std::string> answers;
};

struct VqaSample {
    std::string sample_id;
    std::filesystem::path image_path;
    Tensor image;
    std::string question_text;
    Question question;
    std::vector<std::string> ground_truth_answers;
};

/// Parses a manifest; image paths are resolved relative to its directory.
inline std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError(path, "cannot open manifest");
    std::vector<ManifestEntry> entries;
    std::set<std::string> seen;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        ManifestEntry e;
        try {
            const auto j = nlohmann::json::parse(line);
            e.sample_id = j.at("sample_id").get<std::string>();
            e.image = path.parent_path() / j.at("image").get<std::string>();
            e.question = j.at("question").get<std::string>();
            e.answers = j.at("answers").get<std::vector<std::string>>();
        } catch (const nlohmann::json::exception& ex) {
            throw ContractViolation(path.string() + ":" + std::to_string(line_no) + ": " + ex.what());
        }
        if (e.answers.empty()) {
            throw ContractViolation(path.string() + ":" + std::to_string(line_no) + ": empty answer list");
        }
        if (!seen.insert(e.sample_id).second) {
            throw ContractViolation(path.string() + ": duplicate sample_id '" + e.sample_id + "'");
        }
        entries.push_back(std::move(e));
    }
    return entries;
}

inline VqaSample load_sample(const ManifestEntry& e, const ToyVlmConfig& config) {
    VqaSample s{e.sample_id, e.image, read_ppm(e.image), e.question, tokenize_question(config, e.question), e.answers};
    if (s.image.shape() != config.image_shape()) {
        throw ContractViolation("image " + e.image.string() + " has shape " + shape_string(s.image.shape()) +
                                ", model expects " + shape_string(config.image_shape()));
    }
    return s;
}

inline std::vector<VqaSample> load_dataset(const std::filesystem::path& manifest, const ToyVlmConfig& config) {
    std::vector<VqaSample> out;
    for (const auto& e : read_manifest(manifest)) out.push_back(load_sample(e, config));
    return out;
}

/// Training pairs use the first ground-truth answer.
inline std::vector<TrainingExample> training_examples(const std::vector<VqaSample>& samples,
                                                      const ToyVlmConfig& config) {
    std::vector<TrainingExample> out;
    out.reserve(samples.size());
    for (const auto& s : samples) {
        out.push_back({s.image, s.question, answer_from_text(config, s.ground_truth_answers.front())});
    }
    return out;
}

}  // namespace advlm

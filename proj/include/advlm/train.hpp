#pragma once

#include <cmath>
#include <cstdio>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "advlm/rng.hpp"
#include "advlm/toy_vlm.hpp"

namespace advlm {

struct TrainingExample {
    Tensor image;
    Question question;
    AnswerText answer;
};

enum class OptimizerKind { Sgd, Adam };

inline std::string to_string(OptimizerKind kind) { return kind == OptimizerKind::Sgd ? "sgd" : "adam"; }

inline OptimizerKind parse_optimizer(std::string_view text) {
    if (text == "sgd") return OptimizerKind::Sgd;
    if (text == "adam") return OptimizerKind::Adam;
    throw ContractViolation("unknown optimizer '" + std::string(text) + "'");
}

struct TrainOptions {
    std::size_t epochs = 30;
    double learning_rate = 0.003;
    std::size_t batch_size = 16;
    OptimizerKind optimizer = OptimizerKind::Adam;
    /// Scale the learning rate by (1 - epoch / epochs).
    bool linear_decay = true;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_epsilon = 1e-8;
};

struct TrainResult {
    ToyVlmParams<float> params;
    /// Mean teacher-forced loss over each epoch, measured before each update.
    std::vector<double> epoch_losses;
};

class TrainingError : public std::runtime_error {
public:
    TrainingError(std::size_t epoch, std::size_t batch, const std::string& what)
        : std::runtime_error("epoch " + std::to_string(epoch) + ", batch " + std::to_string(batch) + ": " + what),
          epoch_(epoch),
          batch_(batch) {}

    std::size_t epoch() const noexcept { return epoch_; }
    std::size_t batch() const noexcept { return batch_; }

private:
    std::size_t epoch_;
    std::size_t batch_;
};

/// Loss of one example and its gradient accumulated into `grads`.
inline double accumulate_gradient(const ToyVlmParams<float>& params, const TrainingExample& ex,
                                  VlmWeights<Tensor>& grads) {
    Graph<float> g;
    auto m = bind(g, params, true);
    auto loss = vlm_loss_var(m, g.input(ex.image), ex.question, ex.answer);
    const double value = loss.value().item();
    if (!std::isfinite(value)) return value;
    const auto gm = g.backward(loss);
    for_each_slot(
        [&](const std::string&, const Var& v, Tensor& acc) {
            if (gm.contains(v)) kernels::add_into(acc, gm.at(v).data());
        },
        m.w, grads);
    return value;
}

/// Mini-batch training on the teacher-forced answer loss. Deterministic for a
/// fixed config.seed: initialisation and per-epoch shuffles both derive from it.
inline TrainResult train_toy(std::span<const TrainingExample> data, const ToyVlmConfig& config,
                             const TrainOptions& options) {
    if (data.empty()) throw ContractViolation("train_toy needs a non-empty dataset");
    if (!(options.learning_rate > 0.0)) throw ContractViolation("learning rate must be positive");
    if (options.batch_size == 0) throw ContractViolation("batch size must be positive");

    TrainResult result{init_params(config), {}};
    auto& params = result.params;
    const auto zeros = [](const std::string&, const Tensor& t) { return Tensor(t.shape()); };
    auto first_moment = map_weights<Tensor>(params.weights, zeros);
    auto second_moment = map_weights<Tensor>(params.weights, zeros);
    std::size_t step = 0;

    std::vector<std::size_t> order(data.size());
    for (std::size_t epoch = 0; epoch < options.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        SplitMix64 rng(derive_seed(config.seed, "epoch-" + std::to_string(epoch)));
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);

        double lr = options.learning_rate;
        if (options.linear_decay) lr *= 1.0 - static_cast<double>(epoch) / static_cast<double>(options.epochs);

        double epoch_total = 0.0;
        for (std::size_t start = 0, batch = 0; start < order.size(); start += options.batch_size, ++batch) {
            const std::size_t end = std::min(order.size(), start + options.batch_size);
            auto grads = map_weights<Tensor>(params.weights, zeros);
            double batch_total = 0.0;
            for (std::size_t i = start; i < end; ++i) {
                const double loss = accumulate_gradient(params, data[order[i]], grads);
                if (!std::isfinite(loss)) throw TrainingError(epoch, batch, "non-finite training loss");
                batch_total += loss;
            }
            epoch_total += batch_total;
            const float inv = 1.0f / static_cast<float>(end - start);
            ++step;
            const double bias1 = 1.0 - std::pow(options.beta1, static_cast<double>(step));
            const double bias2 = 1.0 - std::pow(options.beta2, static_cast<double>(step));
            for_each_slot(
                [&](const std::string& name, Tensor& w, const Tensor& gsum, Tensor& m1, Tensor& m2) {
                    auto wd = w.data();
                    for (std::size_t k = 0; k < wd.size(); ++k) {
                        const double g = static_cast<double>(gsum[k] * inv);
                        if (options.optimizer == OptimizerKind::Sgd) {
                            wd[k] = static_cast<float>(wd[k] - lr * g);
                        } else {
                            m1[k] = static_cast<float>(options.beta1 * m1[k] + (1.0 - options.beta1) * g);
                            m2[k] = static_cast<float>(options.beta2 * m2[k] + (1.0 - options.beta2) * g * g);
                            const double mhat = m1[k] / bias1, vhat = m2[k] / bias2;
                            wd[k] = static_cast<float>(wd[k] - lr * mhat / (std::sqrt(vhat) + options.adam_epsilon));
                        }
                    }
                    if (!w.all_finite()) throw TrainingError(epoch, batch, "weight " + name + " became non-finite");
                },
                params.weights, grads, first_moment, second_moment);
        }
        result.epoch_losses.push_back(epoch_total / static_cast<double>(data.size()));
    }
    return result;
}

}  // namespace advlm

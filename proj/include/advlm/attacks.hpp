#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>

#include "advlm/grad_check.hpp"
#include "advlm/rng.hpp"
#include "advlm/tensor.hpp"

namespace advlm {

enum class AttackGoal { Untargeted };
enum class AttackKnowledge { WhiteBox };
enum class Norm { Linf, L2 };

struct ThreatModel {
    AttackGoal goal = AttackGoal::Untargeted;
    AttackKnowledge knowledge = AttackKnowledge::WhiteBox;
    Norm norm = Norm::Linf;
    double epsilon = 0.0;

    void validate() const {
        if (!(epsilon >= 0.0 && epsilon <= 1.0)) {
            throw ContractViolation("epsilon " + std::to_string(epsilon) + " outside [0, 1]");
        }
    }
};

struct PgdParams {
    ThreatModel threat;
    double alpha = 0.0;
    std::size_t iterations = 1;
    bool random_start = false;
    std::uint64_t seed = 0;

    void validate() const {
        threat.validate();
        if (threat.norm != Norm::Linf) throw ContractViolation("pgd requires the Linf threat model");
        if (!(alpha > 0.0)) throw ContractViolation("pgd alpha must be positive");
        if (threat.epsilon > 0.0 && alpha > threat.epsilon) {
            throw ContractViolation("pgd alpha " + std::to_string(alpha) + " exceeds epsilon " +
                                    std::to_string(threat.epsilon));
        }
        if (iterations == 0) throw ContractViolation("pgd needs at least one iteration");
    }
};

struct CwParams {
    double c = 1.0;
    double learning_rate = 0.01;
    std::size_t iterations = 100;
    std::uint64_t seed = 0;

    void validate() const {
        if (!(c >= 0.0)) throw ContractViolation("cw constant c must be non-negative");
        if (!(learning_rate > 0.0)) throw ContractViolation("cw learning rate must be positive");
        if (iterations == 0) throw ContractViolation("cw needs at least one iteration");
    }
};

template <class T>
struct BasicAttackResult {
    BasicTensor<T> adversarial_image;
    BasicTensor<T> perturbation;
    double achieved_loss = 0.0;
    std::size_t iterations_run = 0;
    double linf_norm = 0.0;
    double l2_norm = 0.0;
    /// Always true for fgsm/pgd; for cw_l2, whether a misclassifying iterate was found.
    bool success = true;
};

using AttackResult = BasicAttackResult<float>;

class AttackError : public std::runtime_error {
public:
    AttackError(std::size_t iteration, std::size_t nonfinite)
        : std::runtime_error("non-finite gradient at iteration " + std::to_string(iteration) + " (" +
                             std::to_string(nonfinite) + " coordinates)"),
          iteration_(iteration),
          nonfinite_(nonfinite) {}

    std::size_t iteration() const noexcept { return iteration_; }
    std::size_t nonfinite_count() const noexcept { return nonfinite_; }

private:
    std::size_t iteration_;
    std::size_t nonfinite_;
};

namespace detail {

template <class T>
void check_pixels(const BasicTensor<T>& image) {
    for (T v : image.data()) {
        if (!(v >= T{0} && v <= T{1})) throw ContractViolation("image pixels must lie in [0, 1]");
    }
}

template <class T>
T sign(T v) {
    return v > T{0} ? T{1} : (v < T{0} ? T{-1} : T{0});
}

template <class T>
BasicAttackResult<T> make_result(const BasicTensor<T>& origin, BasicTensor<T> adversarial, double loss,
                                 std::size_t iterations) {
    std::vector<T> delta(origin.numel());
    double linf = 0.0, l2 = 0.0;
    for (std::size_t i = 0; i < delta.size(); ++i) {
        delta[i] = adversarial[i] - origin[i];
        const double d = static_cast<double>(delta[i]);
        linf = std::max(linf, std::abs(d));
        l2 += d * d;
    }
    return {std::move(adversarial), BasicTensor<T>::unchecked(origin.shape(), std::move(delta)), loss, iterations,
            linf, std::sqrt(l2), true};
}

template <class T, class F>
BasicTensor<T> checked_gradient(const F& f, const BasicTensor<T>& x, std::size_t iteration, double* value) {
    auto vg = f.value_and_gradient(x);
    const std::size_t bad = vg.gradient.count_nonfinite();
    if (bad != 0 || !std::isfinite(vg.value)) throw AttackError(iteration, bad);
    if (value) *value = vg.value;
    return std::move(vg.gradient);
}

}  // namespace detail

/// Clamp into [origin - eps, origin + eps], then into [0, 1].
template <class T>
BasicTensor<T> project_linf(const BasicTensor<T>& candidate, const BasicTensor<T>& origin, double epsilon) {
    if (candidate.shape() != origin.shape()) {
        throw ContractViolation("project_linf shape mismatch " + shape_string(candidate.shape()) + " vs " +
                                shape_string(origin.shape()));
    }
    const T eps = static_cast<T>(epsilon);
    std::vector<T> out(candidate.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const T v = std::clamp(candidate[i], origin[i] - eps, origin[i] + eps);
        out[i] = std::clamp(v, T{0}, T{1});
    }
    return BasicTensor<T>::unchecked(origin.shape(), std::move(out));
}

namespace detail {

template <class T>
BasicTensor<T> signed_step(const BasicTensor<T>& x, const BasicTensor<T>& grad, T step) {
    std::vector<T> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + step * sign(grad[i]);
    return BasicTensor<T>::unchecked(x.shape(), std::move(out));
}

}  // namespace detail

/// One signed-gradient step of size epsilon, clipped to valid pixels.
template <class T, class F>
    requires DifferentiableMap<F, T>
BasicAttackResult<T> fgsm(const F& loss_fn, const BasicTensor<T>& image, double epsilon) {
    detail::check_pixels(image);
    ThreatModel{.epsilon = epsilon}.validate();
    const auto grad = detail::checked_gradient(loss_fn, image, 1, nullptr);
    auto adv = project_linf(detail::signed_step(image, grad, static_cast<T>(epsilon)), image, epsilon);
    const double loss = loss_fn.value(adv);
    return detail::make_result(image, std::move(adv), loss, 1);
}

/// Projected signed-gradient ascent inside the Linf ball around `image`.
template <class T, class F>
    requires DifferentiableMap<F, T>
BasicAttackResult<T> pgd(const F& loss_fn, const BasicTensor<T>& image, const PgdParams& params) {
    detail::check_pixels(image);
    params.validate();
    const double eps = params.threat.epsilon;
    BasicTensor<T> x = image;
    if (params.random_start && eps > 0.0) {
        SplitMix64 rng(params.seed);
        for (T& v : x.data()) v += static_cast<T>(rng.uniform(-eps, eps));
        x = project_linf(x, image, eps);
    }
    for (std::size_t t = 1; t <= params.iterations; ++t) {
        const auto grad = detail::checked_gradient(loss_fn, x, t, nullptr);
        x = project_linf(detail::signed_step(x, grad, static_cast<T>(params.alpha)), image, eps);
    }
    const double loss = loss_fn.value(x);
    return detail::make_result(image, std::move(x), loss, params.iterations);
}

/// Gradient descent on ||delta||^2 + c * max(L(x + delta), 0) from delta = 0, each
/// iterate clamped to [0, 1]. `margin_fn` is non-positive iff the input is
/// misclassified. Returns the smallest-L2 misclassifying iterate, or the final
/// iterate with success = false. achieved_loss is the margin at the returned point.
template <class T, class F>
    requires DifferentiableMap<F, T>
BasicAttackResult<T> cw_l2(const F& margin_fn, const BasicTensor<T>& image, const CwParams& params) {
    detail::check_pixels(image);
    params.validate();
    double margin = 0.0;
    auto grad = detail::checked_gradient(margin_fn, image, 0, &margin);
    if (margin <= 0.0) return detail::make_result(image, image, margin, 0);

    std::vector<double> delta(image.numel(), 0.0);
    BasicTensor<T> x = image;
    std::optional<BasicAttackResult<T>> best;
    for (std::size_t t = 1; t <= params.iterations; ++t) {
        const bool active = margin > 0.0;
        for (std::size_t i = 0; i < delta.size(); ++i) {
            double g = 2.0 * delta[i];
            if (active) g += params.c * static_cast<double>(grad[i]);
            const double moved = static_cast<double>(image[i]) + delta[i] - params.learning_rate * g;
            x[i] = static_cast<T>(std::clamp(moved, 0.0, 1.0));
            delta[i] = static_cast<double>(x[i]) - static_cast<double>(image[i]);
        }
        grad = detail::checked_gradient(margin_fn, x, t, &margin);
        if (margin <= 0.0) {
            auto candidate = detail::make_result(image, x, margin, t);
            if (!best || candidate.l2_norm < best->l2_norm) best = std::move(candidate);
        }
    }
    if (best) {
        best->iterations_run = params.iterations;
        return std::move(*best);
    }
    auto last = detail::make_result(image, std::move(x), margin, params.iterations);
    last.success = false;
    return last;
}

struct ScheduleEntry {
    double alpha = 0.0;
    std::size_t iterations = 0;
};

inline constexpr double kScheduleLowEpsilon = 2.0 / 255.0;
inline constexpr double kScheduleHighEpsilon = 1.0;
inline constexpr ScheduleEntry kScheduleLow{0.00196, 5};
inline constexpr ScheduleEntry kScheduleHigh{0.06274, 30};

/// The evaluation grid: 2, 4, 8, 16, 128 and 255 over 255.
inline constexpr std::array<double, 6> kEpsilonGrid{2.0 / 255, 4.0 / 255, 8.0 / 255, 16.0 / 255, 128.0 / 255, 1.0};

/// PGD step size and iteration count for a budget. The two endpoints are
/// tabulated; elsewhere log(alpha) is linear in log(epsilon) and the iteration
/// count is linear in epsilon, rounded up. Alpha never exceeds epsilon.
inline ScheduleEntry hyperparameter_schedule(double epsilon) {
    if (!(epsilon > 0.0) || epsilon > 1.0) {
        throw ContractViolation("schedule epsilon " + std::to_string(epsilon) + " outside (0, 1]");
    }
    constexpr double tol = 1e-12;
    if (std::abs(epsilon - kScheduleLowEpsilon) < tol) return kScheduleLow;
    if (std::abs(epsilon - kScheduleHighEpsilon) < tol) return kScheduleHigh;
    const double u = (std::log(epsilon) - std::log(kScheduleLowEpsilon)) /
                     (std::log(kScheduleHighEpsilon) - std::log(kScheduleLowEpsilon));
    const double alpha = std::exp(std::log(kScheduleLow.alpha) +
                                  u * (std::log(kScheduleHigh.alpha) - std::log(kScheduleLow.alpha)));
    const double v = (epsilon - kScheduleLowEpsilon) / (kScheduleHighEpsilon - kScheduleLowEpsilon);
    const double iters = static_cast<double>(kScheduleLow.iterations) +
                         v * static_cast<double>(kScheduleHigh.iterations - kScheduleLow.iterations);
    return {std::min(alpha, epsilon), static_cast<std::size_t>(std::max(1.0, std::ceil(iters - 1e-9)))};
}

}  // namespace advlm

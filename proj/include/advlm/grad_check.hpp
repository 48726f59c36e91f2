#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <span>
#include <utility>
#include <vector>

#include "advlm/autodiff.hpp"

namespace advlm {

template <class T>
struct ValueAndGradient {
    double value = 0.0;
    BasicTensor<T> gradient;
};

/// A scalar function of one tensor that can report its value alone or its
/// value together with the gradient at the same point.
template <class F, class T>
concept DifferentiableMap = requires(const F& f, const BasicTensor<T>& x) {
    { f.value(x) } -> std::convertible_to<double>;
    { f.value_and_gradient(x) } -> std::same_as<ValueAndGradient<T>>;
};

/// Wraps `build(graph, x) -> loss var` into a DifferentiableMap. Each call
/// builds a fresh graph, so one instance may be shared across threads as long
/// as `build` itself is thread-safe.
template <class T, class Build>
class GraphMap {
public:
    explicit GraphMap(Build build) : build_(std::move(build)) {}

    double value(const BasicTensor<T>& x) const {
        Graph<T> g;
        auto xv = g.input(x, false);
        return static_cast<double>(build_(g, xv).value().item());
    }

    ValueAndGradient<T> value_and_gradient(const BasicTensor<T>& x) const {
        Graph<T> g;
        auto xv = g.input(x, true);
        auto loss = build_(g, xv);
        auto grads = g.backward(loss);
        return {static_cast<double>(loss.value().item()), grads.at(xv)};
    }

    /// ReLU sign pattern of the graph evaluated at x.
    std::vector<bool> relu_pattern(const BasicTensor<T>& x) const { return probe(x).relu_pattern; }

    struct Probe {
        double value = 0.0;
        std::vector<bool> relu_pattern;
    };

    /// Value and ReLU sign pattern from a single forward pass.
    Probe probe(const BasicTensor<T>& x) const {
        Graph<T> g;
        auto xv = g.input(x, false);
        const double v = static_cast<double>(build_(g, xv).value().item());
        return {v, g.relu_pattern()};
    }

private:
    Build build_;
};

template <class T, class Build>
GraphMap<T, Build> graph_map(Build build) {
    return GraphMap<T, Build>(std::move(build));
}

struct GradCheckReport {
    double max_relative_error = 0.0;
    std::size_t worst_coordinate = 0;
    std::size_t skipped = 0;
};

/// Central differences against the backward pass. `skip(plus, minus)` may veto a
/// probe pair, e.g. when it straddles a ReLU kink; vetoed coordinates are counted.
template <class T, class F, class Skip>
    requires DifferentiableMap<F, T>
GradCheckReport grad_check_report(const F& f, const BasicTensor<T>& point, double step, Skip&& skip) {
    if (!(step > 0.0)) throw ContractViolation("grad_check step must be positive");
    const auto analytic = f.value_and_gradient(point).gradient;
    GradCheckReport report;
    BasicTensor<T> probe = point;
    for (std::size_t i = 0; i < point.numel(); ++i) {
        const T original = point[i];
        probe[i] = original + static_cast<T>(step);
        BasicTensor<T> plus = probe;
        probe[i] = original - static_cast<T>(step);
        BasicTensor<T> minus = probe;
        probe[i] = original;
        if (skip(plus, minus)) {
            ++report.skipped;
            continue;
        }
        const double numeric = (f.value(plus) - f.value(minus)) / (2.0 * step);
        const double a = static_cast<double>(analytic[i]);
        const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
        if (err > report.max_relative_error) {
            report.max_relative_error = err;
            report.worst_coordinate = i;
        }
    }
    return report;
}

/// grad_check_report over the listed coordinates only, for maps with a
/// `probe(x) -> {value, relu_pattern}` member. A probe pair whose ReLU pattern
/// differs from the one at `point` crosses a kink and is skipped.
template <class T, class F>
GradCheckReport grad_check_kink_aware(const F& f, const BasicTensor<T>& point, double step,
                                      std::span<const std::size_t> coordinates) {
    if (!(step > 0.0)) throw ContractViolation("grad_check step must be positive");
    const auto analytic = f.value_and_gradient(point).gradient;
    const auto centre = f.probe(point).relu_pattern;
    GradCheckReport report;
    BasicTensor<T> probe = point;
    for (std::size_t i : coordinates) {
        if (i >= point.numel()) throw ContractViolation("grad_check coordinate out of range");
        const T original = point[i];
        probe[i] = original + static_cast<T>(step);
        const auto plus = f.probe(probe);
        probe[i] = original - static_cast<T>(step);
        const auto minus = f.probe(probe);
        probe[i] = original;
        if (plus.relu_pattern != centre || minus.relu_pattern != centre) {
            ++report.skipped;
            continue;
        }
        const double numeric = (plus.value - minus.value) / (2.0 * step);
        const double a = static_cast<double>(analytic[i]);
        const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
        if (err > report.max_relative_error) {
            report.max_relative_error = err;
            report.worst_coordinate = i;
        }
    }
    return report;
}

/// Max over coordinates of |a - b| / max(|a|, |b|, 1e-8), a = backward gradient,
/// b = (f(x + h e_i) - f(x - h e_i)) / 2h.
template <class T, class F>
    requires DifferentiableMap<F, T>
double grad_check(const F& f, const BasicTensor<T>& point, double step) {
    return grad_check_report(f, point, step, [](const auto&, const auto&) { return false; }).max_relative_error;
}

}  // namespace advlm

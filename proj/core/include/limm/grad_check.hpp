#pragma once

// Central-difference gradient verification for scalar-valued tensor functions.

#include <vector>

#include "limm/tensor.hpp"

namespace limm {

template <class T>
struct FiniteDiffReport {
    std::vector<T> max_rel_err;  // one entry per checked input
    T worst = T(0);

    bool ok(T tol) const { return worst < tol; }
};

/// f: callable (Graph<T>*) -> scalar Tensor<T>; it must read `inputs`
/// (all flagged requires_grad) and route them through recorded primitives.
template <class T, class F>
FiniteDiffReport<T> finite_diff_check(F f, const std::vector<Tensor<T>>& inputs, T h = T(1e-5)) {
    for (auto& in : inputs) {
        in->requires_grad = true;
        in->ensure_grad();
        in->zero_grad();
    }
    Graph<T> g;
    auto loss = f(&g);
    if (loss->size() != 1) throw InvalidArgument("finite_diff_check: f must be scalar-valued");
    g.backward(loss);
    std::vector<std::vector<T>> analytic;
    for (auto& in : inputs) analytic.push_back(in->grad);

    FiniteDiffReport<T> rep;
    for (size_t k = 0; k < inputs.size(); ++k) {
        auto& in = inputs[k];
        T worst = T(0);
        for (std::int64_t i = 0; i < in->size(); ++i) {
            const T orig = in->data[i];
            in->data[i] = orig + h;
            const T fp = f(static_cast<Graph<T>*>(nullptr))->data[0];
            in->data[i] = orig - h;
            const T fm = f(static_cast<Graph<T>*>(nullptr))->data[0];
            in->data[i] = orig;
            const T numeric = (fp - fm) / (T(2) * h);
            const T a = analytic[k][i];
            const T denom = std::max({std::abs(a), std::abs(numeric), T(1)});
            worst = std::max(worst, std::abs(a - numeric) / denom);
        }
        rep.max_rel_err.push_back(worst);
        rep.worst = std::max(rep.worst, worst);
    }
    return rep;
}

}  // namespace limm

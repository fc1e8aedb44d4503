#pragma once

// Named trainable-parameter registry shared by backbone, heads and
// projection modules; the unit of checkpointing and optimization.

#include <string>
#include <utility>
#include <vector>

#include "limm/rng.hpp"
#include "limm/tensor.hpp"

namespace limm {

template <class T>
class ParamRegistry {
  public:
    Tensor<T> create(const std::string& name, Shape shape, bool trainable = true) {
        auto t = make_tensor<T>(std::move(shape), trainable);
        items_.emplace_back(name, t);
        return t;
    }

    const std::vector<std::pair<std::string, Tensor<T>>>& items() const { return items_; }

    Tensor<T> find(const std::string& name) const {
        for (const auto& [n, t] : items_)
            if (n == name) return t;
        return nullptr;
    }

    std::int64_t total_size() const {
        std::int64_t n = 0;
        for (const auto& [_, t] : items_) n += t->size();
        return n;
    }

    void zero_grads() {
        for (auto& [_, t] : items_)
            if (t->requires_grad) {
                t->ensure_grad();
                t->zero_grad();
            }
    }

  private:
    std::vector<std::pair<std::string, Tensor<T>>> items_;
};

/// Truncated normal init (values resampled outside 2 std).
template <class T>
void init_trunc_normal(const Tensor<T>& t, Rng& rng, T std = T(0.02)) {
    for (auto& v : t->data) {
        double z = rng.normal();
        while (std::abs(z) > 2.0) z = rng.normal();
        v = static_cast<T>(z) * std;
    }
}

template <class T>
void init_constant(const Tensor<T>& t, T v) {
    std::fill(t->data.begin(), t->data.end(), v);
}

}  // namespace limm

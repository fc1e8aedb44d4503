#pragma once

// Window-wise contrastive learning of density levels: quantile thresholds,
// level assignment, projection heads, multi-queue memory, and the
// distance-weighted loss.

#include <algorithm>
#include <cmath>
#include <deque>
#include <iostream>
#include <string>
#include <vector>

#include "limm/data.hpp"
#include "limm/ops.hpp"
#include "limm/params.hpp"
#include "limm/windowing.hpp"

namespace limm {

struct DensityLevelThresholds {
    std::vector<double> thresholds;  // sorted, N-1 entries before merging
    int levels = 0;                  // N
    bool merged = false;             // duplicates were collapsed

    int reachable_levels() const {
        // level 0 plus one level per distinct threshold "gap"
        return 1 + static_cast<int>(thresholds.size());
    }
};

/// Evenly spaced quantiles of the sorted sample counts: threshold k is the
/// count at sorted index round(k*M/N), k = 1..N-1 (e.g. M=3000, N=3 picks
/// the 1000-th and 2000-th sorted samples).
inline DensityLevelThresholds thresholds_from_counts(std::vector<double> counts, int N) {
    if (counts.empty()) throw InvalidArgument("compute_thresholds: empty sample set");
    if (N < 2) throw InvalidArgument("compute_thresholds: need at least 2 levels");
    std::sort(counts.begin(), counts.end());
    const int M = static_cast<int>(counts.size());
    DensityLevelThresholds th;
    th.levels = N;
    for (int k = 1; k < N; ++k) {
        int idx = static_cast<int>(std::lround(static_cast<double>(k) * M / N));
        idx = std::clamp(idx, 0, M - 1);
        th.thresholds.push_back(counts[idx]);
    }
    auto before = th.thresholds.size();
    th.thresholds.erase(std::unique(th.thresholds.begin(), th.thresholds.end()), th.thresholds.end());
    if (th.thresholds.size() != before) {
        th.merged = true;
        std::cerr << "[limm] warning: duplicate density thresholds merged; only " << th.reachable_levels()
                  << " of " << N << " levels reachable\n";
    }
    return th;
}

/// Random sampling of grid windows over the training set (M samples).
inline DensityLevelThresholds compute_thresholds(const std::vector<CrowdScene>& scenes, int ws, int N,
                                                 int M, Rng& rng) {
    if (scenes.empty()) throw InvalidArgument("compute_thresholds: empty training set");
    if (M < 10 * N) throw InvalidArgument("compute_thresholds: M must be at least 10*N");
    std::vector<double> counts;
    counts.reserve(M);
    for (int m = 0; m < M; ++m) {
        const auto& s = scenes[rng.below(static_cast<int>(scenes.size()))];
        const int rows = (s.height + ws - 1) / ws;
        const int cols = (s.width + ws - 1) / ws;
        const int win = rng.below(rows * cols);
        auto perWin = window_point_counts(s.points, s.height, s.width, ws);
        counts.push_back(perWin[win]);
    }
    return thresholds_from_counts(std::move(counts), N);
}

/// count == 0 -> level 0; else 1 + #thresholds strictly below count,
/// clamped to N-1. Background is its own level.
inline int assign_level(double count, const DensityLevelThresholds& th) {
    if (count < 0) throw InvalidArgument("assign_level: negative count");
    if (count == 0) return 0;
    int level = 1;
    for (double t : th.thresholds)
        if (t < count) ++level;
    return std::min(level, th.levels - 1);
}

/// N FIFO sub-queues of unit-norm embeddings, one per density level.
class MultiQueue {
  public:
    MultiQueue(int levels, int capacity, int dim) : levels_(levels), capacity_(capacity), dim_(dim) {
        if (levels < 1 || capacity < 1 || dim < 1) throw InvalidArgument("MultiQueue: bad dimensions");
        queues_.resize(levels);
    }

    int levels() const { return levels_; }
    int capacity() const { return capacity_; }
    int dim() const { return dim_; }
    int fill(int level) const { return static_cast<int>(queues_.at(level).size()); }
    int total() const {
        int t = 0;
        for (const auto& q : queues_) t += static_cast<int>(q.size());
        return t;
    }

    template <class T>
    void push(int level, const Tensor<T>& v) {
        if (level < 0 || level >= levels_) throw InvalidArgument("MultiQueue::push: level out of range");
        if (v->size() != dim_) throw InvalidArgument("MultiQueue::push: dimension mismatch");
        double n2 = 0;
        for (T x : v->data) n2 += static_cast<double>(x) * x;
        if (std::abs(std::sqrt(n2) - 1.0) > 1e-4)
            throw InvalidArgument("MultiQueue::push: vector is not unit norm");
        std::vector<double> row(v->data.begin(), v->data.end());
        auto& q = queues_[level];
        if (static_cast<int>(q.size()) == capacity_) q.pop_front();
        q.push_back(std::move(row));
    }

    /// Flattened snapshot: entry vectors (oldest first per level) + levels.
    struct Snapshot {
        std::vector<std::vector<double>> entries;
        std::vector<int> levels;
    };
    Snapshot snapshot() const {
        Snapshot s;
        for (int l = 0; l < levels_; ++l)
            for (const auto& row : queues_[l]) {
                s.entries.push_back(row);
                s.levels.push_back(l);
            }
        return s;
    }

    const std::deque<std::vector<double>>& sub_queue(int level) const { return queues_.at(level); }

  private:
    int levels_, capacity_, dim_;
    std::vector<std::deque<std::vector<double>>> queues_;
};

enum class DistanceFn { Const1, Linear, Square, Pow2 };

inline DistanceFn distance_fn_from_string(const std::string& s) {
    if (s == "const1") return DistanceFn::Const1;
    if (s == "linear") return DistanceFn::Linear;
    if (s == "square") return DistanceFn::Square;
    if (s == "pow2") return DistanceFn::Pow2;
    throw InvalidArgument("unknown distance weight function: " + s);
}

/// Class-distance repulsion weight: 0 at distance 0, f(d) otherwise.
inline double distance_weight(int d, DistanceFn f) {
    if (d < 0) throw InvalidArgument("distance_weight: negative distance");
    if (d == 0) return 0.0;
    switch (f) {
        case DistanceFn::Const1: return 1.0;
        case DistanceFn::Linear: return static_cast<double>(d);
        case DistanceFn::Square: return static_cast<double>(d) * d;
        case DistanceFn::Pow2: return std::pow(2.0, d);
    }
    return 1.0;
}

/// MLP projection head: global-mean pool -> linear(C1->C1) -> GELU ->
/// linear(C1->C2) -> l2-normalize.
template <class T>
struct ProjectionHead {
    Tensor<T> w1, b1, w2, b2;

    static ProjectionHead create(const std::string& prefix, int c1, int c2, ParamRegistry<T>& reg,
                                 Rng& rng, bool trainable) {
        ProjectionHead h;
        h.w1 = reg.create(prefix + ".w1", {c1, c1}, trainable);
        h.b1 = reg.create(prefix + ".b1", {c1}, trainable);
        h.w2 = reg.create(prefix + ".w2", {c2, c1}, trainable);
        h.b2 = reg.create(prefix + ".b2", {c2}, trainable);
        init_trunc_normal(h.w1, rng);
        init_trunc_normal(h.w2, rng);
        return h;
    }
};

/// Projects a per-window feature tile [C1,h,w] to a unit vector [C2].
template <class T>
Tensor<T> project(Graph<T>* g, const Tensor<T>& tile, const ProjectionHead<T>& head) {
    if (tile->shape.size() != 3) throw InvalidArgument("project: expected [C1,h,w]");
    auto x = ops::reshape(g, tile, {1, tile->shape[0], tile->shape[1], tile->shape[2]});
    x = ops::pool2d(g, x, ops::PoolKind::GlobalMean);
    x = ops::reshape(g, x, {1, tile->shape[0]});
    x = ops::linear(g, x, head.w1, head.b1);
    x = ops::gelu(g, x);
    x = ops::linear(g, x, head.w2, head.b2);
    x = ops::l2_normalize(g, x);
    return ops::reshape(g, x, {head.w2->shape[0]});
}

/// Query/key projector pair; the key side is EMA-tracked and never
/// receives gradients.
template <class T>
struct ProjectionPair {
    ProjectionHead<T> query, key;
    T momentum = T(0.99);

    static ProjectionPair create(int c1, int c2, ParamRegistry<T>& reg, Rng& rng, T momentum = T(0.99)) {
        ProjectionPair p;
        p.momentum = momentum;
        p.query = ProjectionHead<T>::create("proj.query", c1, c2, reg, rng, true);
        p.key = ProjectionHead<T>::create("proj.key", c1, c2, reg, rng, false);
        // start the key head at the query head's weights
        for (auto [q, k] : {std::pair{p.query.w1, p.key.w1}, std::pair{p.query.b1, p.key.b1},
                            std::pair{p.query.w2, p.key.w2}, std::pair{p.query.b2, p.key.b2}})
            k->data = q->data;
        return p;
    }

    /// key <- m*key + (1-m)*query, elementwise.
    void ema_update() {
        auto blend = [this](const Tensor<T>& q, const Tensor<T>& k) {
            for (std::int64_t i = 0; i < k->size(); ++i)
                k->data[i] = momentum * k->data[i] + (T(1) - momentum) * q->data[i];
        };
        blend(query.w1, key.w1);
        blend(query.b1, key.b1);
        blend(query.w2, key.w2);
        blend(query.b2, key.b2);
    }
};

template <class T>
struct WwclBatchItem {
    Tensor<T> v_q;  // unit query vector [C2], on the grad path
    int level = 0;
};

/// Distance-weighted multi-queue contrastive loss. For query i with
/// positives P_i (entries of sub-queue level_i), each positive p
/// contributes -log( exp(s_ip/tau) / sum_j w_ij exp(s_ij/tau) ) with
/// w_ij = 1 for same-level entries and distance_weight(|dl|, f) otherwise;
/// averaged over P_i, then over the batch. With f == const1 this is the
/// plain unweighted multi-queue loss.
template <class T>
Tensor<T> wwcl_dl_loss(Graph<T>* g, const std::vector<WwclBatchItem<T>>& batch, const MultiQueue& queue,
                       T tau, DistanceFn f) {
    if (tau <= T(0)) throw InvalidArgument("wwcl_dl_loss: tau must be positive");
    if (batch.empty()) throw InvalidArgument("wwcl_dl_loss: empty batch");
    auto snap = queue.snapshot();
    const int J = static_cast<int>(snap.entries.size());
    if (J == 0) throw InvalidState("wwcl_dl_loss: queue is empty");
    const int C2 = queue.dim();
    auto keys = make_tensor<T>({J, C2});
    for (int j = 0; j < J; ++j)
        for (int c = 0; c < C2; ++c) keys->data[static_cast<std::int64_t>(j) * C2 + c] =
            static_cast<T>(snap.entries[j][c]);

    std::vector<Tensor<T>> losses;
    for (const auto& item : batch) {
        if (item.level < 0 || item.level >= queue.levels())
            throw InvalidArgument("wwcl_dl_loss: level out of range");
        std::vector<int> positives;
        std::vector<T> weights(J);
        for (int j = 0; j < J; ++j) {
            const int d = std::abs(snap.levels[j] - item.level);
            weights[j] = (d == 0) ? T(1) : static_cast<T>(distance_weight(d, f));
            if (d == 0) positives.push_back(j);
        }
        if (positives.empty()) {
            std::cerr << "[limm] warning: no positives for level " << item.level << "; sample skipped\n";
            continue;
        }
        auto v = ops::reshape(g, item.v_q, {1, C2});
        auto sims = ops::linear<T>(g, v, keys, nullptr);       // [1, J]
        auto logits = ops::scale(g, sims, T(1) / tau);
        // max-shifted weighted log-sum-exp (shift is a constant)
        T mx = logits->data[0];
        for (int j = 1; j < J; ++j) mx = std::max(mx, logits->data[j]);
        auto shifted = ops::add_const(g, logits, -mx);
        auto ex = ops::exp_op(g, shifted);
        auto wconst = make_tensor<T>({1, J}, std::vector<T>(weights));
        auto z = ops::sum_all(g, ops::mul(g, ex, wconst));
        auto logz = ops::add_const(g, ops::log_op(g, z), mx);
        auto pos = ops::mean_all(g, ops::gather(g, logits, positives));
        losses.push_back(ops::sub(g, logz, pos));
    }
    if (losses.empty()) throw InvalidState("wwcl_dl_loss: all samples skipped (empty positive sets)");
    return ops::mean_all(g, ops::concat(g, losses, 0));
}

}  // namespace limm

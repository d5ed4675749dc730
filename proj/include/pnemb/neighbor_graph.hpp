#pragma once

// Exact k-nearest-neighbour graphs in arbitrary feature spaces.
//
// Row i of a NeighborIndex always starts with i itself; the remaining entries
// are ordered by (squared Euclidean distance, index). A point that exactly
// coincides with i therefore still comes after i.

#include <algorithm>
#include <array>
#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "pnemb/errors.hpp"
#include "pnemb/ops.hpp"
#include "pnemb/tensor.hpp"

namespace pnemb {

struct NeighborIndex {
    std::size_t n_points = 0;
    std::size_t k = 0;
    std::vector<std::size_t> indices;  // n_points x k, row-major

    std::span<const std::size_t> row(std::size_t i) const { return {indices.data() + i * k, k}; }

    friend bool operator==(const NeighborIndex&, const NeighborIndex&) = default;
};

/// Total entries per row: `k` when the point itself is one of its k
/// neighbours, `k + 1` (self plus k others) otherwise.
inline std::size_t neighbor_row_length(std::size_t k, bool self_counts_in_k) {
    return self_counts_in_k ? k : k + 1;
}

namespace detail {

inline std::size_t validate_knn(const Tensor& features, std::size_t k, bool self_counts_in_k) {
    if (features.rank() != 2) throw DimensionError("knn: features must be [N, C], got " + shape_str(features.shape()));
    if (k == 0) throw InvalidInput("knn: k must be at least 1");
    const std::size_t n = features.dim(0);
    const std::size_t row = neighbor_row_length(k, self_counts_in_k);
    if (row > n) {
        throw InvalidInput("knn: k=" + std::to_string(k) + (self_counts_in_k ? "" : " (+ self)") +
                           " exceeds point count " + std::to_string(n));
    }
    return row;
}

inline double squared_distance(const double* a, const double* b, std::size_t c) {
    double acc = 0.0;
    for (std::size_t d = 0; d < c; ++d) {
        const double diff = a[d] - b[d];
        acc += diff * diff;
    }
    return acc;
}

} // namespace detail

inline NeighborIndex knn_brute_force(const Tensor& features, std::size_t k, bool self_counts_in_k = true) {
    const std::size_t row = detail::validate_knn(features, k, self_counts_in_k);
    const std::size_t n = features.dim(0), c = features.dim(1);
    const double* x = features.data().data();
    NeighborIndex out{n, row, std::vector<std::size_t>(n * row)};
    std::vector<std::pair<double, std::size_t>> cand;
    cand.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        cand.clear();
        for (std::size_t j = 0; j < n; ++j) {
            if (j != i) cand.emplace_back(detail::squared_distance(x + i * c, x + j * c, c), j);
        }
        std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(row - 1), cand.end());
        out.indices[i * row] = i;
        for (std::size_t r = 1; r < row; ++r) out.indices[i * row + r] = cand[r - 1].second;
    }
    return out;
}

/// Static 3-D kd-tree with exact (distance, index)-ordered k-NN queries.
class KdTree3 {
public:
    explicit KdTree3(const Tensor& coords) : coords_(coords.data().data()), n_(coords.dim(0)) {
        if (coords.rank() != 2 || coords.dim(1) != 3) {
            throw DimensionError("kd-tree: expected [N, 3] coordinates, got " + shape_str(coords.shape()));
        }
        perm_.resize(n_);
        for (std::size_t i = 0; i < n_; ++i) perm_[i] = i;
        nodes_.reserve(2 * n_ / kLeafSize + 2);
        build(0, n_);
    }

    /// The `count` nearest points to point `self` other than itself, ascending
    /// by (distance, index).
    void query_others(std::size_t self, std::size_t count, std::vector<std::pair<double, std::size_t>>& best) const {
        best.clear();
        if (count == 0) return;
        search(0, coords_ + 3 * self, self, count, best);
        std::sort_heap(best.begin(), best.end());
    }

private:
    static constexpr std::size_t kLeafSize = 8;

    struct Node {
        std::size_t begin, end;
        int axis;  // -1 for leaves
        double split;
        std::size_t left, right;
    };

    std::size_t build(std::size_t begin, std::size_t end) {
        const std::size_t id = nodes_.size();
        nodes_.push_back(Node{begin, end, -1, 0.0, 0, 0});
        if (end - begin <= kLeafSize) return id;
        std::array<double, 3> lo{1e300, 1e300, 1e300}, hi{-1e300, -1e300, -1e300};
        for (std::size_t p = begin; p < end; ++p) {
            for (int d = 0; d < 3; ++d) {
                lo[d] = std::min(lo[d], coords_[3 * perm_[p] + d]);
                hi[d] = std::max(hi[d], coords_[3 * perm_[p] + d]);
            }
        }
        int axis = 0;
        for (int d = 1; d < 3; ++d) {
            if (hi[d] - lo[d] > hi[axis] - lo[axis]) axis = d;
        }
        const std::size_t mid = begin + (end - begin) / 2;
        auto key = [&](std::size_t i) { return std::pair{coords_[3 * i + axis], i}; };
        std::nth_element(perm_.begin() + static_cast<std::ptrdiff_t>(begin),
                         perm_.begin() + static_cast<std::ptrdiff_t>(mid),
                         perm_.begin() + static_cast<std::ptrdiff_t>(end),
                         [&](std::size_t a, std::size_t b) { return key(a) < key(b); });
        const double split = coords_[3 * perm_[mid] + axis];
        const std::size_t left = build(begin, mid);
        const std::size_t right = build(mid, end);
        nodes_[id].axis = axis;
        nodes_[id].split = split;
        nodes_[id].left = left;
        nodes_[id].right = right;
        return id;
    }

    // `best` is a max-heap on (distance, index) holding at most `count` entries.
    void search(std::size_t id, const double* q, std::size_t self, std::size_t count,
                std::vector<std::pair<double, std::size_t>>& best) const {
        const Node& node = nodes_[id];
        if (node.axis < 0) {
            for (std::size_t p = node.begin; p < node.end; ++p) {
                const std::size_t j = perm_[p];
                if (j == self) continue;
                std::pair<double, std::size_t> cand{detail::squared_distance(q, coords_ + 3 * j, 3), j};
                if (best.size() < count) {
                    best.push_back(cand);
                    std::push_heap(best.begin(), best.end());
                } else if (cand < best.front()) {
                    std::pop_heap(best.begin(), best.end());
                    best.back() = cand;
                    std::push_heap(best.begin(), best.end());
                }
            }
            return;
        }
        // Left holds coordinates <= split, right holds coordinates >= split.
        const double diff = q[node.axis] - node.split;
        const std::size_t near = diff < 0 ? node.left : node.right;
        const std::size_t far = diff < 0 ? node.right : node.left;
        search(near, q, self, count, best);
        // Equal bounds must still be visited: a farther-side point at the same
        // distance may carry a smaller index.
        if (best.size() < count || diff * diff <= best.front().first) search(far, q, self, count, best);
    }

    const double* coords_;
    std::size_t n_;
    std::vector<std::size_t> perm_;
    std::vector<Node> nodes_;
};

/// Same contract and output as knn_brute_force, restricted to 3-D inputs.
inline NeighborIndex knn_kdtree_3d(const Tensor& coords, std::size_t k, bool self_counts_in_k = true) {
    const std::size_t row = detail::validate_knn(coords, k, self_counts_in_k);
    if (coords.dim(1) != 3) throw DimensionError("knn_kdtree_3d: expected [N, 3], got " + shape_str(coords.shape()));
    const std::size_t n = coords.dim(0);
    KdTree3 tree(coords);
    NeighborIndex out{n, row, std::vector<std::size_t>(n * row)};
    std::vector<std::pair<double, std::size_t>> best;
    for (std::size_t i = 0; i < n; ++i) {
        tree.query_others(i, row - 1, best);
        out.indices[i * row] = i;
        for (std::size_t r = 1; r < row; ++r) out.indices[i * row + r] = best[r - 1].second;
    }
    return out;
}

/// Picks the kd-tree for 3-D inputs and brute force otherwise.
inline NeighborIndex knn(const Tensor& features, std::size_t k, bool self_counts_in_k = true) {
    if (features.rank() == 2 && features.dim(1) == 3) return knn_kdtree_3d(features, k, self_counts_in_k);
    return knn_brute_force(features, k, self_counts_in_k);
}

/// output[i][j] = features[index.row(i)[j]], shape [N, K, C].
inline Tensor gather_neighbors(Graph& g, const Tensor& features, const NeighborIndex& index) {
    if (features.rank() != 2) {
        throw DimensionError("gather_neighbors: features must be [N, C], got " + shape_str(features.shape()));
    }
    if (index.n_points != features.dim(0)) {
        throw InvalidInput("gather_neighbors: index built for " + std::to_string(index.n_points) +
                           " points applied to " + std::to_string(features.dim(0)));
    }
    Tensor flat = take_rows(g, features, index.indices);
    return reshape(g, flat, {index.n_points, index.k, features.dim(1)});
}

} // namespace pnemb

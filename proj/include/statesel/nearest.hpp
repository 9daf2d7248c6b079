#pragma once

#include <algorithm>
#include <cstddef>
#include <limits>
#include <numeric>
#include <utility>
#include <vector>

#include "statesel/types.hpp"

namespace statesel {

/// Static kd-tree over a fixed point set. Ties between equidistant points
/// resolve to the lowest point index, so queries are deterministic.
class KdTree {
public:
    explicit KdTree(std::vector<Vector> points) : points_(std::move(points)) {
        if (points_.empty()) throw ConfigError("KdTree: empty point set");
        order_.resize(points_.size());
        std::iota(order_.begin(), order_.end(), std::size_t{0});
        build(0, order_.size(), 0);
    }

    std::size_t nearest(const Vector& q) const {
        Best best;
        search(root_, q, best);
        return best.index;
    }

    /// Up to k nearest indices with their squared distances, closest first.
    std::vector<std::pair<double, std::size_t>> k_nearest(const Vector& q, std::size_t k) const {
        std::vector<std::pair<double, std::size_t>> heap;
        k = std::min(k, points_.size());
        search_k(root_, q, k, heap);
        std::sort(heap.begin(), heap.end());
        return heap;
    }

    const std::vector<Vector>& points() const { return points_; }

private:
    struct Node {
        std::size_t point = 0;
        Eigen::Index axis = 0;
        int left = -1;
        int right = -1;
    };
    struct Best {
        double dist = std::numeric_limits<double>::infinity();
        std::size_t index = std::numeric_limits<std::size_t>::max();
    };

    int build(std::size_t begin, std::size_t end, int depth) {
        if (begin >= end) return -1;
        const Eigen::Index axis = depth % points_.front().size();
        const std::size_t mid = begin + (end - begin) / 2;
        std::nth_element(order_.begin() + static_cast<std::ptrdiff_t>(begin),
                         order_.begin() + static_cast<std::ptrdiff_t>(mid),
                         order_.begin() + static_cast<std::ptrdiff_t>(end), [&](std::size_t a, std::size_t b) {
                             const double va = points_[a](axis);
                             const double vb = points_[b](axis);
                             return va < vb || (va == vb && a < b);
                         });
        const int id = static_cast<int>(nodes_.size());
        nodes_.push_back({order_[mid], axis, -1, -1});
        const int l = build(begin, mid, depth + 1);
        const int r = build(mid + 1, end, depth + 1);
        nodes_[static_cast<std::size_t>(id)].left = l;
        nodes_[static_cast<std::size_t>(id)].right = r;
        if (depth == 0) root_ = id;
        return id;
    }

    void search(int id, const Vector& q, Best& best) const {
        if (id < 0) return;
        const Node& n = nodes_[static_cast<std::size_t>(id)];
        const double d = (points_[n.point] - q).squaredNorm();
        if (d < best.dist || (d == best.dist && n.point < best.index)) best = {d, n.point};
        const double diff = q(n.axis) - points_[n.point](n.axis);
        const int near = diff <= 0 ? n.left : n.right;
        const int far = diff <= 0 ? n.right : n.left;
        search(near, q, best);
        if (diff * diff <= best.dist) search(far, q, best);
    }

    void search_k(int id, const Vector& q, std::size_t k, std::vector<std::pair<double, std::size_t>>& heap) const {
        if (id < 0) return;
        const Node& n = nodes_[static_cast<std::size_t>(id)];
        const std::pair<double, std::size_t> cand{(points_[n.point] - q).squaredNorm(), n.point};
        if (heap.size() < k) {
            heap.push_back(cand);
            std::push_heap(heap.begin(), heap.end());
        } else if (cand < heap.front()) {
            std::pop_heap(heap.begin(), heap.end());
            heap.back() = cand;
            std::push_heap(heap.begin(), heap.end());
        }
        const double diff = q(n.axis) - points_[n.point](n.axis);
        const int near = diff <= 0 ? n.left : n.right;
        const int far = diff <= 0 ? n.right : n.left;
        search_k(near, q, k, heap);
        if (heap.size() < k || diff * diff <= heap.front().first) search_k(far, q, k, heap);
    }

    std::vector<Vector> points_;
    std::vector<std::size_t> order_;
    std::vector<Node> nodes_;
    int root_ = -1;
};

}  // namespace statesel

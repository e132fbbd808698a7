#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "dmc/errors.hpp"
#include "dmc/matrix.hpp"

namespace dmc {

// Exact k-d tree. Points are copied and reordered at build; the tree is
// immutable afterwards and queries are safe from any number of threads.
//
// Exactness contract: a query's k-th distance equals the brute-force k-th
// smallest value bit for bit. Candidate distances are therefore accumulated
// in f64 over the same f32 coordinates in ascending dimension order, exactly
// as a brute-force scan would. Two filters sit in front of that exact path,
// both provably conservative: per-node bounding boxes prune subtrees whose
// minimum distance exceeds the current k-th best (with a 1e-12 relative
// margin for f64 rounding), and leaf scans run a vectorizable f32 pass whose
// error bound (see the slack factor in scan_leaf) only discards points that
// cannot enter the k-best set. Every surviving candidate is re-measured with
// the exact f64 path, so filter rounding never reaches the results.
class KdTree {
 public:
  struct Neighbor {
    double d2;
    uint32_t idx;  // index into the original point matrix
  };

  explicit KdTree(const MatF& points, size_t leaf_size = 64)
      : dim_(points.cols), leaf_size_(std::max<size_t>(leaf_size, 8)) {
    if (points.rows == 0) throw ValidationError("kdtree: no points");
    for (float v : points.data) {
      if (!std::isfinite(v))
        throw ValidationError("kdtree: non-finite coordinate");
    }
    n_ = points.rows;
    order_.resize(n_);
    for (size_t i = 0; i < n_; ++i) order_[i] = static_cast<uint32_t>(i);
    nodes_.reserve(2 * (n_ / leaf_size_ + 2));
    src_ = &points;
    build(0, n_);
    src_ = nullptr;
    // Pack points in tree order: row-major for the exact path plus lane-wide
    // coordinate-major tiles per leaf for the filter pass.
    pts_.resize(n_ * dim_);
    for (size_t i = 0; i < n_; ++i) {
      const float* p = points.row(order_[i]);
      std::copy(p, p + dim_, pts_.begin() + static_cast<std::ptrdiff_t>(i * dim_));
    }
    for (auto& node : nodes_) {
      if (node.dim >= 0) continue;
      node.tile_off = static_cast<uint32_t>(tiles_.size() / (kLane * dim_));
      const size_t count = node.end - node.begin;
      const size_t n_tiles = (count + kLane - 1) / kLane;
      const size_t base = tiles_.size();
      tiles_.resize(base + n_tiles * kLane * dim_,
                    std::numeric_limits<float>::infinity());
      for (size_t j = 0; j < count; ++j) {
        const float* p = &pts_[(node.begin + j) * dim_];
        float* tile = &tiles_[base + (j / kLane) * kLane * dim_];
        for (size_t d = 0; d < dim_; ++d) tile[d * kLane + (j % kLane)] = p[d];
      }
    }
  }

  size_t size() const { return n_; }
  size_t dim() const { return dim_; }

  // k smallest (d2, idx) in ascending d2 order. k must be <= size().
  void query(const float* q, size_t k, std::vector<Neighbor>& out) const {
    if (k < 1 || k > n_)
      throw ValidationError("kdtree query: k out of range");
    out.clear();
    out.reserve(k + 1);
    search(0, q, k, out);
  }

 private:
  static constexpr size_t kLane = 32;

#if defined(__GNUC__) || defined(__clang__)
#define DMC_KDTREE_VEC 1
  typedef float VLane __attribute__((vector_size(kLane * sizeof(float))));
#endif

  struct Node {
    float split = 0;
    int32_t dim = -1;  // -1: leaf
    uint32_t left = 0, right = 0;
    uint32_t begin = 0, end = 0;  // leaf point range in tree order
    uint32_t tile_off = 0;        // leaf tile index
  };

  uint32_t build(size_t begin, size_t end) {
    const uint32_t id = static_cast<uint32_t>(nodes_.size());
    nodes_.emplace_back();
    bbox_.resize((static_cast<size_t>(id) + 1) * 2 * dim_);
    float* lo = &bbox_[static_cast<size_t>(id) * 2 * dim_];
    float* hi = lo + dim_;
    size_t best_dim = 0;
    float best_spread = -1;
    for (size_t d = 0; d < dim_; ++d) {
      float dlo = std::numeric_limits<float>::infinity(), dhi = -dlo;
      for (size_t i = begin; i < end; ++i) {
        const float v = src_->at(order_[i], d);
        dlo = std::min(dlo, v);
        dhi = std::max(dhi, v);
      }
      lo[d] = dlo;
      hi[d] = dhi;
      if (dhi - dlo > best_spread) {
        best_spread = dhi - dlo;
        best_dim = d;
      }
    }
    if (end - begin <= leaf_size_) {
      nodes_[id].begin = static_cast<uint32_t>(begin);
      nodes_[id].end = static_cast<uint32_t>(end);
      return id;
    }
    // Split the widest dimension at its median.
    const size_t mid = begin + (end - begin) / 2;
    std::nth_element(order_.begin() + static_cast<std::ptrdiff_t>(begin),
                     order_.begin() + static_cast<std::ptrdiff_t>(mid),
                     order_.begin() + static_cast<std::ptrdiff_t>(end),
                     [&](uint32_t a, uint32_t b) {
                       const float va = src_->at(a, best_dim);
                       const float vb = src_->at(b, best_dim);
                       if (va != vb) return va < vb;
                       return a < b;
                     });
    nodes_[id].dim = static_cast<int32_t>(best_dim);
    nodes_[id].split = src_->at(order_[mid], best_dim);
    const uint32_t l = build(begin, mid);
    const uint32_t r = build(mid, end);
    nodes_[id].left = l;
    nodes_[id].right = r;
    return id;
  }

  // Sorted-array candidate list: k is small, insertion beats a heap.
  static void insert_candidate(std::vector<Neighbor>& out, size_t k, double d2,
                               uint32_t idx) {
    if (out.size() == k && d2 >= out.back().d2) return;
    auto pos = std::upper_bound(
        out.begin(), out.end(), d2,
        [](double v, const Neighbor& n) { return v < n.d2; });
    out.insert(pos, {d2, idx});
    if (out.size() > k) out.pop_back();
  }

  double exact_d2(const float* q, size_t tree_pos) const {
    const float* p = &pts_[tree_pos * dim_];
    double acc = 0.0;
    for (size_t d = 0; d < dim_; ++d) {
      const double diff = static_cast<double>(q[d]) - static_cast<double>(p[d]);
      acc += diff * diff;
    }
    return acc;
  }

  void scan_leaf(const Node& node, const float* q, size_t k,
                 std::vector<Neighbor>& out) const {
    const size_t count = node.end - node.begin;
    const size_t n_tiles = (count + kLane - 1) / kLane;
    // Relative error of the f32 filter distance is below (dim+2)*2^-24;
    // a 4x slack keeps the filter provably conservative.
    const double slack =
        1.0 + 4.0 * static_cast<double>(dim_ + 2) * 0x1.0p-24;
    for (size_t t = 0; t < n_tiles; ++t) {
      const float* tile =
          &tiles_[(static_cast<size_t>(node.tile_off) + t) * kLane * dim_];
      float acc[kLane];
#ifdef DMC_KDTREE_VEC
      // Two accumulators over alternating dimensions keep the FMA chains
      // short enough to stay throughput-bound.
      VLane a0{}, a1{};
      size_t d = 0;
      for (; d + 1 < dim_; d += 2) {
        VLane r0, r1;
        __builtin_memcpy(&r0, tile + d * kLane, sizeof(VLane));
        __builtin_memcpy(&r1, tile + (d + 1) * kLane, sizeof(VLane));
        const VLane d0 = r0 - q[d];
        const VLane d1 = r1 - q[d + 1];
        a0 += d0 * d0;
        a1 += d1 * d1;
      }
      if (d < dim_) {
        VLane r0;
        __builtin_memcpy(&r0, tile + d * kLane, sizeof(VLane));
        const VLane d0 = r0 - q[d];
        a0 += d0 * d0;
      }
      const VLane total = a0 + a1;
      __builtin_memcpy(acc, &total, sizeof(VLane));
#else
      for (size_t l = 0; l < kLane; ++l) acc[l] = 0.0f;
      for (size_t d = 0; d < dim_; ++d) {
        const float qd = q[d];
        const float* row = tile + d * kLane;
        for (size_t l = 0; l < kLane; ++l) {
          const float diff = qd - row[l];
          acc[l] += diff * diff;
        }
      }
#endif
      const double bound = out.size() == k
                               ? out.back().d2 * slack
                               : std::numeric_limits<double>::infinity();
      const size_t lanes = std::min(kLane, count - t * kLane);
      for (size_t l = 0; l < lanes; ++l) {
        if (static_cast<double>(acc[l]) <= bound) {
          const size_t pos = node.begin + t * kLane + l;
          insert_candidate(out, k, exact_d2(q, pos), order_[pos]);
        }
      }
    }
  }

  // Squared distance from q to the node's bounding box, f64 over f32 bounds.
  double bbox_mind(uint32_t node_id, const float* q) const {
    const float* lo = &bbox_[static_cast<size_t>(node_id) * 2 * dim_];
    const float* hi = lo + dim_;
    double mind = 0.0;
    for (size_t d = 0; d < dim_; ++d) {
      const double qd = q[d];
      double diff = 0.0;
      if (qd < lo[d]) diff = static_cast<double>(lo[d]) - qd;
      else if (qd > hi[d]) diff = qd - static_cast<double>(hi[d]);
      mind += diff * diff;
    }
    return mind;
  }

  void search(uint32_t node_id, const float* q, size_t k,
              std::vector<Neighbor>& out) const {
    if (out.size() == k &&
        bbox_mind(node_id, q) * (1.0 - 1e-12) > out.back().d2)
      return;
    const Node& node = nodes_[node_id];
    if (node.dim < 0) {
      scan_leaf(node, q, k, out);
      return;
    }
    const size_t sd = static_cast<size_t>(node.dim);
    const double diff = static_cast<double>(q[sd]) - static_cast<double>(node.split);
    const uint32_t near = diff <= 0 ? node.left : node.right;
    const uint32_t far = diff <= 0 ? node.right : node.left;
    search(near, q, k, out);
    search(far, q, k, out);
  }

  size_t dim_;
  size_t leaf_size_;
  size_t n_ = 0;
  std::vector<Node> nodes_;
  std::vector<uint32_t> order_;  // tree position -> original index
  std::vector<float> bbox_;      // per node: dim_ lows then dim_ highs
  std::vector<float> pts_;       // points in tree order, row-major
  std::vector<float> tiles_;     // per-leaf lane-wide coordinate-major tiles
  const MatF* src_ = nullptr;    // alive during build only
};

}  // namespace dmc

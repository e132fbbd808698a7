#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "dmc/adam.hpp"
#include "dmc/dataset.hpp"
#include "dmc/errors.hpp"
#include "dmc/hash.hpp"
#include "dmc/kdtree.hpp"
#include "dmc/mlp.hpp"
#include "dmc/rng.hpp"
#include "dmc/thread_pool.hpp"

namespace dmc {

// Exact duplicates would otherwise send log-distances to -inf.
inline constexpr double kDistanceFloor = 1e-12;

inline NormStats identity_stats(size_t dim) {
  NormStats st;
  st.mean.assign(dim, 0.0);
  st.stddev.assign(dim, 1.0);
  st.n_rows = 0;
  return st;
}

// Per-dimension population stats over the rows of several point matrices.
// Used to fit normalization on the union of source and target.
inline NormStats points_union_stats(const std::vector<const MatF*>& parts) {
  size_t dim = 0, n = 0;
  for (const MatF* p : parts) {
    if (p->rows == 0) continue;
    if (dim == 0) dim = p->cols;
    if (p->cols != dim)
      throw ValidationError("union stats: point dimensions differ");
    n += p->rows;
  }
  if (n == 0) throw ValidationError("union stats: no rows");
  NormStats st;
  st.n_rows = n;
  st.mean.assign(dim, 0.0);
  st.stddev.assign(dim, 0.0);
  for (const MatF* p : parts)
    for (size_t i = 0; i < p->rows; ++i) {
      const float* r = p->row(i);
      for (size_t d = 0; d < dim; ++d) st.mean[d] += r[d];
    }
  for (size_t d = 0; d < dim; ++d) st.mean[d] /= static_cast<double>(n);
  for (const MatF* p : parts)
    for (size_t i = 0; i < p->rows; ++i) {
      const float* r = p->row(i);
      for (size_t d = 0; d < dim; ++d) {
        const double dev = r[d] - st.mean[d];
        st.stddev[d] += dev * dev;
      }
    }
  for (size_t d = 0; d < dim; ++d) {
    st.stddev[d] = std::sqrt(st.stddev[d] / static_cast<double>(n));
    if (st.stddev[d] < 1e-8) st.stddev[d] = 1.0;
  }
  return st;
}

// Exact nearest-neighbor index over z-normalized points. The same NormStats
// is applied to every query, so distances live in one unit-free space.
struct NnIndex {
  NormStats norm;
  KdTree tree;

  NnIndex(const MatF& raw_points, const NormStats& st)
      : norm(st), tree(normalize_all(raw_points, st)) {}

  size_t size() const { return tree.size(); }
  size_t dim() const { return tree.dim(); }

  void normalize_query(const float* raw, float* out) const {
    for (size_t d = 0; d < norm.mean.size(); ++d)
      out[d] = static_cast<float>((raw[d] - norm.mean[d]) / norm.stddev[d]);
  }

 private:
  static MatF normalize_all(const MatF& raw, const NormStats& st) {
    if (raw.cols != st.mean.size())
      throw ValidationError("build_index: stats dimension differs from points");
    MatF out(raw.rows, raw.cols);
    for (size_t i = 0; i < raw.rows; ++i) {
      const float* r = raw.row(i);
      float* o = out.row(i);
      for (size_t d = 0; d < raw.cols; ++d)
        o[d] = static_cast<float>((r[d] - st.mean[d]) / st.stddev[d]);
    }
    return out;
  }
};

inline NnIndex build_index(const MatF& raw_points, const NormStats& st) {
  return NnIndex(raw_points, st);
}

namespace detail {

// k-th neighbor distance from an already-normalized query. exclude_self
// skips exactly one zero-distance match, so duplicate-but-distinct rows
// still count as neighbors.
inline double knn_distance_normalized(const KdTree& tree, const float* q,
                                      size_t k, bool exclude_self,
                                      std::vector<KdTree::Neighbor>& scratch) {
  const size_t want = exclude_self ? k + 1 : k;
  if (tree.size() < want)
    throw ValidationError(
        "knn_distance: k exceeds available neighbors (k=" + std::to_string(k) +
        ", points=" + std::to_string(tree.size()) +
        (exclude_self ? ", self-excluded)" : ")"));
  tree.query(q, want, scratch);
  if (exclude_self && scratch[0].d2 == 0.0) return std::sqrt(scratch[k].d2);
  return std::sqrt(scratch[k - 1].d2);
}

}  // namespace detail

inline double knn_distance(const NnIndex& index, const float* raw_query,
                           size_t k, bool exclude_self) {
  std::vector<float> q(index.dim());
  index.normalize_query(raw_query, q.data());
  std::vector<KdTree::Neighbor> scratch;
  return detail::knn_distance_normalized(index.tree, q.data(), k, exclude_self,
                                         scratch);
}

// Per-source-row domain-gap scores. rho is the log-ratio of the k-th target
// distance to the k-th (self-excluded) source distance; rho_hat shifts rho
// by the minimum over the scored rows and clamps at 0; weight = 1/(1+rho_hat)
// is in (0, 1], with 1 marking the most target-like row.
struct ScoreTable {
  int k = 0;
  double rho_min = 0.0;   // shift applied to get rho_hat
  size_t floored = 0;     // rows where the distance floor kicked in
  uint64_t fingerprint = 0;
  std::vector<double> rho;
  std::vector<double> rho_hat;
  std::vector<double> weight;

  size_t size() const { return rho.size(); }
};

inline uint64_t dataset_fingerprint(const TransitionDataset& ds) {
  uint64_t h = fnv1a64("dmcd", 4);
  const uint64_t meta[3] = {ds.n_rows(), ds.state_dim, ds.action_dim};
  h = fnv1a64(meta, sizeof(meta), h);
  return fnv1a64(ds.data.data(), ds.data.size() * sizeof(float), h);
}

namespace detail {

struct RawScores {
  std::vector<double> rho;
  size_t floored = 0;
};

// rho for arbitrary query points against fixed target/source trees.
// self_exclude_src is set when the queries are the source rows themselves.
inline RawScores rho_for_points(const MatF& pts_normalized,
                                const KdTree& tar_tree,
                                const KdTree& src_tree, size_t k,
                                bool self_exclude_src) {
  const size_t n = pts_normalized.rows;
  RawScores out;
  out.rho.assign(n, 0.0);
  std::atomic<size_t> floored{0};
  parallel_for(n, 1024, [&](size_t i0, size_t i1) {
    std::vector<KdTree::Neighbor> scratch;
    size_t local_floored = 0;
    for (size_t i = i0; i < i1; ++i) {
      const float* q = pts_normalized.row(i);
      double d_tar = knn_distance_normalized(tar_tree, q, k, false, scratch);
      double d_src =
          knn_distance_normalized(src_tree, q, k, self_exclude_src, scratch);
      if (d_tar < kDistanceFloor) {
        d_tar = kDistanceFloor;
        ++local_floored;
      }
      if (d_src < kDistanceFloor) {
        d_src = kDistanceFloor;
        ++local_floored;
      }
      out.rho[i] = std::log(d_tar) - std::log(d_src);
    }
    floored.fetch_add(local_floored, std::memory_order_relaxed);
  });
  out.floored = floored.load();
  return out;
}

}  // namespace detail

inline MatF sas_points(const TransitionDataset& ds) {
  MatF m(ds.n_rows(), 2 * ds.state_dim + ds.action_dim);
  for (size_t i = 0; i < ds.n_rows(); ++i) {
    float* o = m.row(i);
    std::copy(ds.s(i), ds.s(i) + ds.state_dim, o);
    std::copy(ds.a(i), ds.a(i) + ds.action_dim, o + ds.state_dim);
    std::copy(ds.next_s(i), ds.next_s(i) + ds.state_dim,
              o + ds.state_dim + ds.action_dim);
  }
  return m;
}

inline ScoreTable score_source(const TransitionDataset& src,
                               const TransitionDataset& tar, int k) {
  src.validate("score_source (source)");
  tar.validate("score_source (target)");
  if (src.state_dim != tar.state_dim || src.action_dim != tar.action_dim)
    throw ValidationError("score_source: dataset dimensions differ");
  if (k < 1) throw ValidationError("score_source: k must be >= 1");
  if (tar.n_rows() < static_cast<size_t>(k))
    throw ValidationError("score_source: target needs at least k rows");
  if (src.n_rows() < static_cast<size_t>(k) + 1)
    throw ValidationError("score_source: source needs at least k+1 rows");

  const MatF src_raw = sas_points(src);
  const MatF tar_raw = sas_points(tar);

  const NormStats st = points_union_stats({&src_raw, &tar_raw});
  const NnIndex tar_index(tar_raw, st);
  const NnIndex src_index(src_raw, st);

  MatF src_normalized(src_raw.rows, src_raw.cols);
  for (size_t i = 0; i < src_raw.rows; ++i)
    src_index.normalize_query(src_raw.row(i), src_normalized.row(i));

  auto raw = detail::rho_for_points(src_normalized, tar_index.tree,
                                    src_index.tree, static_cast<size_t>(k),
                                    /*self_exclude_src=*/true);

  ScoreTable t;
  t.k = k;
  t.floored = raw.floored;
  t.fingerprint = dataset_fingerprint(src);
  t.rho = std::move(raw.rho);
  t.rho_min = *std::min_element(t.rho.begin(), t.rho.end());
  t.rho_hat.resize(t.rho.size());
  t.weight.resize(t.rho.size());
  for (size_t i = 0; i < t.rho.size(); ++i) {
    t.rho_hat[i] = std::max(0.0, t.rho[i] - t.rho_min);
    t.weight[i] = 1.0 / (1.0 + t.rho_hat[i]);
  }
  return t;
}

// Domain-gap KL estimate between two point clouds:
//   (d/N) * sum_i [log nu_tar(i) - log nu_src(i)] + log(M/(N-1))
// with nu the k-th neighbor distance (source side self-excluded), computed
// in the shared normalized space. Per-block partials are folded serially so
// the result does not depend on thread count.
inline double kl_estimate_points(const MatF& src_pts, const MatF& tar_pts,
                                 int k) {
  if (k < 1) throw ValidationError("kl_estimate: k must be >= 1");
  if (src_pts.rows < static_cast<size_t>(k) + 1 ||
      tar_pts.rows < static_cast<size_t>(k))
    throw ValidationError("kl_estimate: too few rows for k");
  const NormStats st = points_union_stats({&src_pts, &tar_pts});
  const NnIndex tar_index(tar_pts, st);
  const NnIndex src_index(src_pts, st);
  const size_t n = src_pts.rows;
  MatF qn(n, src_pts.cols);
  for (size_t i = 0; i < n; ++i)
    src_index.normalize_query(src_pts.row(i), qn.row(i));

  const size_t grain = 1024;
  const size_t n_blocks = (n + grain - 1) / grain;
  std::vector<double> partial(n_blocks, 0.0);
  parallel_for(n, grain, [&](size_t i0, size_t i1) {
    std::vector<KdTree::Neighbor> scratch;
    double acc = 0.0;
    for (size_t i = i0; i < i1; ++i) {
      const float* q = qn.row(i);
      double d_tar = detail::knn_distance_normalized(
          tar_index.tree, q, static_cast<size_t>(k), false, scratch);
      double d_src = detail::knn_distance_normalized(
          src_index.tree, q, static_cast<size_t>(k), true, scratch);
      d_tar = std::max(d_tar, kDistanceFloor);
      d_src = std::max(d_src, kDistanceFloor);
      acc += std::log(d_tar) - std::log(d_src);
    }
    partial[i0 / grain] = acc;
  });
  double sum = 0.0;
  for (double p : partial) sum += p;
  const double d = static_cast<double>(src_pts.cols);
  const double N = static_cast<double>(n);
  const double M = static_cast<double>(tar_pts.rows);
  return (d / N) * sum + std::log(M / (N - 1.0));
}

inline double kl_estimate(const TransitionDataset& src,
                          const TransitionDataset& tar, int k) {
  src.validate("kl_estimate (source)");
  tar.validate("kl_estimate (target)");
  if (src.state_dim != tar.state_dim || src.action_dim != tar.action_dim)
    throw ValidationError("kl_estimate: dataset dimensions differ");
  return kl_estimate_points(sas_points(src), sas_points(tar), k);
}

// Threshold such that ceil(N*(1-xi/100)) rows have weight >= threshold;
// ties at the threshold keep every tied row. xi=0 keeps everything.
inline double quantile_threshold(const ScoreTable& table, double xi_percent) {
  if (table.size() == 0)
    throw ValidationError("quantile_threshold: empty score table");
  if (xi_percent < 0.0 || xi_percent >= 100.0)
    throw ValidationError("quantile_threshold: xi must be in [0, 100)");
  const size_t n = table.size();
  const size_t keep = static_cast<size_t>(
      std::ceil(static_cast<double>(n) * (1.0 - xi_percent / 100.0)));
  const size_t m = std::max<size_t>(1, std::min(keep, n));
  std::vector<double> w = table.weight;
  std::nth_element(w.begin(), w.begin() + static_cast<std::ptrdiff_t>(m - 1),
                   w.end(), std::greater<double>());
  return w[m - 1];
}

// ---- Classifier diagnostic (domain classifiers + DARA-style penalty) ----

struct ClassifierScores {
  std::vector<double> p_sa;     // p(target | s, a) per source row
  std::vector<double> p_sas;    // p(target | s, a, s') per source row
  std::vector<double> delta_r;  // logit difference, clipped to [-10, 10]
};

namespace detail {

// Binary cross-entropy training of a small MLP on logits. Returns the net.
inline MlpF train_binary_classifier(const MatF& feats,
                                    const std::vector<float>& labels,
                                    int epochs, Rng& rng) {
  const size_t n = feats.rows;
  const size_t batch = 256;
  auto net = make_mlp<float>({feats.cols, 64, 64, 1}, rng);
  auto adam = AdamState<float>::shaped(mlp_param_sizes(net), {});
  const size_t steps_per_epoch = (n + batch - 1) / batch;
  for (int e = 0; e < epochs; ++e) {
    for (size_t s = 0; s < steps_per_epoch; ++s) {
      const size_t b = std::min(batch, n);
      MatF x(b, feats.cols), up(b, 1);
      std::vector<float> y(b);
      for (size_t i = 0; i < b; ++i) {
        const size_t r = rng.index(n);
        std::copy(feats.row(r), feats.row(r) + feats.cols, x.row(i));
        y[i] = labels[r];
      }
      MlpCache<float> cache;
      auto z = mlp_forward(net, x, &cache);
      for (size_t i = 0; i < b; ++i) {
        // d/dz BCE(sigmoid(z), y) = sigmoid(z) - y, scaled by 1/b
        const double zi = z.at(i, 0);
        const double p = 1.0 / (1.0 + std::exp(-zi));
        up.at(i, 0) = static_cast<float>((p - y[i]) / static_cast<double>(b));
      }
      auto g = mlp_backward(net, cache, up);
      adam_step(mlp_param_refs(net, g), adam);
    }
  }
  return net;
}

}  // namespace detail

// Trains p(target | s,a) and p(target | s,a,s') on the naturally imbalanced
// pooled data and reports per-source-row probabilities plus the reward
// penalty delta_r = logit p_sas - logit p_sa clipped to [-10, 10].
inline ClassifierScores classifier_score(const TransitionDataset& src,
                                         const TransitionDataset& tar,
                                         int epochs, uint64_t seed) {
  src.validate("classifier_score (source)");
  tar.validate("classifier_score (target)");
  if (src.state_dim != tar.state_dim || src.action_dim != tar.action_dim)
    throw ValidationError("classifier_score: dataset dimensions differ");
  const size_t S = src.state_dim, A = src.action_dim;
  const size_t n_src = src.n_rows(), n_tar = tar.n_rows();

  const MatF src_sas = sas_points(src);
  const MatF tar_sas = sas_points(tar);
  const NormStats st = points_union_stats({&src_sas, &tar_sas});

  MatF feats(n_src + n_tar, 2 * S + A);
  std::vector<float> labels(n_src + n_tar);
  auto put = [&](size_t row, const MatF& from, size_t i, float label) {
    float* o = feats.row(row);
    const float* r = from.row(i);
    for (size_t d = 0; d < feats.cols; ++d)
      o[d] = static_cast<float>((r[d] - st.mean[d]) / st.stddev[d]);
    labels[row] = label;
  };
  for (size_t i = 0; i < n_src; ++i) put(i, src_sas, i, 0.0f);
  for (size_t i = 0; i < n_tar; ++i) put(n_src + i, tar_sas, i, 1.0f);

  MatF feats_sa(feats.rows, S + A);
  for (size_t i = 0; i < feats.rows; ++i)
    std::copy(feats.row(i), feats.row(i) + S + A, feats_sa.row(i));

  Rng rng_sa(derive_seed(seed, 1));
  Rng rng_sas(derive_seed(seed, 2));
  auto net_sa = detail::train_binary_classifier(feats_sa, labels, epochs, rng_sa);
  auto net_sas = detail::train_binary_classifier(feats, labels, epochs, rng_sas);

  ClassifierScores out;
  out.p_sa.resize(n_src);
  out.p_sas.resize(n_src);
  out.delta_r.resize(n_src);
  MatF xs_sa(n_src, S + A), xs_sas(n_src, 2 * S + A);
  for (size_t i = 0; i < n_src; ++i) {
    std::copy(feats.row(i), feats.row(i) + S + A, xs_sa.row(i));
    std::copy(feats.row(i), feats.row(i) + feats.cols, xs_sas.row(i));
  }
  auto z_sa = mlp_forward(net_sa, xs_sa);
  auto z_sas = mlp_forward(net_sas, xs_sas);
  for (size_t i = 0; i < n_src; ++i) {
    const double za = z_sa.at(i, 0), zs = z_sas.at(i, 0);
    out.p_sa[i] = 1.0 / (1.0 + std::exp(-za));
    out.p_sas[i] = 1.0 / (1.0 + std::exp(-zs));
    out.delta_r[i] = std::clamp(zs - za, -10.0, 10.0);
  }
  return out;
}

// ---- Nearest-neighbor distance histograms (log-distance axis) ----

struct DistanceHistogram {
  std::vector<double> bin_left;
  std::vector<double> bin_right;
  std::vector<uint64_t> count_src;  // source -> target 1-NN log distances
  std::vector<uint64_t> count_tar;  // target -> target self-excluded 1-NN
};

inline DistanceHistogram nn_distance_histogram(const TransitionDataset& src,
                                               const TransitionDataset& tar,
                                               size_t bins) {
  src.validate("nn_distance_histogram (source)");
  tar.validate("nn_distance_histogram (target)");
  if (bins < 1) throw ValidationError("nn_distance_histogram: bins >= 1");
  if (tar.n_rows() < 2)
    throw ValidationError("nn_distance_histogram: target needs >= 2 rows");
  const MatF src_pts = sas_points(src);
  const MatF tar_pts = sas_points(tar);
  const NormStats st = points_union_stats({&src_pts, &tar_pts});
  const NnIndex tar_index(tar_pts, st);

  std::vector<double> log_src(src_pts.rows), log_tar(tar_pts.rows);
  {
    std::vector<KdTree::Neighbor> scratch;
    std::vector<float> q(tar_index.dim());
    for (size_t i = 0; i < src_pts.rows; ++i) {
      tar_index.normalize_query(src_pts.row(i), q.data());
      const double d = std::max(
          detail::knn_distance_normalized(tar_index.tree, q.data(), 1, false,
                                          scratch),
          kDistanceFloor);
      log_src[i] = std::log(d);
    }
    for (size_t i = 0; i < tar_pts.rows; ++i) {
      tar_index.normalize_query(tar_pts.row(i), q.data());
      const double d = std::max(
          detail::knn_distance_normalized(tar_index.tree, q.data(), 1, true,
                                          scratch),
          kDistanceFloor);
      log_tar[i] = std::log(d);
    }
  }
  double lo = *std::min_element(log_src.begin(), log_src.end());
  double hi = *std::max_element(log_src.begin(), log_src.end());
  lo = std::min(lo, *std::min_element(log_tar.begin(), log_tar.end()));
  hi = std::max(hi, *std::max_element(log_tar.begin(), log_tar.end()));
  if (hi - lo < 1e-12) {
    lo -= 0.5;
    hi += 0.5;
  }
  DistanceHistogram h;
  h.bin_left.resize(bins);
  h.bin_right.resize(bins);
  h.count_src.assign(bins, 0);
  h.count_tar.assign(bins, 0);
  const double width = (hi - lo) / static_cast<double>(bins);
  for (size_t b = 0; b < bins; ++b) {
    h.bin_left[b] = lo + width * static_cast<double>(b);
    h.bin_right[b] = b + 1 == bins ? hi : lo + width * static_cast<double>(b + 1);
  }
  auto bucket = [&](double v) {
    size_t b = static_cast<size_t>((v - lo) / width);
    return std::min(b, bins - 1);
  };
  for (double v : log_src) h.count_src[bucket(v)] += 1;
  for (double v : log_tar) h.count_tar[bucket(v)] += 1;
  return h;
}

// ---- CSV interfaces ----

inline void save_scores_csv(const ScoreTable& t, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open for writing: " + path);
  // Metadata line carries provenance: k, the fingerprint of the dataset the
  // scores were computed from, and how many rows hit the distance floor.
  char meta[96];
  std::snprintf(meta, sizeof(meta), "# k=%d fingerprint=%s floored=%zu\n",
                t.k, hex64(t.fingerprint).c_str(), t.floored);
  os << meta;
  os << "row,rho,rho_hat,weight\n";
  char buf[160];
  for (size_t i = 0; i < t.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%zu,%.9g,%.9g,%.9g\n", i, t.rho[i],
                  t.rho_hat[i], t.weight[i]);
    os << buf;
  }
  if (!os) throw IoError("failed writing scores: " + path);
}

inline ScoreTable load_scores_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open for reading: " + path);
  std::string line;
  ScoreTable t;
  if (!std::getline(is, line) || line.substr(0, 4) != "# k=")
    throw ValidationError("score table metadata line missing: " + path);
  {
    unsigned long long fp = 0;
    unsigned long long floored = 0;
    if (std::sscanf(line.c_str(), "# k=%d fingerprint=%llx floored=%llu",
                    &t.k, &fp, &floored) != 3 ||
        t.k < 1)
      throw ValidationError("score table metadata malformed: " + path);
    t.fingerprint = fp;
    t.floored = static_cast<size_t>(floored);
  }
  if (!std::getline(is, line) ||
      line.substr(0, 22) != "row,rho,rho_hat,weight")
    throw ValidationError("score table header mismatch: " + path);
  size_t expect = 0;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    double vals[4];
    for (int j = 0; j < 4; ++j) {
      if (!std::getline(ss, cell, ','))
        throw ValidationError("score table row too short: " + path);
      vals[j] = std::stod(cell);
    }
    if (static_cast<size_t>(vals[0]) != expect)
      throw ValidationError("score table rows out of order: " + path);
    if (!(vals[3] > 0.0 && vals[3] <= 1.0))
      throw ValidationError("score table weight outside (0,1]: " + path);
    if (vals[2] < 0.0)
      throw ValidationError("score table rho_hat negative: " + path);
    t.rho.push_back(vals[1]);
    t.rho_hat.push_back(vals[2]);
    t.weight.push_back(vals[3]);
    ++expect;
  }
  if (t.size() == 0) throw ValidationError("score table empty: " + path);
  t.rho_min = *std::min_element(t.rho.begin(), t.rho.end());
  return t;
}

inline void save_histogram_csv(const DistanceHistogram& h,
                               const std::string& path,
                               const std::string& note = "") {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open for writing: " + path);
  if (!note.empty()) os << "# " << note << "\n";
  os << "bin_left,bin_right,count_src,count_tar\n";
  char buf[160];
  for (size_t b = 0; b < h.bin_left.size(); ++b) {
    std::snprintf(buf, sizeof(buf), "%.9g,%.9g,%llu,%llu\n", h.bin_left[b],
                  h.bin_right[b],
                  static_cast<unsigned long long>(h.count_src[b]),
                  static_cast<unsigned long long>(h.count_tar[b]));
    os << buf;
  }
  if (!os) throw IoError("failed writing histogram: " + path);
}

}  // namespace dmc

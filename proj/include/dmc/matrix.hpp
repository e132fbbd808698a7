#pragma once

#include <cstddef>
#include <stdexcept>
#include <type_traits>
#include <vector>

#include "dmc/thread_pool.hpp"

namespace dmc {

// Dense row-major matrix. T is float in production paths; tests instantiate
// double to build high-precision oracles from the same code.
template <typename T>
struct Mat {
  size_t rows = 0;
  size_t cols = 0;
  std::vector<T> data;

  Mat() = default;
  Mat(size_t r, size_t c) : rows(r), cols(c), data(r * c, T(0)) {}

  T* row(size_t i) { return data.data() + i * cols; }
  const T* row(size_t i) const { return data.data() + i * cols; }
  T& at(size_t i, size_t j) { return data[i * cols + j]; }
  const T& at(size_t i, size_t j) const { return data[i * cols + j]; }
  size_t size() const { return data.size(); }
  void fill(T v) { data.assign(rows * cols, v); }
};

using MatF = Mat<float>;

namespace detail {
inline void check(bool ok, const char* what) {
  if (!ok) throw std::invalid_argument(what);
}
// Threading pays off only for large products; small ones run inline.
constexpr size_t kParallelFlops = size_t(1) << 21;

// f32 GEMM micro-kernels. Every output element is one ascending-k chain of
// fused multiply-adds, identical across tile widths and thread partitions;
// only the schedule (how many elements advance per instruction) differs.
// Keeping the C tile in registers instead of re-loading the output row per k
// is what moves the throughput, not any change to the arithmetic.
typedef float Vf16 __attribute__((vector_size(64), aligned(4)));
constexpr size_t kVf = 16;

// One MR x 64 tile of C = op(A) @ B, op = transpose when TransA.
template <bool TransA, size_t MR>
inline void sgemm_tile64(const float* A, size_t lda, const float* B,
                         size_t ldb, float* C, size_t ldc, size_t i0,
                         size_t j0, size_t K) {
  Vf16 acc[MR][4];
  for (size_t r = 0; r < MR; ++r)
    for (size_t q = 0; q < 4; ++q) acc[r][q] = Vf16{};
  for (size_t k = 0; k < K; ++k) {
    const float* bk = B + k * ldb + j0;
    const Vf16 b0 = *reinterpret_cast<const Vf16*>(bk);
    const Vf16 b1 = *reinterpret_cast<const Vf16*>(bk + kVf);
    const Vf16 b2 = *reinterpret_cast<const Vf16*>(bk + 2 * kVf);
    const Vf16 b3 = *reinterpret_cast<const Vf16*>(bk + 3 * kVf);
    for (size_t r = 0; r < MR; ++r) {
      const Vf16 av =
          Vf16{} + (TransA ? A[k * lda + i0 + r] : A[(i0 + r) * lda + k]);
      acc[r][0] += av * b0;
      acc[r][1] += av * b1;
      acc[r][2] += av * b2;
      acc[r][3] += av * b3;
    }
  }
  for (size_t r = 0; r < MR; ++r)
    for (size_t q = 0; q < 4; ++q)
      *reinterpret_cast<Vf16*>(C + (i0 + r) * ldc + j0 + q * kVf) = acc[r][q];
}

template <bool TransA, size_t MR>
inline void sgemm_tile16(const float* A, size_t lda, const float* B,
                         size_t ldb, float* C, size_t ldc, size_t i0,
                         size_t j0, size_t K) {
  Vf16 acc[MR];
  for (size_t r = 0; r < MR; ++r) acc[r] = Vf16{};
  for (size_t k = 0; k < K; ++k) {
    const Vf16 bk = *reinterpret_cast<const Vf16*>(B + k * ldb + j0);
    for (size_t r = 0; r < MR; ++r) {
      const Vf16 av =
          Vf16{} + (TransA ? A[k * lda + i0 + r] : A[(i0 + r) * lda + k]);
      acc[r] += av * bk;
    }
  }
  for (size_t r = 0; r < MR; ++r)
    *reinterpret_cast<Vf16*>(C + (i0 + r) * ldc + j0) = acc[r];
}

template <bool TransA, size_t MR>
inline void sgemm_panel(const float* A, size_t lda, const float* B,
                        size_t ldb, float* C, size_t ldc, size_t i0, size_t K,
                        size_t N) {
  size_t j = 0;
  for (; j + 4 * kVf <= N; j += 4 * kVf)
    sgemm_tile64<TransA, MR>(A, lda, B, ldb, C, ldc, i0, j, K);
  for (; j + kVf <= N; j += kVf)
    sgemm_tile16<TransA, MR>(A, lda, B, ldb, C, ldc, i0, j, K);
  for (; j < N; ++j) {
    for (size_t r = 0; r < MR; ++r) {
      float acc = 0.0f;
      for (size_t k = 0; k < K; ++k) {
        const float av = TransA ? A[k * lda + i0 + r] : A[(i0 + r) * lda + k];
        acc = __builtin_fmaf(av, B[k * ldb + j], acc);
      }
      C[(i0 + r) * ldc + j] = acc;
    }
  }
}

// Rows [m0, m1) of C = op(A) @ B. Rows are independent, so any partition of
// the row range yields identical bits.
template <bool TransA>
inline void sgemm_rows(const float* A, size_t lda, const float* B, size_t ldb,
                       float* C, size_t ldc, size_t m0, size_t m1, size_t K,
                       size_t N) {
  size_t i = m0;
  for (; i + 4 <= m1; i += 4)
    sgemm_panel<TransA, 4>(A, lda, B, ldb, C, ldc, i, K, N);
  for (; i < m1; ++i) sgemm_panel<TransA, 1>(A, lda, B, ldb, C, ldc, i, K, N);
}

}  // namespace detail

// C = A @ B. Every output element accumulates over k in ascending order, so
// results are identical for any thread count or partition. The f32 path runs
// the register-tiled kernel; other element types keep the plain i-k-j axpy
// (tests instantiate double for oracles, where throughput is irrelevant).
template <typename T>
void matmul(const Mat<T>& a, const Mat<T>& b, Mat<T>& c) {
  detail::check(a.cols == b.rows, "matmul: inner dims differ");
  c.rows = a.rows;
  c.cols = b.cols;
  c.data.assign(a.rows * b.cols, T(0));
  auto body = [&](size_t i0, size_t i1) {
    if constexpr (std::is_same_v<T, float>) {
      detail::sgemm_rows<false>(a.data.data(), a.cols, b.data.data(), b.cols,
                                c.data.data(), c.cols, i0, i1, a.cols,
                                b.cols);
    } else {
      for (size_t i = i0; i < i1; ++i) {
        T* ci = c.row(i);
        const T* ai = a.row(i);
        for (size_t k = 0; k < a.cols; ++k) {
          const T aik = ai[k];
          const T* bk = b.row(k);
          for (size_t j = 0; j < b.cols; ++j) ci[j] += aik * bk[j];
        }
      }
    }
  };
  const size_t flops = a.rows * a.cols * b.cols;
  if (flops >= detail::kParallelFlops && ThreadPool::instance().size() > 1) {
    const size_t grain = std::max<size_t>(1, a.rows / 64);
    parallel_for(a.rows, grain, body);
  } else {
    body(0, a.rows);
  }
}

// C = A @ B^T. Materializes B^T in thread-local scratch and reuses the axpy
// kernel: a row-dot formulation cannot vectorize without reassociating the
// reduction, while this path keeps the exact ascending-k summation order of
// the naive dot product.
template <typename T>
void matmul_nt(const Mat<T>& a, const Mat<T>& b, Mat<T>& c) {
  detail::check(a.cols == b.cols, "matmul_nt: inner dims differ");
  static thread_local Mat<T> bt;
  bt.rows = b.cols;
  bt.cols = b.rows;
  bt.data.resize(b.size());
  for (size_t i = 0; i < b.rows; ++i)
    for (size_t j = 0; j < b.cols; ++j) bt.at(j, i) = b.at(i, j);
  matmul(a, bt, c);
}

// C = A^T @ B. Same per-element ascending-k contract as matmul; the f32 path
// feeds the shared kernel with transposed A indexing. Serial: the shapes hit
// by backward passes are too small for threading to pay.
template <typename T>
void matmul_tn(const Mat<T>& a, const Mat<T>& b, Mat<T>& c) {
  detail::check(a.rows == b.rows, "matmul_tn: inner dims differ");
  c.rows = a.cols;
  c.cols = b.cols;
  c.data.assign(a.cols * b.cols, T(0));
  if constexpr (std::is_same_v<T, float>) {
    detail::sgemm_rows<true>(a.data.data(), a.cols, b.data.data(), b.cols,
                             c.data.data(), c.cols, 0, a.cols, a.rows,
                             b.cols);
    return;
  }
  for (size_t k = 0; k < a.rows; ++k) {
    const T* ak = a.row(k);
    const T* bk = b.row(k);
    for (size_t i = 0; i < a.cols; ++i) {
      const T aki = ak[i];
      T* ci = c.row(i);
      for (size_t j = 0; j < b.cols; ++j) ci[j] += aki * bk[j];
    }
  }
}

template <typename T>
Mat<T> transpose(const Mat<T>& a) {
  Mat<T> t(a.cols, a.rows);
  for (size_t i = 0; i < a.rows; ++i)
    for (size_t j = 0; j < a.cols; ++j) t.at(j, i) = a.at(i, j);
  return t;
}

}  // namespace dmc

#pragma once

#include <algorithm>
#include <cstddef>
#include <cstring>

#include "parallel.hpp"

namespace surf2ct::detail {

// C[M,N] (+)= A[M,K] * B[K,N], all row-major with explicit leading dimensions.
// Register tile: 8 rows x 2 SIMD vectors. Column panels are distributed across the
// pool; each output element is always produced by the same instruction sequence, so
// results do not depend on the thread count.
template <class T>
struct GemmTraits {
  static constexpr std::size_t kVecBytes = 64;
  static constexpr std::size_t kLanes = kVecBytes / sizeof(T);
  typedef T Vec __attribute__((vector_size(kVecBytes), aligned(sizeof(T))));
  static constexpr std::size_t kRows = 8;
  static constexpr std::size_t kVecs = 2;
  static constexpr std::size_t kCols = kLanes * kVecs;
};

template <class T>
inline void gemm_tile_full(std::size_t K, const T* A, std::size_t lda, const T* B, std::size_t ldb,
                           T* C, std::size_t ldc, bool accumulate) {
  using Tr = GemmTraits<T>;
  using Vec = typename Tr::Vec;
  constexpr std::size_t R = Tr::kRows;
  constexpr std::size_t V = Tr::kVecs;
  constexpr std::size_t L = Tr::kLanes;
  Vec acc[R][V];
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t v = 0; v < V; ++v) acc[r][v] = Vec{} ;
  for (std::size_t k = 0; k < K; ++k) {
    Vec b[V];
    const T* brow = B + k * ldb;
    for (std::size_t v = 0; v < V; ++v) std::memcpy(&b[v], brow + v * L, sizeof(Vec));
    for (std::size_t r = 0; r < R; ++r) {
      const T a = A[r * lda + k];
      for (std::size_t v = 0; v < V; ++v) acc[r][v] += a * b[v];
    }
  }
  for (std::size_t r = 0; r < R; ++r) {
    T* crow = C + r * ldc;
    for (std::size_t v = 0; v < V; ++v) {
      if (accumulate) {
        Vec c;
        std::memcpy(&c, crow + v * L, sizeof(Vec));
        acc[r][v] += c;
      }
      std::memcpy(crow + v * L, &acc[r][v], sizeof(Vec));
    }
  }
}

// Generic edge tile for partial rows/columns.
template <class T>
inline void gemm_tile_edge(std::size_t rows, std::size_t cols, std::size_t K, const T* A,
                           std::size_t lda, const T* B, std::size_t ldb, T* C, std::size_t ldc,
                           bool accumulate) {
  constexpr std::size_t MaxC = GemmTraits<T>::kCols;
  T acc[GemmTraits<T>::kRows][MaxC];
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) acc[r][c] = T{0};
  for (std::size_t k = 0; k < K; ++k) {
    const T* brow = B + k * ldb;
    for (std::size_t r = 0; r < rows; ++r) {
      const T a = A[r * lda + k];
#pragma omp simd
      for (std::size_t c = 0; c < cols; ++c) acc[r][c] += a * brow[c];
    }
  }
  for (std::size_t r = 0; r < rows; ++r) {
    T* crow = C + r * ldc;
    for (std::size_t c = 0; c < cols; ++c) crow[c] = accumulate ? crow[c] + acc[r][c] : acc[r][c];
  }
}

template <class T>
void gemm_nn(std::size_t M, std::size_t N, std::size_t K, const T* A, std::size_t lda, const T* B,
             std::size_t ldb, T* C, std::size_t ldc, bool accumulate) {
  if (M == 0 || N == 0) return;
  if (K == 0) {
    if (!accumulate)
      for (std::size_t i = 0; i < M; ++i) std::fill(C + i * ldc, C + i * ldc + N, T{0});
    return;
  }
  using Tr = GemmTraits<T>;
  constexpr std::size_t R = Tr::kRows;
  constexpr std::size_t NC = Tr::kCols;
  const std::size_t panels = (N + NC - 1) / NC;
  auto body = [&](std::size_t p0, std::size_t p1) {
    for (std::size_t p = p0; p < p1; ++p) {
      const std::size_t j = p * NC;
      const std::size_t cols = std::min(NC, N - j);
      for (std::size_t i = 0; i < M; i += R) {
        const std::size_t rows = std::min(R, M - i);
        if (rows == R && cols == NC) {
          gemm_tile_full<T>(K, A + i * lda, lda, B + j, ldb, C + i * ldc + j, ldc, accumulate);
        } else {
          gemm_tile_edge<T>(rows, cols, K, A + i * lda, lda, B + j, ldb, C + i * ldc + j, ldc,
                            accumulate);
        }
      }
    }
  };
  // Parallel only when the product is large enough to amortize the dispatch.
  if (M * N * K >= (1u << 18) && panels > 1) {
    parallel_for(panels, body);
  } else {
    body(0, panels);
  }
}

template <class T>
void transpose(std::size_t rows, std::size_t cols, const T* src, T* dst) {
  constexpr std::size_t B = 32;
  for (std::size_t i0 = 0; i0 < rows; i0 += B)
    for (std::size_t j0 = 0; j0 < cols; j0 += B) {
      const std::size_t i1 = std::min(rows, i0 + B), j1 = std::min(cols, j0 + B);
      for (std::size_t i = i0; i < i1; ++i)
        for (std::size_t j = j0; j < j1; ++j) dst[j * rows + i] = src[i * cols + j];
    }
}

}  // namespace surf2ct::detail

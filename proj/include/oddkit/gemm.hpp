#pragma once

#include <cstdint>
#include <cstring>
#include <vector>

namespace oddkit {

// Dense matrix kernels used by the conv/dense layers. The (i,p,j) loop order
// keeps the innermost loop a contiguous axpy, which vectorizes without
// reassociation, so results are bit-stable across -O levels.

/// C[m,n] = A[m,k] * B[k,n]
template <typename T>
void gemm_nn(std::int64_t m, std::int64_t k, std::int64_t n, const T* A, const T* B, T* C) {
  for (std::int64_t i = 0; i < m; ++i) {
    T* c = C + i * n;
    for (std::int64_t j = 0; j < n; ++j) c[j] = T(0);
    const T* a = A + i * k;
    for (std::int64_t p = 0; p < k; ++p) {
      T ap = a[p];
      if (ap == T(0)) continue;
      const T* b = B + p * n;
      for (std::int64_t j = 0; j < n; ++j) c[j] += ap * b[j];
    }
  }
}

/// C[m,n] += A[m,k] * B[k,n]
template <typename T>
void gemm_nn_acc(std::int64_t m, std::int64_t k, std::int64_t n, const T* A, const T* B, T* C) {
  for (std::int64_t i = 0; i < m; ++i) {
    T* c = C + i * n;
    const T* a = A + i * k;
    for (std::int64_t p = 0; p < k; ++p) {
      T ap = a[p];
      if (ap == T(0)) continue;
      const T* b = B + p * n;
      for (std::int64_t j = 0; j < n; ++j) c[j] += ap * b[j];
    }
  }
}

/// C[k,n] += A[m,k]^T * B[m,n]
template <typename T>
void gemm_tn_acc(std::int64_t m, std::int64_t k, std::int64_t n, const T* A, const T* B, T* C) {
  for (std::int64_t i = 0; i < m; ++i) {
    const T* a = A + i * k;
    const T* b = B + i * n;
    for (std::int64_t p = 0; p < k; ++p) {
      T ap = a[p];
      if (ap == T(0)) continue;
      T* c = C + p * n;
      for (std::int64_t j = 0; j < n; ++j) c[j] += ap * b[j];
    }
  }
}

template <typename T>
void transpose(std::int64_t rows, std::int64_t cols, const T* A, T* At) {
  for (std::int64_t i = 0; i < rows; ++i)
    for (std::int64_t j = 0; j < cols; ++j) At[j * rows + i] = A[i * cols + j];
}

/// C[m,n] = A[m,k] * B[n,k]^T. Goes through a transposed copy of B so the
/// inner loop stays contiguous; B is a kernel matrix, small next to A.
template <typename T>
void gemm_nt(std::int64_t m, std::int64_t k, std::int64_t n, const T* A, const T* B, T* C,
             std::vector<T>& scratch) {
  scratch.resize(static_cast<std::size_t>(k * n));
  transpose(n, k, B, scratch.data());
  gemm_nn(m, k, n, A, scratch.data(), C);
}

}  // namespace oddkit

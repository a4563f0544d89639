#pragma once

// Dense float kernels behind the training loops. Two implementations exist:
// a scalar reference and an AVX2 variant; one is selected at runtime (see
// active()). The generic templates below are the reference semantics and are
// used directly for non-float scalar types (the test suite instantiates the
// training math at double for finite-difference checks).
//
// Contract notes:
//  - affine_backward_input overwrites dx; everything else with "accumulate"
//    in the name adds into its output.
//  - Elementwise kernels (axpy, accumulate_outer, relu_*, sgd_update) are
//    bit-identical between the scalar and AVX2 variants. Reduction kernels
//    (dot, affine_forward) may differ by rounding/reassociation and are
//    equivalence-tested under tolerance.

#include <cstddef>

namespace ptleak::kernels {

struct Kernels {
  const char* name;
  float (*dot)(const float* x, const float* y, size_t n);
  // y += a * x
  void (*axpy)(float a, const float* x, float* y, size_t n);
  // y = W x + b; W is out x in, row-major
  void (*affine_forward)(const float* w, const float* b, const float* x,
                         float* y, size_t out, size_t in);
  // dx = W^T delta (overwrites dx)
  void (*affine_backward_input)(const float* w, const float* delta, float* dx,
                                size_t out, size_t in);
  // wgrad += delta x^T
  void (*accumulate_outer)(const float* delta, const float* x, float* wgrad,
                           size_t out, size_t in);
  void (*relu_forward)(const float* x, float* y, size_t n);
  // dx = dy where pre > 0, else 0 (dx may alias dy)
  void (*relu_backward)(const float* pre, const float* dy, float* dx,
                        size_t n);
  // w -= lr * (g * inv_m + lambda * w)
  void (*sgd_update)(float* w, const float* g, float lr, float inv_m,
                     float lambda, size_t n);
};

// Scalar reference table.
const Kernels& scalar();

// AVX2 table, or nullptr when the build target or the running CPU lacks AVX2.
const Kernels* avx2();

// Selected once per process: AVX2 when available, else scalar. The
// PTLEAK_KERNELS environment variable ("scalar" or "avx2") overrides.
const Kernels& active();

// ---- generic reference kernels ----

template <typename T>
inline T dot_ref(const T* x, const T* y, size_t n) {
  T acc = T(0);
  for (size_t i = 0; i < n; ++i) acc += x[i] * y[i];
  return acc;
}

template <typename T>
inline void axpy_ref(T a, const T* x, T* y, size_t n) {
  for (size_t i = 0; i < n; ++i) y[i] += a * x[i];
}

template <typename T>
inline void affine_forward_ref(const T* w, const T* b, const T* x, T* y,
                               size_t out, size_t in) {
  for (size_t r = 0; r < out; ++r) {
    const T* row = w + r * in;
    T acc = b[r];
    for (size_t c = 0; c < in; ++c) acc += row[c] * x[c];
    y[r] = acc;
  }
}

template <typename T>
inline void affine_backward_input_ref(const T* w, const T* delta, T* dx,
                                      size_t out, size_t in) {
  for (size_t c = 0; c < in; ++c) dx[c] = T(0);
  for (size_t r = 0; r < out; ++r) axpy_ref(delta[r], w + r * in, dx, in);
}

template <typename T>
inline void accumulate_outer_ref(const T* delta, const T* x, T* wgrad,
                                 size_t out, size_t in) {
  for (size_t r = 0; r < out; ++r) axpy_ref(delta[r], x, wgrad + r * in, in);
}

template <typename T>
inline void relu_forward_ref(const T* x, T* y, size_t n) {
  for (size_t i = 0; i < n; ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
}

template <typename T>
inline void relu_backward_ref(const T* pre, const T* dy, T* dx, size_t n) {
  for (size_t i = 0; i < n; ++i) dx[i] = pre[i] > T(0) ? dy[i] : T(0);
}

template <typename T>
inline void sgd_update_ref(T* w, const T* g, T lr, T inv_m, T lambda,
                           size_t n) {
  for (size_t i = 0; i < n; ++i) w[i] -= lr * (g[i] * inv_m + lambda * w[i]);
}

}  // namespace ptleak::kernels

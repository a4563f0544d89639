// AVX2 kernel variants. Compiled with -mavx2 -mfma on x86-64; the table is
// only handed out when the running CPU reports AVX2+FMA support, so the rest
// of the binary stays runnable on older machines.
//
// Elementwise kernels use mul+add (not FMA) so they match the scalar
// reference bit for bit; the dot/affine_forward reductions use FMA and an
// 8-lane accumulator and are therefore only tolerance-equal.

#include "ptleak/kernels.hpp"

#if defined(__AVX2__) && defined(__FMA__)

#include <immintrin.h>

namespace ptleak::kernels {
namespace {

inline float hsum256(__m256 v) {
  __m128 lo = _mm256_castps256_ps128(v);
  __m128 hi = _mm256_extractf128_ps(v, 1);
  lo = _mm_add_ps(lo, hi);
  __m128 shuf = _mm_movehdup_ps(lo);
  __m128 sums = _mm_add_ps(lo, shuf);
  shuf = _mm_movehl_ps(shuf, sums);
  sums = _mm_add_ss(sums, shuf);
  return _mm_cvtss_f32(sums);
}

float dot_avx2(const float* x, const float* y, size_t n) {
  __m256 acc = _mm256_setzero_ps();
  size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    __m256 vx = _mm256_loadu_ps(x + i);
    __m256 vy = _mm256_loadu_ps(y + i);
    acc = _mm256_fmadd_ps(vx, vy, acc);
  }
  float sum = hsum256(acc);
  for (; i < n; ++i) sum += x[i] * y[i];
  return sum;
}

void axpy_avx2(float a, const float* x, float* y, size_t n) {
  __m256 va = _mm256_set1_ps(a);
  size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    __m256 vx = _mm256_loadu_ps(x + i);
    __m256 vy = _mm256_loadu_ps(y + i);
    vy = _mm256_add_ps(vy, _mm256_mul_ps(va, vx));
    _mm256_storeu_ps(y + i, vy);
  }
  for (; i < n; ++i) y[i] += a * x[i];
}

void affine_forward_avx2(const float* w, const float* b, const float* x,
                         float* y, size_t out, size_t in) {
  for (size_t r = 0; r < out; ++r) {
    const float* row = w + r * in;
    __m256 acc = _mm256_setzero_ps();
    size_t c = 0;
    for (; c + 8 <= in; c += 8) {
      __m256 vw = _mm256_loadu_ps(row + c);
      __m256 vx = _mm256_loadu_ps(x + c);
      acc = _mm256_fmadd_ps(vw, vx, acc);
    }
    float sum = b[r] + hsum256(acc);
    for (; c < in; ++c) sum += row[c] * x[c];
    y[r] = sum;
  }
}

void affine_backward_input_avx2(const float* w, const float* delta, float* dx,
                                size_t out, size_t in) {
  size_t c = 0;
  for (; c + 8 <= in; c += 8) _mm256_storeu_ps(dx + c, _mm256_setzero_ps());
  for (; c < in; ++c) dx[c] = 0.0f;
  for (size_t r = 0; r < out; ++r) axpy_avx2(delta[r], w + r * in, dx, in);
}

void accumulate_outer_avx2(const float* delta, const float* x, float* wgrad,
                           size_t out, size_t in) {
  for (size_t r = 0; r < out; ++r) axpy_avx2(delta[r], x, wgrad + r * in, in);
}

void relu_forward_avx2(const float* x, float* y, size_t n) {
  __m256 zero = _mm256_setzero_ps();
  size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    __m256 vx = _mm256_loadu_ps(x + i);
    _mm256_storeu_ps(y + i, _mm256_max_ps(vx, zero));
  }
  for (; i < n; ++i) y[i] = x[i] > 0.0f ? x[i] : 0.0f;
}

void relu_backward_avx2(const float* pre, const float* dy, float* dx,
                        size_t n) {
  __m256 zero = _mm256_setzero_ps();
  size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    __m256 vp = _mm256_loadu_ps(pre + i);
    __m256 vdy = _mm256_loadu_ps(dy + i);
    __m256 mask = _mm256_cmp_ps(vp, zero, _CMP_GT_OQ);
    _mm256_storeu_ps(dx + i, _mm256_and_ps(vdy, mask));
  }
  for (; i < n; ++i) dx[i] = pre[i] > 0.0f ? dy[i] : 0.0f;
}

void sgd_update_avx2(float* w, const float* g, float lr, float inv_m,
                     float lambda, size_t n) {
  __m256 vlr = _mm256_set1_ps(lr);
  __m256 vim = _mm256_set1_ps(inv_m);
  __m256 vla = _mm256_set1_ps(lambda);
  size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    __m256 vw = _mm256_loadu_ps(w + i);
    __m256 vg = _mm256_loadu_ps(g + i);
    __m256 step = _mm256_add_ps(_mm256_mul_ps(vg, vim), _mm256_mul_ps(vla, vw));
    vw = _mm256_sub_ps(vw, _mm256_mul_ps(vlr, step));
    _mm256_storeu_ps(w + i, vw);
  }
  for (; i < n; ++i) w[i] -= lr * (g[i] * inv_m + lambda * w[i]);
}

const Kernels avx2_table = {
    "avx2",
    dot_avx2,
    axpy_avx2,
    affine_forward_avx2,
    affine_backward_input_avx2,
    accumulate_outer_avx2,
    relu_forward_avx2,
    relu_backward_avx2,
    sgd_update_avx2,
};

bool cpu_supported() {
  __builtin_cpu_init();
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
}

}  // namespace

const Kernels* avx2() {
  static const bool ok = cpu_supported();
  return ok ? &avx2_table : nullptr;
}

}  // namespace ptleak::kernels

#else  // non-AVX2 build target

namespace ptleak::kernels {
const Kernels* avx2() { return nullptr; }
}  // namespace ptleak::kernels

#endif

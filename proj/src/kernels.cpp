// Scalar kernel table and runtime selection. This translation unit is built
// with -ffp-contract=off so the reference semantics are plain IEEE mul+add,
// matching the non-FMA elementwise paths of the AVX2 variant bit for bit.

#include "ptleak/kernels.hpp"

#include <cstdlib>
#include <cstring>

namespace ptleak::kernels {

namespace {

float dot_scalar(const float* x, const float* y, size_t n) {
  return dot_ref<float>(x, y, n);
}
void axpy_scalar(float a, const float* x, float* y, size_t n) {
  axpy_ref<float>(a, x, y, n);
}
void affine_forward_scalar(const float* w, const float* b, const float* x,
                           float* y, size_t out, size_t in) {
  affine_forward_ref<float>(w, b, x, y, out, in);
}
void affine_backward_input_scalar(const float* w, const float* delta,
                                  float* dx, size_t out, size_t in) {
  affine_backward_input_ref<float>(w, delta, dx, out, in);
}
void accumulate_outer_scalar(const float* delta, const float* x, float* wgrad,
                             size_t out, size_t in) {
  accumulate_outer_ref<float>(delta, x, wgrad, out, in);
}
void relu_forward_scalar(const float* x, float* y, size_t n) {
  relu_forward_ref<float>(x, y, n);
}
void relu_backward_scalar(const float* pre, const float* dy, float* dx,
                          size_t n) {
  relu_backward_ref<float>(pre, dy, dx, n);
}
void sgd_update_scalar(float* w, const float* g, float lr, float inv_m,
                       float lambda, size_t n) {
  sgd_update_ref<float>(w, g, lr, inv_m, lambda, n);
}

const Kernels scalar_table = {
    "scalar",
    dot_scalar,
    axpy_scalar,
    affine_forward_scalar,
    affine_backward_input_scalar,
    accumulate_outer_scalar,
    relu_forward_scalar,
    relu_backward_scalar,
    sgd_update_scalar,
};

const Kernels& select() {
  if (const char* env = std::getenv("PTLEAK_KERNELS")) {
    if (std::strcmp(env, "scalar") == 0) return scalar_table;
    if (std::strcmp(env, "avx2") == 0 && avx2() != nullptr) return *avx2();
    // Unknown value or unavailable variant: fall through to auto-selection.
  }
  if (const Kernels* k = avx2()) return *k;
  return scalar_table;
}

}  // namespace

const Kernels& scalar() { return scalar_table; }

const Kernels& active() {
  static const Kernels& chosen = select();
  return chosen;
}

}  // namespace ptleak::kernels

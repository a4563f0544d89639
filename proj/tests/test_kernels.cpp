#include <cmath>
#include <cstdlib>
#include <string>
#include <vector>

#include "doctest.h"
#include "ptleak/kernels.hpp"
#include "ptleak/rng.hpp"

using namespace ptleak;

namespace {

std::vector<float> random_vec(size_t n, uint64_t seed) {
  rng::Prng gen(seed);
  std::vector<float> v(n);
  for (auto& x : v) x = static_cast<float>(gen.normal());
  return v;
}

// Sizes straddling the 8-lane AVX2 width, including remainders.
const size_t kSizes[] = {1, 2, 3, 7, 8, 9, 15, 16, 17, 31, 64, 100, 257};

}  // namespace

TEST_CASE("scalar kernels match the generic reference exactly") {
  const kernels::Kernels& k = kernels::scalar();
  for (size_t n : kSizes) {
    auto x = random_vec(n, rng::derive(1, "x", n));
    auto y = random_vec(n, rng::derive(1, "y", n));

    CHECK(k.dot(x.data(), y.data(), n) ==
          kernels::dot_ref(x.data(), y.data(), n));

    auto y1 = y, y2 = y;
    k.axpy(0.37f, x.data(), y1.data(), n);
    kernels::axpy_ref(0.37f, x.data(), y2.data(), n);
    CHECK(y1 == y2);
  }
}

TEST_CASE("avx2 elementwise kernels are bit-identical to scalar") {
  const kernels::Kernels* v = kernels::avx2();
  if (v == nullptr) return;  // not built or not supported on this CPU
  const kernels::Kernels& s = kernels::scalar();

  for (size_t n : kSizes) {
    auto x = random_vec(n, rng::derive(2, "x", n));
    auto y = random_vec(n, rng::derive(2, "y", n));
    auto g = random_vec(n, rng::derive(2, "g", n));

    // axpy
    auto ys = y, yv = y;
    s.axpy(1.7f, x.data(), ys.data(), n);
    v->axpy(1.7f, x.data(), yv.data(), n);
    CHECK(ys == yv);

    // relu forward/backward
    std::vector<float> rs(n), rv(n);
    s.relu_forward(x.data(), rs.data(), n);
    v->relu_forward(x.data(), rv.data(), n);
    CHECK(rs == rv);
    s.relu_backward(x.data(), y.data(), rs.data(), n);
    v->relu_backward(x.data(), y.data(), rv.data(), n);
    CHECK(rs == rv);

    // sgd_update
    auto ws = y, wv = y;
    s.sgd_update(ws.data(), g.data(), 0.05f, 1.0f / 3.0f, 1e-5f, n);
    v->sgd_update(wv.data(), g.data(), 0.05f, 1.0f / 3.0f, 1e-5f, n);
    CHECK(ws == wv);
  }

  // accumulate_outer across odd shapes
  for (size_t out : {1u, 3u, 8u, 13u})
    for (size_t in : {1u, 5u, 8u, 17u}) {
      auto delta = random_vec(out, rng::derive(3, "d", out, in));
      auto x = random_vec(in, rng::derive(3, "x", out, in));
      std::vector<float> gs(out * in, 0.25f), gv(out * in, 0.25f);
      s.accumulate_outer(delta.data(), x.data(), gs.data(), out, in);
      v->accumulate_outer(delta.data(), x.data(), gv.data(), out, in);
      CHECK(gs == gv);
    }
}

TEST_CASE("avx2 reduction kernels agree with scalar under tolerance") {
  const kernels::Kernels* v = kernels::avx2();
  if (v == nullptr) return;
  const kernels::Kernels& s = kernels::scalar();

  for (size_t n : kSizes) {
    auto x = random_vec(n, rng::derive(4, "x", n));
    auto y = random_vec(n, rng::derive(4, "y", n));
    float ds = s.dot(x.data(), y.data(), n);
    float dv = v->dot(x.data(), y.data(), n);
    CHECK(std::abs(ds - dv) <=
          1e-5f * (1.0f + std::abs(ds)) * static_cast<float>(std::sqrt(n)));
  }

  for (size_t out : {1u, 4u, 8u, 11u})
    for (size_t in : {1u, 7u, 8u, 33u, 64u}) {
      auto w = random_vec(out * in, rng::derive(5, "w", out, in));
      auto b = random_vec(out, rng::derive(5, "b", out, in));
      auto x = random_vec(in, rng::derive(5, "x", out, in));
      std::vector<float> ys(out), yv(out);
      s.affine_forward(w.data(), b.data(), x.data(), ys.data(), out, in);
      v->affine_forward(w.data(), b.data(), x.data(), yv.data(), out, in);
      for (size_t r = 0; r < out; ++r)
        CHECK(std::abs(ys[r] - yv[r]) <= 1e-4f * (1.0f + std::abs(ys[r])));

      // affine_backward_input is a reduction over `out`
      auto delta = random_vec(out, rng::derive(5, "delta", out, in));
      std::vector<float> dxs(in), dxv(in);
      s.affine_backward_input(w.data(), delta.data(), dxs.data(), out, in);
      v->affine_backward_input(w.data(), delta.data(), dxv.data(), out, in);
      for (size_t c = 0; c < in; ++c)
        CHECK(std::abs(dxs[c] - dxv[c]) <= 1e-4f * (1.0f + std::abs(dxs[c])));
    }
}

TEST_CASE("active() honors the PTLEAK_KERNELS override") {
  // The active table is resolved once per process, so this test checks the
  // current value is one of the two tables and the name is consistent.
  const kernels::Kernels& a = kernels::active();
  const char* want = std::getenv("PTLEAK_KERNELS");
  if (want != nullptr) {
    CHECK(a.name == std::string(want));
  } else {
    bool is_scalar = &a == &kernels::scalar();
    bool is_avx2 = kernels::avx2() != nullptr && &a == kernels::avx2();
    CHECK((is_scalar || is_avx2));
    if (kernels::avx2() != nullptr) CHECK(std::string(a.name) == "avx2");
  }
}

TEST_CASE("hand-computed kernel examples") {
  const kernels::Kernels& k = kernels::active();

  // dot([1,2,3],[4,5,6]) = 32
  float x[] = {1, 2, 3}, y[] = {4, 5, 6};
  CHECK(k.dot(x, y, 3) == doctest::Approx(32.0f));

  // affine: y = Wx + b with W=[[1,0],[0,2]], b=[1,-1], x=[3,4] -> [4,7]
  float w[] = {1, 0, 0, 2}, b[] = {1, -1}, in[] = {3, 4}, out[2];
  k.affine_forward(w, b, in, out, 2, 2);
  CHECK(out[0] == doctest::Approx(4.0f));
  CHECK(out[1] == doctest::Approx(7.0f));

  // backward input: dx = W^T delta with delta=[1,1] -> [1,2]
  float delta[] = {1, 1}, dx[2];
  k.affine_backward_input(w, delta, dx, 2, 2);
  CHECK(dx[0] == doctest::Approx(1.0f));
  CHECK(dx[1] == doctest::Approx(2.0f));

  // relu
  float pre[] = {-1.0f, 0.0f, 2.5f}, post[3];
  k.relu_forward(pre, post, 3);
  CHECK(post[0] == 0.0f);
  CHECK(post[1] == 0.0f);
  CHECK(post[2] == 2.5f);

  // sgd: w=1, g=2, lr=0.1, inv_m=0.5, lambda=0 -> w = 1 - 0.1*1 = 0.9
  float wv = 1.0f, gv = 2.0f;
  k.sgd_update(&wv, &gv, 0.1f, 0.5f, 0.0f, 1);
  CHECK(wv == doctest::Approx(0.9f));
}

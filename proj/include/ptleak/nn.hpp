#pragma once

// Minimal MLP stack: affine layers with ReLU between them, softmax +
// cross-entropy on top, minibatch SGD with additive weight decay and an
// optional cosine learning-rate schedule, per-layer freezing, and versioned
// JSON checkpoints.
//
// The math is templated on the scalar type. Production uses float parameters
// (losses and probabilities are always accumulated in double); the test suite
// instantiates the identical template code at double for finite-difference
// gradient checks. The float instantiation routes through the runtime-
// selected kernel table (see kernels.hpp).

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "ptleak/data.hpp"
#include "ptleak/errors.hpp"
#include "ptleak/kernels.hpp"
#include "ptleak/rng.hpp"

namespace ptleak::nn {

inline constexpr int kModelSchemaVersion = 1;

enum class LrSchedule { constant, cosine };

struct TrainConfig {
  int epochs = 1;
  int batch_size = 32;
  double learning_rate = 0.1;
  double weight_decay = 0.0;
  LrSchedule lr_schedule = LrSchedule::cosine;
  uint64_t seed = 0;
  bool operator==(const TrainConfig&) const = default;
};

template <typename T>
struct AffineLayerT {
  int in = 0;
  int out = 0;
  std::vector<T> weight;  // out x in, row-major
  std::vector<T> bias;    // out
  bool operator==(const AffineLayerT&) const = default;
};

template <typename T>
struct ModelT {
  int schema_version = kModelSchemaVersion;
  int class_count = 0;
  std::vector<AffineLayerT<T>> layers;
  std::vector<uint8_t> freeze_flags;  // one per layer; nonzero = frozen

  bool operator==(const ModelT&) const = default;
  int layer_count() const { return static_cast<int>(layers.size()); }
  int input_dim() const { return layers.empty() ? 0 : layers.front().in; }
};

using AffineLayer = AffineLayerT<float>;
using Model = ModelT<float>;

// Softmax output; probabilities are kept in double regardless of the
// parameter type.
struct PredictionVector {
  std::vector<double> probs;
  int size() const { return static_cast<int>(probs.size()); }
  bool operator==(const PredictionVector&) const = default;
};

template <typename T>
struct GradientsT {
  std::vector<AffineLayerT<T>> layers;
};

// ---- shape checks ----

template <typename T>
void validate_model(const ModelT<T>& m) {
  if (m.layers.empty()) throw ShapeError("model has no layers");
  if (m.freeze_flags.size() != m.layers.size())
    throw ShapeError("freeze_flags size does not match layer count");
  for (size_t l = 0; l < m.layers.size(); ++l) {
    const auto& L = m.layers[l];
    if (L.in <= 0 || L.out <= 0)
      throw ShapeError("layer " + std::to_string(l) +
                       " has non-positive dimensions");
    if (L.weight.size() != static_cast<size_t>(L.in) * L.out ||
        L.bias.size() != static_cast<size_t>(L.out))
      throw ShapeError("layer " + std::to_string(l) +
                       " parameter buffers do not match its dimensions");
    if (l + 1 < m.layers.size() && L.out != m.layers[l + 1].in)
      throw ShapeError("layer " + std::to_string(l) + " output dim " +
                       std::to_string(L.out) + " != layer " +
                       std::to_string(l + 1) + " input dim");
  }
  if (m.layers.back().out != m.class_count)
    throw ShapeError("final layer output dim does not equal class_count");
}

// ---- dispatch helpers (float goes through the runtime kernel table) ----

namespace detail {

template <typename T>
inline void affine(const T* w, const T* b, const T* x, T* y, size_t out,
                   size_t in) {
  if constexpr (std::is_same_v<T, float>)
    kernels::active().affine_forward(w, b, x, y, out, in);
  else
    kernels::affine_forward_ref(w, b, x, y, out, in);
}

template <typename T>
inline void affine_backward_input(const T* w, const T* d, T* dx, size_t out,
                                  size_t in) {
  if constexpr (std::is_same_v<T, float>)
    kernels::active().affine_backward_input(w, d, dx, out, in);
  else
    kernels::affine_backward_input_ref(w, d, dx, out, in);
}

template <typename T>
inline void accumulate_outer(const T* d, const T* x, T* wg, size_t out,
                             size_t in) {
  if constexpr (std::is_same_v<T, float>)
    kernels::active().accumulate_outer(d, x, wg, out, in);
  else
    kernels::accumulate_outer_ref(d, x, wg, out, in);
}

template <typename T>
inline void axpy(T a, const T* x, T* y, size_t n) {
  if constexpr (std::is_same_v<T, float>)
    kernels::active().axpy(a, x, y, n);
  else
    kernels::axpy_ref(a, x, y, n);
}

template <typename T>
inline void relu(const T* x, T* y, size_t n) {
  if constexpr (std::is_same_v<T, float>)
    kernels::active().relu_forward(x, y, n);
  else
    kernels::relu_forward_ref(x, y, n);
}

template <typename T>
inline void relu_backward(const T* pre, const T* dy, T* dx, size_t n) {
  if constexpr (std::is_same_v<T, float>)
    kernels::active().relu_backward(pre, dy, dx, n);
  else
    kernels::relu_backward_ref(pre, dy, dx, n);
}

template <typename T>
inline void sgd_update(T* w, const T* g, T lr, T inv_m, T lambda, size_t n) {
  if constexpr (std::is_same_v<T, float>)
    kernels::active().sgd_update(w, g, lr, inv_m, lambda, n);
  else
    kernels::sgd_update_ref(w, g, lr, inv_m, lambda, n);
}

// Stable log-softmax pieces computed in double. Returns the loss
// logsumexp(z) - z_y and fills probs (size out).
template <typename T>
inline double softmax_loss(const T* z, int out, int y,
                           std::vector<double>& probs) {
  probs.resize(static_cast<size_t>(out));
  double mx = static_cast<double>(z[0]);
  for (int k = 1; k < out; ++k) mx = std::max(mx, static_cast<double>(z[k]));
  double sum = 0.0;
  for (int k = 0; k < out; ++k) {
    double e = std::exp(static_cast<double>(z[k]) - mx);
    probs[static_cast<size_t>(k)] = e;
    sum += e;
  }
  for (int k = 0; k < out; ++k) probs[static_cast<size_t>(k)] /= sum;
  return std::log(sum) + mx - static_cast<double>(z[y]);
}

}  // namespace detail

// ---- construction ----

// He-normal weights (std = sqrt(2/fan_in)), zero biases, nothing frozen.
template <typename T>
ModelT<T> make_model(int input_dim, const std::vector<int>& hidden,
                     int class_count, uint64_t init_seed) {
  if (input_dim <= 0) throw ShapeError("input_dim must be positive");
  if (class_count <= 0) throw ClassCountError("class_count must be positive");
  std::vector<int> dims;
  dims.push_back(input_dim);
  for (int h : hidden) {
    if (h <= 0) throw ShapeError("hidden width must be positive");
    dims.push_back(h);
  }
  dims.push_back(class_count);
  ModelT<T> m;
  m.class_count = class_count;
  rng::Prng gen(rng::derive(init_seed, "init"));
  for (size_t l = 0; l + 1 < dims.size(); ++l) {
    AffineLayerT<T> layer;
    layer.in = dims[l];
    layer.out = dims[l + 1];
    layer.weight.resize(static_cast<size_t>(layer.in) * layer.out);
    layer.bias.assign(static_cast<size_t>(layer.out), T(0));
    double std_dev = std::sqrt(2.0 / static_cast<double>(layer.in));
    for (auto& w : layer.weight) w = static_cast<T>(gen.normal() * std_dev);
    m.layers.push_back(std::move(layer));
  }
  m.freeze_flags.assign(m.layers.size(), 0);
  return m;
}

// ---- forward ----

template <typename T>
std::vector<T> forward(const ModelT<T>& m, std::span<const T> x) {
  validate_model(m);
  if (static_cast<int>(x.size()) != m.input_dim())
    throw ShapeError("input has dim " + std::to_string(x.size()) +
                     ", model expects " + std::to_string(m.input_dim()));
  std::vector<T> cur(x.begin(), x.end());
  std::vector<T> next;
  for (size_t l = 0; l < m.layers.size(); ++l) {
    const auto& L = m.layers[l];
    next.assign(static_cast<size_t>(L.out), T(0));
    detail::affine<T>(L.weight.data(), L.bias.data(), cur.data(), next.data(),
                      static_cast<size_t>(L.out), static_cast<size_t>(L.in));
    if (l + 1 < m.layers.size())
      detail::relu<T>(next.data(), next.data(), static_cast<size_t>(L.out));
    cur.swap(next);
  }
  return cur;
}

// ---- softmax / loss ----

PredictionVector softmax(std::span<const double> logits);
PredictionVector softmax(std::span<const float> logits);

// -log(p_y); +inf when p_y underflowed to zero.
double cross_entropy(const PredictionVector& pred, int y);

// eta0 * (1 + cos(pi * epoch / total)) / 2
double cosine_lr(double eta0, int epoch, int total_epochs);
double scheduled_lr(const TrainConfig& cfg, int epoch_index);

// ---- backprop ----

template <typename T>
GradientsT<T> zero_gradients(const ModelT<T>& m) {
  GradientsT<T> g;
  g.layers.resize(m.layers.size());
  for (size_t l = 0; l < m.layers.size(); ++l) {
    g.layers[l].in = m.layers[l].in;
    g.layers[l].out = m.layers[l].out;
    g.layers[l].weight.assign(m.layers[l].weight.size(), T(0));
    g.layers[l].bias.assign(m.layers[l].bias.size(), T(0));
  }
  return g;
}

// Reusable scratch buffers for per-example backprop; keeps the training hot
// loop allocation-free.
template <typename T>
class BackpropContext {
 public:
  explicit BackpropContext(const ModelT<T>& m) { bind(m); }

  void bind(const ModelT<T>& m) {
    size_t L = m.layers.size();
    pre_.resize(L);
    act_.resize(L + 1);
    delta_.resize(L);
    for (size_t l = 0; l < L; ++l) {
      pre_[l].resize(static_cast<size_t>(m.layers[l].out));
      delta_[l].resize(static_cast<size_t>(m.layers[l].out));
      act_[l + 1].resize(static_cast<size_t>(m.layers[l].out));
    }
    act_[0].resize(static_cast<size_t>(m.input_dim()));
  }

  // Accumulates the cross-entropy gradient of one example into `grads` for
  // layers >= first_layer; returns the example's loss. The model is assumed
  // validated by the caller.
  double accumulate(const ModelT<T>& m, std::span<const T> x, int y,
                    GradientsT<T>& grads, int first_layer = 0) {
    const int L = m.layer_count();
    if (static_cast<int>(x.size()) != m.input_dim())
      throw ShapeError("example dim does not match model input dim");
    if (y < 0 || y >= m.class_count)
      throw LabelError("label " + std::to_string(y) + " outside [0, " +
                       std::to_string(m.class_count) + ")");
    std::copy(x.begin(), x.end(), act_[0].begin());
    for (int l = 0; l < L; ++l) {
      const auto& Ly = m.layers[static_cast<size_t>(l)];
      detail::affine<T>(Ly.weight.data(), Ly.bias.data(),
                        act_[static_cast<size_t>(l)].data(),
                        pre_[static_cast<size_t>(l)].data(),
                        static_cast<size_t>(Ly.out),
                        static_cast<size_t>(Ly.in));
      if (l + 1 < L)
        detail::relu<T>(pre_[static_cast<size_t>(l)].data(),
                        act_[static_cast<size_t>(l) + 1].data(),
                        static_cast<size_t>(Ly.out));
      else
        act_[static_cast<size_t>(l) + 1] = pre_[static_cast<size_t>(l)];
    }
    double loss = detail::softmax_loss<T>(pre_[static_cast<size_t>(L - 1)].data(),
                                          m.class_count, y, probs_);
    auto& dout = delta_[static_cast<size_t>(L - 1)];
    for (int k = 0; k < m.class_count; ++k)
      dout[static_cast<size_t>(k)] = static_cast<T>(
          probs_[static_cast<size_t>(k)] - (k == y ? 1.0 : 0.0));
    for (int l = L - 1; l >= first_layer; --l) {
      const auto& Ly = m.layers[static_cast<size_t>(l)];
      auto& gl = grads.layers[static_cast<size_t>(l)];
      detail::accumulate_outer<T>(delta_[static_cast<size_t>(l)].data(),
                                  act_[static_cast<size_t>(l)].data(),
                                  gl.weight.data(),
                                  static_cast<size_t>(Ly.out),
                                  static_cast<size_t>(Ly.in));
      detail::axpy<T>(T(1), delta_[static_cast<size_t>(l)].data(),
                      gl.bias.data(), static_cast<size_t>(Ly.out));
      if (l > first_layer) {
        auto& dprev = delta_[static_cast<size_t>(l) - 1];
        detail::affine_backward_input<T>(
            Ly.weight.data(), delta_[static_cast<size_t>(l)].data(),
            dprev.data(), static_cast<size_t>(Ly.out),
            static_cast<size_t>(Ly.in));
        detail::relu_backward<T>(pre_[static_cast<size_t>(l) - 1].data(),
                                 dprev.data(), dprev.data(),
                                 static_cast<size_t>(dprev.size()));
      }
    }
    return loss;
  }

 private:
  std::vector<std::vector<T>> pre_, act_, delta_;
  std::vector<double> probs_;
};

// One-shot wrapper around BackpropContext::accumulate.
template <typename T>
double backward(const ModelT<T>& m, std::span<const T> x, int y,
                GradientsT<T>& grads, int first_layer = 0) {
  validate_model(m);
  BackpropContext<T> ctx(m);
  return ctx.accumulate(m, x, y, grads, first_layer);
}

// ---- SGD ----

// One epoch of minibatch SGD over a seeded shuffle of `dataset`. Gradient per
// batch is the mean per-example cross-entropy gradient plus weight_decay *
// theta; frozen layers are not updated at all. Fully frozen models are
// returned unchanged bit for bit.
Model sgd_epoch(Model model, const data::Dataset& dataset,
                const TrainConfig& cfg, int epoch_index);

PredictionVector predict(const Model& m, std::span<const float> x);

// ---- checkpoints ----

void save_model(const Model& m, const std::filesystem::path& path);
Model load_model(const std::filesystem::path& path);
std::string model_to_json(const Model& m);
Model model_from_json(const std::string& text);

}  // namespace ptleak::nn

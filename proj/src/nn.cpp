#include "ptleak/nn.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <numeric>

#include "json.hpp"

namespace ptleak::nn {

using nlohmann::json;

namespace {

template <typename T>
PredictionVector softmax_impl(std::span<const T> logits) {
  if (logits.empty()) throw ShapeError("softmax input is empty");
  double mx = -std::numeric_limits<double>::infinity();
  for (T v : logits) {
    double d = static_cast<double>(v);
    if (!std::isfinite(d))
      throw NumericError("softmax input contains a non-finite value");
    mx = std::max(mx, d);
  }
  PredictionVector out;
  out.probs.resize(logits.size());
  double sum = 0.0;
  for (size_t k = 0; k < logits.size(); ++k) {
    double e = std::exp(static_cast<double>(logits[k]) - mx);
    out.probs[k] = e;
    sum += e;
  }
  for (double& p : out.probs) p /= sum;
  return out;
}

}  // namespace

PredictionVector softmax(std::span<const double> logits) {
  return softmax_impl<double>(logits);
}

PredictionVector softmax(std::span<const float> logits) {
  return softmax_impl<float>(logits);
}

double cross_entropy(const PredictionVector& pred, int y) {
  if (pred.probs.empty()) throw ShapeError("prediction vector is empty");
  if (y < 0 || y >= pred.size())
    throw LabelError("label " + std::to_string(y) + " outside [0, " +
                     std::to_string(pred.size()) + ")");
  return -std::log(pred.probs[static_cast<size_t>(y)]);
}

double cosine_lr(double eta0, int epoch, int total_epochs) {
  if (eta0 <= 0.0) throw ConfigError("learning rate must be positive");
  if (total_epochs <= 0)
    throw ScheduleError("total_epochs must be positive");
  if (epoch < 0 || epoch >= total_epochs)
    throw ScheduleError("epoch " + std::to_string(epoch) +
                        " outside schedule range [0, " +
                        std::to_string(total_epochs) + ")");
  double phase = std::numbers::pi * static_cast<double>(epoch) /
                 static_cast<double>(total_epochs);
  return eta0 * (1.0 + std::cos(phase)) / 2.0;
}

double scheduled_lr(const TrainConfig& cfg, int epoch_index) {
  if (cfg.learning_rate <= 0.0)
    throw ConfigError("learning rate must be positive");
  if (epoch_index < 0) throw ScheduleError("epoch index must be nonnegative");
  switch (cfg.lr_schedule) {
    case LrSchedule::constant:
      return cfg.learning_rate;
    case LrSchedule::cosine:
      return cosine_lr(cfg.learning_rate, epoch_index, cfg.epochs);
  }
  throw ConfigError("unknown lr schedule");
}

Model sgd_epoch(Model model, const data::Dataset& dataset,
                const TrainConfig& cfg, int epoch_index) {
  validate_model(model);
  if (dataset.points.empty()) throw EmptyDataError("sgd_epoch: empty dataset");
  if (dataset.feature_dim != model.input_dim())
    throw ShapeError("dataset feature_dim does not match model input dim");
  if (cfg.batch_size <= 0) throw ConfigError("batch_size must be positive");
  if (static_cast<size_t>(cfg.batch_size) > dataset.points.size())
    throw ConfigError("batch_size exceeds dataset size");
  if (cfg.weight_decay < 0.0)
    throw ConfigError("weight_decay must be nonnegative");
  for (const auto& p : dataset.points)
    if (p.y < 0 || p.y >= model.class_count)
      throw LabelError("dataset label " + std::to_string(p.y) +
                       " does not fit model with " +
                       std::to_string(model.class_count) + " classes");

  double lr = scheduled_lr(cfg, epoch_index);

  int first_unfrozen = model.layer_count();
  for (int l = 0; l < model.layer_count(); ++l) {
    if (!model.freeze_flags[static_cast<size_t>(l)]) {
      first_unfrozen = l;
      break;
    }
  }
  if (first_unfrozen == model.layer_count()) return model;  // fully frozen

  std::vector<size_t> order(dataset.points.size());
  std::iota(order.begin(), order.end(), size_t{0});
  rng::Prng shuffler(rng::derive(cfg.seed, "epoch_shuffle", epoch_index));
  shuffler.shuffle(order);

  GradientsT<float> grads = zero_gradients(model);
  BackpropContext<float> ctx(model);
  const size_t n = order.size();
  const size_t bs = static_cast<size_t>(cfg.batch_size);
  for (size_t start = 0; start < n; start += bs) {
    size_t stop = std::min(n, start + bs);
    for (int l = first_unfrozen; l < model.layer_count(); ++l) {
      auto& gl = grads.layers[static_cast<size_t>(l)];
      std::fill(gl.weight.begin(), gl.weight.end(), 0.0f);
      std::fill(gl.bias.begin(), gl.bias.end(), 0.0f);
    }
    for (size_t i = start; i < stop; ++i) {
      const auto& p = dataset.points[order[i]];
      ctx.accumulate(model, std::span<const float>(p.x), p.y, grads,
                     first_unfrozen);
    }
    float inv_m = 1.0f / static_cast<float>(stop - start);
    float lambda = static_cast<float>(cfg.weight_decay);
    float flr = static_cast<float>(lr);
    for (int l = first_unfrozen; l < model.layer_count(); ++l) {
      if (model.freeze_flags[static_cast<size_t>(l)]) continue;
      auto& Ly = model.layers[static_cast<size_t>(l)];
      auto& gl = grads.layers[static_cast<size_t>(l)];
      kernels::active().sgd_update(Ly.weight.data(), gl.weight.data(), flr,
                                   inv_m, lambda, Ly.weight.size());
      kernels::active().sgd_update(Ly.bias.data(), gl.bias.data(), flr, inv_m,
                                   lambda, Ly.bias.size());
    }
  }
  return model;
}

PredictionVector predict(const Model& m, std::span<const float> x) {
  std::vector<float> logits = forward(m, x);
  return softmax(std::span<const float>(logits));
}

// ---- checkpoints ----

std::string model_to_json(const Model& m) {
  validate_model(m);
  json j;
  j["schema_version"] = m.schema_version;
  j["class_count"] = m.class_count;
  std::vector<int> dims;
  dims.push_back(m.input_dim());
  for (const auto& L : m.layers) dims.push_back(L.out);
  j["layer_dims"] = dims;
  j["freeze_flags"] = std::vector<int>(m.freeze_flags.begin(),
                                       m.freeze_flags.end());
  json weights = json::array();
  json biases = json::array();
  for (const auto& L : m.layers) {
    weights.push_back(std::vector<double>(L.weight.begin(), L.weight.end()));
    biases.push_back(std::vector<double>(L.bias.begin(), L.bias.end()));
  }
  j["weights"] = std::move(weights);
  j["biases"] = std::move(biases);
  return j.dump(2);
}

Model model_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw LoadError(std::string("model checkpoint is not valid JSON: ") +
                    e.what());
  }
  try {
    if (!j.contains("schema_version") ||
        j.at("schema_version").get<int>() != kModelSchemaVersion)
      throw LoadError("model checkpoint has unsupported schema_version");
    Model m;
    m.schema_version = j.at("schema_version").get<int>();
    m.class_count = j.at("class_count").get<int>();
    auto dims = j.at("layer_dims").get<std::vector<int>>();
    if (dims.size() < 2) throw LoadError("layer_dims must list >= 2 dims");
    auto weights = j.at("weights");
    auto biases = j.at("biases");
    auto flags = j.at("freeze_flags").get<std::vector<int>>();
    size_t L = dims.size() - 1;
    if (weights.size() != L || biases.size() != L || flags.size() != L)
      throw LoadError("layer array lengths do not match layer_dims");
    for (size_t l = 0; l < L; ++l) {
      AffineLayer layer;
      layer.in = dims[l];
      layer.out = dims[l + 1];
      auto w = weights.at(l).get<std::vector<double>>();
      auto b = biases.at(l).get<std::vector<double>>();
      if (w.size() != static_cast<size_t>(layer.in) * layer.out ||
          b.size() != static_cast<size_t>(layer.out))
        throw LoadError("layer " + std::to_string(l) +
                        " parameter sizes do not match layer_dims");
      layer.weight.assign(w.begin(), w.end());
      layer.bias.assign(b.begin(), b.end());
      m.layers.push_back(std::move(layer));
      m.freeze_flags.push_back(flags[l] ? 1 : 0);
    }
    validate_model(m);
    return m;
  } catch (const json::exception& e) {
    throw LoadError(std::string("model checkpoint malformed: ") + e.what());
  } catch (const ShapeError& e) {
    throw LoadError(std::string("model checkpoint malformed: ") + e.what());
  }
}

void save_model(const Model& m, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw LoadError("cannot open " + path.string() + " for writing");
  out << model_to_json(m) << '\n';
  if (!out) throw LoadError("failed writing " + path.string());
}

Model load_model(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot open model checkpoint " + path.string());
  std::string text((std::istreambuf_iterator<char>(in)),
                   std::istreambuf_iterator<char>());
  return model_from_json(text);
}

}  // namespace ptleak::nn

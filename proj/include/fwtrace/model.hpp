#ifndef FWTRACE_MODEL_HPP_
#define FWTRACE_MODEL_HPP_

#include <atomic>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "fwtrace/errors.hpp"
#include "fwtrace/hash.hpp"
#include "fwtrace/numerics.hpp"

namespace fwtrace {

enum class Activation : std::uint8_t { kRelu = 0, kTanh = 1 };
enum class LossKind : std::uint8_t { kCrossEntropy = 0, kSquaredError = 1 };
enum class Functional : std::uint8_t { kLoss = 0, kMargin = 1 };

inline const char* to_string(Activation a) { return a == Activation::kRelu ? "relu" : "tanh"; }
inline const char* to_string(LossKind k) {
  return k == LossKind::kCrossEntropy ? "cross_entropy" : "squared_error";
}
inline const char* to_string(Functional f) { return f == Functional::kLoss ? "loss" : "margin"; }

inline Activation parse_activation(const std::string& s) {
  if (s == "relu") return Activation::kRelu;
  if (s == "tanh") return Activation::kTanh;
  throw ConfigError("unknown activation '" + s + "'");
}
inline LossKind parse_loss(const std::string& s) {
  if (s == "cross_entropy") return LossKind::kCrossEntropy;
  if (s == "squared_error") return LossKind::kSquaredError;
  throw ConfigError("unknown loss '" + s + "'");
}
inline Functional parse_functional(const std::string& s) {
  if (s == "loss") return Functional::kLoss;
  if (s == "margin") return Functional::kMargin;
  throw ConfigError("unknown query functional '" + s + "'");
}

// Fully connected network: layer_sizes = {input, hidden..., output}. Hidden
// layers use `activation`; the last layer is linear (logits or regression
// outputs). `weight_decay` adds weight_decay * ||theta||^2 to the mean training
// objective, so it is part of the model identity and of its hash.
struct ModelSpec {
  std::vector<int> layer_sizes;
  Activation activation = Activation::kTanh;
  LossKind loss = LossKind::kCrossEntropy;
  bool bias = true;
  double weight_decay = 0.0;

  void validate() const {
    if (layer_sizes.size() < 2) throw ConfigError("model needs at least 2 layers");
    for (int n : layer_sizes) {
      if (n <= 0) throw ConfigError("layer sizes must be positive");
    }
    if (!(weight_decay >= 0.0) || !std::isfinite(weight_decay)) {
      throw ConfigError("weight_decay must be finite and >= 0");
    }
  }

  int input_size() const { return layer_sizes.front(); }
  int output_size() const { return layer_sizes.back(); }

  Eigen::Index parameter_count() const {
    Eigen::Index p = 0;
    for (std::size_t l = 0; l + 1 < layer_sizes.size(); ++l) {
      p += static_cast<Eigen::Index>(layer_sizes[l] + (bias ? 1 : 0)) * layer_sizes[l + 1];
    }
    return p;
  }

  std::uint64_t hash() const {
    Fnv1a h;
    h.text("fwtrace.model.v1");
    h.value<std::uint64_t>(layer_sizes.size());
    for (int n : layer_sizes) h.value<std::int64_t>(n);
    h.value(static_cast<std::uint8_t>(activation));
    h.value(static_cast<std::uint8_t>(loss));
    h.value<std::uint8_t>(bias ? 1 : 0);
    h.value(weight_decay);
    return h.digest();
  }
};

struct ParameterVector {
  RealVector values;
  std::uint64_t spec_hash = 0;

  Eigen::Index size() const { return values.size(); }

  ParameterVector displaced(const RealVector& delta) const {
    require_same_length(values, delta, "parameter displacement");
    return {values + delta, spec_hash};
  }

  std::uint64_t content_hash() const {
    Fnv1a h;
    h.value(spec_hash);
    h.reals(std::span<const double>(values.data(), static_cast<std::size_t>(values.size())));
    return h.digest();
  }
};

// A training example. `label` is the class index for cross-entropy; for
// squared error `target` holds the regression target (or, when empty, the
// one-hot encoding of `label` is used).
struct Example {
  std::uint64_t id = 0;
  RealVector features;
  int label = -1;
  RealVector target;
};

struct Query {
  std::uint64_t id = 0;
  RealVector features;
  int label = -1;
  RealVector target;
  Functional functional = Functional::kLoss;
};

class Dataset {
 public:
  Dataset() = default;
  explicit Dataset(std::vector<Example> examples) : examples_(std::move(examples)) {
    index_.reserve(examples_.size());
    for (std::size_t i = 0; i < examples_.size(); ++i) {
      if (!index_.emplace(examples_[i].id, i).second) {
        throw ConfigError("duplicate example id " + std::to_string(examples_[i].id));
      }
    }
    if (!examples_.empty()) {
      const Eigen::Index d = examples_.front().features.size();
      features_.resize(d, static_cast<Eigen::Index>(examples_.size()));
      for (std::size_t i = 0; i < examples_.size(); ++i) {
        if (examples_[i].features.size() != d) {
          throw DimensionError("examples have differing feature lengths");
        }
        features_.col(static_cast<Eigen::Index>(i)) = examples_[i].features;
      }
    }
  }

  std::size_t size() const { return examples_.size(); }
  bool empty() const { return examples_.empty(); }
  const std::vector<Example>& examples() const { return examples_; }
  const Example& operator[](std::size_t i) const { return examples_[i]; }
  // Feature matrix, one column per example.
  const DenseMatrix& features() const { return features_; }

  std::optional<std::size_t> find(std::uint64_t id) const {
    auto it = index_.find(id);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  const Example& by_id(std::uint64_t id) const {
    auto i = find(id);
    if (!i) throw MembershipError(id);
    return examples_[*i];
  }

  Dataset subset(const std::vector<bool>& included) const {
    if (included.size() != examples_.size()) {
      throw DimensionError("subset mask length " + std::to_string(included.size()) +
                           " vs dataset size " + std::to_string(examples_.size()));
    }
    std::vector<Example> kept;
    for (std::size_t i = 0; i < examples_.size(); ++i) {
      if (included[i]) kept.push_back(examples_[i]);
    }
    return Dataset(std::move(kept));
  }

  Dataset concat(const Dataset& other) const {
    std::vector<Example> all = examples_;
    all.insert(all.end(), other.examples_.begin(), other.examples_.end());
    return Dataset(std::move(all));
  }

 private:
  std::vector<Example> examples_;
  std::unordered_map<std::uint64_t, std::size_t> index_;
  DenseMatrix features_;
};

// Global evaluation counters. The readout path is required to be forward
// only; tests assert on `gradient_evaluations` around it.
struct EvalCounters {
  std::atomic<std::uint64_t> forward_evaluations{0};
  std::atomic<std::uint64_t> gradient_evaluations{0};
  // Subset of gradient_evaluations taken over a whole dataset.
  std::atomic<std::uint64_t> batch_gradient_evaluations{0};
};

inline EvalCounters& eval_counters() {
  static EvalCounters counters;
  return counters;
}

class Model {
 public:
  explicit Model(ModelSpec spec) : spec_(std::move(spec)) {
    spec_.validate();
    hash_ = spec_.hash();
    Eigen::Index offset = 0;
    for (std::size_t l = 0; l + 1 < spec_.layer_sizes.size(); ++l) {
      Layer layer;
      layer.in = spec_.layer_sizes[l];
      layer.out = spec_.layer_sizes[l + 1];
      layer.weight_offset = offset;
      offset += static_cast<Eigen::Index>(layer.in) * layer.out;
      layer.bias_offset = offset;
      if (spec_.bias) offset += layer.out;
      layers_.push_back(layer);
    }
    param_count_ = offset;
  }

  const ModelSpec& spec() const { return spec_; }
  std::uint64_t spec_hash() const { return hash_; }
  Eigen::Index parameter_count() const { return param_count_; }

  // Weights uniform in +-sqrt(6 / (n_in + n_out)) per layer, biases zero.
  ParameterVector param_init(std::uint64_t seed) const {
    ParameterVector theta{RealVector::Zero(param_count_), hash_};
    std::mt19937_64 rng(seed);
    for (const Layer& layer : layers_) {
      const double limit = std::sqrt(6.0 / static_cast<double>(layer.in + layer.out));
      std::uniform_real_distribution<double> uniform(-limit, limit);
      for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(layer.in) * layer.out; ++i) {
        theta.values[layer.weight_offset + i] = uniform(rng);
      }
    }
    return theta;
  }

  // Raw network outputs (logits), one column per input column.
  DenseMatrix forward(const ParameterVector& theta, const DenseMatrix& inputs) const {
    check_theta(theta);
    check_inputs(inputs.rows());
    DenseMatrix a = inputs;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      DenseMatrix z = weights(theta, layers_[l]) * a;
      if (spec_.bias) z.colwise() += biases(theta, layers_[l]);
      if (l + 1 < layers_.size()) activate(z);
      a = std::move(z);
    }
    return a;
  }

  double loss_example(const ParameterVector& theta, const Example& b) const {
    ++eval_counters().forward_evaluations;
    return single(theta, b.features, head_for(b.label, b.target, Functional::kLoss), false)
        .value;
  }

  RealVector grad_example(const ParameterVector& theta, const Example& b) const {
    ++eval_counters().gradient_evaluations;
    return single(theta, b.features, head_for(b.label, b.target, Functional::kLoss), true)
        .gradient;
  }

  double query_value(const ParameterVector& theta, const Query& q) const {
    ++eval_counters().forward_evaluations;
    return single(theta, q.features, head_for(q.label, q.target, q.functional), false).value;
  }

  RealVector grad_query(const ParameterVector& theta, const Query& q) const {
    ++eval_counters().gradient_evaluations;
    return single(theta, q.features, head_for(q.label, q.target, q.functional), true).gradient;
  }

  // Mean training objective (1/N) sum_i loss(theta; b_i) + weight_decay ||theta||^2.
  double mean_loss(const ParameterVector& theta, const Dataset& data) const {
    ++eval_counters().forward_evaluations;
    return batch(theta, data, false).value;
  }

  RealVector grad_mean(const ParameterVector& theta, const Dataset& data) const {
    ++eval_counters().gradient_evaluations;
    ++eval_counters().batch_gradient_evaluations;
    return batch(theta, data, true).gradient;
  }

  struct ValueAndGradient {
    double value = 0.0;
    RealVector gradient;
  };

  ValueAndGradient value_and_grad_mean(const ParameterVector& theta, const Dataset& data) const {
    ++eval_counters().gradient_evaluations;
    ++eval_counters().batch_gradient_evaluations;
    return batch(theta, data, true);
  }

  // Offsets of the bias block of each layer; empty when the model is bias-free.
  std::vector<std::pair<Eigen::Index, Eigen::Index>> bias_ranges() const {
    std::vector<std::pair<Eigen::Index, Eigen::Index>> out;
    if (!spec_.bias) return out;
    for (const Layer& l : layers_) out.emplace_back(l.bias_offset, l.out);
    return out;
  }

  // Offset and size of the first-layer weight block (fed by the inputs).
  std::pair<Eigen::Index, Eigen::Index> input_weight_range() const {
    return {layers_.front().weight_offset,
            static_cast<Eigen::Index>(layers_.front().in) * layers_.front().out};
  }

 private:
  struct Layer {
    int in = 0;
    int out = 0;
    Eigen::Index weight_offset = 0;
    Eigen::Index bias_offset = 0;
  };

  enum class HeadKind { kCrossEntropy, kSquaredError, kMargin };

  struct Head {
    HeadKind kind;
    int label;
    RealVector target;
  };

  Eigen::Map<const DenseMatrix> weights(const ParameterVector& theta, const Layer& l) const {
    return {theta.values.data() + l.weight_offset, l.out, l.in};
  }
  Eigen::Map<const RealVector> biases(const ParameterVector& theta, const Layer& l) const {
    return {theta.values.data() + l.bias_offset, l.out};
  }

  void check_theta(const ParameterVector& theta) const {
    if (theta.spec_hash != hash_) {
      throw StalenessError("parameter vector was built for a different model spec");
    }
    if (theta.size() != param_count_) {
      throw DimensionError("parameter vector has length " + std::to_string(theta.size()) +
                           ", model expects " + std::to_string(param_count_));
    }
  }

  void check_inputs(Eigen::Index rows) const {
    if (rows != spec_.input_size()) {
      throw DimensionError("features have length " + std::to_string(rows) +
                           ", model input size is " + std::to_string(spec_.input_size()));
    }
  }

  void activate(DenseMatrix& z) const {
    if (spec_.activation == Activation::kTanh) {
      z = z.array().tanh().matrix();
    } else {
      z = z.cwiseMax(0.0);
    }
  }

  // Derivative of the activation expressed through its output.
  void scale_by_activation_derivative(DenseMatrix& g, const DenseMatrix& a) const {
    if (spec_.activation == Activation::kTanh) {
      g.array() *= (1.0 - a.array().square());
    } else {
      g.array() *= (a.array() > 0.0).cast<double>();
    }
  }

  Head head_for(int label, const RealVector& target, Functional functional) const {
    const int out = spec_.output_size();
    if (functional == Functional::kMargin) {
      if (out < 2) throw ConfigError("margin functional needs at least 2 outputs");
      if (label < 0 || label >= out) {
        throw DimensionError("class index " + std::to_string(label) + " out of range");
      }
      return {HeadKind::kMargin, label, {}};
    }
    if (spec_.loss == LossKind::kCrossEntropy) {
      if (label < 0 || label >= out) {
        throw DimensionError("class index " + std::to_string(label) + " out of range");
      }
      return {HeadKind::kCrossEntropy, label, {}};
    }
    if (target.size() > 0) {
      if (target.size() != out) {
        throw DimensionError("target has length " + std::to_string(target.size()) +
                             ", model output size is " + std::to_string(out));
      }
      return {HeadKind::kSquaredError, label, target};
    }
    if (label < 0 || label >= out) {
      throw DimensionError("squared-error example needs a target or a valid class index");
    }
    RealVector onehot = RealVector::Zero(out);
    onehot[label] = 1.0;
    return {HeadKind::kSquaredError, label, onehot};
  }

  // Writes d(value)/d(output) into `grad` and returns the head value.
  static double head_value(const Head& head, const Eigen::Ref<const RealVector>& z,
                           Eigen::Ref<RealVector> grad) {
    switch (head.kind) {
      case HeadKind::kCrossEntropy: {
        const double zmax = z.maxCoeff();
        const RealVector e = (z.array() - zmax).exp().matrix();
        const double s = e.sum();
        grad = e / s;
        grad[head.label] -= 1.0;
        return std::log(s) + zmax - z[head.label];
      }
      case HeadKind::kSquaredError: {
        grad = z - head.target;
        return 0.5 * grad.squaredNorm();
      }
      case HeadKind::kMargin: {
        Eigen::Index runner_up = -1;
        for (Eigen::Index j = 0; j < z.size(); ++j) {
          if (j == head.label) continue;
          if (runner_up < 0 || z[j] > z[runner_up]) runner_up = j;
        }
        grad.setZero();
        grad[head.label] = 1.0;
        grad[runner_up] = -1.0;
        return z[head.label] - z[runner_up];
      }
    }
    return 0.0;
  }

  // Forward (and optionally backward) pass over a batch of columns. Returns the
  // sum of head values and the gradient of that sum.
  template <typename HeadAt>
  ValueAndGradient run(const ParameterVector& theta, const DenseMatrix& inputs,
                       const HeadAt& head_at, bool with_gradient) const {
    check_theta(theta);
    check_inputs(inputs.rows());
    const Eigen::Index batch = inputs.cols();
    std::vector<DenseMatrix> acts;
    acts.reserve(layers_.size() + 1);
    acts.push_back(inputs);
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      DenseMatrix z = weights(theta, layers_[l]) * acts.back();
      if (spec_.bias) z.colwise() += biases(theta, layers_[l]);
      if (l + 1 < layers_.size()) activate(z);
      acts.push_back(std::move(z));
    }
    const DenseMatrix& out = acts.back();
    DenseMatrix g(out.rows(), batch);
    double total = 0.0;
    for (Eigen::Index c = 0; c < batch; ++c) {
      total += head_value(head_at(c), out.col(c), g.col(c));
    }
    ValueAndGradient result{total, {}};
    if (!with_gradient) return result;
    result.gradient = RealVector::Zero(param_count_);
    for (std::size_t l = layers_.size(); l-- > 0;) {
      const Layer& layer = layers_[l];
      Eigen::Map<DenseMatrix>(result.gradient.data() + layer.weight_offset, layer.out,
                              layer.in) = g * acts[l].transpose();
      if (spec_.bias) {
        Eigen::Map<RealVector>(result.gradient.data() + layer.bias_offset, layer.out) =
            g.rowwise().sum();
      }
      if (l > 0) {
        DenseMatrix back = weights(theta, layer).transpose() * g;
        scale_by_activation_derivative(back, acts[l]);
        g = std::move(back);
      }
    }
    return result;
  }

  ValueAndGradient single(const ParameterVector& theta, const RealVector& x, const Head& head,
                          bool with_gradient) const {
    DenseMatrix input = x;
    auto r = run(theta, input, [&](Eigen::Index) -> const Head& { return head; },
                 with_gradient);
    if (!std::isfinite(r.value)) throw NumericError("non-finite model output");
    return r;
  }

  ValueAndGradient batch(const ParameterVector& theta, const Dataset& data,
                         bool with_gradient) const {
    if (data.empty()) throw ConfigError("empty dataset");
    std::vector<Head> heads;
    heads.reserve(data.size());
    for (const Example& e : data.examples()) {
      heads.push_back(head_for(e.label, e.target, Functional::kLoss));
    }
    auto r = run(theta, data.features(),
                 [&](Eigen::Index c) -> const Head& { return heads[static_cast<std::size_t>(c)]; },
                 with_gradient);
    const double n = static_cast<double>(data.size());
    r.value = r.value / n + spec_.weight_decay * theta.values.squaredNorm();
    if (with_gradient) {
      r.gradient /= n;
      if (spec_.weight_decay > 0.0) r.gradient += 2.0 * spec_.weight_decay * theta.values;
    }
    if (!std::isfinite(r.value)) throw NumericError("non-finite training objective");
    return r;
  }

  ModelSpec spec_;
  std::uint64_t hash_ = 0;
  std::vector<Layer> layers_;
  Eigen::Index param_count_ = 0;
};

}  // namespace fwtrace

#endif  // FWTRACE_MODEL_HPP_

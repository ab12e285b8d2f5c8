#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "vdf/batchnorm.hpp"
#include "vdf/ops.hpp"
#include "vdf/tape.hpp"

namespace vdf {

enum class Variant : std::uint32_t { DeepDefacer = 0, Baseline = 1 };
enum class Head { Sigmoid1, Softmax2 };

std::string to_string(Variant v);
Variant variant_from_string(const std::string& s);

/// Declarative U-Net description.
///
/// Encoder level i runs two 3x3x3 convs to encoder_filters[i] channels, then
/// 2x max pooling (followed by batch norm when enabled).  The bottleneck runs a
/// 3x3x3 conv to twice the last encoder width, then either a second 3x3x3 conv
/// at that width (bottleneck == 2 * last) or a 1x1x1 widening conv to
/// `bottleneck` channels.  Each decoder level upsamples, concatenates the skip
/// (decoder features first) and applies one 3x3x3 conv.  A 1x1x1 head ends the
/// network.
struct ModelConfig {
  Variant variant = Variant::DeepDefacer;
  std::vector<Index> encoder_filters{8, 16, 32, 64};
  Index bottleneck = 128;
  bool use_batchnorm = false;
  Head head = Head::Sigmoid1;
  Index input_channels = 1;
  double bn_momentum = 0.1;
  double bn_epsilon = 1e-5;

  Index levels() const { return static_cast<Index>(encoder_filters.size()); }
  Index head_channels() const { return head == Head::Sigmoid1 ? 1 : 2; }
  /// Spatial extents must be divisible by this.
  Index grid_multiple() const { return Index{1} << levels(); }

  void validate() const;

  static ModelConfig deepdefacer();
  static ModelConfig baseline();
  /// Same variant semantics with a custom width ladder; the bottleneck keeps
  /// the variant's ratio to the last encoder level.
  static ModelConfig with_filters(Variant variant, std::vector<Index> encoder_filters);
};

enum class LayerKind { Conv, BatchNorm };

struct LayerSpec {
  std::string name;
  LayerKind kind = LayerKind::Conv;
  Index in_channels = 0;
  Index out_channels = 0;
  Index kernel = 3;
};

/// Layers in execution order.
std::vector<LayerSpec> model_layers(const ModelConfig& config);

template <typename Scalar>
struct NamedTensor {
  std::string name;
  Tensor5<Scalar> value;
  bool trainable = true;
};

/// Ordered, uniquely named parameter set.
template <typename Scalar>
class WeightStore {
 public:
  Variant variant = Variant::DeepDefacer;

  void add(std::string name, Tensor5<Scalar> value, bool trainable = true) {
    if (index_.count(name)) throw ConfigError("duplicate parameter name '" + name + "'");
    index_.emplace(name, entries_.size());
    entries_.push_back({std::move(name), std::move(value), trainable});
  }

  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  Tensor5<Scalar>& at(const std::string& name) { return entries_[lookup(name)].value; }
  const Tensor5<Scalar>& at(const std::string& name) const { return entries_[lookup(name)].value; }

  std::vector<NamedTensor<Scalar>>& entries() { return entries_; }
  const std::vector<NamedTensor<Scalar>>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }

  Index total_count() const {
    Index n = 0;
    for (const auto& e : entries_) n += e.value.size();
    return n;
  }

  void zero_grad() {
    for (auto& e : entries_) e.value.zero_grad();
  }

  template <typename Other>
  WeightStore<Other> cast() const {
    WeightStore<Other> out;
    out.variant = variant;
    for (const auto& e : entries_) out.add(e.name, e.value.template cast<Other>(), e.trainable);
    return out;
  }

  bool bit_equal(const WeightStore& o) const {
    if (variant != o.variant || entries_.size() != o.entries_.size()) return false;
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      const auto& a = entries_[i];
      const auto& b = o.entries_[i];
      if (a.name != b.name || a.trainable != b.trainable || a.value.shape() != b.value.shape()) return false;
      if (std::memcmp(a.value.raw(), b.value.raw(), sizeof(Scalar) * static_cast<std::size_t>(a.value.size())))
        return false;
    }
    return true;
  }

 private:
  std::size_t lookup(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("no parameter named '" + name + "'");
    return it->second;
  }

  std::vector<NamedTensor<Scalar>> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

template <typename Scalar>
Index count_parameters(const WeightStore<Scalar>& store) {
  return store.total_count();
}

/// Parameter counts printed in the reference results table.
inline constexpr Index kReferenceDeepDefacerParams = 1'412'197;
inline constexpr Index kReferenceBaselineParams = 19'069'955;

/// He-normal kernels (variance 2 / (in_channels * k^3)), zero biases, unit
/// batch-norm scale and identity running statistics.  Deterministic per seed.
template <typename Scalar>
WeightStore<Scalar> build_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  WeightStore<Scalar> store;
  store.variant = config.variant;
  std::mt19937_64 rng(seed);
  for (const LayerSpec& l : model_layers(config)) {
    if (l.kind == LayerKind::Conv) {
      Tensor5<Scalar> w(conv_weight_shape(l.out_channels, l.in_channels, l.kernel));
      const double fan_in = static_cast<double>(l.in_channels * l.kernel * l.kernel * l.kernel);
      std::normal_distribution<double> he(0.0, std::sqrt(2.0 / fan_in));
      for (Index i = 0; i < w.size(); ++i) w.raw()[i] = static_cast<Scalar>(he(rng));
      store.add(l.name + ".weight", std::move(w));
      store.add(l.name + ".bias", Tensor5<Scalar>(bias_shape(l.out_channels)));
    } else {
      const Index c = l.out_channels;
      store.add(l.name + ".gamma", Tensor5<Scalar>::Constant(bias_shape(c), Scalar(1)));
      store.add(l.name + ".beta", Tensor5<Scalar>(bias_shape(c)));
      store.add(l.name + ".running_mean", Tensor5<Scalar>(bias_shape(c)), false);
      store.add(l.name + ".running_var", Tensor5<Scalar>::Constant(bias_shape(c), Scalar(1)), false);
    }
  }
  return store;
}

/// Recovers the architecture from parameter names and shapes.
template <typename Scalar>
ModelConfig infer_config(const WeightStore<Scalar>& store) {
  ModelConfig c = store.variant == Variant::Baseline ? ModelConfig::baseline() : ModelConfig::deepdefacer();
  c.encoder_filters.clear();
  for (Index i = 0; store.contains("enc" + std::to_string(i) + ".conv1.weight"); ++i)
    c.encoder_filters.push_back(store.at("enc" + std::to_string(i) + ".conv1.weight").shape().n());
  if (c.encoder_filters.empty()) throw ConfigError("weight store has no encoder layers");
  c.input_channels = store.at("enc0.conv1.weight").shape().c();
  c.use_batchnorm = store.contains("enc0.bn.gamma");
  c.bottleneck = store.contains("bott.widen.weight") ? store.at("bott.widen.weight").shape().n()
                                                     : store.at("bott.conv2.weight").shape().n();
  c.head = store.at("head.weight").shape().n() == 1 ? Head::Sigmoid1 : Head::Softmax2;
  c.validate();
  return c;
}

std::string model_summary(const ModelConfig& config, Index total_count);

namespace detail {

// Evaluates the network directly on tensors.
template <typename Scalar>
struct EagerExec {
  using Value = Tensor5<Scalar>;
  const WeightStore<Scalar>& store;
  double bn_epsilon;

  Value input(const Tensor5<Scalar>& x) { return x; }
  Value conv(const Value& x, const std::string& name) {
    return conv3d(x, store.at(name + ".weight"), store.at(name + ".bias"), Padding::Same);
  }
  Value relu(const Value& x) { return vdf::relu(x); }
  Value pool(const Value& x) { return maxpool3d(x).output; }
  Value upsample(const Value& x) { return upsample_nearest3d(x); }
  Value concat(const Value& a, const Value& b) { return concat_channels(a, b); }
  Value batchnorm(const Value& x, const std::string& name) {
    return batchnorm3d_inference(x, store.at(name + ".gamma"), store.at(name + ".beta"),
                                 store.at(name + ".running_mean"), store.at(name + ".running_var"), bn_epsilon);
  }
  Value sigmoid(const Value& x) { return vdf::sigmoid(x); }
};

// Records the network onto a tape.
template <typename Scalar>
struct TapeExec {
  using Value = Var;
  Tape<Scalar>& tape;
  WeightStore<Scalar>& store;
  Mode mode;
  double bn_momentum;
  double bn_epsilon;
  std::unordered_map<std::string, Var> params{};

  Var param(const std::string& name) {
    auto it = params.find(name);
    if (it != params.end()) return it->second;
    Var v = tape.parameter(store.at(name));
    params.emplace(name, v);
    return v;
  }
  Value input(const Tensor5<Scalar>& x) { return tape.input(x); }
  Value conv(Value x, const std::string& name) {
    return tape.conv3d(x, param(name + ".weight"), param(name + ".bias"), Padding::Same);
  }
  Value relu(Value x) { return tape.relu(x); }
  Value pool(Value x) { return tape.maxpool(x); }
  Value upsample(Value x) { return tape.upsample(x); }
  Value concat(Value a, Value b) { return tape.concat(a, b); }
  Value batchnorm(Value x, const std::string& name) {
    return tape.batchnorm(x, param(name + ".gamma"), param(name + ".beta"), store.at(name + ".running_mean"),
                          store.at(name + ".running_var"), mode, bn_momentum, bn_epsilon);
  }
  Value sigmoid(Value x) { return tape.sigmoid(x); }
};

void check_input_shape(const ModelConfig& config, const Shape5& s);

// Returns the raw head output (logits) and, for the sigmoid head, applies the
// sigmoid when `apply_sigmoid` is set.
template <typename Exec>
typename Exec::Value run_unet(Exec& ex, const ModelConfig& config, typename Exec::Value x, bool apply_sigmoid) {
  using Value = typename Exec::Value;
  std::vector<Value> skips;
  skips.reserve(static_cast<std::size_t>(config.levels()));
  for (Index i = 0; i < config.levels(); ++i) {
    const std::string p = "enc" + std::to_string(i);
    x = ex.relu(ex.conv(x, p + ".conv1"));
    x = ex.relu(ex.conv(x, p + ".conv2"));
    skips.push_back(x);
    x = ex.pool(x);
    if (config.use_batchnorm) x = ex.batchnorm(x, p + ".bn");
  }
  x = ex.relu(ex.conv(x, "bott.conv1"));
  const Index last = config.encoder_filters.back();
  x = ex.relu(ex.conv(x, config.bottleneck == 2 * last ? "bott.conv2" : "bott.widen"));
  for (Index i = config.levels() - 1; i >= 0; --i) {
    x = ex.upsample(x);
    x = ex.concat(x, skips[static_cast<std::size_t>(i)]);
    x = ex.relu(ex.conv(x, "dec" + std::to_string(i) + ".conv"));
  }
  x = ex.conv(x, "head");
  if (apply_sigmoid && config.head == Head::Sigmoid1) x = ex.sigmoid(x);
  return x;
}

}  // namespace detail

/// Inference forward pass: per-voxel keep probability for the sigmoid head,
/// per-voxel (deface, keep) softmax for the two-class head.  Read-only on the
/// store, so concurrent calls over one store are safe.
template <typename Scalar>
Tensor5<Scalar> forward(const WeightStore<Scalar>& store, const ModelConfig& config, const Tensor5<Scalar>& input) {
  detail::check_input_shape(config, input.shape());
  detail::EagerExec<Scalar> ex{store, config.bn_epsilon};
  Tensor5<Scalar> out = detail::run_unet(ex, config, input, true);
  if (config.head == Head::Softmax2) out = softmax_channels(out);
  return out;
}

/// Records a training forward pass.  Returns probabilities for the sigmoid
/// head and logits for the softmax head (the loss fuses the softmax).
template <typename Scalar>
Var forward_on_tape(Tape<Scalar>& tape, WeightStore<Scalar>& store, const ModelConfig& config,
                    const Tensor5<Scalar>& input, Mode mode = Mode::Train) {
  detail::check_input_shape(config, input.shape());
  detail::TapeExec<Scalar> ex{tape, store, mode, config.bn_momentum, config.bn_epsilon};
  return detail::run_unet(ex, config, ex.input(input), true);
}

/// Same, for an input already on the tape (e.g. one that requires a gradient).
template <typename Scalar>
Var forward_on_tape(Tape<Scalar>& tape, WeightStore<Scalar>& store, const ModelConfig& config, Var input,
                    Mode mode = Mode::Train) {
  detail::check_input_shape(config, tape.value(input).shape());
  detail::TapeExec<Scalar> ex{tape, store, mode, config.bn_momentum, config.bn_epsilon};
  return detail::run_unet(ex, config, input, true);
}

/// Forward pass in either mode; train mode runs through a tape and updates
/// batch-norm running statistics.
template <typename Scalar>
Tensor5<Scalar> forward(WeightStore<Scalar>& store, const ModelConfig& config, const Tensor5<Scalar>& input,
                        Mode mode) {
  if (mode == Mode::Infer) return forward(static_cast<const WeightStore<Scalar>&>(store), config, input);
  Tape<Scalar> tape;
  Tensor5<Scalar> out = tape.value(forward_on_tape(tape, store, config, input, mode));
  if (config.head == Head::Softmax2) out = softmax_channels(out);
  return out;
}

}  // namespace vdf

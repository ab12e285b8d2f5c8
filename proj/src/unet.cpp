#include "vdf/unet.hpp"

#include <iomanip>
#include <sstream>

namespace vdf {

std::string to_string(Variant v) { return v == Variant::Baseline ? "baseline" : "deepdefacer"; }

Variant variant_from_string(const std::string& s) {
  if (s == "deepdefacer") return Variant::DeepDefacer;
  if (s == "baseline") return Variant::Baseline;
  throw ConfigError("unknown model variant '" + s + "' (expected deepdefacer or baseline)");
}

void ModelConfig::validate() const {
  if (encoder_filters.empty()) throw ConfigError("encoder filter list is empty");
  if (input_channels < 1) throw ConfigError("input_channels must be positive");
  if (encoder_filters.front() < 1) throw ConfigError("encoder filters must be positive");
  for (std::size_t i = 1; i < encoder_filters.size(); ++i)
    if (encoder_filters[i] != 2 * encoder_filters[i - 1])
      throw ConfigError("encoder filters must double at every level, got " + std::to_string(encoder_filters[i - 1]) +
                        " then " + std::to_string(encoder_filters[i]));
  if (bottleneck < 2 * encoder_filters.back())
    throw ConfigError("bottleneck width " + std::to_string(bottleneck) + " is below twice the last encoder level");
  if (!(bn_epsilon > 0.0)) throw ConfigError("batch-norm epsilon must be positive");
}

ModelConfig ModelConfig::deepdefacer() { return with_filters(Variant::DeepDefacer, {8, 16, 32, 64}); }

ModelConfig ModelConfig::baseline() { return with_filters(Variant::Baseline, {32, 64, 128, 256}); }

ModelConfig ModelConfig::with_filters(Variant variant, std::vector<Index> encoder_filters) {
  ModelConfig c;
  c.variant = variant;
  c.encoder_filters = std::move(encoder_filters);
  const Index last = c.encoder_filters.empty() ? 0 : c.encoder_filters.back();
  if (variant == Variant::DeepDefacer) {
    c.bottleneck = 2 * last;
    c.use_batchnorm = false;
    c.head = Head::Sigmoid1;
  } else {
    c.bottleneck = 4 * last;
    c.use_batchnorm = true;
    c.head = Head::Softmax2;
  }
  return c;
}

std::vector<LayerSpec> model_layers(const ModelConfig& config) {
  std::vector<LayerSpec> layers;
  Index in = config.input_channels;
  for (Index i = 0; i < config.levels(); ++i) {
    const std::string p = "enc" + std::to_string(i);
    const Index f = config.encoder_filters[static_cast<std::size_t>(i)];
    layers.push_back({p + ".conv1", LayerKind::Conv, in, f, 3});
    layers.push_back({p + ".conv2", LayerKind::Conv, f, f, 3});
    if (config.use_batchnorm) layers.push_back({p + ".bn", LayerKind::BatchNorm, f, f, 1});
    in = f;
  }
  const Index wide = 2 * in;
  layers.push_back({"bott.conv1", LayerKind::Conv, in, wide, 3});
  if (config.bottleneck == wide)
    layers.push_back({"bott.conv2", LayerKind::Conv, wide, wide, 3});
  else
    layers.push_back({"bott.widen", LayerKind::Conv, wide, config.bottleneck, 1});
  Index up = config.bottleneck;
  for (Index i = config.levels() - 1; i >= 0; --i) {
    const Index f = config.encoder_filters[static_cast<std::size_t>(i)];
    layers.push_back({"dec" + std::to_string(i) + ".conv", LayerKind::Conv, up + f, f, 3});
    up = f;
  }
  layers.push_back({"head", LayerKind::Conv, up, config.head_channels(), 1});
  return layers;
}

namespace {

Index layer_parameter_count(const LayerSpec& l) {
  if (l.kind == LayerKind::BatchNorm) return 4 * l.out_channels;
  return l.out_channels * l.in_channels * l.kernel * l.kernel * l.kernel + l.out_channels;
}

}  // namespace

std::string model_summary(const ModelConfig& config, Index total_count) {
  std::ostringstream os;
  os << "model: " << to_string(config.variant) << "  filters (";
  for (std::size_t i = 0; i < config.encoder_filters.size(); ++i)
    os << (i ? ", " : "") << config.encoder_filters[i];
  os << ")  bottleneck " << config.bottleneck << "  batchnorm " << (config.use_batchnorm ? "yes" : "no")
     << "  head " << (config.head == Head::Sigmoid1 ? "sigmoid x1" : "softmax x2") << "\n";
  os << std::left << std::setw(16) << "layer" << std::setw(22) << "shape" << std::right << std::setw(12)
     << "params" << "\n";
  Index sum = 0;
  for (const LayerSpec& l : model_layers(config)) {
    std::string shape = l.kind == LayerKind::Conv
                            ? std::to_string(l.out_channels) + "x" + std::to_string(l.in_channels) + "x" +
                                  std::to_string(l.kernel) + "^3"
                            : "bn(" + std::to_string(l.out_channels) + ")";
    const Index n = layer_parameter_count(l);
    sum += n;
    os << std::left << std::setw(16) << l.name << std::setw(22) << shape << std::right << std::setw(12) << n << "\n";
  }
  os << std::left << std::setw(38) << "total" << std::right << std::setw(12) << total_count << "\n";
  if (sum != total_count) os << "warning: layer sum " << sum << " differs from store total\n";
  const Index ref = config.variant == Variant::Baseline ? kReferenceBaselineParams : kReferenceDeepDefacerParams;
  const Index delta = total_count - ref;
  os << std::left << std::setw(38) << "reference count" << std::right << std::setw(12) << ref << "\n";
  os << std::left << std::setw(38) << "delta vs reference" << std::right << std::setw(12) << delta << " ("
     << std::fixed << std::setprecision(2) << 100.0 * static_cast<double>(delta) / static_cast<double>(ref)
     << "%)\n";
  return os.str();
}

namespace detail {

void check_input_shape(const ModelConfig& config, const Shape5& s) {
  if (s.c() != config.input_channels)
    throw DimensionError("C", "model expects " + std::to_string(config.input_channels) + " input channel(s), got " +
                                  std::to_string(s.c()));
  const Index m = config.grid_multiple();
  for (std::size_t a = 2; a < 5; ++a)
    if (s.dims[a] < m || s.dims[a] % m != 0)
      throw DimensionError(kAxisNames[a], "spatial extent " + std::to_string(s.dims[a]) +
                                              " is not a positive multiple of " + std::to_string(m) +
                                              "; resample the input with fit_to_grid first");
}

}  // namespace detail
}  // namespace vdf

#include "vdf/train.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "json.hpp"
#include "vdf/loss.hpp"
#include "vdf/metrics.hpp"
#include "vdf/nifti.hpp"
#include "vdf/random.hpp"
#include "vdf/weights_io.hpp"

namespace vdf {

namespace {

class JsonlSink {
 public:
  explicit JsonlSink(const std::optional<std::filesystem::path>& path) {
    if (!path) return;
    out_.open(*path, std::ios::trunc);
    if (!out_) throw IoError("cannot open '" + path->string() + "' for writing");
  }
  void write(const nlohmann::ordered_json& j) {
    if (out_.is_open()) out_ << j.dump() << "\n";
  }
  void flush() {
    if (out_.is_open()) out_.flush();
  }

 private:
  std::ofstream out_;
};

std::optional<std::filesystem::path> timing_path(const std::optional<std::filesystem::path>& metrics) {
  if (!metrics) return std::nullopt;
  std::filesystem::path p = *metrics;
  p.replace_filename(p.stem().string() + ".timing.jsonl");
  return p;
}

std::string layer_norms(const WeightStore<float>& store) {
  std::ostringstream os;
  for (const auto& e : store.entries()) {
    os << "  " << e.name << ": |w| = " << e.value.data().cast<double>().matrix().norm();
    if (e.value.has_grad()) os << ", |g| = " << e.value.grad().cast<double>().matrix().norm();
    os << "\n";
  }
  return os.str();
}

Tensor5<float> mask_tensor(const MaskVolume& m) {
  return Tensor5<float>(Shape5(1, 1, m.dims.d, m.dims.h, m.dims.w), m.data.cast<float>());
}

ValidationRecord validate(const WeightStore<float>& store, const ModelConfig& config, const std::vector<ValSample>& val,
                          const GridOptions& grid, Index iteration) {
  ValidationRecord r;
  r.iteration = iteration;
  DefaceOptions opt;
  opt.grid = grid;
  for (const auto& s : val) {
    const ConfusionCounts c = confusion(deface_volume(store, config, s.image, opt).scored_mask, s.truth);
    const PrecisionRecall pr = precision_recall(c);
    r.dice += dice(c);
    r.precision += pr.precision;
    r.recall += pr.recall;
  }
  const double n = static_cast<double>(val.size());
  r.dice /= n;
  r.precision /= n;
  r.recall /= n;
  return r;
}

}  // namespace

TrainSample prepare_sample(std::string id, const Volume<float>& image, const MaskVolume& mask,
                           const GridOptions& grid) {
  require_same_dims(mask, image.dims, "training pair");
  auto [fitted, recipe] = fit_to_grid(normalize_intensity(image), grid);
  return {std::move(id), std::move(fitted), resample_mask(mask, recipe.grid)};
}

std::vector<TrainSample> load_train_samples(const std::filesystem::path& root, const DatasetManifest& manifest,
                                            Split split, const GridOptions& grid) {
  const auto rows = manifest.split(split);
  std::vector<TrainSample> out(rows.size());
  std::vector<std::string> errors(rows.size());
  const long long n = static_cast<long long>(rows.size());
#pragma omp parallel for schedule(dynamic)
  for (long long i = 0; i < n; ++i) {
    const auto k = static_cast<std::size_t>(i);
    try {
      out[k] = prepare_sample(rows[k].id, read_nifti(root / rows[k].image), read_mask(root / rows[k].mask), grid);
    } catch (const std::exception& e) {
      errors[k] = rows[k].id + ": " + e.what();
    }
  }
  for (const auto& e : errors)
    if (!e.empty()) throw IoError(e);
  return out;
}

std::vector<ValSample> load_val_samples(const std::filesystem::path& root, const DatasetManifest& manifest,
                                        Split split) {
  std::vector<ValSample> out;
  for (const auto& r : manifest.split(split)) out.push_back({r.id, read_nifti(root / r.image), read_mask(root / r.mask)});
  return out;
}

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::uint64_t epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(derive_seed(seed, 0x5eed0000ULL + epoch));
  for (std::size_t i = n; i > 1; --i) {  // Fisher-Yates, portable across standard libraries
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(order[i - 1], order[j]);
  }
  return order;
}

TrainReport train_loop(WeightStore<float> store, const std::vector<TrainSample>& train,
                       const std::vector<ValSample>& val, const TrainConfig& config) {
  config.model.validate();
  if (config.iterations < 0) throw ConfigError("iteration count must be non-negative");
  if (config.iterations > 0 && train.empty()) throw EmptyInputError("training set is empty");
  for (const auto& s : train)
    for (int a = 0; a < 3; ++a)
      if (s.image.dims[a] % config.model.grid_multiple() != 0)
        throw DimensionError(std::string(1, "DHW"[a]), "training sample '" + s.id + "' is not on the network grid");

  Adam<float> adam(config.adam);
  JsonlSink metrics(config.metrics_path);
  JsonlSink timing(timing_path(config.metrics_path));
  auto log = [&](const std::string& s) {
    if (config.log) config.log(s);
  };
  if (config.checkpoint_dir) {
    std::error_code ec;
    std::filesystem::create_directories(*config.checkpoint_dir, ec);
    if (ec) throw IoError("cannot create checkpoint directory '" + config.checkpoint_dir->string() + "'");
  }

  TrainReport report;
  report.losses.reserve(static_cast<std::size_t>(config.iterations));
  std::vector<std::size_t> order;
  const auto run_validation = [&](Index iter) {
    if (val.empty()) return;
    const ValidationRecord v = validate(store, config.model, val, config.grid, iter);
    report.validations.push_back(v);
    nlohmann::ordered_json j;
    j["iter"] = iter;
    j["val_dice"] = v.dice;
    j["val_precision"] = v.precision;
    j["val_recall"] = v.recall;
    metrics.write(j);
    std::ostringstream os;
    os << "iter " << iter << "  val dice " << v.dice << "  precision " << v.precision << "  recall " << v.recall;
    log(os.str());
    if (v.dice > report.best_dice) {
      report.best_dice = v.dice;
      report.best_iteration = iter;
      report.best_store = store;
      if (config.checkpoint_dir) {
        const auto path = *config.checkpoint_dir / "best.vdfw";
        save_weights(store, path);
        report.best_checkpoint = path.string();
      } else {
        report.best_checkpoint = "iter-" + std::to_string(iter);
      }
    }
  };

  for (Index it = 0; it < config.iterations; ++it) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto n = train.size();
    const std::uint64_t epoch = static_cast<std::uint64_t>(it) / n;
    if (static_cast<std::uint64_t>(it) % n == 0) order = epoch_order(n, config.seed, epoch);
    const TrainSample& s = train[order[static_cast<std::size_t>(it) % n]];

    Volume<float> image = s.image;
    MaskVolume mask = s.mask;
    if (config.augment) {
      const auto aug = RigidAugmentation::sample(derive_seed(config.seed, static_cast<std::uint64_t>(it)),
                                                 config.augmentation);
      std::tie(image, mask) = augment(s.image, s.mask, aug);
    }
    const Tensor5<float> x = image.to_tensor<float>();
    const Tensor5<float> y = mask_tensor(mask);

    store.zero_grad();
    Tape<float> tape;
    const Var out = forward_on_tape(tape, store, config.model, x, Mode::Train);
    LossResult<float> loss = config.model.head == Head::Sigmoid1
                                 ? bce_loss(LossBatch<float>{tape.value(out), y})
                                 : softmax_cross_entropy(tape.value(out), y);
    if (!std::isfinite(loss.loss)) {
      tape.backward(out, loss.grad);
      throw NumericalError("non-finite loss at iteration " + std::to_string(it) + " on sample '" + s.id +
                           "'; layer norms:\n" + layer_norms(store));
    }
    tape.backward(out, loss.grad);
    adam.step(store);
    report.losses.push_back(loss.loss);

    nlohmann::ordered_json j;
    j["iter"] = it;
    j["loss"] = loss.loss;
    metrics.write(j);
    nlohmann::ordered_json tj;
    tj["iter"] = it;
    tj["ms"] = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    timing.write(tj);

    const Index done = it + 1;
    if (config.checkpoint_dir && config.checkpoint_every > 0 && done % config.checkpoint_every == 0)
      save_weights(store, *config.checkpoint_dir / ("iter-" + std::to_string(done) + ".vdfw"));
    if (config.validate_every > 0 && (done % config.validate_every == 0 || done == config.iterations))
      run_validation(done);
    else if (done % 50 == 0)
      log("iter " + std::to_string(done) + "  loss " + std::to_string(loss.loss));
  }
  metrics.flush();
  timing.flush();
  store.zero_grad();
  for (auto& e : store.entries()) e.value.drop_grad();
  if (report.best_iteration < 0) {
    report.best_store = store;
    report.best_iteration = config.iterations;
  }
  for (auto& e : report.best_store.entries()) e.value.drop_grad();
  report.final_store = std::move(store);
  return report;
}

}  // namespace vdf

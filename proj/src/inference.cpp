#include "vdf/inference.hpp"

#include <chrono>

#include "vdf/nifti.hpp"

namespace vdf {

namespace {

double ms_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
}

// Keep-probability channel of a network output as a grid volume.
Volume<float> keep_channel(const Tensor5<float>& out, const ModelConfig& config, const Volume<float>& grid_like) {
  Volume<float> v = grid_like.like<float>();
  const Index keep = config.head == Head::Sigmoid1 ? 0 : 1;
  const float* src = out.channel(0, keep);
  for (Index i = 0; i < v.data.size(); ++i) v.data[i] = std::clamp(src[i], 0.0f, 1.0f);
  return v;
}

GridOptions usable_grid(const Volume<float>& image, const ModelConfig& config, const GridOptions& grid,
                        bool* fell_back) {
  // With every extent at the pooling multiple or below, the bottleneck sees a
  // single voxel; use the full resolution instead.
  const Dims3 g = grid_dims(image.dims, grid);
  const Index coarse = 2 * config.grid_multiple();
  const bool too_small = g.d < coarse && g.h < coarse && g.w < coarse &&
                         (image.dims.d >= coarse || image.dims.h >= coarse || image.dims.w >= coarse);
  if (fell_back) *fell_back = too_small && grid.shrink < 1.0;
  if (too_small && grid.shrink < 1.0) {
    GridOptions full = grid;
    full.shrink = 1.0;
    return full;
  }
  return grid;
}

}  // namespace

Volume<float> predict_keep_probability(const WeightStore<float>& store, const ModelConfig& config,
                                       const Volume<float>& image, const GridOptions& grid) {
  const Volume<float> norm = normalize_intensity(image);
  GridOptions g = usable_grid(norm, config, grid, nullptr);
  g.multiple = std::max(g.multiple, config.grid_multiple());
  auto [fitted, recipe] = fit_to_grid(norm, g);
  const Tensor5<float> out = forward(store, config, fitted.to_tensor<float>());
  return restore_from_grid(keep_channel(out, config, fitted), recipe);
}

DefaceResult deface_volume(const WeightStore<float>& store, const ModelConfig& config, const Volume<float>& image,
                           const DefaceOptions& opt) {
  image.validate();
  DefaceResult r;
  auto t0 = std::chrono::steady_clock::now();
  const Volume<float> norm = normalize_intensity(image);
  GridOptions g = usable_grid(norm, config, opt.grid, &r.shrink_fallback);
  g.multiple = std::max(g.multiple, config.grid_multiple());
  auto [fitted, recipe] = fit_to_grid(norm, g);
  r.grid = recipe.grid;
  r.timings.preprocess_ms = ms_since(t0);

  t0 = std::chrono::steady_clock::now();
  const Tensor5<float> out = forward(store, config, fitted.to_tensor<float>());
  r.timings.forward_ms = ms_since(t0);

  t0 = std::chrono::steady_clock::now();
  r.keep_probability = restore_from_grid(keep_channel(out, config, fitted), recipe);
  r.mask = threshold_mask(r.keep_probability, opt.tau);
  r.defaced = deface(image, r.mask);
  if (config.head == Head::Softmax2)
    r.scored_mask = binarize_baseline_output(norm, deface(norm, r.mask), opt.tau_eq);
  else
    r.scored_mask = r.mask;
  r.timings.postprocess_ms = ms_since(t0);
  return r;
}

EvalReport evaluate(const MaskSource& source, const std::filesystem::path& root, const DatasetManifest& manifest,
                    Split split, const std::string& model_name, std::vector<std::string>* warnings) {
  const std::vector<ManifestRow> rows = manifest.split(split);
  if (rows.empty()) throw EmptyInputError("split '" + to_string(split) + "' has no rows");
  const long long n = static_cast<long long>(rows.size());
  std::vector<EvalRow> results(rows.size());
  std::vector<int> status(rows.size(), 0);  // 0 ok, 1 skipped, 2 failed
  std::vector<std::string> messages(rows.size());
#pragma omp parallel for schedule(dynamic)
  for (long long i = 0; i < n; ++i) {
    const auto k = static_cast<std::size_t>(i);
    const ManifestRow& row = rows[k];
    try {
      if (row.mask.empty() || !std::filesystem::exists(root / row.mask)) {
        status[k] = 1;
        messages[k] = "row '" + row.id + "' has no ground-truth mask; skipped";
        continue;
      }
      const Volume<float> image = read_nifti(root / row.image);
      const MaskVolume truth = read_mask(root / row.mask);
      const MaskVolume pred = source(row, image);
      const ConfusionCounts c = confusion(pred, truth);
      const PrecisionRecall pr = precision_recall(c);
      results[k] = {row.id, row.protocol, dice(c), pr.precision, pr.recall};
    } catch (const std::exception& e) {
      status[k] = 2;
      messages[k] = e.what();
    }
  }
  EvalReport report;
  report.model = model_name;
  for (std::size_t k = 0; k < rows.size(); ++k) {
    if (status[k] == 2) throw IoError("evaluating '" + rows[k].id + "': " + messages[k]);
    if (status[k] == 1) {
      ++report.skipped;
      if (warnings) warnings->push_back(messages[k]);
      continue;
    }
    report.rows.push_back(results[k]);
  }
  if (report.rows.empty()) throw EmptyInputError("no row of split '" + to_string(split) + "' has a ground truth");
  report.finalize();
  return report;
}

EvalReport evaluate_model(const WeightStore<float>& store, const ModelConfig& config,
                          const std::filesystem::path& root, const DatasetManifest& manifest, Split split,
                          const DefaceOptions& opt, std::vector<std::string>* warnings) {
  const MaskSource source = [&](const ManifestRow&, const Volume<float>& image) {
    return deface_volume(store, config, image, opt).scored_mask;
  };
  return evaluate(source, root, manifest, split, to_string(config.variant), warnings);
}

ThresholdSearchResult threshold_search(const WeightStore<float>& store, const ModelConfig& config,
                                       const std::filesystem::path& root, const DatasetManifest& manifest,
                                       Split split, const ThresholdGrid& grid, const GridOptions& grid_opt) {
  std::vector<ThresholdCase> cases;
  for (const auto& row : manifest.split(split)) {
    if (row.mask.empty() || !std::filesystem::exists(root / row.mask)) continue;
    const Volume<float> image = read_nifti(root / row.image);
    cases.push_back({predict_keep_probability(store, config, image, grid_opt), read_mask(root / row.mask)});
  }
  return threshold_search(cases, grid);
}

}  // namespace vdf

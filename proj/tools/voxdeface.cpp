// voxdeface: phantom corpus generation, training, defacing, evaluation,
// benchmarking and file inspection.

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "vdf/bench.hpp"
#include "vdf/inference.hpp"
#include "vdf/nifti.hpp"
#include "vdf/ops.hpp"
#include "vdf/phantom.hpp"
#include "vdf/train.hpp"
#include "vdf/weights_io.hpp"

namespace fs = std::filesystem;
using namespace vdf;

namespace {

enum Exit { kOk = 0, kGeneric = 1, kIo = 2, kNumerical = 3, kEmpty = 4 };

void write_text(const fs::path& path, const std::string& text) {
  write_file_atomic(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

Dims3 parse_dims(const std::string& s) {
  Dims3 d;
  char x1 = 0, x2 = 0;
  long long a = 0, b = 0, c = 0;
  std::istringstream in(s);
  if (!(in >> a >> x1 >> b >> x2 >> c) || x1 != 'x' || x2 != 'x' || a < 1 || b < 1 || c < 1 || !in.eof())
    throw UsageError("dims must look like DxHxW with positive extents, got '" + s + "'");
  d.d = a;
  d.h = b;
  d.w = c;
  return d;
}

ModelConfig config_for(const std::string& variant, const std::vector<Index>& filters) {
  const Variant v = variant_from_string(variant);
  if (filters.empty()) return v == Variant::Baseline ? ModelConfig::baseline() : ModelConfig::deepdefacer();
  return ModelConfig::with_filters(v, filters);
}

struct Loaded {
  WeightStore<float> store;
  ModelConfig config;
};

Loaded load_model(const fs::path& path) {
  Loaded m{load_weights(path), {}};
  m.config = infer_config(m.store);
  return m;
}

std::string fmt_ms(double ms) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.1f ms", ms);
  return buf;
}

// --------------------------------------------------------------------------

struct PhantomArgs {
  std::string out;
  std::size_t count = 60;
  std::uint64_t seed = 0;
  std::size_t protocols = 10;
  std::vector<std::size_t> split_counts;
};

int run_make_phantoms(const PhantomArgs& a) {
  CorpusOptions opt;
  opt.count = a.count;
  opt.seed = a.seed;
  opt.protocols = a.protocols;
  if (!a.split_counts.empty()) {
    if (a.split_counts.size() != 3) throw UsageError("--split-counts takes three values: train,val,test");
    opt.manifest.counts = SplitCounts{a.split_counts[0], a.split_counts[1], a.split_counts[2]};
  }
  const DatasetManifest m = make_corpus(a.out, opt);
  std::cout << "wrote " << m.rows.size() << " phantoms to " << a.out << "\n";
  for (Split s : {Split::Train, Split::Val, Split::Test}) {
    const auto p = m.protocols(s);
    std::cout << "  " << to_string(s) << ": " << m.split(s).size() << " images, " << p.size() << " protocols\n";
  }
  return kOk;
}

struct TrainArgs {
  std::string data;
  std::string variant = "deepdefacer";
  std::vector<Index> filters;
  Index iters = 1000;
  std::uint64_t seed = 0;
  std::string out;
  std::string metrics;
  std::string checkpoints;
  double lr = 1e-4;
  double shrink = 0.5;
  Index grid_floor = 64;
  Index validate_every = 50;
  bool no_augment = false;
  int threads = 1;
};

int run_train(const TrainArgs& a) {
  set_num_threads(a.threads);
  TrainConfig cfg;
  cfg.model = config_for(a.variant, a.filters);
  cfg.adam.learning_rate = a.lr;
  cfg.iterations = a.iters;
  cfg.seed = a.seed;
  cfg.grid.shrink = a.shrink;
  cfg.grid.floor = a.grid_floor;
  cfg.grid.multiple = cfg.model.grid_multiple();
  cfg.augment = !a.no_augment;
  cfg.validate_every = a.validate_every;
  const fs::path out(a.out);
  cfg.metrics_path = a.metrics.empty() ? fs::path(out).replace_extension(".metrics.jsonl") : fs::path(a.metrics);
  cfg.checkpoint_dir = a.checkpoints.empty() ? fs::path(out).replace_extension(".ckpt") : fs::path(a.checkpoints);
  cfg.log = [](const std::string& s) { std::cout << s << std::endl; };

  const DatasetManifest manifest = read_manifest(a.data);
  const auto train = load_train_samples(a.data, manifest, Split::Train, cfg.grid);
  const auto val = load_val_samples(a.data, manifest, Split::Val);
  if (cfg.iterations > 0 && train.empty()) throw EmptyInputError("train split is empty");
  WeightStore<float> store = build_model<float>(cfg.model, a.seed);
  std::cout << model_summary(cfg.model, store.total_count());
  std::cout << "training on " << train.size() << " images, validating on " << val.size() << "\n";
  TrainReport r = train_loop(std::move(store), train, val, cfg);
  save_weights(r.final_store, out);
  std::cout << "final loss " << (r.losses.empty() ? 0.0 : r.losses.back()) << "\n";
  if (!r.validations.empty())
    std::cout << "best validation dice " << r.best_dice << " at iteration " << r.best_iteration << " ("
              << r.best_checkpoint << ")\n";
  std::cout << "wrote " << out.string() << "\n";
  return kOk;
}

struct DefaceArgs {
  std::string model;
  std::string in;
  std::string out;
  std::string mask_out;
  double shrink = 0.5;
  Index grid_floor = 64;
  double tau = 0.5;
  int threads = 1;
};

int run_deface(const DefaceArgs& a) {
  set_num_threads(a.threads);
  const Loaded m = load_model(a.model);
  DefaceOptions opt;
  opt.grid.shrink = a.shrink;
  opt.grid.floor = a.grid_floor;
  opt.tau = a.tau;
  const auto t0 = std::chrono::steady_clock::now();
  const Volume<float> image = read_nifti(a.in);
  const double load_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  const DefaceResult r = deface_volume(m.store, m.config, image, opt);
  if (r.shrink_fallback) std::cerr << "warning: shrunken grid too coarse, running without shrink\n";
  const auto t1 = std::chrono::steady_clock::now();
  write_nifti(r.defaced, a.out);
  if (!a.mask_out.empty()) write_nifti(r.mask, a.mask_out);
  const double write_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t1).count();
  Index defaced = 0;
  for (Index i = 0; i < r.mask.data.size(); ++i) defaced += r.mask.data[i] == 0;
  std::cout << "input " << image.dims.str() << "  grid " << r.grid.str() << "  defaced voxels " << defaced << "\n";
  std::cout << "load " << fmt_ms(load_ms) << "  preprocess " << fmt_ms(r.timings.preprocess_ms) << "  forward "
            << fmt_ms(r.timings.forward_ms) << "  postprocess " << fmt_ms(r.timings.postprocess_ms) << "  write "
            << fmt_ms(write_ms) << "\n";
  return kOk;
}

struct EvalArgs {
  std::string model;
  std::string data;
  std::string split = "test";
  std::string report;
  double shrink = 0.5;
  Index grid_floor = 64;
  double tau = 0.5;
  bool tune = false;
  int threads = 1;
};

int run_evaluate(const EvalArgs& a) {
  set_num_threads(a.threads);
  const DatasetManifest manifest = read_manifest(a.data);
  const Split split = split_from_string(a.split);
  if (manifest.split(split).empty()) throw EmptyInputError("split '" + a.split + "' has no rows");
  std::vector<std::string> warnings;
  EvalReport report;
  Index params = 0;
  if (a.model == "oracle") {
    const MaskSource oracle = [&](const ManifestRow& row, const Volume<float>&) { return read_mask(fs::path(a.data) / row.mask); };
    report = evaluate(oracle, a.data, manifest, split, "oracle", &warnings);
  } else {
    const Loaded m = load_model(a.model);
    params = m.store.total_count();
    DefaceOptions opt;
    opt.grid.shrink = a.shrink;
    opt.grid.floor = a.grid_floor;
    opt.tau = a.tau;
    if (a.tune) {
      const ThresholdSearchResult t = threshold_search(m.store, m.config, a.data, manifest, Split::Val, {}, opt.grid);
      std::cout << "threshold search on val:\n";
      for (const auto& [tau, d] : t.table) std::printf("  tau %.4f  dice %.4f\n", tau, d);
      std::cout << "selected tau " << t.best_tau << "\n";
      opt.tau = t.best_tau;
    }
    report = evaluate_model(m.store, m.config, a.data, manifest, split, opt, &warnings);
  }
  for (const auto& w : warnings) std::cerr << "warning: " << w << "\n";
  std::cout << report.to_table(params);
  if (!a.report.empty()) write_text(a.report, report.to_jsonl());
  return kOk;
}

struct BenchArgs {
  std::string model_a;
  std::string model_b;
  std::string dims = "128x128x128";
  std::string in;
  int reps = 5;
  std::vector<int> threads{1};
  std::vector<double> shrinks{0.5};
  std::string external;
  std::string out;
  std::string scratch;
};

int run_bench(const BenchArgs& a) {
  const fs::path scratch = a.scratch.empty() ? fs::temp_directory_path() / "voxdeface-bench" : fs::path(a.scratch);
  std::error_code ec;
  fs::create_directories(scratch, ec);
  if (ec) throw IoError("cannot create scratch directory '" + scratch.string() + "'");
  fs::path input = a.in;
  if (input.empty()) {
    const Dims3 d = parse_dims(a.dims);
    PhantomSpec spec;
    spec.protocol.dims = d;
    for (int k = 0; k < 3; ++k) spec.protocol.spacing[k] = 144.0f / static_cast<float>(d[k]);
    input = scratch / ("phantom_" + d.str() + ".nii");
    write_nifti(generate_phantom(spec).image, input);
  }
  std::vector<std::pair<std::string, Loaded>> models;
  models.emplace_back("A", load_model(a.model_a));
  if (!a.model_b.empty()) models.emplace_back("B", load_model(a.model_b));

  std::vector<BenchResult> rows;
  for (double shrink : a.shrinks)
    for (int t : a.threads)
      for (const auto& [name, m] : models) {
        BenchOptions opt;
        opt.reps = a.reps;
        opt.threads = t;
        opt.scratch = scratch;
        opt.deface.grid.shrink = shrink;
        char label[64];
        std::snprintf(label, sizeof label, "%s_s%.2f_t%d", name.c_str(), shrink, t);
        rows.push_back(bench_deface(m.store, m.config, input, opt, label));
      }
  if (!a.external.empty()) {
    BenchOptions opt;
    opt.reps = a.reps;
    opt.scratch = scratch;
    rows.push_back(bench_external(a.external, input, opt));
  }
  std::cout << bench_table(rows);
  if (models.size() == 2) {
    for (std::size_t i = 0; i + 1 < rows.size(); ++i)
      if (rows[i].label[0] == 'A' && rows[i + 1].label[0] == 'B')
        std::printf("speedup A vs B (shrink %.2f, threads %d): %.2fx\n", rows[i].shrink, rows[i].threads,
                    rows[i + 1].stats.mean / rows[i].stats.mean);
  }
  if (!a.out.empty()) write_text(a.out, bench_jsonl(rows));
  return kOk;
}

int run_inspect(const std::string& path) {
  const auto bytes = read_file(path);
  if (bytes.size() >= 4 && std::equal(bytes.begin(), bytes.begin() + 4, "VDFW")) {
    const WeightStore<float> store = decode_weights(bytes);
    std::cout << "weights file: " << store.size() << " entries\n";
    std::cout << model_summary(infer_config(store), store.total_count());
    return kOk;
  }
  const NiftiHeader h = parse_nifti_header(bytes);
  std::cout << "file: " << path << " (" << bytes.size() << " bytes)\n" << h.describe();
  const std::uint64_t need = static_cast<std::uint64_t>(h.vox_offset) + h.voxel_bytes();
  std::cout << "voxel payload: " << h.voxel_bytes() << " bytes at offset " << static_cast<std::uint64_t>(h.vox_offset)
            << (bytes.size() >= need ? " (complete)" : " (TRUNCATED)") << "\n";
  return bytes.size() >= need ? kOk : kIo;
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const NumericalError*>(&e)) return kNumerical;
  if (dynamic_cast<const EmptyInputError*>(&e)) return kEmpty;
  if (dynamic_cast<const IoError*>(&e) || dynamic_cast<const ParseError*>(&e) ||
      dynamic_cast<const ChecksumError*>(&e) || dynamic_cast<const VersionError*>(&e) ||
      dynamic_cast<const fs::filesystem_error*>(&e))
    return kIo;
  return kGeneric;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"voxdeface: learned MRI defacing with a compact 3D U-Net"};
  app.set_config("--config", "", "TOML/INI file with option defaults (flags take precedence)");
  app.require_subcommand(1);
  int code = kOk;
  std::function<int()> action;

  PhantomArgs pa;
  auto* mk = app.add_subcommand("make-phantoms", "Generate a synthetic phantom corpus with oracle masks");
  mk->add_option("--out", pa.out, "Corpus directory")->required();
  mk->add_option("--count", pa.count, "Number of phantoms")->capture_default_str();
  mk->add_option("--seed", pa.seed, "Corpus seed")->capture_default_str();
  mk->add_option("--protocols", pa.protocols, "Number of voxel protocols (>= 3)")->capture_default_str();
  mk->add_option("--split-counts", pa.split_counts, "Explicit train,val,test protocol counts")->delimiter(',');
  mk->callback([&] { action = [&] { return run_make_phantoms(pa); }; });

  TrainArgs ta;
  auto* tr = app.add_subcommand("train", "Train a model on a phantom corpus");
  tr->add_option("--data", ta.data, "Corpus directory")->envname("VDF_DATA_DIR")->required();
  tr->add_option("--variant", ta.variant, "deepdefacer or baseline")->capture_default_str();
  tr->add_option("--filters", ta.filters, "Encoder widths, e.g. 4,8,16,32")->delimiter(',');
  tr->add_option("--iters", ta.iters, "Training iterations (batch size 1)")->capture_default_str();
  tr->add_option("--seed", ta.seed, "Initialisation, order and augmentation seed")->capture_default_str();
  tr->add_option("--out", ta.out, "Output weights file (.vdfw)")->required();
  tr->add_option("--metrics", ta.metrics, "Metrics file (default: <out> with extension .metrics.jsonl)");
  tr->add_option("--checkpoints", ta.checkpoints, "Checkpoint directory (default <out>.ckpt)");
  tr->add_option("--lr", ta.lr, "Adam learning rate")->capture_default_str();
  tr->add_option("--shrink", ta.shrink, "Grid shrink factor")->capture_default_str();
  tr->add_option("--grid-floor", ta.grid_floor, "Minimum grid extent per axis")->capture_default_str();
  tr->add_option("--validate-every", ta.validate_every, "Validation cadence in iterations")->capture_default_str();
  tr->add_flag("--no-augment", ta.no_augment, "Disable rotation/scale augmentation");
  tr->add_option("--threads", ta.threads, "Worker threads")->capture_default_str();
  tr->callback([&] { action = [&] { return run_train(ta); }; });

  DefaceArgs da;
  auto* df = app.add_subcommand("deface", "Deface one NIfTI image");
  df->add_option("--model", da.model, "Weights file")->required();
  df->add_option("--in", da.in, "Input image")->required();
  df->add_option("--out", da.out, "Defaced output image")->required();
  df->add_option("--mask-out", da.mask_out, "Optional output mask (1 = keep)");
  df->add_option("--shrink", da.shrink, "Grid shrink factor")->capture_default_str();
  df->add_option("--grid-floor", da.grid_floor, "Minimum grid extent per axis")->capture_default_str();
  df->add_option("--tau", da.tau, "Keep-probability threshold")->capture_default_str();
  df->add_option("--threads", da.threads, "Worker threads")->capture_default_str();
  df->callback([&] { action = [&] { return run_deface(da); }; });

  EvalArgs ea;
  auto* ev = app.add_subcommand("evaluate", "Score a model against the oracle masks of one split");
  ev->add_option("--model", ea.model, "Weights file, or 'oracle' to score the ground truth itself")->required();
  ev->add_option("--data", ea.data, "Corpus directory")->envname("VDF_DATA_DIR")->required();
  ev->add_option("--split", ea.split, "train, val or test")->capture_default_str();
  ev->add_option("--report", ea.report, "Per-image JSONL report");
  ev->add_option("--shrink", ea.shrink, "Grid shrink factor")->capture_default_str();
  ev->add_option("--grid-floor", ea.grid_floor, "Minimum grid extent per axis")->capture_default_str();
  ev->add_option("--tau", ea.tau, "Keep-probability threshold")->capture_default_str();
  ev->add_flag("--tune-threshold", ea.tune, "Pick tau by searching the val split first");
  ev->add_option("--threads", ea.threads, "Worker threads")->capture_default_str();
  ev->callback([&] { action = [&] { return run_evaluate(ea); }; });

  BenchArgs ba;
  auto* bn = app.add_subcommand("bench", "Time end-to-end defacing");
  bn->add_option("--model-a", ba.model_a, "First weights file")->required();
  bn->add_option("--model-b", ba.model_b, "Second weights file");
  bn->add_option("--dims", ba.dims, "Synthetic input size DxHxW")->capture_default_str();
  bn->add_option("--in", ba.in, "Use this image instead of a synthetic one");
  bn->add_option("--reps", ba.reps, "Timed repetitions (>= 3)")->capture_default_str();
  bn->add_option("--threads", ba.threads, "Thread counts, e.g. 1,4")->delimiter(',');
  bn->add_option("--shrink", ba.shrinks, "Shrink factors, e.g. 0.5,1")->delimiter(',');
  bn->add_option("--external", ba.external, "Shell command to time; {in} and {out} are substituted");
  bn->add_option("--out", ba.out, "JSONL results file");
  bn->add_option("--scratch", ba.scratch, "Directory for intermediate outputs");
  bn->callback([&] { action = [&] { return run_bench(ba); }; });

  std::string inspect_path;
  auto* in = app.add_subcommand("inspect", "Dump a NIfTI header or weights file summary");
  in->add_option("--in", inspect_path, "File to inspect")->required();
  in->callback([&] { action = [&] { return run_inspect(inspect_path); }; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kGeneric;
  }
  try {
    code = action();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e);
  }
  return code;
}

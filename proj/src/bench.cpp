#include "vdf/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <numeric>
#include <sstream>

#include "json.hpp"
#include "vdf/nifti.hpp"
#include "vdf/ops.hpp"

namespace vdf {

namespace {

void check_reps(const BenchOptions& opt) {
  if (opt.reps < 3) throw ConfigError("bench needs at least 3 repetitions");
  if (opt.warmup < 0) throw ConfigError("warm-up count must be non-negative");
  if (opt.threads < 1) throw ConfigError("thread count must be at least 1");
}

template <typename F>
std::vector<double> time_runs(const BenchOptions& opt, F&& run) {
  for (int i = 0; i < opt.warmup; ++i) run();
  std::vector<double> out;
  for (int i = 0; i < opt.reps; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    run();
    out.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
  }
  return out;
}

std::string replace_all(std::string s, const std::string& from, const std::string& to) {
  for (std::size_t pos = 0; (pos = s.find(from, pos)) != std::string::npos; pos += to.size()) s.replace(pos, from.size(), to);
  return s;
}

}  // namespace

BenchStats summarize(const std::vector<double>& samples) {
  BenchStats s;
  if (samples.empty()) return s;
  const double n = static_cast<double>(samples.size());
  s.mean = std::accumulate(samples.begin(), samples.end(), 0.0) / n;
  std::vector<double> sorted = samples;
  std::sort(sorted.begin(), sorted.end());
  const std::size_t mid = sorted.size() / 2;
  s.median = sorted.size() % 2 ? sorted[mid] : 0.5 * (sorted[mid - 1] + sorted[mid]);
  if (samples.size() > 1) {
    double ss = 0.0;
    for (double x : samples) ss += (x - s.mean) * (x - s.mean);
    s.stddev = std::sqrt(ss / (n - 1.0));
  }
  return s;
}

BenchResult bench_deface(const WeightStore<float>& store, const ModelConfig& config,
                         const std::filesystem::path& input, const BenchOptions& opt, const std::string& label) {
  check_reps(opt);
  const int previous = num_threads();
  set_num_threads(opt.threads);
  BenchResult r;
  r.label = label;
  r.variant = to_string(config.variant);
  r.threads = opt.threads;
  r.shrink = opt.deface.grid.shrink;
  const auto out_image = opt.scratch / (label + "_defaced.nii");
  const auto out_mask = opt.scratch / (label + "_mask.nii");
  try {
    r.samples_ms = time_runs(opt, [&] {
      const Volume<float> image = read_nifti(input);
      r.dims = image.dims;
      const DefaceResult d = deface_volume(store, config, image, opt.deface);
      write_nifti(d.defaced, out_image);
      write_nifti(d.mask, out_mask);
    });
  } catch (...) {
    set_num_threads(previous);
    throw;
  }
  set_num_threads(previous);
  r.stats = summarize(r.samples_ms);
  return r;
}

BenchResult bench_external(const std::string& command, const std::filesystem::path& input, const BenchOptions& opt) {
  check_reps(opt);
  BenchResult r;
  r.label = "external";
  r.variant = "external";
  r.threads = opt.threads;
  r.shrink = 1.0;
  r.dims = read_nifti(input).dims;
  const std::string cmd = replace_all(replace_all(command, "{in}", input.string()), "{out}",
                                      (opt.scratch / "external_defaced.nii").string());
  r.samples_ms = time_runs(opt, [&] {
    const int rc = std::system(cmd.c_str());
    if (rc != 0) throw IoError("external command failed with status " + std::to_string(rc) + ": " + cmd);
  });
  r.stats = summarize(r.samples_ms);
  return r;
}

std::string bench_table(const std::vector<BenchResult>& rows) {
  std::ostringstream os;
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-14s %-12s %-6s %7s %-12s %5s %10s %10s %9s\n", "label", "variant", "device",
                "threads", "dims", "reps", "mean ms", "median ms", "stddev");
  os << buf;
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%-14s %-12s %-6s %7d %-12s %5zu %10.1f %10.1f %9.1f\n", r.label.c_str(),
                  r.variant.c_str(), r.device.c_str(), r.threads, r.dims.str().c_str(), r.samples_ms.size(),
                  r.stats.mean, r.stats.median, r.stats.stddev);
    os << buf;
  }
  return os.str();
}

std::string bench_jsonl(const std::vector<BenchResult>& rows) {
  std::string out;
  for (const auto& r : rows) {
    nlohmann::ordered_json j;
    j["label"] = r.label;
    j["variant"] = r.variant;
    j["device"] = r.device;
    j["threads"] = r.threads;
    j["dims"] = r.dims.str();
    j["shrink"] = r.shrink;
    j["samples_ms"] = r.samples_ms;
    j["mean_ms"] = r.stats.mean;
    j["median_ms"] = r.stats.median;
    j["stddev_ms"] = r.stats.stddev;
    out += j.dump() + "\n";
  }
  return out;
}

}  // namespace vdf

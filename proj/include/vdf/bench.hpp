#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "vdf/inference.hpp"

namespace vdf {

struct BenchStats {
  double mean = 0.0;
  double median = 0.0;
  double stddev = 0.0;  // sample standard deviation
};

BenchStats summarize(const std::vector<double>& samples);

/// Timings of one configuration; warm-up runs are not in `samples_ms`.
struct BenchResult {
  std::string label;
  std::string variant;
  int threads = 1;
  Dims3 dims;
  double shrink = 0.5;
  std::string device = "cpu";
  std::vector<double> samples_ms;
  BenchStats stats;
};

struct BenchOptions {
  int reps = 5;
  int warmup = 1;
  int threads = 1;
  DefaceOptions deface;
  std::filesystem::path scratch;  // outputs are written here
};

/// End-to-end defacing of `input`: read -> preprocess -> forward ->
/// postprocess -> write image and mask.  Requires reps >= 3.
BenchResult bench_deface(const WeightStore<float>& store, const ModelConfig& config,
                         const std::filesystem::path& input, const BenchOptions& opt, const std::string& label);

/// Times a shell command; `{in}` and `{out}` are replaced by paths.
BenchResult bench_external(const std::string& command, const std::filesystem::path& input, const BenchOptions& opt);

std::string bench_table(const std::vector<BenchResult>& rows);
std::string bench_jsonl(const std::vector<BenchResult>& rows);

}  // namespace vdf

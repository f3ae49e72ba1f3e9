#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "phyformer/model.hpp"
#include "phyformer/ofdm.hpp"
#include "phyformer/pipeline.hpp"

namespace phyformer {

enum class Method { Transformer, LsLinear, LsNearest, PerfectCsi };

std::string to_string(Method m);
Method method_from_string(const std::string& s);

struct SweepSpec {
  Task task = Task::E2E;
  LinkConfig link;
  std::vector<Method> methods;
  std::vector<double> ebn0_grid;
  std::size_t trials = 100;  // slots per grid point
  double confidence = 0.95;
  std::uint64_t seed = 1;
  std::size_t n_threads = 1;
  // "ber" or "bler" for E2E, "mse" for the channel tasks; empty picks bler / mse.
  std::string metric;
  // Label of the transformer rows; defaults to "transformer".
  std::string transformer_tag;

  std::string resolved_metric() const;
  // Throws ConfigError.
  void validate() const;
};

struct SweepRow {
  std::string method;
  double ebn0_db = 0.0;
  std::string metric;
  double value = 0.0;
  double ci_low = 0.0;
  double ci_high = 0.0;
  std::size_t n = 0;
};

// Monte-Carlo estimate of every (method, Eb/N0) pair, methods outermost.
// `model` is required when the transformer method is listed.
std::vector<SweepRow> run_sweep(const SweepSpec& spec, const TransformerModel* model = nullptr);

void write_sweep_csv(std::ostream& out, std::span<const SweepRow> rows);
// Throws FormatError on a malformed or empty file.
std::vector<SweepRow> read_sweep_csv(std::istream& in);

// Gnuplot data: one block per method (first appearance order), blocks
// separated by two blank lines, columns ebn0 value ci_low ci_high n.
void write_plotdata(std::ostream& out, std::span<const SweepRow> rows);

struct Interval {
  double low;
  double high;
};
double normal_quantile(double p);
Interval wilson_interval(std::size_t successes, std::size_t n, double confidence);
Interval mean_interval(double mean, double sample_var, std::size_t n, double confidence);

// Architecture variants along one axis: "depth" gives 1..4 layers, "heads" gives 1, 2, 4, 8 heads.
struct ArchVariant {
  std::string tag;
  ModelConfig arch;
};
std::vector<ArchVariant> arch_variants(const ModelConfig& base, const std::string& axis);

// Trains every variant from the same seed on `dataset` and sweeps it; the rows
// of each variant carry its tag as method.
std::vector<SweepRow> run_arch_sweep(const Dataset& dataset, const ModelConfig& base, const std::string& axis,
                                     const TrainConfig& train_config, SweepSpec sweep,
                                     const std::function<void(const ArchVariant&, const TrainResult&)>& on_trained = {});

struct BenchReport {
  std::string tag;
  std::vector<double> samples_us;  // per tile
  double mean_us = 0.0;
  double p50_us = 0.0;
  double p99_us = 0.0;
  std::size_t warmup = 0;
  std::size_t batch = 0;
  std::size_t parameters = 0;
};

// Forward-only wall time per tile on random inputs shaped for `task`.
// Needs >= 100 warmup and >= 1000 measured iterations.
BenchReport bench_model(const TransformerModel& model, Task task, std::size_t batch, std::size_t iterations,
                        std::size_t warmup = 100, const std::string& tag = "model");

void write_bench_table(std::ostream& out, std::span<const BenchReport> reports);
void write_bench_csv(std::ostream& out, std::span<const BenchReport> reports);

}  // namespace phyformer

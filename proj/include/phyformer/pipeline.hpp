#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "phyformer/model.hpp"
#include "phyformer/ofdm.hpp"
#include "phyformer/rng.hpp"

namespace phyformer {

inline constexpr std::uint32_t kDatasetVersion = 1;
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct DatasetSpec {
  Task task = Task::Estimation;
  LinkConfig link;
  std::size_t n_samples = 10000;
  std::uint64_t seed = 0;
  double ebn0_lo = 0.0;
  double ebn0_hi = 40.0;
  // Interpolation only: targets are captured y/x instead of the true channel.
  bool ota_targets = false;
};

// Samples stored flat in f64; on disk they are f32.
//
// E2E: input [168, 2 n_rx (+ n_users pilot flags in random-comb mode)],
//      target [168, n_users * bits], bit labels at data REs and -1 at pilot REs.
// Interpolation: input [6, 2, 2] noisy pilot estimates, target [12, 2, 2].
// Estimation: input [12, 14, 2] received grid of one antenna, target [12, 14, 2] channel.
// Interpolation and estimation samples run over (trial, antenna), antenna fastest.
struct Dataset {
  DatasetSpec spec;
  Shape input_shape;
  Shape target_shape;
  std::vector<double> inputs;
  std::vector<double> targets;

  std::size_t count() const { return spec.n_samples; }
  std::span<const double> input(std::size_t i) const;
  std::span<const double> target(std::size_t i) const;
};

Dataset gen_dataset(const DatasetSpec& spec, std::size_t n_threads = 1);

// Throws FormatError on I/O failure, bad magic, newer version or truncation.
void save_dataset(const Dataset& dataset, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);

// Known pilot symbols x and received values y at the same REs.
struct PilotCapture {
  std::vector<cd> y;
  std::vector<cd> x;
};

// (y + n) / x with fresh n ~ CN(0, noise_var). Throws NumericError on a zero x.
std::vector<cd> augment_noise(const PilotCapture& capture, double noise_var, Rng& rng);

// Per-token coordinates of a task's input tile.
std::vector<Coord> task_coords(Task task);

// Model-ready tensors for a set of samples.
struct Batch {
  Tensor tokens;
  Tensor targets;
  Tensor mask;  // E2E only: 1 where a label exists
  std::size_t n_seq = 0;
};

// `permute_rng` (E2E only) shuffles the receive-antenna order of each sample.
Batch make_batch(const Dataset& dataset, std::span<const std::size_t> indices, Rng* permute_rng = nullptr);

// Loss of a forward output against a batch, per the dataset's task.
ad::Var task_loss(Task task, ad::Var output, const Batch& batch);

// Model whose input and head fit the dataset, on top of the given architecture.
ModelConfig model_config_for(const Dataset& dataset, ModelConfig arch);

enum class Schedule { Constant, Cosine };

struct TrainConfig {
  double lr = 1e-3;
  std::size_t batch_size = 64;
  std::size_t steps = 1000;
  Schedule schedule = Schedule::Constant;
  std::uint64_t seed = 0;
  double val_fraction = 0.1;
  // Validation interval in steps; 0 means once per pass over the training split.
  std::size_t eval_every = 0;
  bool antenna_permutation = false;

  // Throws ConfigError.
  void validate() const;
};

struct LossRecord {
  std::size_t step = 0;
  double train_loss = 0.0;  // mean over the steps since the previous record
  double val_loss = std::numeric_limits<double>::quiet_NaN();
};

struct TrainResult {
  TransformerModel model;  // best validation loss (last model without a validation split)
  std::vector<LossRecord> trace;
  std::size_t best_step = 0;
  double best_val_loss = std::numeric_limits<double>::quiet_NaN();
  double final_train_loss = 0.0;
};

// Mini-batch Adam. Throws NumericError naming the step and batch seed if the
// loss goes non-finite.
TrainResult train(const TransformerModel& init, const Dataset& dataset, const TrainConfig& config,
                  const std::function<void(const LossRecord&)>& on_record = {});

// Mean task loss over the given samples, evaluated in chunks.
double evaluate_loss(const TransformerModel& model, const Dataset& dataset, std::span<const std::size_t> indices);

void write_loss_csv(std::ostream& out, std::span<const LossRecord> trace);

struct TrainMeta {
  std::uint64_t steps = 0;
  double final_loss = 0.0;
  std::uint64_t seed = 0;
};

struct Checkpoint {
  TransformerModel model;
  TrainMeta meta;
};

void save_checkpoint(const std::filesystem::path& path, const TransformerModel& model, const TrainMeta& meta);
// Throws FormatError for a damaged or newer file and ConfigError when
// `expected` is given and differs from the stored configuration.
Checkpoint load_checkpoint(const std::filesystem::path& path, const ModelConfig* expected = nullptr);

// key=value text forms used by config files and file headers.
std::string to_key_values(const LinkConfig& c);
std::string to_key_values(const ModelConfig& c);
std::string to_key_values(const TrainConfig& c);
// Returns false if `key` is not a field of the struct; throws ConfigError on a bad value.
bool set_field(LinkConfig& c, const std::string& key, const std::string& value);
bool set_field(ModelConfig& c, const std::string& key, const std::string& value);
bool set_field(TrainConfig& c, const std::string& key, const std::string& value);
LinkConfig link_config_from_key_values(const std::string& text);

}  // namespace phyformer

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "phyformer/autodiff.hpp"
#include "phyformer/ofdm.hpp"
#include "phyformer/tensor.hpp"

namespace phyformer {

enum class Task { E2E, Interpolation, Estimation };

std::string to_string(Task task);
Task task_from_string(const std::string& s);

enum class HeadKind { Llr, Regression };

struct ModelConfig {
  int n_layers = 4;
  int n_heads = 4;
  int d_model = 64;
  int d_ff = 128;
  HeadKind head = HeadKind::Llr;
  int n_users = 1;           // Llr head
  int bits_per_symbol = 8;   // Llr head
  int out_per_token = 2;     // Regression head
  int input_dim = 8;
  std::uint64_t seed = 0;

  int output_dim() const;
  // Throws ConfigError.
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

// Head and input width a task needs; the remaining fields keep their defaults.
// For E2E, `pilot_mask` appends one 0/1 feature per user.
ModelConfig task_config(Task task, int n_users = 1, int bits_per_symbol = 8, bool pilot_mask = false,
                        int n_rx = 4);
// Task a configuration was built for, read off its head and output width.
Task task_of_config(const ModelConfig& c);

using Coord = std::pair<std::size_t, std::size_t>;  // (subcarrier, symbol)

struct TokenSequence {
  Tensor tokens;  // [n_tok, features]
  std::vector<Coord> coords;
};

// One token per RE in (sc, sym) row-major order with features
// [re y_0, im y_0, re y_1, ...]. If `mask` is given, one pilot flag per user follows.
TokenSequence tokenize_e2e(const ResourceGrid& y, const PilotPattern* mask = nullptr);

// Received grid of antenna `ant` as 2-feature tokens.
TokenSequence tokenize_estimation(const ResourceGrid& y, std::size_t ant);

// Pilot estimates shaped [6, 2, 2] (pilot sc, pilot symbol, re/im) to 12 tokens;
// coords are the pilots' positions in the RB.
TokenSequence tokenize_interpolation(const Tensor& pilots, std::size_t comb_offset = 0);

// [12 tokens, 4] head output to the [12, 2, 2] grid: output subcarrier k on
// pilot symbol j comes from token (k / 2, j), columns 2 * (k % 2) + {re, im}.
Tensor interpolation_grid(const Tensor& head_out);

// Sin/cos ladder over the subcarrier index in the first d_model/2 channels and
// over the symbol index in the rest: channel 2i is sin(p * w_i), 2i+1 is
// cos(p * w_i) with w_i = 10000^(-2i / (d_model/2)).
Tensor positional_encoding(std::span<const Coord> coords, int d_model);

class TransformerModel {
 public:
  explicit TransformerModel(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }
  std::vector<Tensor>& params() { return params_; }
  const std::vector<Tensor>& params() const { return params_; }
  const std::vector<std::string>& param_names() const { return names_; }
  const Tensor& param(const std::string& name) const;
  std::size_t parameter_count() const;

  // Leaves for every parameter, in params() order.
  std::vector<ad::Var> bind(ad::Tape& tape) const;

  // Records the forward pass over `n_seq` sequences stacked along rows of
  // `tokens`; `pe` is [n_tok, d_model] and is shared by every sequence.
  ad::Var forward(ad::Tape& tape, std::span<const ad::Var> params, const Tensor& tokens, const Tensor& pe,
                  std::size_t n_seq) const;

  // Forward pass without keeping gradients around.
  Tensor infer(const Tensor& tokens, const Tensor& pe, std::size_t n_seq) const;

 private:
  ModelConfig config_;
  std::vector<std::string> names_;
  std::vector<Tensor> params_;
};

// Stacks sequences of equal length and coordinates into one batch tensor.
Tensor stack_tokens(std::span<const TokenSequence> seqs);

// Columns of the LLR head for the first log2(target_order) bits of each user.
// Throws ConfigError unless both orders are supported and target <= trained.
Tensor select_bits(const Tensor& logits, int n_users, int trained_order, int target_order);

// Logits model P(b = 1); the receiver LLR (positive favours 0) is their negation.
inline double logit_to_llr(double z) { return -z; }

ad::Var llr_loss(ad::Var logits, const Tensor& bits, const Tensor& mask);
ad::Var regression_loss(ad::Var pred, const Tensor& target);

}  // namespace phyformer

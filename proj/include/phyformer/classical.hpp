#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "phyformer/channel.hpp"
#include "phyformer/constellation.hpp"
#include "phyformer/ofdm.hpp"

namespace phyformer {

// Channel estimate per user over (sc, sym, antenna) and a per-(sc, sym) flag
// marking REs observed directly at a pilot.
struct ChannelEstimate {
  std::vector<ResourceGrid> per_user;
  std::vector<std::vector<char>> observed;

  std::size_t n_users() const { return per_user.size(); }
  bool is_observed(std::size_t user, std::size_t sc, std::size_t sym) const {
    return observed[user][sc * per_user[user].n_sym() + sym] != 0;
  }
};

// h = y / x at every pilot RE of every user; other REs are left at zero and unobserved.
// Throws NumericError for a zero pilot value.
ChannelEstimate ls_estimate(const ResourceGrid& y, const PilotPattern& pilots);

// Separable piecewise-linear interpolation, frequency first then time, holding
// the outermost pilot value beyond the pilot span. Needs >= 2 observed
// subcarriers on every pilot-bearing symbol and >= 1 such symbol.
ChannelEstimate interp_linear(const ChannelEstimate& estimate);

// Each RE takes the observed value minimizing dsc^2 + dsym^2; ties go to the
// lower subcarrier, then the lower symbol.
ChannelEstimate interp_nearest(const ChannelEstimate& estimate);

struct MmseOutput {
  std::vector<cd> raw;             // (H^H H + s2 I)^-1 H^H y, the biased MMSE estimate
  std::vector<cd> symbols;         // bias-removed estimate (zero-forcing limit as s2 -> 0)
  std::vector<double> noise_var;   // effective noise variance of `symbols`
};

// Linear MMSE combining for one RE. y: n_rx samples, h: n_rx x n_users
// row-major. At noise_var == 0 a rank-deficient h raises ConditioningError.
MmseOutput mmse_combine(std::span<const cd> y, std::span<const cd> h, std::size_t n_users, double noise_var);

// Max-log LLRs, positive favouring bit 0:
// (min_{x: b=1} |s - x|^2 - min_{x: b=0} |s - x|^2) / noise_var.
std::vector<double> maxlog_llr(cd s, const Constellation& constellation, double noise_var);

// Hard decision of an LLR under the positive-means-zero convention.
inline std::uint8_t hard_bit(double llr) { return llr < 0.0 ? 1 : 0; }

// Full classical receiver over one slot: MMSE on every data RE with the
// given channel (one grid per user) followed by max-log demapping.
// Returns per user the LLRs of its payload bits in data_res() order.
std::vector<std::vector<double>> detect_slot(const ResourceGrid& y, std::span<const ResourceGrid> h_per_user,
                                             double noise_var, const PilotPattern& pilots,
                                             const Constellation& constellation);

struct MetricSummary {
  double ber = 0.0;
  double bler = 0.0;
  double mse = 0.0;
  std::size_t n_bits = 0;
  std::size_t n_blocks = 0;
  std::size_t n_re = 0;
  std::size_t bit_errors = 0;
  std::size_t block_errors = 0;
};

// BER over all bits and BLER over consecutive blocks of `block_size` bits.
MetricSummary compute_bit_metrics(std::span<const std::uint8_t> decided, std::span<const std::uint8_t> truth,
                                  std::size_t block_size);

// Mean |est - truth|^2 over all cells (REs x antennas).
MetricSummary compute_channel_mse(const ResourceGrid& estimate, const ResourceGrid& truth);

}  // namespace phyformer

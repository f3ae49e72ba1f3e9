#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "phyformer/ofdm.hpp"
#include "phyformer/rng.hpp"

namespace phyformer {

// Samples per OFDM symbol used to express tap delays.
inline constexpr double kSamplesPerSymbol = 4096.0;

struct Tap {
  double delay_samples;
  cd gain;
};

// Power and delay layout of a tapped delay line with an exponential power
// delay profile. The profile is cut into `n_taps` equal-width bins spanning
// four decay constants (the last bin absorbs the tail); each tap sits at the
// power centroid of its bin and carries the bin's share of the power.
struct DelayProfile {
  std::vector<double> delay_samples;
  std::vector<double> power;
};
DelayProfile exponential_profile(double rms_delay_spread, int n_taps);

// Per-(user, rx antenna) taps and the resulting block-fading frequency
// response H over (subcarrier, symbol, user, antenna).
class ChannelRealization {
 public:
  ChannelRealization() = default;
  ChannelRealization(std::size_t n_sc, std::size_t n_sym, std::size_t n_users, std::size_t n_rx);

  std::size_t n_sc() const { return n_sc_; }
  std::size_t n_sym() const { return n_sym_; }
  std::size_t n_users() const { return n_users_; }
  std::size_t n_rx() const { return n_rx_; }

  cd& h(std::size_t sc, std::size_t sym, std::size_t user, std::size_t ant) {
    return response_[((sc * n_sym_ + sym) * n_users_ + user) * n_rx_ + ant];
  }
  const cd& h(std::size_t sc, std::size_t sym, std::size_t user, std::size_t ant) const {
    return response_[((sc * n_sym_ + sym) * n_users_ + user) * n_rx_ + ant];
  }
  std::vector<Tap>& taps(std::size_t user, std::size_t ant) { return taps_[user * n_rx_ + ant]; }
  const std::vector<Tap>& taps(std::size_t user, std::size_t ant) const { return taps_[user * n_rx_ + ant]; }

  // Grid of one user's response over (sc, sym, antenna).
  ResourceGrid user_grid(std::size_t user) const;

 private:
  std::size_t n_sc_ = 0, n_sym_ = 0, n_users_ = 0, n_rx_ = 0;
  std::vector<cd> response_;
  std::vector<std::vector<Tap>> taps_;
};

// Rayleigh TDL draw: i.i.d. CN(0, p_l) tap gains per (user, rx), response
// H(k) = sum_l g_l exp(-j 2 pi k d_l / kSamplesPerSymbol), constant over the slot.
ChannelRealization draw_channel(const LinkConfig& config, std::uint64_t seed);

// Noise variance per complex sample for unit-energy symbols:
// 1 / (10^(ebn0_db/10) * bits_per_symbol).
double ebn0_to_noisevar(double ebn0_db, int bits_per_symbol);

// y[sc, sym, ant] = sum_u H[sc, sym, u, ant] x_u[sc, sym] + n, n ~ CN(0, noise_var).
ResourceGrid apply_channel(std::span<const ResourceGrid> x, const ChannelRealization& channel,
                           double noise_var, std::uint64_t seed);

}  // namespace phyformer

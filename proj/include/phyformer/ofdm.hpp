#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "phyformer/constellation.hpp"
#include "phyformer/rng.hpp"

namespace phyformer {

inline constexpr std::size_t kSubcarriersPerRb = 12;
inline constexpr std::size_t kSymbolsPerSlot = 14;
// DMRS-bearing OFDM symbols of a slot (front-loaded plus one additional position).
inline constexpr std::array<std::size_t, 2> kDmrsSymbols = {2, 11};

// Complex values over (subcarrier, symbol, antenna).
class ResourceGrid {
 public:
  ResourceGrid() = default;
  ResourceGrid(std::size_t n_sc, std::size_t n_sym, std::size_t n_ant);

  std::size_t n_sc() const { return n_sc_; }
  std::size_t n_sym() const { return n_sym_; }
  std::size_t n_ant() const { return n_ant_; }
  std::size_t size() const { return cells_.size(); }

  cd& operator()(std::size_t sc, std::size_t sym, std::size_t ant = 0) {
    return cells_[(sc * n_sym_ + sym) * n_ant_ + ant];
  }
  const cd& operator()(std::size_t sc, std::size_t sym, std::size_t ant = 0) const {
    return cells_[(sc * n_sym_ + sym) * n_ant_ + ant];
  }
  std::span<cd> cells() { return cells_; }
  std::span<const cd> cells() const { return cells_; }

  bool same_dims(const ResourceGrid& other) const {
    return n_sc_ == other.n_sc_ && n_sym_ == other.n_sym_ && n_ant_ == other.n_ant_;
  }

 private:
  std::size_t n_sc_ = 0, n_sym_ = 0, n_ant_ = 0;
  std::vector<cd> cells_;
};

struct PilotRe {
  std::size_t sc;
  std::size_t sym;
  cd value;
};

enum class PilotMode { Fixed, RandomComb };

// Known pilot symbols per user over an n_sc x n_sym grid. Every pilot RE of
// user u carries the same unit-power QPSK point (u = 1 is a quarter turn from u = 0).
struct PilotPattern {
  std::size_t n_sc = kSubcarriersPerRb;
  std::size_t n_sym = kSymbolsPerSlot;
  std::vector<std::vector<PilotRe>> per_user;
  // Comb offset (0 or 1) used by each user.
  std::vector<std::size_t> comb_offset;

  std::size_t n_users() const { return per_user.size(); }
  // -1 when (sc, sym) carries no pilot, otherwise the owning user.
  int owner(std::size_t sc, std::size_t sym) const;
  // REs carrying no pilot of any user, in (sc, sym) row-major order.
  std::vector<std::pair<std::size_t, std::size_t>> data_res() const;
};

// 6x2 comb per RB: subcarriers 0,2,...,10 (plus `offset`) at the DMRS symbols.
// Pilot values are unit-power QPSK drawn from the fixed per-user sequence.
PilotPattern comb_pilots(std::size_t n_sc, std::span<const std::size_t> user_offsets);

// Single user on comb offset 0.
PilotPattern fixed_pilots(std::size_t n_sc);

// Two users on disjoint combs; which user gets offset 0 is drawn per slot.
PilotPattern random_comb_pilots(std::size_t n_sc, Rng& rng);

struct LinkConfig {
  int n_users = 1;
  int n_rx = 4;
  int order = 256;
  double ebn0_db = 10.0;
  PilotMode pilot_mode = PilotMode::Fixed;
  // RMS delay spread as a fraction of the OFDM symbol length (0.003 ~ 100 ns at 30 kHz).
  double rms_delay_spread = 0.003;
  int n_taps = 8;
  // false: every link is a unit-gain flat channel (h = 1), i.e. pure AWGN.
  bool fading = true;
  std::size_t n_rb = 1;
  double scs_hz = 30e3;
  std::uint64_t seed = 0;

  std::size_t n_sc() const { return n_rb * kSubcarriersPerRb; }
  std::size_t n_sym() const { return kSymbolsPerSlot; }
  // Throws ConfigError on out-of-range fields.
  void validate() const;
};

std::string to_string(PilotMode mode);
PilotMode pilot_mode_from_string(const std::string& s);

// Draws the pilot layout of one slot according to the link configuration.
PilotPattern draw_pilots(const LinkConfig& config, Rng& rng);

// Transmit grid per user (single antenna). Pilot REs of user u carry its
// pilots; every other user is silent there. Data REs carry the mapped payload
// in data_res() order. Payload length must equal n_data_re * bits_per_symbol.
std::vector<ResourceGrid> build_tx_grid(std::span<const std::vector<std::uint8_t>> payload,
                                        const PilotPattern& pilots, const Constellation& constellation);

}  // namespace phyformer

#pragma once

#include <cstdint>
#include <vector>

#include "phyformer/channel.hpp"
#include "phyformer/constellation.hpp"
#include "phyformer/ofdm.hpp"

namespace phyformer {

// Everything generated for one slot of one trial.
struct Slot {
  PilotPattern pilots;
  std::vector<std::vector<std::uint8_t>> payload;  // per user, data_res() order
  std::vector<ResourceGrid> x;                      // per user
  ChannelRealization channel;
  double noise_var = 0.0;
  ResourceGrid y;
};

// Random-number lanes of a trial stream.
enum class Lane : std::uint64_t { Pilots = 1, Payload = 2, Channel = 3, Noise = 4, Ebn0 = 5, Augment = 6 };

inline std::uint64_t lane_seed(std::uint64_t seed, std::uint64_t trial, Lane lane) {
  return stream_seed(seed, trial, static_cast<std::uint64_t>(lane));
}

// Simulates trial `trial` of `config` at config.ebn0_db. Fully determined by
// (config, trial).
Slot simulate_slot(const LinkConfig& config, std::uint64_t trial);

}  // namespace phyformer

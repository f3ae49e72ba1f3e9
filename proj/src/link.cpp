#include "phyformer/link.hpp"

namespace phyformer {

Slot simulate_slot(const LinkConfig& config, std::uint64_t trial) {
  config.validate();
  const Constellation constellation(config.order);
  Slot slot;
  Rng pilot_rng(lane_seed(config.seed, trial, Lane::Pilots));
  slot.pilots = draw_pilots(config, pilot_rng);

  const auto n_bits = slot.pilots.data_res().size() * static_cast<std::size_t>(constellation.bits_per_symbol());
  Rng bit_rng(lane_seed(config.seed, trial, Lane::Payload));
  slot.payload.resize(static_cast<std::size_t>(config.n_users));
  for (auto& bits : slot.payload) {
    bits.resize(n_bits);
    for (auto& b : bits) b = bit_rng.bit();
  }
  slot.x = build_tx_grid(slot.payload, slot.pilots, constellation);
  slot.channel = draw_channel(config, lane_seed(config.seed, trial, Lane::Channel));
  slot.noise_var = ebn0_to_noisevar(config.ebn0_db, constellation.bits_per_symbol());
  slot.y = apply_channel(slot.x, slot.channel, slot.noise_var, lane_seed(config.seed, trial, Lane::Noise));
  return slot;
}

}  // namespace phyformer

#include "phyformer/ofdm.hpp"

#include <cmath>

#include "phyformer/errors.hpp"

namespace phyformer {

ResourceGrid::ResourceGrid(std::size_t n_sc, std::size_t n_sym, std::size_t n_ant)
    : n_sc_(n_sc), n_sym_(n_sym), n_ant_(n_ant) {
  if (n_sc == 0 || n_sym == 0 || n_ant == 0) throw ShapeError("resource grid dimensions must be positive");
  cells_.assign(n_sc * n_sym * n_ant, cd{});
}

int PilotPattern::owner(std::size_t sc, std::size_t sym) const {
  for (std::size_t u = 0; u < per_user.size(); ++u) {
    for (const auto& p : per_user[u]) {
      if (p.sc == sc && p.sym == sym) return static_cast<int>(u);
    }
  }
  return -1;
}

std::vector<std::pair<std::size_t, std::size_t>> PilotPattern::data_res() const {
  std::vector<char> is_pilot(n_sc * n_sym, 0);
  for (const auto& user : per_user) {
    for (const auto& p : user) is_pilot[p.sc * n_sym + p.sym] = 1;
  }
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (std::size_t sc = 0; sc < n_sc; ++sc) {
    for (std::size_t sym = 0; sym < n_sym; ++sym) {
      if (!is_pilot[sc * n_sym + sym]) out.emplace_back(sc, sym);
    }
  }
  return out;
}

PilotPattern comb_pilots(std::size_t n_sc, std::span<const std::size_t> user_offsets) {
  if (n_sc == 0 || n_sc % kSubcarriersPerRb != 0) {
    throw ShapeError("pilot grid needs a whole number of resource blocks");
  }
  PilotPattern pattern;
  pattern.n_sc = n_sc;
  pattern.n_sym = kSymbolsPerSlot;
  const Constellation qpsk(4);
  for (std::size_t u = 0; u < user_offsets.size(); ++u) {
    const std::size_t offset = user_offsets[u];
    if (offset > 1) throw ContractError("comb offset must be 0 or 1");
    const std::uint8_t bits[2] = {0, static_cast<std::uint8_t>(u & 1)};
    const cd value = qpsk.map(bits);
    std::vector<PilotRe> res;
    for (std::size_t sym : kDmrsSymbols) {
      for (std::size_t sc = offset; sc < n_sc; sc += 2) {
        res.push_back({sc, sym, value});
      }
    }
    pattern.per_user.push_back(std::move(res));
    pattern.comb_offset.push_back(offset);
  }
  return pattern;
}

PilotPattern fixed_pilots(std::size_t n_sc) {
  const std::size_t offsets[] = {0};
  return comb_pilots(n_sc, offsets);
}

PilotPattern random_comb_pilots(std::size_t n_sc, Rng& rng) {
  const std::size_t first = rng.bit();
  const std::size_t offsets[] = {first, 1 - first};
  return comb_pilots(n_sc, offsets);
}

void LinkConfig::validate() const {
  if (n_users != 1 && n_users != 2) throw ConfigError("n_users must be 1 or 2");
  if (n_rx < 1) throw ConfigError("n_rx must be positive");
  if (!is_supported_order(order)) throw ConfigError("order must be one of 4, 16, 64, 256");
  if (!(rms_delay_spread > 0.0)) throw ConfigError("rms_delay_spread must be positive");
  if (n_taps < 1) throw ConfigError("n_taps must be positive");
  if (n_rb < 1) throw ConfigError("n_rb must be positive");
  if (!fading && n_users != 1) throw ConfigError("a non-fading channel supports a single user only");
  if (!std::isfinite(ebn0_db)) throw ConfigError("ebn0_db must be finite");
}

std::string to_string(PilotMode mode) { return mode == PilotMode::Fixed ? "fixed" : "random-comb"; }

PilotMode pilot_mode_from_string(const std::string& s) {
  if (s == "fixed") return PilotMode::Fixed;
  if (s == "random-comb" || s == "random") return PilotMode::RandomComb;
  throw ConfigError("unknown pilot mode '" + s + "'");
}

PilotPattern draw_pilots(const LinkConfig& config, Rng& rng) {
  if (config.pilot_mode == PilotMode::RandomComb) {
    if (config.n_users == 2) return random_comb_pilots(config.n_sc(), rng);
    const std::size_t offsets[] = {static_cast<std::size_t>(rng.bit())};
    return comb_pilots(config.n_sc(), offsets);
  }
  if (config.n_users == 2) {
    const std::size_t offsets[] = {0, 1};
    return comb_pilots(config.n_sc(), offsets);
  }
  return fixed_pilots(config.n_sc());
}

std::vector<ResourceGrid> build_tx_grid(std::span<const std::vector<std::uint8_t>> payload,
                                        const PilotPattern& pilots, const Constellation& constellation) {
  if (payload.size() != pilots.n_users()) {
    throw ShapeError("build_tx_grid: payload for " + std::to_string(payload.size()) + " users, pilots for " +
                     std::to_string(pilots.n_users()));
  }
  const auto data = pilots.data_res();
  const auto bps = static_cast<std::size_t>(constellation.bits_per_symbol());
  std::vector<ResourceGrid> out;
  for (std::size_t u = 0; u < payload.size(); ++u) {
    if (payload[u].size() != data.size() * bps) {
      throw ShapeError("build_tx_grid: user " + std::to_string(u) + " payload has " +
                       std::to_string(payload[u].size()) + " bits, expected " +
                       std::to_string(data.size() * bps));
    }
    ResourceGrid x(pilots.n_sc, pilots.n_sym, 1);
    for (const auto& p : pilots.per_user[u]) x(p.sc, p.sym) = p.value;
    const auto symbols = map_bits(payload[u], constellation);
    for (std::size_t i = 0; i < data.size(); ++i) x(data[i].first, data[i].second) = symbols[i];
    out.push_back(std::move(x));
  }
  return out;
}

}  // namespace phyformer

#include "phyformer/channel.hpp"

#include <cmath>
#include <numbers>

#include "phyformer/errors.hpp"

namespace phyformer {

DelayProfile exponential_profile(double rms_delay_spread, int n_taps) {
  if (!(rms_delay_spread > 0.0)) throw ConfigError("rms delay spread must be positive");
  if (n_taps < 1) throw ConfigError("n_taps must be positive");
  const double tau = rms_delay_spread * kSamplesPerSymbol;
  DelayProfile profile;
  if (n_taps == 1) {
    profile.delay_samples = {0.0};
    profile.power = {1.0};
    return profile;
  }
  // Bins in units of tau; integrals of exp(-t) over [a, b) and its centroid.
  const double width = 4.0 / (n_taps - 1);
  for (int l = 0; l < n_taps; ++l) {
    const double a = l * width;
    double power, centroid;
    if (l + 1 < n_taps) {
      const double b = a + width;
      power = std::exp(-a) - std::exp(-b);
      centroid = (a * std::exp(-a) - b * std::exp(-b) + power) / power;
    } else {
      power = std::exp(-a);
      centroid = a + 1.0;
    }
    profile.delay_samples.push_back(centroid * tau);
    profile.power.push_back(power);
  }
  return profile;
}

ChannelRealization::ChannelRealization(std::size_t n_sc, std::size_t n_sym, std::size_t n_users,
                                       std::size_t n_rx)
    : n_sc_(n_sc), n_sym_(n_sym), n_users_(n_users), n_rx_(n_rx) {
  if (!n_sc || !n_sym || !n_users || !n_rx) throw ShapeError("channel dimensions must be positive");
  response_.assign(n_sc * n_sym * n_users * n_rx, cd{});
  taps_.resize(n_users * n_rx);
}

ResourceGrid ChannelRealization::user_grid(std::size_t user) const {
  ResourceGrid g(n_sc_, n_sym_, n_rx_);
  for (std::size_t sc = 0; sc < n_sc_; ++sc)
    for (std::size_t sym = 0; sym < n_sym_; ++sym)
      for (std::size_t a = 0; a < n_rx_; ++a) g(sc, sym, a) = h(sc, sym, user, a);
  return g;
}

ChannelRealization draw_channel(const LinkConfig& config, std::uint64_t seed) {
  config.validate();
  const auto profile = exponential_profile(config.rms_delay_spread, config.n_taps);
  const auto n_users = static_cast<std::size_t>(config.n_users);
  const auto n_rx = static_cast<std::size_t>(config.n_rx);
  ChannelRealization ch(config.n_sc(), config.n_sym(), n_users, n_rx);
  Rng rng(seed);
  for (std::size_t u = 0; u < n_users; ++u) {
    for (std::size_t a = 0; a < n_rx; ++a) {
      auto& taps = ch.taps(u, a);
      if (!config.fading) {
        taps.push_back({0.0, cd{1.0, 0.0}});
      } else {
        for (std::size_t l = 0; l < profile.power.size(); ++l) {
          taps.push_back({profile.delay_samples[l], rng.complex_normal(profile.power[l])});
        }
      }
      for (std::size_t sc = 0; sc < ch.n_sc(); ++sc) {
        cd acc{};
        for (const auto& t : taps) {
          const double phase = -2.0 * std::numbers::pi * static_cast<double>(sc) * t.delay_samples / kSamplesPerSymbol;
          acc += t.gain * std::polar(1.0, phase);
        }
        for (std::size_t sym = 0; sym < ch.n_sym(); ++sym) ch.h(sc, sym, u, a) = acc;
      }
    }
  }
  return ch;
}

double ebn0_to_noisevar(double ebn0_db, int bits_per_symbol) {
  if (bits_per_symbol < 1) throw ContractError("bits_per_symbol must be at least 1");
  return 1.0 / (std::pow(10.0, ebn0_db / 10.0) * bits_per_symbol);
}

ResourceGrid apply_channel(std::span<const ResourceGrid> x, const ChannelRealization& channel,
                           double noise_var, std::uint64_t seed) {
  if (x.size() != channel.n_users()) {
    throw ShapeError("apply_channel: " + std::to_string(x.size()) + " transmit grids for " +
                     std::to_string(channel.n_users()) + " users");
  }
  for (const auto& g : x) {
    if (g.n_sc() != channel.n_sc() || g.n_sym() != channel.n_sym() || g.n_ant() != 1) {
      throw ShapeError("apply_channel: transmit grid does not match channel dimensions");
    }
  }
  if (noise_var < 0.0) throw ContractError("noise variance must be non-negative");
  ResourceGrid y(channel.n_sc(), channel.n_sym(), channel.n_rx());
  Rng rng(seed);
  for (std::size_t sc = 0; sc < y.n_sc(); ++sc) {
    for (std::size_t sym = 0; sym < y.n_sym(); ++sym) {
      for (std::size_t a = 0; a < y.n_ant(); ++a) {
        cd acc{};
        for (std::size_t u = 0; u < x.size(); ++u) acc += channel.h(sc, sym, u, a) * x[u](sc, sym);
        if (noise_var > 0.0) acc += rng.complex_normal(noise_var);
        y(sc, sym, a) = acc;
      }
    }
  }
  return y;
}

}  // namespace phyformer

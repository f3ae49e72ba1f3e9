#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "phyformer/rng.hpp"

namespace phyformer {

// Square QAM with per-axis Gray labeling and unit mean energy.
//
// Label bit 0 is the sign of the real part (0 -> positive), bit 1 the sign of
// the imaginary part; the remaining bits alternate Re/Im and Gray-code the
// amplitude on each axis, most significant first. Consequently the first
// log2(M') bits of any M-QAM label are the label of the M'-QAM point covering
// the same region, for every supported M' <= M.
class Constellation {
 public:
  // order in {4, 16, 64, 256}; throws ConfigError otherwise.
  explicit Constellation(int order);

  int order() const { return order_; }
  int bits_per_symbol() const { return bits_; }
  // points()[label] where label packs bit 0 as the most significant bit.
  std::span<const cd> points() const { return points_; }
  // Bit i of `label` in label order (bit 0 first).
  int label_bit(int label, int i) const { return (label >> (bits_ - 1 - i)) & 1; }
  int label_of(std::span<const std::uint8_t> bits) const;
  cd map(std::span<const std::uint8_t> bits) const { return points_[static_cast<std::size_t>(label_of(bits))]; }

 private:
  int order_;
  int bits_;
  std::vector<cd> points_;
};

bool is_supported_order(int order);

// Maps a bit stream onto symbols; length must be a multiple of bits_per_symbol.
std::vector<cd> map_bits(std::span<const std::uint8_t> bits, const Constellation& constellation);

}  // namespace phyformer

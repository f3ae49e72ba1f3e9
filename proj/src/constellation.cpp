#include "phyformer/constellation.hpp"

#include <cmath>
#include <string>

#include "phyformer/errors.hpp"

namespace phyformer {

bool is_supported_order(int order) { return order == 4 || order == 16 || order == 64 || order == 256; }

namespace {

// Amplitude on one axis from its sign bit and Gray-coded magnitude bits.
double axis_level(int sign_bit, int gray) {
  int idx = 0;
  for (int g = gray; g; g >>= 1) idx ^= g;
  const double amp = 2.0 * idx + 1.0;
  return sign_bit ? -amp : amp;
}

}  // namespace

Constellation::Constellation(int order) : order_(order) {
  if (!is_supported_order(order)) {
    throw ConfigError("unsupported constellation order " + std::to_string(order));
  }
  bits_ = 0;
  while ((1 << bits_) < order) ++bits_;
  const int per_axis = bits_ / 2;
  const int levels = 1 << per_axis;
  const double norm = std::sqrt(2.0 * (levels * levels - 1) / 3.0);

  points_.resize(static_cast<std::size_t>(order));
  for (int label = 0; label < order; ++label) {
    int re_gray = 0, im_gray = 0;
    for (int k = 1; k < per_axis; ++k) {
      re_gray = (re_gray << 1) | label_bit(label, 2 * k);
      im_gray = (im_gray << 1) | label_bit(label, 2 * k + 1);
    }
    points_[static_cast<std::size_t>(label)] =
        cd(axis_level(label_bit(label, 0), re_gray), axis_level(label_bit(label, 1), im_gray)) / norm;
  }
}

int Constellation::label_of(std::span<const std::uint8_t> bits) const {
  if (bits.size() != static_cast<std::size_t>(bits_)) {
    throw ShapeError("expected " + std::to_string(bits_) + " bits per symbol");
  }
  int label = 0;
  for (auto b : bits) label = (label << 1) | (b & 1);
  return label;
}

std::vector<cd> map_bits(std::span<const std::uint8_t> bits, const Constellation& constellation) {
  const auto m = static_cast<std::size_t>(constellation.bits_per_symbol());
  if (bits.size() % m != 0) {
    throw ShapeError("map_bits: " + std::to_string(bits.size()) + " bits is not a multiple of " +
                     std::to_string(m));
  }
  std::vector<cd> out;
  out.reserve(bits.size() / m);
  for (std::size_t i = 0; i < bits.size(); i += m) out.push_back(constellation.map(bits.subspan(i, m)));
  return out;
}

}  // namespace phyformer

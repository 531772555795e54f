#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "neuroens/volume.hpp"

namespace neuroens {

inline constexpr double kMaxRotationDegrees = 15.0;
inline constexpr double kMaxPadFraction = 0.10;

/// One augmentation step. Text form: "mirror:h", "rotate:-7.5", "pad:t/b/l/r" or "pad:t/b/l/r/fill".
struct AugmentOp {
  enum class Kind { mirror, rotate, pad };
  Kind kind = Kind::mirror;
  char axis = 'h';                              // mirror: 'h' reverses columns, 'v' reverses rows
  double degrees = 0.0;                         // rotate, counter-clockwise
  std::array<std::size_t, 4> margins{0, 0, 0, 0};  // pad: top, bottom, left, right
  float fill = 0.0f;

  static AugmentOp mirror(char axis);
  static AugmentOp rotate(double degrees);
  static AugmentOp pad(std::array<std::size_t, 4> margins, float fill = 0.0f);

  friend bool operator==(const AugmentOp&, const AugmentOp&) = default;
};

using OpChain = std::vector<AugmentOp>;

std::string format_op(const AugmentOp& op);
std::string format_chain(const OpChain& chain);  // ops joined by '|'
OpChain parse_chain(std::string_view text);      // throws InvalidArgument

SliceStack mirror(const SliceStack& img, char axis);
// Bilinear, about the image center, zero fill, same dims. Throws AngleOutOfRange beyond 15 degrees.
SliceStack rotate(const SliceStack& img, double degrees);
// Pads with `fill`, then resizes (corner-aligned bilinear) back to the input dims.
SliceStack pad(const SliceStack& img, const std::array<std::size_t, 4>& margins, float fill);

SliceStack apply_op(const SliceStack& img, const AugmentOp& op);
SliceStack apply_chain(const SliceStack& img, const OpChain& chain);

// Sampled chains have one or two ops and are never no-ops: rotations are nonzero multiples of
// 0.5 degrees, pads have a positive margin no larger than 10% of the dimension, and a mirror is
// never followed by a mirror on the same axis.
OpChain sample_chain(std::size_t height, std::size_t width, std::uint64_t seed);

struct AugmentPlanItem {
  std::size_t source = 0;  // index into the originals
  OpChain ops;             // empty for the originals themselves
};

// Originals first in order, then target - n augmented items cycling over the originals, so
// per-original counts differ by at most 1. Item seeds derive from (seed, source, replica).
std::vector<AugmentPlanItem> plan_augmentation(std::size_t originals, std::size_t target, std::uint64_t seed,
                                               std::size_t height, std::size_t width);

struct AugmentedSample {
  SliceStack image;
  std::size_t source = 0;
  OpChain ops;
};

// Throws EmptyClass for no samples and InvalidArgument when target < samples.size().
std::vector<AugmentedSample> augment_to_target(const std::vector<SliceStack>& samples, std::size_t target,
                                               std::uint64_t seed);

}  // namespace neuroens

#include "neuroens/augment.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <random>

#include "neuroens/error.hpp"
#include "neuroens/random.hpp"

namespace neuroens {

namespace {

std::string format_number(double v) {
  char buf[32];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

double parse_number(std::string_view s) {
  double v = 0;
  auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || end != s.data() + s.size())
    fail(ErrorCode::InvalidArgument, "bad number in op chain: '" + std::string(s) + "'");
  return v;
}

std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    auto pos = s.find(sep, start);
    out.push_back(s.substr(start, pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

AugmentOp parse_op(std::string_view text) {
  auto colon = text.find(':');
  if (colon == std::string_view::npos) fail(ErrorCode::InvalidArgument, "op missing ':' in '" + std::string(text) + "'");
  auto name = text.substr(0, colon);
  auto arg = text.substr(colon + 1);
  if (name == "mirror") {
    if (arg != "h" && arg != "v") fail(ErrorCode::InvalidArgument, "mirror axis must be h or v");
    return AugmentOp::mirror(arg[0]);
  }
  if (name == "rotate") return AugmentOp::rotate(parse_number(arg));
  if (name == "pad") {
    auto parts = split(arg, '/');
    if (parts.size() != 4 && parts.size() != 5) fail(ErrorCode::InvalidArgument, "pad takes t/b/l/r[/fill]");
    std::array<std::size_t, 4> m{};
    for (int i = 0; i < 4; ++i) {
      double v = parse_number(parts[i]);
      if (v < 0 || v != std::floor(v)) fail(ErrorCode::InvalidArgument, "pad margins must be whole and >= 0");
      m[i] = static_cast<std::size_t>(v);
    }
    float fill = parts.size() == 5 ? static_cast<float>(parse_number(parts[4])) : 0.0f;
    return AugmentOp::pad(m, fill);
  }
  fail(ErrorCode::InvalidArgument, "unknown op '" + std::string(name) + "'");
}

}  // namespace

AugmentOp AugmentOp::mirror(char axis) {
  if (axis != 'h' && axis != 'v') fail(ErrorCode::InvalidArgument, "mirror axis must be 'h' or 'v'");
  AugmentOp op;
  op.kind = Kind::mirror;
  op.axis = axis;
  return op;
}

AugmentOp AugmentOp::rotate(double degrees) {
  if (!(std::abs(degrees) <= kMaxRotationDegrees))
    fail(ErrorCode::AngleOutOfRange, "rotation " + format_number(degrees) + " exceeds 15 degrees");
  AugmentOp op;
  op.kind = Kind::rotate;
  op.degrees = degrees;
  return op;
}

AugmentOp AugmentOp::pad(std::array<std::size_t, 4> margins, float fill) {
  AugmentOp op;
  op.kind = Kind::pad;
  op.margins = margins;
  op.fill = fill;
  return op;
}

std::string format_op(const AugmentOp& op) {
  switch (op.kind) {
    case AugmentOp::Kind::mirror: return std::string("mirror:") + op.axis;
    case AugmentOp::Kind::rotate: return "rotate:" + format_number(op.degrees);
    case AugmentOp::Kind::pad: {
      std::string s = "pad:";
      for (int i = 0; i < 4; ++i) s += std::to_string(op.margins[i]) + (i < 3 ? "/" : "");
      if (op.fill != 0.0f) s += "/" + format_number(op.fill);
      return s;
    }
  }
  return {};
}

std::string format_chain(const OpChain& chain) {
  std::string s;
  for (std::size_t i = 0; i < chain.size(); ++i) s += (i ? "|" : "") + format_op(chain[i]);
  return s;
}

OpChain parse_chain(std::string_view text) {
  OpChain chain;
  if (text.empty()) return chain;
  for (auto part : split(text, '|')) chain.push_back(parse_op(part));
  return chain;
}

SliceStack mirror(const SliceStack& img, char axis) {
  if (axis != 'h' && axis != 'v') fail(ErrorCode::InvalidArgument, "mirror axis must be 'h' or 'v'");
  const auto h = img.height(), w = img.width();
  SliceStack out(h, w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      std::size_t sy = axis == 'v' ? h - 1 - y : y;
      std::size_t sx = axis == 'h' ? w - 1 - x : x;
      for (std::size_t c = 0; c < SliceStack::kChannels; ++c) out.at(y, x, c) = img.at(sy, sx, c);
    }
  return out;
}

SliceStack rotate(const SliceStack& img, double degrees) {
  if (!(std::abs(degrees) <= kMaxRotationDegrees))
    fail(ErrorCode::AngleOutOfRange, "rotation " + format_number(degrees) + " exceeds 15 degrees");
  if (degrees == 0.0) return img;
  const auto h = img.height(), w = img.width();
  const double cy = (static_cast<double>(h) - 1) / 2, cx = (static_cast<double>(w) - 1) / 2;
  const double rad = degrees * M_PI / 180.0;
  const double cs = std::cos(rad), sn = std::sin(rad);
  constexpr double eps = 1e-9;
  SliceStack out(h, w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      double dx = static_cast<double>(x) - cx, dy = static_cast<double>(y) - cy;
      double sx = cx + cs * dx - sn * dy;
      double sy = cy + sn * dx + cs * dy;
      if (sx < -eps || sy < -eps || sx > static_cast<double>(w - 1) + eps || sy > static_cast<double>(h - 1) + eps)
        continue;
      sx = std::clamp(sx, 0.0, static_cast<double>(w - 1));
      sy = std::clamp(sy, 0.0, static_cast<double>(h - 1));
      auto x0 = static_cast<std::size_t>(sx), y0 = static_cast<std::size_t>(sy);
      std::size_t x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
      double tx = sx - static_cast<double>(x0), ty = sy - static_cast<double>(y0);
      for (std::size_t c = 0; c < SliceStack::kChannels; ++c) {
        double top = std::lerp(static_cast<double>(img.at(y0, x0, c)), static_cast<double>(img.at(y0, x1, c)), tx);
        double bot = std::lerp(static_cast<double>(img.at(y1, x0, c)), static_cast<double>(img.at(y1, x1, c)), tx);
        out.at(y, x, c) = static_cast<float>(std::lerp(top, bot, ty));
      }
    }
  return out;
}

SliceStack pad(const SliceStack& img, const std::array<std::size_t, 4>& margins, float fill) {
  if (margins == std::array<std::size_t, 4>{0, 0, 0, 0}) return img;
  const auto h = img.height(), w = img.width();
  const auto ph = h + margins[0] + margins[1], pw = w + margins[2] + margins[3];
  SliceStack out(h, w);
  std::vector<float> plane(ph * pw);
  for (std::size_t c = 0; c < SliceStack::kChannels; ++c) {
    std::fill(plane.begin(), plane.end(), fill);
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) plane[(y + margins[0]) * pw + x + margins[2]] = img.at(y, x, c);
    auto resized = resize_bilinear(plane, ph, pw, h, w);
    for (std::size_t p = 0; p < h * w; ++p) out.data()[p * SliceStack::kChannels + c] = resized[p];
  }
  return out;
}

SliceStack apply_op(const SliceStack& img, const AugmentOp& op) {
  switch (op.kind) {
    case AugmentOp::Kind::mirror: return mirror(img, op.axis);
    case AugmentOp::Kind::rotate: return rotate(img, op.degrees);
    case AugmentOp::Kind::pad: return pad(img, op.margins, op.fill);
  }
  return img;
}

SliceStack apply_chain(const SliceStack& img, const OpChain& chain) {
  SliceStack out = img;
  for (const auto& op : chain) out = apply_op(out, op);
  return out;
}

OpChain sample_chain(std::size_t height, std::size_t width, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const auto max_v = static_cast<std::size_t>(std::floor(kMaxPadFraction * static_cast<double>(height)));
  const auto max_h = static_cast<std::size_t>(std::floor(kMaxPadFraction * static_cast<double>(width)));
  const bool can_pad = max_v > 0 || max_h > 0;
  std::uniform_int_distribution<int> length(1, 2);
  const int n = length(rng);

  OpChain chain;
  for (int i = 0; i < n; ++i) {
    std::uniform_int_distribution<int> kind(0, can_pad ? 2 : 1);
    switch (kind(rng)) {
      case 0: {
        char axis = (rng() & 1) ? 'v' : 'h';
        if (!chain.empty() && chain.back().kind == AugmentOp::Kind::mirror && chain.back().axis == axis)
          axis = axis == 'h' ? 'v' : 'h';
        chain.push_back(AugmentOp::mirror(axis));
        break;
      }
      case 1: {
        std::uniform_int_distribution<int> halfsteps(2, static_cast<int>(2 * kMaxRotationDegrees));
        double deg = 0.5 * halfsteps(rng);
        chain.push_back(AugmentOp::rotate((rng() & 1) ? -deg : deg));
        break;
      }
      default: {
        std::array<std::size_t, 4> m{};
        std::uniform_int_distribution<std::size_t> mv(0, max_v), mh(0, max_h);
        m[0] = mv(rng);
        m[1] = mv(rng);
        m[2] = mh(rng);
        m[3] = mh(rng);
        if (m == std::array<std::size_t, 4>{0, 0, 0, 0}) {
          if (max_v > 0) m[0] = 1;
          else m[2] = 1;
        }
        chain.push_back(AugmentOp::pad(m));
        break;
      }
    }
  }
  return chain;
}

std::vector<AugmentPlanItem> plan_augmentation(std::size_t originals, std::size_t target, std::uint64_t seed,
                                               std::size_t height, std::size_t width) {
  if (originals == 0) fail(ErrorCode::EmptyClass, "no samples to augment");
  if (target < originals)
    fail(ErrorCode::InvalidArgument, "target " + std::to_string(target) + " is below the " +
                                         std::to_string(originals) + " originals");
  std::vector<AugmentPlanItem> plan;
  plan.reserve(target);
  for (std::size_t i = 0; i < originals; ++i) plan.push_back({i, {}});
  for (std::size_t a = 0; a < target - originals; ++a) {
    std::size_t source = a % originals, replica = a / originals;
    plan.push_back({source, sample_chain(height, width, derive_seed(seed, source, replica))});
  }
  return plan;
}

std::vector<AugmentedSample> augment_to_target(const std::vector<SliceStack>& samples, std::size_t target,
                                               std::uint64_t seed) {
  if (samples.empty()) fail(ErrorCode::EmptyClass, "no samples to augment");
  const auto h = samples[0].height(), w = samples[0].width();
  for (const auto& s : samples)
    if (s.height() != h || s.width() != w) fail(ErrorCode::ShapeMismatch, "samples differ in size");
  auto plan = plan_augmentation(samples.size(), target, seed, h, w);
  std::vector<AugmentedSample> out;
  out.reserve(plan.size());
  for (auto& item : plan)
    out.push_back({apply_chain(samples[item.source], item.ops), item.source, std::move(item.ops)});
  return out;
}

}  // namespace neuroens

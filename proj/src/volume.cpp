#include "neuroens/volume.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>

#include "neuroens/error.hpp"

static_assert(std::endian::native == std::endian::little,
              "NIfTI I/O assumes a little-endian host");

namespace neuroens {

namespace {

constexpr std::size_t kHeaderSize = 348;
constexpr std::size_t kVoxOffset = 352;
constexpr std::int16_t kDtInt16 = 4;
constexpr std::int16_t kDtFloat32 = 16;

template <typename T>
T get(const std::vector<char>& buf, std::size_t offset) {
  T v;
  std::memcpy(&v, buf.data() + offset, sizeof(T));
  return v;
}

template <typename T>
void put(std::vector<char>& buf, std::size_t offset, T v) {
  std::memcpy(buf.data() + offset, &v, sizeof(T));
}

std::size_t checked_count(const Dims3& dims) {
  for (auto d : dims)
    if (d == 0) fail(ErrorCode::InvalidVolume, "volume dims must be positive");
  return dims[0] * dims[1] * dims[2];
}

void check_spacing(const Vec3f& spacing) {
  for (auto s : spacing)
    if (!(s > 0.0f) || !std::isfinite(s))
      fail(ErrorCode::InvalidVolume, "voxel spacing must be strictly positive");
}

// Continuous source index for output index `i` under corner alignment.
double source_coord(std::size_t i, std::size_t n_out, std::size_t n_in) {
  if (n_out == 1) return 0.5 * static_cast<double>(n_in - 1);
  return static_cast<double>(i) * static_cast<double>(n_in - 1) / static_cast<double>(n_out - 1);
}

struct LerpIndex {
  std::size_t lo;
  std::size_t hi;
  double t;
};

LerpIndex lerp_index(double coord, std::size_t n) {
  double fl = std::floor(coord);
  auto lo = static_cast<std::size_t>(std::clamp(fl, 0.0, static_cast<double>(n - 1)));
  std::size_t hi = std::min(lo + 1, n - 1);
  double t = std::clamp(coord - static_cast<double>(lo), 0.0, 1.0);
  return {lo, hi, t};
}

}  // namespace

Volume3D::Volume3D(Dims3 dims, Vec3f spacing, Vec3f origin)
    : dims_(dims), spacing_(spacing), origin_(origin) {
  check_spacing(spacing_);
  data_.assign(checked_count(dims_), 0.0f);
}

Volume3D::Volume3D(Dims3 dims, Vec3f spacing, Vec3f origin, std::vector<float> data)
    : dims_(dims), spacing_(spacing), origin_(origin), data_(std::move(data)) {
  check_spacing(spacing_);
  if (data_.size() != checked_count(dims_))
    fail(ErrorCode::InvalidVolume, "data length does not match dims");
}

std::array<double, 3> Volume3D::position(double i, double j, double k) const noexcept {
  return {origin_[0] + i * spacing_[0], origin_[1] + j * spacing_[1], origin_[2] + k * spacing_[2]};
}

bool Volume3D::same_grid(const Volume3D& other) const noexcept {
  return dims_ == other.dims_ && spacing_ == other.spacing_ && origin_ == other.origin_;
}

void Volume3D::check_finite() const {
  for (float v : data_)
    if (!std::isfinite(v)) fail(ErrorCode::InvalidVolume, "volume contains a non-finite voxel");
}

SliceStack::SliceStack(std::size_t height, std::size_t width, float fill)
    : height_(height), width_(width), data_(height * width * kChannels, fill) {
  if (height == 0 || width == 0) fail(ErrorCode::InvalidArgument, "slice stack dims must be positive");
}

SliceStack::SliceStack(std::size_t height, std::size_t width, std::vector<float> data)
    : height_(height), width_(width), data_(std::move(data)) {
  if (height == 0 || width == 0) fail(ErrorCode::InvalidArgument, "slice stack dims must be positive");
  if (data_.size() != height * width * kChannels)
    fail(ErrorCode::InvalidArgument, "slice stack data length does not match h*w*3");
}

Volume3D read_nifti(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    if (!std::filesystem::exists(path))
      fail(ErrorCode::FileNotFound, "no such file: " + path.string());
    fail(ErrorCode::IoFailure, "cannot open " + path.string());
  }
  std::vector<char> hdr(kHeaderSize);
  if (!in.read(hdr.data(), kHeaderSize))
    fail(ErrorCode::MalformedHeader, path.string() + ": shorter than a NIfTI-1 header");
  if (get<std::int32_t>(hdr, 0) != static_cast<std::int32_t>(kHeaderSize))
    fail(ErrorCode::MalformedHeader, path.string() + ": sizeof_hdr is not 348 (or big-endian)");
  if (std::memcmp(hdr.data() + 344, "n+1\0", 4) != 0)
    fail(ErrorCode::MalformedHeader, path.string() + ": magic is not \"n+1\"");

  auto ndim = get<std::int16_t>(hdr, 40);
  if (ndim < 1 || ndim > 7) fail(ErrorCode::MalformedHeader, path.string() + ": bad dim[0]");
  Dims3 dims{1, 1, 1};
  for (int a = 0; a < 7; ++a) {
    auto d = get<std::int16_t>(hdr, 42 + 2 * a);
    if (a >= ndim) continue;
    if (d < 1) fail(ErrorCode::MalformedHeader, path.string() + ": non-positive dim");
    if (a < 3)
      dims[a] = static_cast<std::size_t>(d);
    else if (d != 1)
      fail(ErrorCode::MalformedHeader, path.string() + ": only 3D volumes are supported");
  }

  auto datatype = get<std::int16_t>(hdr, 70);
  if (datatype != kDtInt16 && datatype != kDtFloat32)
    fail(ErrorCode::UnsupportedDatatype,
         path.string() + ": datatype " + std::to_string(datatype) + " (want 4 or 16)");

  Vec3f spacing{get<float>(hdr, 80), get<float>(hdr, 84), get<float>(hdr, 88)};
  for (auto s : spacing)
    if (!(s > 0.0f) || !std::isfinite(s))
      fail(ErrorCode::MalformedHeader, path.string() + ": pixdim must be positive");

  Vec3f origin{0, 0, 0};
  if (get<std::int16_t>(hdr, 252) > 0) {
    origin = {get<float>(hdr, 268), get<float>(hdr, 272), get<float>(hdr, 276)};
  } else if (get<std::int16_t>(hdr, 254) > 0) {
    origin = {get<float>(hdr, 292), get<float>(hdr, 308), get<float>(hdr, 324)};
  }

  float vox_offset = get<float>(hdr, 108);
  if (!(vox_offset >= static_cast<float>(kVoxOffset)))
    fail(ErrorCode::MalformedHeader, path.string() + ": vox_offset below 352");
  float slope = get<float>(hdr, 112);
  float inter = get<float>(hdr, 116);

  std::size_t count = dims[0] * dims[1] * dims[2];
  std::size_t elem = datatype == kDtInt16 ? 2 : 4;
  in.seekg(static_cast<std::streamoff>(vox_offset));
  std::vector<char> payload(count * elem);
  in.read(payload.data(), static_cast<std::streamsize>(payload.size()));
  if (static_cast<std::size_t>(in.gcount()) != payload.size())
    fail(ErrorCode::TruncatedData, path.string() + ": payload holds " +
                                       std::to_string(in.gcount() / elem) + " of " +
                                       std::to_string(count) + " voxels");

  std::vector<float> data(count);
  bool scaled = slope != 0.0f && std::isfinite(slope);
  if (datatype == kDtInt16) {
    for (std::size_t i = 0; i < count; ++i) {
      double raw = get<std::int16_t>(payload, 2 * i);
      data[i] = static_cast<float>(scaled ? raw * slope + inter : raw);
    }
  } else {
    std::memcpy(data.data(), payload.data(), payload.size());
    if (scaled)
      for (auto& v : data) v = static_cast<float>(static_cast<double>(v) * slope + inter);
  }
  Volume3D vol(dims, spacing, origin, std::move(data));
  vol.check_finite();
  return vol;
}

void write_nifti(const Volume3D& vol, const std::filesystem::path& path) {
  if (vol.size() == 0) fail(ErrorCode::InvalidVolume, "cannot write an empty volume");
  vol.check_finite();
  for (auto d : vol.dims())
    if (d > 32767) fail(ErrorCode::InvalidVolume, "dimension exceeds NIfTI-1 int16 range");

  std::vector<char> hdr(kVoxOffset, 0);
  put<std::int32_t>(hdr, 0, static_cast<std::int32_t>(kHeaderSize));
  hdr[38] = 'r';
  put<std::int16_t>(hdr, 40, 3);
  for (int a = 0; a < 7; ++a)
    put<std::int16_t>(hdr, 42 + 2 * a, a < 3 ? static_cast<std::int16_t>(vol.dims()[a]) : 1);
  put<std::int16_t>(hdr, 70, kDtFloat32);
  put<std::int16_t>(hdr, 72, 32);
  put<float>(hdr, 76, 1.0f);  // qfac
  for (int a = 0; a < 3; ++a) put<float>(hdr, 80 + 4 * a, vol.spacing()[a]);
  put<float>(hdr, 108, static_cast<float>(kVoxOffset));
  put<float>(hdr, 112, 0.0f);
  put<float>(hdr, 116, 0.0f);
  hdr[123] = 2;  // mm
  put<std::int16_t>(hdr, 252, 1);
  put<std::int16_t>(hdr, 254, 1);
  for (int a = 0; a < 3; ++a) put<float>(hdr, 268 + 4 * a, vol.origin()[a]);
  for (int r = 0; r < 3; ++r) {
    put<float>(hdr, 280 + 16 * r + 4 * r, vol.spacing()[r]);
    put<float>(hdr, 280 + 16 * r + 12, vol.origin()[r]);
  }
  std::memcpy(hdr.data() + 344, "n+1\0", 4);

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCode::IoFailure, "cannot open " + path.string() + " for writing");
  out.write(hdr.data(), static_cast<std::streamsize>(hdr.size()));
  auto bytes = std::as_bytes(vol.data());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorCode::IoFailure, "write failed: " + path.string());
}

Volume3D resample(const Volume3D& vol, Dims3 new_dims, Interpolation interpolation) {
  checked_count(new_dims);
  const auto& d = vol.dims();
  Vec3f spacing;
  for (int a = 0; a < 3; ++a)
    spacing[a] = static_cast<float>(static_cast<double>(vol.spacing()[a]) * d[a] / new_dims[a]);
  Volume3D out(new_dims, spacing, vol.origin());
  if (new_dims == d) {
    std::copy(vol.data().begin(), vol.data().end(), out.data().begin());
    return out;
  }

  std::array<std::vector<LerpIndex>, 3> axes;
  for (int a = 0; a < 3; ++a) {
    axes[a].reserve(new_dims[a]);
    for (std::size_t i = 0; i < new_dims[a]; ++i)
      axes[a].push_back(lerp_index(source_coord(i, new_dims[a], d[a]), d[a]));
  }

  for (std::size_t k = 0; k < new_dims[2]; ++k) {
    const auto& lz = axes[2][k];
    for (std::size_t j = 0; j < new_dims[1]; ++j) {
      const auto& ly = axes[1][j];
      for (std::size_t i = 0; i < new_dims[0]; ++i) {
        const auto& lx = axes[0][i];
        float v;
        if (interpolation == Interpolation::nearest) {
          v = vol.at(lx.t < 0.5 ? lx.lo : lx.hi, ly.t < 0.5 ? ly.lo : ly.hi,
                     lz.t < 0.5 ? lz.lo : lz.hi);
        } else {
          auto line = [&](std::size_t jj, std::size_t kk) {
            return std::lerp(static_cast<double>(vol.at(lx.lo, jj, kk)),
                             static_cast<double>(vol.at(lx.hi, jj, kk)), lx.t);
          };
          double c0 = std::lerp(line(ly.lo, lz.lo), line(ly.hi, lz.lo), ly.t);
          double c1 = std::lerp(line(ly.lo, lz.hi), line(ly.hi, lz.hi), ly.t);
          v = static_cast<float>(std::lerp(c0, c1, lz.t));
        }
        out.at(i, j, k) = v;
      }
    }
  }
  return out;
}

std::vector<float> resize_bilinear(std::span<const float> plane, std::size_t h, std::size_t w,
                                   std::size_t out_h, std::size_t out_w) {
  if (plane.size() != h * w) fail(ErrorCode::InvalidArgument, "plane size does not match h*w");
  if (out_h == h && out_w == w) return {plane.begin(), plane.end()};
  std::vector<float> out(out_h * out_w);
  std::vector<LerpIndex> cols(out_w);
  for (std::size_t x = 0; x < out_w; ++x) cols[x] = lerp_index(source_coord(x, out_w, w), w);
  for (std::size_t y = 0; y < out_h; ++y) {
    auto ly = lerp_index(source_coord(y, out_h, h), h);
    for (std::size_t x = 0; x < out_w; ++x) {
      const auto& lx = cols[x];
      double top = std::lerp(static_cast<double>(plane[ly.lo * w + lx.lo]),
                             static_cast<double>(plane[ly.lo * w + lx.hi]), lx.t);
      double bot = std::lerp(static_cast<double>(plane[ly.hi * w + lx.lo]),
                             static_cast<double>(plane[ly.hi * w + lx.hi]), lx.t);
      out[y * out_w + x] = static_cast<float>(std::lerp(top, bot, ly.t));
    }
  }
  return out;
}

SliceStack extract_slices(const Volume3D& vol, Axis axis, std::size_t center_index,
                          std::size_t out_h, std::size_t out_w) {
  const auto& d = vol.dims();
  int a = axis == Axis::x ? 0 : axis == Axis::y ? 1 : 2;
  if (center_index < 1 || center_index + 2 > d[a])
    fail(ErrorCode::IndexOutOfRange, "slice center " + std::to_string(center_index) +
                                         " leaves no neighbor on axis of length " +
                                         std::to_string(d[a]));
  if (out_h == 0 || out_w == 0) fail(ErrorCode::InvalidArgument, "output slice dims must be positive");

  // (column axis, row axis) of the plane
  int ca = a == 0 ? 1 : 0;
  int ra = a == 2 ? 1 : 2;
  std::size_t h = d[ra], w = d[ca];

  SliceStack out(out_h, out_w);
  std::vector<float> plane(h * w);
  for (std::size_t c = 0; c < SliceStack::kChannels; ++c) {
    std::size_t s = center_index - 1 + c;
    for (std::size_t r = 0; r < h; ++r) {
      for (std::size_t q = 0; q < w; ++q) {
        std::array<std::size_t, 3> idx{};
        idx[a] = s;
        idx[ra] = r;
        idx[ca] = q;
        plane[r * w + q] = vol.at(idx[0], idx[1], idx[2]);
      }
    }
    auto resized = resize_bilinear(plane, h, w, out_h, out_w);
    for (std::size_t p = 0; p < out_h * out_w; ++p) out.data()[p * SliceStack::kChannels + c] = resized[p];
  }
  return out;
}

Volume3D stack_to_volume(const SliceStack& stack) {
  Volume3D vol({stack.width(), stack.height(), SliceStack::kChannels}, {1, 1, 1});
  for (std::size_t y = 0; y < stack.height(); ++y)
    for (std::size_t x = 0; x < stack.width(); ++x)
      for (std::size_t c = 0; c < SliceStack::kChannels; ++c) vol.at(x, y, c) = stack.at(y, x, c);
  return vol;
}

SliceStack volume_to_stack(const Volume3D& vol) {
  if (vol.dims()[2] != SliceStack::kChannels)
    fail(ErrorCode::DimMismatch, "slice-stack volumes must have exactly 3 planes");
  SliceStack stack(vol.dims()[1], vol.dims()[0]);
  for (std::size_t y = 0; y < stack.height(); ++y)
    for (std::size_t x = 0; x < stack.width(); ++x)
      for (std::size_t c = 0; c < SliceStack::kChannels; ++c) stack.at(y, x, c) = vol.at(x, y, c);
  return stack;
}

}  // namespace neuroens

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "frag4d/image.hpp"
#include "frag4d/scene.hpp"

namespace frag4d {

/// Dense row-major float32 tensor backing the TNSR container:
///   "TNSR" | version u8 = 1 | ndim u32 | dims u32[ndim] | f32 payload
/// All multi-byte fields little-endian.
struct Tensor {
  std::vector<std::uint32_t> dims;
  std::vector<float> data;

  Tensor() = default;
  /// Zero-filled tensor; throws BadShape / DimOverflow on invalid dims.
  explicit Tensor(std::vector<std::uint32_t> shape);
  Tensor(std::vector<std::uint32_t> shape, std::vector<float> values);

  std::size_t ndim() const { return dims.size(); }
  std::size_t numel() const { return data.size(); }
  bool operator==(const Tensor&) const = default;
};

inline constexpr std::uint64_t kMaxTensorElements = std::uint64_t{1} << 31;

std::vector<std::uint8_t> encode_tensor(const Tensor& t);
Tensor decode_tensor(std::span<const std::uint8_t> bytes);
Tensor read_tensor(const std::filesystem::path& path);
void write_tensor(const Tensor& t, const std::filesystem::path& path);

/// PLY with the 14 float properties
///   x y z qw qx qy qz sx sy sz opacity r g b
/// in that order. Binary little-endian is the default, ASCII is accepted.
enum class CloudEncoding { kBinary, kAscii };

std::vector<std::uint8_t> encode_cloud(const GaussianCloud& cloud,
                                       CloudEncoding encoding = CloudEncoding::kBinary);
GaussianCloud decode_cloud(std::span<const std::uint8_t> bytes);
GaussianCloud read_cloud(const std::filesystem::path& path);
void write_cloud(const GaussianCloud& cloud, const std::filesystem::path& path,
                 CloudEncoding encoding = CloudEncoding::kBinary);

/// 8-bit RGBA PNG. `rgb` has 3 channels; `alpha` (1 channel) may be empty,
/// in which case the image is written opaque.
void write_png(const std::filesystem::path& path, const Image& rgb, const Image& alpha = {});
/// Reads an 8-bit RGBA PNG into a 4-channel image in [0, 1].
Image read_png(const std::filesystem::path& path);

/// Stacks equally shaped images into [n, H, W, C] (or [n, H, W] when C == 1).
Tensor images_to_tensor(std::span<const Image> images);
std::vector<Image> tensor_to_images(const Tensor& t);

/// N tracked points over T frames: pixel (x, y), depth, visibility in {0, 1}.
/// Stored on disk as a TNSR tensor of dims [N, T, 4].
struct TrackSet {
  std::size_t points = 0;
  std::size_t frames = 0;
  std::vector<double> values;  // [N, T, 4]

  TrackSet() = default;
  TrackSet(std::size_t n, std::size_t t) : points(n), frames(t), values(n * t * 4, 0.0) {}

  double& at(std::size_t p, std::size_t t, std::size_t c) { return values[(p * frames + t) * 4 + c]; }
  double at(std::size_t p, std::size_t t, std::size_t c) const {
    return values[(p * frames + t) * 4 + c];
  }
  bool visible(std::size_t p, std::size_t t) const { return at(p, t, 3) > 0.5; }

  /// Sub-range of frames [first, first + count).
  TrackSet slice(std::size_t first, std::size_t count) const;
};

Tensor tracks_to_tensor(const TrackSet& tracks);
/// Throws BadShape unless dims are [N, T, 4] with visibility in {0, 1}.
TrackSet tensor_to_tracks(const Tensor& t);

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path);
void write_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
std::string read_text(const std::filesystem::path& path);
void write_text(const std::filesystem::path& path, const std::string& text);

}  // namespace frag4d

#include "frag4d/io.hpp"

#include <png.h>

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

#include "frag4d/error.hpp"

namespace frag4d {
namespace {

constexpr std::array<char, 4> kTensorMagic = {'T', 'N', 'S', 'R'};
constexpr std::uint8_t kTensorVersion = 1;

constexpr std::array<const char*, 14> kCloudProperties = {
    "x", "y", "z", "qw", "qx", "qy", "qz", "sx", "sy", "sz", "opacity", "r", "g", "b"};
constexpr std::size_t kCloudRecordBytes = kCloudProperties.size() * 4;

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_f32(std::vector<std::uint8_t>& out, float f) { put_u32(out, std::bit_cast<std::uint32_t>(f)); }

std::uint32_t get_u32(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

float get_f32(const std::uint8_t* p) { return std::bit_cast<float>(get_u32(p)); }

std::uint64_t checked_numel(std::span<const std::uint32_t> dims) {
  if (dims.empty()) fail(ErrorCode::kBadShape, "tensor must have ndim >= 1");
  std::uint64_t n = 1;
  for (auto d : dims) {
    if (d == 0) fail(ErrorCode::kBadShape, "tensor dims must be >= 1");
    n *= d;
    if (n > kMaxTensorElements) fail(ErrorCode::kDimOverflow, "tensor exceeds 2^31 elements");
  }
  return n;
}

std::string trim(std::string s) {
  while (!s.empty() && (s.back() == '\r' || s.back() == ' ' || s.back() == '\t')) s.pop_back();
  std::size_t b = 0;
  while (b < s.size() && (s[b] == ' ' || s[b] == '\t')) ++b;
  return s.substr(b);
}

Gaussian record_to_gaussian(const std::array<double, 14>& r, std::size_t index) {
  const auto where = " in record " + std::to_string(index);
  for (double v : r)
    if (!std::isfinite(v)) fail(ErrorCode::kInvalidAttribute, "non-finite value" + where);
  Gaussian g;
  g.center = {r[0], r[1], r[2]};
  Quat q{r[3], r[4], r[5], r[6]};
  const double n = q.norm();
  if (std::abs(n - 1.0) > 1e-2) fail(ErrorCode::kNonUnitRotation, "quaternion norm " + std::to_string(n) + where);
  g.rotation = q * (1.0 / n);
  g.scale = {r[7], r[8], r[9]};
  if (!(g.scale.minCoeff() > 0.0)) fail(ErrorCode::kInvalidAttribute, "non-positive scale" + where);
  g.opacity = r[10];
  if (!(g.opacity >= 0.0 && g.opacity <= 1.0)) fail(ErrorCode::kInvalidAttribute, "opacity outside [0,1]" + where);
  g.color = {r[11], r[12], r[13]};
  if (!(g.color.minCoeff() >= 0.0 && g.color.maxCoeff() <= 1.0))
    fail(ErrorCode::kInvalidAttribute, "color outside [0,1]" + where);
  return g;
}

std::array<float, 14> gaussian_to_record(const Gaussian& g) {
  return {static_cast<float>(g.center.x()),   static_cast<float>(g.center.y()),
          static_cast<float>(g.center.z()),   static_cast<float>(g.rotation.w),
          static_cast<float>(g.rotation.x),   static_cast<float>(g.rotation.y),
          static_cast<float>(g.rotation.z),   static_cast<float>(g.scale.x()),
          static_cast<float>(g.scale.y()),    static_cast<float>(g.scale.z()),
          static_cast<float>(g.opacity),      static_cast<float>(g.color.x()),
          static_cast<float>(g.color.y()),    static_cast<float>(g.color.z())};
}

std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

}  // namespace

Tensor::Tensor(std::vector<std::uint32_t> shape) : dims(std::move(shape)) {
  data.assign(checked_numel(dims), 0.0f);
}

Tensor::Tensor(std::vector<std::uint32_t> shape, std::vector<float> values)
    : dims(std::move(shape)), data(std::move(values)) {
  if (checked_numel(dims) != data.size())
    fail(ErrorCode::kBadShape, "value count does not match dims");
}

std::vector<std::uint8_t> encode_tensor(const Tensor& t) {
  if (checked_numel(t.dims) != t.data.size())
    fail(ErrorCode::kBadShape, "value count does not match dims");
  std::vector<std::uint8_t> out;
  out.reserve(9 + 4 * t.dims.size() + 4 * t.data.size());
  out.insert(out.end(), kTensorMagic.begin(), kTensorMagic.end());
  out.push_back(kTensorVersion);
  put_u32(out, static_cast<std::uint32_t>(t.dims.size()));
  for (auto d : t.dims) put_u32(out, d);
  for (float f : t.data) put_f32(out, f);
  return out;
}

Tensor decode_tensor(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 5 || !std::equal(kTensorMagic.begin(), kTensorMagic.end(), bytes.begin()) ||
      bytes[4] != kTensorVersion)
    fail(ErrorCode::kBadMagic, "expected \"TNSR\" version 1");
  std::size_t pos = 5;
  if (bytes.size() < pos + 4) fail(ErrorCode::kTruncatedPayload, "missing ndim");
  const std::uint32_t ndim = get_u32(bytes.data() + pos);
  pos += 4;
  if (bytes.size() < pos + 4ull * ndim) fail(ErrorCode::kTruncatedPayload, "missing dims");
  std::vector<std::uint32_t> dims(ndim);
  for (auto& d : dims) {
    d = get_u32(bytes.data() + pos);
    pos += 4;
  }
  const std::uint64_t n = checked_numel(dims);
  const std::uint64_t expected = pos + 4 * n;
  if (bytes.size() < expected)
    fail(ErrorCode::kTruncatedPayload,
         "payload has " + std::to_string((bytes.size() - pos) / 4) + " floats, dims need " + std::to_string(n));
  if (bytes.size() > expected) fail(ErrorCode::kTrailingData, "bytes after payload");
  std::vector<float> values(n);
  for (std::size_t i = 0; i < n; ++i) values[i] = get_f32(bytes.data() + pos + 4 * i);
  return Tensor(std::move(dims), std::move(values));
}

Tensor read_tensor(const std::filesystem::path& path) { return decode_tensor(read_bytes(path)); }

void write_tensor(const Tensor& t, const std::filesystem::path& path) {
  write_bytes(path, encode_tensor(t));
}

std::vector<std::uint8_t> encode_cloud(const GaussianCloud& cloud, CloudEncoding encoding) {
  std::ostringstream header;
  header << "ply\n"
         << "format " << (encoding == CloudEncoding::kBinary ? "binary_little_endian" : "ascii")
         << " 1.0\n";
  if (cloud.timestamp) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", *cloud.timestamp);
    header << "comment timestamp " << buf << "\n";
  }
  header << "element vertex " << cloud.size() << "\n";
  for (const char* p : kCloudProperties) header << "property float " << p << "\n";
  header << "end_header\n";
  const std::string h = header.str();
  std::vector<std::uint8_t> out(h.begin(), h.end());
  if (encoding == CloudEncoding::kBinary) {
    out.reserve(out.size() + cloud.size() * kCloudRecordBytes);
    for (const auto& g : cloud.gaussians)
      for (float f : gaussian_to_record(g)) put_f32(out, f);
  } else {
    std::string body;
    char buf[32];
    for (const auto& g : cloud.gaussians) {
      const auto rec = gaussian_to_record(g);
      for (std::size_t i = 0; i < rec.size(); ++i) {
        std::snprintf(buf, sizeof buf, "%.9g", static_cast<double>(rec[i]));
        body += buf;
        body += i + 1 < rec.size() ? ' ' : '\n';
      }
    }
    out.insert(out.end(), body.begin(), body.end());
  }
  return out;
}

GaussianCloud decode_cloud(std::span<const std::uint8_t> bytes) {
  const std::string_view text(reinterpret_cast<const char*>(bytes.data()), bytes.size());
  const std::string_view end_marker = "end_header\n";
  const auto end = text.find(end_marker);
  if (text.substr(0, 4) != "ply\n" && text.substr(0, 5) != "ply\r\n")
    fail(ErrorCode::kSchemaMismatch, "missing ply signature");
  if (end == std::string_view::npos) fail(ErrorCode::kSchemaMismatch, "missing end_header");

  std::istringstream header{std::string(text.substr(0, end))};
  std::string line;
  std::getline(header, line);
  bool binary = false;
  bool have_format = false;
  std::size_t count = 0;
  bool have_vertex = false;
  std::size_t prop = 0;
  GaussianCloud cloud;
  while (std::getline(header, line)) {
    line = trim(line);
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string word;
    ls >> word;
    if (word == "comment" || word == "obj_info") {
      std::string key;
      if (ls >> key && key == "timestamp") {
        double t = 0.0;
        if (ls >> t) cloud.timestamp = t;
      }
    } else if (word == "format") {
      std::string kind, version;
      ls >> kind >> version;
      if (version != "1.0") fail(ErrorCode::kSchemaMismatch, "unsupported ply version");
      if (kind == "binary_little_endian") binary = true;
      else if (kind != "ascii") fail(ErrorCode::kSchemaMismatch, "unsupported ply format " + kind);
      have_format = true;
    } else if (word == "element") {
      std::string name;
      ls >> name >> count;
      if (name != "vertex" || have_vertex || !ls) fail(ErrorCode::kSchemaMismatch, "expected one vertex element");
      have_vertex = true;
    } else if (word == "property") {
      std::string type, name;
      ls >> type >> name;
      if (!have_vertex || prop >= kCloudProperties.size() || type != "float" ||
          name != kCloudProperties[prop])
        fail(ErrorCode::kSchemaMismatch, "unexpected property '" + line + "'");
      ++prop;
    } else {
      fail(ErrorCode::kSchemaMismatch, "unexpected header line '" + line + "'");
    }
  }
  if (!have_format || !have_vertex || prop != kCloudProperties.size())
    fail(ErrorCode::kSchemaMismatch, "incomplete header");
  if (count == 0) fail(ErrorCode::kEmptyCloud, "cloud has no Gaussians");

  const auto body = bytes.subspan(end + end_marker.size());
  cloud.gaussians.reserve(count);
  std::array<double, 14> rec{};
  if (binary) {
    const std::uint64_t expected = static_cast<std::uint64_t>(count) * kCloudRecordBytes;
    if (body.size() < expected) fail(ErrorCode::kTruncatedPayload, "cloud payload too short");
    if (body.size() > expected) fail(ErrorCode::kTrailingData, "bytes after cloud payload");
    for (std::size_t i = 0; i < count; ++i) {
      for (std::size_t p = 0; p < rec.size(); ++p)
        rec[p] = get_f32(body.data() + i * kCloudRecordBytes + 4 * p);
      cloud.gaussians.push_back(record_to_gaussian(rec, i));
    }
  } else {
    std::istringstream in{std::string(reinterpret_cast<const char*>(body.data()), body.size())};
    for (std::size_t i = 0; i < count; ++i) {
      for (auto& v : rec) {
        float f = 0.0f;
        if (!(in >> f)) fail(ErrorCode::kTruncatedPayload, "cloud payload too short");
        v = f;
      }
      cloud.gaussians.push_back(record_to_gaussian(rec, i));
    }
    std::string rest;
    if (in >> rest) fail(ErrorCode::kTrailingData, "values after cloud payload");
  }
  return cloud;
}

GaussianCloud read_cloud(const std::filesystem::path& path) { return decode_cloud(read_bytes(path)); }

void write_cloud(const GaussianCloud& cloud, const std::filesystem::path& path, CloudEncoding encoding) {
  write_bytes(path, encode_cloud(cloud, encoding));
}

void write_png(const std::filesystem::path& path, const Image& rgb, const Image& alpha) {
  if (rgb.channels != 3) fail(ErrorCode::kBadShape, "png writer expects 3-channel color");
  if (!alpha.empty() && (alpha.width != rgb.width || alpha.height != rgb.height || alpha.channels != 1))
    fail(ErrorCode::kBadShape, "alpha shape mismatch");
  std::vector<std::uint8_t> pixels(rgb.pixel_count() * 4);
  for (std::size_t i = 0; i < rgb.pixel_count(); ++i) {
    for (int c = 0; c < 3; ++c) pixels[4 * i + c] = to_byte(rgb.data[3 * i + c]);
    pixels[4 * i + 3] = alpha.empty() ? 255 : to_byte(alpha.data[i]);
  }
  if (!path.parent_path().empty()) std::filesystem::create_directories(path.parent_path());
  std::FILE* file = std::fopen(path.c_str(), "wb");
  if (!file) fail(ErrorCode::kIoFailure, "cannot open " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(file);
    fail(ErrorCode::kIoFailure, "png encode failed for " + path.string());
  }
  png_init_io(png, file);
  png_set_IHDR(png, info, rgb.width, rgb.height, 8, PNG_COLOR_TYPE_RGBA, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < rgb.height; ++y)
    png_write_row(png, pixels.data() + static_cast<std::size_t>(y) * rgb.width * 4);
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(file);
}

Image read_png(const std::filesystem::path& path) {
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str()))
    fail(ErrorCode::kIoFailure, "cannot read png " + path.string());
  image.format = PNG_FORMAT_RGBA;
  std::vector<std::uint8_t> buffer(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, buffer.data(), 0, nullptr)) {
    png_image_free(&image);
    fail(ErrorCode::kIoFailure, "cannot decode png " + path.string());
  }
  Image out(static_cast<int>(image.width), static_cast<int>(image.height), 4);
  for (std::size_t i = 0; i < buffer.size(); ++i) out.data[i] = buffer[i] / 255.0;
  return out;
}

Tensor images_to_tensor(std::span<const Image> images) {
  if (images.empty()) fail(ErrorCode::kBadShape, "no images to stack");
  const Image& first = images.front();
  std::vector<std::uint32_t> dims = {static_cast<std::uint32_t>(images.size()),
                                     static_cast<std::uint32_t>(first.height),
                                     static_cast<std::uint32_t>(first.width)};
  if (first.channels != 1) dims.push_back(static_cast<std::uint32_t>(first.channels));
  Tensor t(dims);
  std::size_t pos = 0;
  for (const auto& img : images) {
    if (!img.same_shape(first)) fail(ErrorCode::kBadShape, "images differ in shape");
    for (double v : img.data) t.data[pos++] = static_cast<float>(v);
  }
  return t;
}

std::vector<Image> tensor_to_images(const Tensor& t) {
  if (t.ndim() != 3 && t.ndim() != 4) fail(ErrorCode::kBadShape, "image stack must be [n,H,W] or [n,H,W,C]");
  const int n = static_cast<int>(t.dims[0]);
  const int h = static_cast<int>(t.dims[1]);
  const int w = static_cast<int>(t.dims[2]);
  const int c = t.ndim() == 4 ? static_cast<int>(t.dims[3]) : 1;
  std::vector<Image> out;
  out.reserve(n);
  std::size_t pos = 0;
  for (int i = 0; i < n; ++i) {
    Image img(w, h, c);
    for (auto& v : img.data) v = t.data[pos++];
    out.push_back(std::move(img));
  }
  return out;
}

TrackSet TrackSet::slice(std::size_t first, std::size_t count) const {
  if (first + count > frames) fail(ErrorCode::kSequenceMismatch, "track slice out of range");
  TrackSet out(points, count);
  for (std::size_t p = 0; p < points; ++p)
    for (std::size_t t = 0; t < count; ++t)
      for (std::size_t c = 0; c < 4; ++c) out.at(p, t, c) = at(p, first + t, c);
  return out;
}

Tensor tracks_to_tensor(const TrackSet& tracks) {
  Tensor t({static_cast<std::uint32_t>(tracks.points), static_cast<std::uint32_t>(tracks.frames), 4});
  for (std::size_t i = 0; i < tracks.values.size(); ++i) t.data[i] = static_cast<float>(tracks.values[i]);
  return t;
}

TrackSet tensor_to_tracks(const Tensor& t) {
  if (t.ndim() != 3 || t.dims[2] != 4) fail(ErrorCode::kBadShape, "track tensor must be [N,T,4]");
  TrackSet tracks(t.dims[0], t.dims[1]);
  for (std::size_t i = 0; i < t.data.size(); ++i) tracks.values[i] = t.data[i];
  for (std::size_t p = 0; p < tracks.points; ++p)
    for (std::size_t f = 0; f < tracks.frames; ++f) {
      const double v = tracks.at(p, f, 3);
      if (v != 0.0 && v != 1.0) fail(ErrorCode::kBadShape, "track visibility must be 0 or 1");
    }
  return tracks;
}

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::kIoFailure, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (!path.parent_path().empty()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCode::kIoFailure, "cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorCode::kIoFailure, "write failed for " + path.string());
}

std::string read_text(const std::filesystem::path& path) {
  const auto bytes = read_bytes(path);
  return {bytes.begin(), bytes.end()};
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  write_bytes(path, {reinterpret_cast<const std::uint8_t*>(text.data()), text.size()});
}

}  // namespace frag4d

#include "gazereg/containers.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "gazereg/flow_occlusion.hpp"
#include "gazereg/heatmap.hpp"

namespace gazereg {
namespace io {

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "' for reading");
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file(const std::string& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to '" + path + "'");
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

std::uint32_t get_u32(std::string_view in, std::size_t offset) {
  if (offset + 4 > in.size()) throw IoError("truncated container");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i)
    v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[offset + i])) << (8 * i);
  return v;
}

void put_f32(std::string& out, float v) { put_u32(out, std::bit_cast<std::uint32_t>(v)); }

float get_f32(std::string_view in, std::size_t offset) { return std::bit_cast<float>(get_u32(in, offset)); }

void put_plane(std::string& out, const Plane<float>& p) {
  out.reserve(out.size() + static_cast<std::size_t>(p.size()) * 4);
  for (Eigen::Index y = 0; y < p.rows(); ++y)
    for (Eigen::Index x = 0; x < p.cols(); ++x) put_f32(out, p(y, x));
}

Plane<float> get_plane(std::string_view in, std::size_t offset, int width, int height) {
  Plane<float> p(height, width);
  std::size_t off = offset;
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x, off += 4) p(y, x) = get_f32(in, off);
  return p;
}

void expect_header(std::string_view in, std::string_view magic, std::size_t expected_size, const char* what) {
  if (in.size() < magic.size() || in.substr(0, magic.size()) != magic)
    throw IoError(std::string(what) + ": bad magic");
  if (in.size() != expected_size)
    throw IoError(std::string(what) + ": expected " + std::to_string(expected_size) + " bytes, got " +
                  std::to_string(in.size()));
}

}  // namespace io

std::string encode_ghm1(const Plane<float>& values, HeatmapKind kind) {
  std::string out = "GHM1";
  io::put_u32(out, static_cast<std::uint32_t>(values.cols()));
  io::put_u32(out, static_cast<std::uint32_t>(values.rows()));
  io::put_u32(out, static_cast<std::uint32_t>(kind));
  io::put_u32(out, 0);
  io::put_plane(out, values);
  return out;
}

Plane<float> decode_ghm1(std::string_view bytes, HeatmapKind* kind) {
  if (bytes.size() < 20) throw IoError("GHM1: truncated header");
  const auto w = io::get_u32(bytes, 4);
  const auto h = io::get_u32(bytes, 8);
  const auto k = io::get_u32(bytes, 12);
  if (k > 2) throw IoError("GHM1: unknown kind " + std::to_string(k));
  io::expect_header(bytes, "GHM1", 20 + std::size_t{w} * h * 4, "GHM1");
  if (kind) *kind = static_cast<HeatmapKind>(k);
  return io::get_plane(bytes, 20, static_cast<int>(w), static_cast<int>(h));
}

void write_heatmap(const std::string& path, const Heatmap& h) {
  io::write_file(path, encode_ghm1(h.values.cast<float>(), h.kind));
}

Heatmap read_heatmap(const std::string& path) {
  Heatmap h;
  h.values = decode_ghm1(io::read_file(path), &h.kind).cast<double>();
  return h;
}

std::string encode_gim1(const ImageF& image) {
  std::string out = "GIM1";
  io::put_u32(out, static_cast<std::uint32_t>(image.width()));
  io::put_u32(out, static_cast<std::uint32_t>(image.height()));
  io::put_u32(out, static_cast<std::uint32_t>(image.channels()));
  io::put_u32(out, 0);
  for (const auto& p : image.planes) io::put_plane(out, p);
  return out;
}

ImageF decode_gim1(std::string_view bytes) {
  if (bytes.size() < 20) throw IoError("GIM1: truncated header");
  const auto w = io::get_u32(bytes, 4);
  const auto h = io::get_u32(bytes, 8);
  const auto c = io::get_u32(bytes, 12);
  io::expect_header(bytes, "GIM1", 20 + std::size_t{w} * h * c * 4, "GIM1");
  ImageF img;
  const std::size_t plane_bytes = std::size_t{w} * h * 4;
  for (std::uint32_t i = 0; i < c; ++i)
    img.planes.push_back(io::get_plane(bytes, 20 + i * plane_bytes, static_cast<int>(w), static_cast<int>(h)));
  return img;
}

void write_image(const std::string& path, const ImageF& image) { io::write_file(path, encode_gim1(image)); }

ImageF read_image(const std::string& path) { return decode_gim1(io::read_file(path)); }

std::string encode_gfl1(const FlowField& flow) {
  std::string out = "GFL1";
  io::put_u32(out, static_cast<std::uint32_t>(flow.width()));
  io::put_u32(out, static_cast<std::uint32_t>(flow.height()));
  io::put_plane(out, flow.fx.cast<float>());
  io::put_plane(out, flow.fy.cast<float>());
  return out;
}

FlowField decode_gfl1(std::string_view bytes) {
  if (bytes.size() < 12) throw IoError("GFL1: truncated header");
  const auto w = io::get_u32(bytes, 4);
  const auto h = io::get_u32(bytes, 8);
  io::expect_header(bytes, "GFL1", 12 + std::size_t{w} * h * 8, "GFL1");
  FlowField f;
  f.fx = io::get_plane(bytes, 12, static_cast<int>(w), static_cast<int>(h)).cast<double>();
  f.fy = io::get_plane(bytes, 12 + std::size_t{w} * h * 4, static_cast<int>(w), static_cast<int>(h)).cast<double>();
  return f;
}

void write_flow(const std::string& path, const FlowField& flow) { io::write_file(path, encode_gfl1(flow)); }

FlowField read_flow(const std::string& path) { return decode_gfl1(io::read_file(path)); }

}  // namespace gazereg

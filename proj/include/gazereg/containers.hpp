#ifndef GAZEREG_CONTAINERS_HPP
#define GAZEREG_CONTAINERS_HPP

#include <cstdint>
#include <string>
#include <string_view>

#include "gazereg/image.hpp"

namespace gazereg {

// Little-endian raw containers shared by heatmaps, flows, frames and
// checkpoint blobs. All planes are written row-major (y outer, x inner).
namespace io {

std::string read_file(const std::string& path);
void write_file(const std::string& path, std::string_view bytes);

void put_u32(std::string& out, std::uint32_t v);
std::uint32_t get_u32(std::string_view in, std::size_t offset);
void put_f32(std::string& out, float v);
float get_f32(std::string_view in, std::size_t offset);

void put_plane(std::string& out, const Plane<float>& p);
Plane<float> get_plane(std::string_view in, std::size_t offset, int width, int height);

/// Checks the 4-byte magic and the exact payload size.
void expect_header(std::string_view in, std::string_view magic, std::size_t expected_size, const char* what);

}  // namespace io

/// GIM1 frame container: "GIM1", u32 width, u32 height, u32 channels,
/// u32 reserved, then one f32 plane per channel.
std::string encode_gim1(const ImageF& image);
ImageF decode_gim1(std::string_view bytes);
void write_image(const std::string& path, const ImageF& image);
ImageF read_image(const std::string& path);

}  // namespace gazereg

#endif  // GAZEREG_CONTAINERS_HPP

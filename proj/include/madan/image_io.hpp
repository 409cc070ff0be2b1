#pragma once

#include "madan/tensor.hpp"

#include <cstdint>
#include <string>

namespace madan::io {

// Binary PPM (P6) / PGM (P5) with maxval 255. Images are single samples in
// CHW float layout, values in [-1, 1], quantized as u8 = round((v+1)/2*255);
// labels are raw class ids. Serialization is bit-exact: serialize(parse(b)) == b.

std::string ppm_bytes(const TensorF& img);  // img: 3 x H x W
TensorF parse_ppm(const std::string& bytes, const std::string& context);
std::string pgm_bytes(const LabelMap& m);
LabelMap parse_pgm(const std::string& bytes, const std::string& context);

void write_ppm(const std::string& path, const TensorF& img);
TensorF read_ppm(const std::string& path);
void write_pgm(const std::string& path, const LabelMap& m);
LabelMap read_pgm(const std::string& path);

// Whole-file helpers. atomic_write writes to a temp file in the same
// directory and renames it into place.
void atomic_write_file(const std::string& path, const std::string& bytes);
std::string read_file(const std::string& path);
std::uint64_t fnv_file(const std::string& path);

float u8_to_unit(std::uint8_t b);           // [0,255] -> [-1,1]
std::uint8_t unit_to_u8(float v);           // [-1,1] -> [0,255], clamped

} // namespace madan::io

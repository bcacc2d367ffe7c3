#pragma once

// Binary tensor format, little-endian throughout:
//   "DITI" | u32 version | u32 rank | u32 dim[rank] | f32 data[prod(dim)]

#include <cstdint>
#include <filesystem>
#include <iosfwd>

#include "diti/tensor.hpp"

namespace diti {

inline constexpr std::uint32_t kTensorFormatVersion = 1;

void write_tensor(std::ostream& out, const Tensor& t);
Tensor read_tensor(std::istream& in);

void save_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor load_tensor(const std::filesystem::path& path);

}  // namespace diti

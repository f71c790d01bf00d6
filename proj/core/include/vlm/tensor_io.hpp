#pragma once

#include <filesystem>
#include <iosfwd>

#include "vlm/tensor.hpp"

namespace vlm {

// On-disk layout:
//   "VLMF1\n"
//   "dims d0 d1 ... dn\n"
//   little-endian float64 payload, row-major
void write_tensor(std::ostream& out, const Tensor& t);
Tensor read_tensor(std::istream& in);

void save_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor load_tensor(const std::filesystem::path& path);

}  // namespace vlm

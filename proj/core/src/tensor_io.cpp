#include "vlm/tensor_io.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>

#include "vlm/error.hpp"

namespace vlm {

namespace {

constexpr std::string_view kMagic = "VLMF1\n";

std::uint64_t to_le(std::uint64_t v) {
  if constexpr (std::endian::native == std::endian::big) {
    std::uint64_t r = 0;
    for (int i = 0; i < 8; ++i) r |= ((v >> (8 * i)) & 0xffu) << (8 * (7 - i));
    return r;
  }
  return v;
}

}  // namespace

void write_tensor(std::ostream& out, const Tensor& t) {
  out.write(kMagic.data(), static_cast<std::streamsize>(kMagic.size()));
  std::string header = "dims";
  for (auto d : t.shape()) header += " " + std::to_string(d);
  header += "\n";
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  for (double v : t.data()) {
    const std::uint64_t bits = to_le(std::bit_cast<std::uint64_t>(v));
    char buf[8];
    std::memcpy(buf, &bits, 8);
    out.write(buf, 8);
  }
  if (!out) throw Error(ErrorCode::kIo, "failed to write tensor payload");
}

Tensor read_tensor(std::istream& in) {
  std::string magic(kMagic.size(), '\0');
  in.read(magic.data(), static_cast<std::streamsize>(magic.size()));
  if (!in || magic != kMagic) throw Error(ErrorCode::kIntegrity, "bad tensor magic");
  std::string header;
  if (!std::getline(in, header)) throw Error(ErrorCode::kIntegrity, "missing dims header");
  std::istringstream hs(header);
  std::string word;
  hs >> word;
  if (word != "dims") throw Error(ErrorCode::kIntegrity, "malformed dims header: " + header);
  Shape shape;
  std::size_t d = 0;
  while (hs >> d) shape.push_back(d);
  if (!hs.eof() || shape.empty()) throw Error(ErrorCode::kIntegrity, "malformed dims header: " + header);
  for (auto v : shape)
    if (v == 0) throw Error(ErrorCode::kIntegrity, "zero dimension in header: " + header);
  std::vector<double> values(numel_of(shape));
  for (auto& v : values) {
    char buf[8];
    in.read(buf, 8);
    if (!in) throw Error(ErrorCode::kIntegrity, "truncated tensor payload");
    std::uint64_t bits = 0;
    std::memcpy(&bits, buf, 8);
    v = std::bit_cast<double>(to_le(bits));
  }
  return Tensor::from(std::move(shape), std::move(values));
}

void save_tensor(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::kIo, "cannot open " + path.string() + " for writing");
  write_tensor(out, t);
}

Tensor load_tensor(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIntegrity, "cannot open tensor file " + path.string());
  Tensor t = read_tensor(in);
  if (in.peek() != std::char_traits<char>::eof()) {
    throw Error(ErrorCode::kIntegrity, "trailing bytes after tensor payload in " + path.string());
  }
  return t;
}

}  // namespace vlm

#include "vlm/image.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <string>

#include "vlm/error.hpp"

namespace vlm::vision {

ImageGrid ImageGrid::filled(std::size_t height, std::size_t width, double r, double g, double b) {
  ImageGrid img{height, width, std::vector<double>(height * width * kChannels)};
  for (std::size_t i = 0; i < height * width; ++i) {
    img.pixels[i * 3 + 0] = r;
    img.pixels[i * 3 + 1] = g;
    img.pixels[i * 3 + 2] = b;
  }
  return img;
}

void validate(const ImageGrid& img) {
  if (img.empty()) throw Error(ErrorCode::kInput, "degenerate image with zero pixels");
  if (img.pixels.size() != img.height * img.width * ImageGrid::kChannels) {
    throw Error(ErrorCode::kInput, "pixel buffer of " + std::to_string(img.pixels.size()) + " values for a " +
                                       std::to_string(img.height) + "x" + std::to_string(img.width) + " image");
  }
}

namespace {

struct Tap {
  std::size_t lo, hi;
  double w_hi;
};

std::vector<Tap> axis_taps(std::size_t src, std::size_t dst) {
  std::vector<Tap> taps(dst);
  const double ratio = static_cast<double>(src) / static_cast<double>(dst);
  for (std::size_t i = 0; i < dst; ++i) {
    double pos = (static_cast<double>(i) + 0.5) * ratio - 0.5;
    pos = std::clamp(pos, 0.0, static_cast<double>(src - 1));
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, src - 1);
    taps[i] = {lo, hi, pos - static_cast<double>(lo)};
  }
  return taps;
}

}  // namespace

ImageGrid resize_bilinear(const ImageGrid& img, std::size_t height, std::size_t width) {
  validate(img);
  if (height == 0 || width == 0) throw Error(ErrorCode::kInput, "resize target has zero pixels");
  if (height == img.height && width == img.width) return img;
  const auto ty = axis_taps(img.height, height);
  const auto tx = axis_taps(img.width, width);
  ImageGrid out{height, width, std::vector<double>(height * width * ImageGrid::kChannels)};
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      for (std::size_t c = 0; c < ImageGrid::kChannels; ++c) {
        const double top = img.at(ty[y].lo, tx[x].lo, c) * (1.0 - tx[x].w_hi) + img.at(ty[y].lo, tx[x].hi, c) * tx[x].w_hi;
        const double bot = img.at(ty[y].hi, tx[x].lo, c) * (1.0 - tx[x].w_hi) + img.at(ty[y].hi, tx[x].hi, c) * tx[x].w_hi;
        out.at(y, x, c) = top * (1.0 - ty[y].w_hi) + bot * ty[y].w_hi;
      }
    }
  }
  return out;
}

ImageGrid crop(const ImageGrid& img, std::size_t top, std::size_t left, std::size_t height, std::size_t width) {
  validate(img);
  if (height == 0 || width == 0 || top + height > img.height || left + width > img.width) {
    throw Error(ErrorCode::kInput, "crop window outside the image");
  }
  ImageGrid out{height, width, std::vector<double>(height * width * ImageGrid::kChannels)};
  for (std::size_t y = 0; y < height; ++y)
    for (std::size_t x = 0; x < width; ++x)
      for (std::size_t c = 0; c < ImageGrid::kChannels; ++c) out.at(y, x, c) = img.at(top + y, left + x, c);
  return out;
}

namespace {

// Reads the next whitespace-delimited header token, skipping '#' comments.
std::string next_token(std::istream& in) {
  std::string tok;
  char ch = 0;
  while (in.get(ch)) {
    if (ch == '#') {
      std::string discard;
      std::getline(in, discard);
      continue;
    }
    if (std::isspace(static_cast<unsigned char>(ch))) {
      if (!tok.empty()) break;
      continue;
    }
    tok.push_back(ch);
  }
  return tok;
}

}  // namespace

ImageGrid read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot open image " + path.string());
  if (next_token(in) != "P6") throw Error(ErrorCode::kInput, path.string() + " is not a binary PPM (P6)");
  std::size_t width = 0, height = 0, maxval = 0;
  try {
    width = std::stoul(next_token(in));
    height = std::stoul(next_token(in));
    maxval = std::stoul(next_token(in));
  } catch (const std::exception&) {
    throw Error(ErrorCode::kInput, "malformed PPM header in " + path.string());
  }
  if (maxval != 255) throw Error(ErrorCode::kInput, "only maxval 255 PPMs are supported: " + path.string());
  ImageGrid img{height, width, std::vector<double>(height * width * ImageGrid::kChannels)};
  validate(img);
  std::vector<unsigned char> raw(img.pixels.size());
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (!in) throw Error(ErrorCode::kInput, "truncated PPM payload in " + path.string());
  for (std::size_t i = 0; i < raw.size(); ++i) img.pixels[i] = raw[i] / 255.0;
  return img;
}

void write_ppm(const std::filesystem::path& path, const ImageGrid& img) {
  validate(img);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::kIo, "cannot open " + path.string() + " for writing");
  out << "P6\n" << img.width << " " << img.height << "\n255\n";
  std::vector<unsigned char> raw(img.pixels.size());
  for (std::size_t i = 0; i < raw.size(); ++i) {
    raw[i] = static_cast<unsigned char>(std::lround(std::clamp(img.pixels[i], 0.0, 1.0) * 255.0));
  }
  out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (!out) throw Error(ErrorCode::kIo, "failed writing " + path.string());
}

}  // namespace vlm::vision

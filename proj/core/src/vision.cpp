#include "vlm/vision.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "vlm/error.hpp"

namespace vlm::vision {

PatchMode parse_patch_mode(std::string_view s) {
  if (s == "square") return PatchMode::kSquare;
  if (s == "aspect_preserving") return PatchMode::kAspectPreserving;
  throw Error(ErrorCode::kConfig, "unknown patch mode '" + std::string(s) + "'");
}

std::string_view to_string(PatchMode mode) {
  return mode == PatchMode::kSquare ? "square" : "aspect_preserving";
}

void VisionConfig::validate() const {
  if (patch_size == 0 || max_side == 0 || max_side % patch_size != 0) {
    throw Error(ErrorCode::kConfig, "max_side " + std::to_string(max_side) + " must be a positive multiple of patch_size " +
                                        std::to_string(patch_size));
  }
  if (n_heads == 0 || d_vision % n_heads != 0) {
    throw Error(ErrorCode::kConfig, "d_vision " + std::to_string(d_vision) + " not divisible by n_heads " +
                                        std::to_string(n_heads));
  }
  if (base_rows == 0 || base_cols == 0) throw Error(ErrorCode::kConfig, "positional grid must be non-empty");
}

std::pair<std::size_t, std::size_t> patch_grid(std::size_t height, std::size_t width, const VisionConfig& cfg,
                                               PatchMode mode) {
  if (height == 0 || width == 0) throw Error(ErrorCode::kInput, "degenerate image with zero pixels");
  const std::size_t p = cfg.patch_size;
  if (mode == PatchMode::kSquare) return {cfg.max_side / p, cfg.max_side / p};
  // Integer arithmetic: side * target_long / (long * p), floored.
  const std::size_t longer = std::max(height, width);
  const std::size_t target_long = std::min(longer, cfg.max_side);
  const std::size_t rows = std::max<std::size_t>(1, (height * target_long) / (longer * p));
  const std::size_t cols = std::max<std::size_t>(1, (width * target_long) / (longer * p));
  return {rows, cols};
}

PatchSequence patchify(const ImageGrid& image, const VisionConfig& cfg, PatchMode mode) {
  validate(image);
  cfg.validate();
  const auto [rows, cols] = patch_grid(image.height, image.width, cfg, mode);
  const std::size_t p = cfg.patch_size;
  const ImageGrid resized = resize_bilinear(image, rows * p, cols * p);

  const std::size_t n = rows * cols, dim = cfg.patch_dim();
  std::vector<double> data(n * dim);
  PatchSequence seq;
  seq.rows = rows;
  seq.cols = cols;
  seq.valid_mask.assign(n, 1);
  seq.coords.reserve(n);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      double* out = data.data() + (r * cols + c) * dim;
      for (std::size_t y = 0; y < p; ++y)
        for (std::size_t x = 0; x < p; ++x)
          for (std::size_t ch = 0; ch < ImageGrid::kChannels; ++ch)
            *out++ = resized.at(r * p + y, c * p + x, ch);
      seq.coords.emplace_back(r, c);
    }
  }
  seq.patches = Tensor::from({n, dim}, std::move(data));
  return seq;
}

PatchSequence with_padding(const PatchSequence& seq, std::size_t capacity, std::span<const std::size_t> padding_slots) {
  if (capacity != seq.n_patches() + padding_slots.size()) {
    throw Error(ErrorCode::kShape, "capacity " + std::to_string(capacity) + " != patches " +
                                       std::to_string(seq.n_patches()) + " + padding " +
                                       std::to_string(padding_slots.size()));
  }
  std::vector<std::uint8_t> valid(capacity, 1);
  for (auto s : padding_slots) {
    if (s >= capacity || !valid[s]) throw Error(ErrorCode::kInput, "bad padding slot " + std::to_string(s));
    valid[s] = 0;
  }
  const std::size_t dim = seq.patches.dim(1);
  std::vector<double> data(capacity * dim, 0.0);
  auto src = seq.patches.data();
  std::vector<std::size_t> sources;
  for (std::size_t s = 0; s < seq.capacity(); ++s)
    if (seq.valid_mask[s]) sources.push_back(s);
  std::size_t next = 0;
  for (std::size_t slot = 0; slot < capacity; ++slot) {
    if (!valid[slot]) continue;
    std::copy_n(src.begin() + sources[next++] * dim, dim, data.begin() + slot * dim);
  }
  PatchSequence out;
  out.patches = Tensor::from({capacity, dim}, std::move(data));
  out.rows = seq.rows;
  out.cols = seq.cols;
  out.coords = seq.coords;
  out.valid_mask = std::move(valid);
  return out;
}

PosEmbedTable interpolate_pos_embed(const PosEmbedTable& src, std::size_t dst_rows, std::size_t dst_cols) {
  if (dst_rows < 1 || dst_cols < 1) throw Error(ErrorCode::kInput, "interpolation target grid must be at least 1x1");
  if (src.table.dim(0) != src.grid_rows * src.grid_cols) {
    throw Error(ErrorCode::kShape, "positional table has " + std::to_string(src.table.dim(0)) + " rows for a " +
                                       std::to_string(src.grid_rows) + "x" + std::to_string(src.grid_cols) + " grid");
  }
  if (dst_rows == src.grid_rows && dst_cols == src.grid_cols) return src;

  // Align-corners mapping; a one-cell target samples the source centre.
  auto coord = [](std::size_t i, std::size_t dst, std::size_t src_n) {
    if (src_n == 1) return 0.0;
    if (dst == 1) return 0.5 * static_cast<double>(src_n - 1);
    return static_cast<double>(i) * static_cast<double>(src_n - 1) / static_cast<double>(dst - 1);
  };
  auto split = [](double pos, std::size_t n) {
    auto lo = static_cast<std::size_t>(std::floor(pos));
    lo = std::min(lo, n - 1);
    const std::size_t hi = std::min(lo + 1, n - 1);
    return std::tuple{lo, hi, pos - static_cast<double>(lo)};
  };

  std::vector<std::vector<std::pair<std::size_t, double>>> taps(dst_rows * dst_cols);
  for (std::size_t r = 0; r < dst_rows; ++r) {
    const auto [r0, r1, fr] = split(coord(r, dst_rows, src.grid_rows), src.grid_rows);
    for (std::size_t c = 0; c < dst_cols; ++c) {
      const auto [c0, c1, fc] = split(coord(c, dst_cols, src.grid_cols), src.grid_cols);
      auto& t = taps[r * dst_cols + c];
      auto push = [&](std::size_t rr, std::size_t cc, double w) {
        if (w != 0.0) t.emplace_back(rr * src.grid_cols + cc, w);
      };
      push(r0, c0, (1.0 - fr) * (1.0 - fc));
      push(r0, c1, (1.0 - fr) * fc);
      push(r1, c0, fr * (1.0 - fc));
      push(r1, c1, fr * fc);
    }
  }
  return {dst_rows, dst_cols, combine_rows(src.table, taps)};
}

VisionEncoder::VisionEncoder(const VisionConfig& cfg, Rng& rng) : cfg_(cfg) {
  cfg_.validate();
  patch_embed = Linear("vision.patch_embed", cfg.patch_dim(), cfg.d_vision, true, false, rng,
                       1.0 / std::sqrt(static_cast<double>(cfg.patch_dim())));
  pos_table = {"vision.pos_embed", Tensor::randn({cfg.base_rows * cfg.base_cols, cfg.d_vision}, 0.02, rng, true), true};
  for (std::size_t i = 0; i < cfg.n_layers; ++i) {
    blocks.emplace_back("vision.layers." + std::to_string(i), cfg.d_vision, cfg.n_heads, cfg.mlp_ratio, rng);
  }
}

Tensor VisionEncoder::encode(const PatchSequence& seq, const PosEmbedTable& pos, const ForwardContext& ctx) const {
  if (pos.grid_rows != seq.rows || pos.grid_cols != seq.cols) {
    throw Error(ErrorCode::kShape, "positional grid " + std::to_string(pos.grid_rows) + "x" +
                                       std::to_string(pos.grid_cols) + " does not match patch grid " +
                                       std::to_string(seq.rows) + "x" + std::to_string(seq.cols));
  }
  if (seq.n_patches() != seq.rows * seq.cols) {
    throw Error(ErrorCode::kShape, "patch sequence holds " + std::to_string(seq.n_patches()) + " patches for a " +
                                       std::to_string(seq.rows) + "x" + std::to_string(seq.cols) + " grid");
  }
  const std::size_t cap = seq.capacity();
  std::vector<std::vector<std::pair<std::size_t, double>>> pos_taps(cap);
  std::size_t next = 0;
  for (std::size_t slot = 0; slot < cap; ++slot) {
    if (!seq.valid_mask[slot]) continue;
    const auto [r, c] = seq.coords[next++];
    pos_taps[slot].emplace_back(r * seq.cols + c, 1.0);
  }
  Tensor x = add(patch_embed.forward(seq.patches, ctx), combine_rows(pos.table, pos_taps));

  Mask keys;
  keys.shape = {cap, cap};
  keys.bits.resize(cap * cap);
  for (std::size_t i = 0; i < cap; ++i)
    for (std::size_t j = 0; j < cap; ++j) keys.bits[i * cap + j] = seq.valid_mask[j];
  for (const auto& block : blocks) x = block.forward(x, &keys, EmptyRowPolicy::kError, ctx);

  bool padded = std::any_of(seq.valid_mask.begin(), seq.valid_mask.end(), [](auto v) { return v == 0; });
  if (!padded) return x;
  std::vector<double> keep(cap * cfg_.d_vision);
  for (std::size_t slot = 0; slot < cap; ++slot)
    std::fill_n(keep.begin() + slot * cfg_.d_vision, cfg_.d_vision, seq.valid_mask[slot] ? 1.0 : 0.0);
  return mul(x, Tensor::from({cap, cfg_.d_vision}, std::move(keep)));
}

Tensor VisionEncoder::encode_image(const ImageGrid& image, PatchMode mode, const ForwardContext& ctx) const {
  PatchSequence seq = patchify(image, cfg_, mode);
  PosEmbedTable pos = interpolate_pos_embed(base_pos(), seq.rows, seq.cols);
  return encode(seq, pos, ctx);
}

void VisionEncoder::visit(ModuleVisitor& v) {
  patch_embed.visit(v);
  v.param(pos_table);
  for (auto& b : blocks) b.visit(v);
}

double VisionEncoder::flops(std::size_t n_patches) const {
  double f = patch_embed.flops(n_patches);
  for (const auto& b : blocks) f += b.flops(n_patches);
  return f;
}

}  // namespace vlm::vision

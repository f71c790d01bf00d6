#pragma once

#include <cstdint>
#include <span>
#include <string_view>
#include <utility>
#include <vector>

#include "vlm/image.hpp"
#include "vlm/nn.hpp"

namespace vlm::vision {

enum class PatchMode { kSquare, kAspectPreserving };

PatchMode parse_patch_mode(std::string_view s);
std::string_view to_string(PatchMode mode);

struct VisionConfig {
  std::size_t patch_size = 14;
  std::size_t d_vision = 32;
  std::size_t n_layers = 2;
  std::size_t n_heads = 2;
  std::size_t base_rows = 27;  // positional table grid
  std::size_t base_cols = 27;
  std::size_t max_side = 378;
  std::size_t mlp_ratio = 4;

  /// Throws a config error unless d_vision % n_heads == 0 and max_side is a
  /// positive multiple of patch_size.
  void validate() const;
  std::size_t square_grid() const { return max_side / patch_size; }
  std::size_t patch_dim() const { return patch_size * patch_size * ImageGrid::kChannels; }
};

/// Patches laid out in a fixed-capacity slot buffer. Slots with
/// valid_mask == 0 are padding; coords lists (row, col) for valid slots in
/// slot order, which is row-major.
struct PatchSequence {
  Tensor patches;  // [capacity, patch_size^2 * 3]
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::pair<std::size_t, std::size_t>> coords;
  std::vector<std::uint8_t> valid_mask;

  std::size_t capacity() const { return valid_mask.size(); }
  std::size_t n_patches() const { return coords.size(); }
};

struct PosEmbedTable {
  std::size_t grid_rows = 0;
  std::size_t grid_cols = 0;
  Tensor table;  // [grid_rows * grid_cols, d_vision]
};

/// Grid (rows, cols) patchify would produce for an image of this size.
std::pair<std::size_t, std::size_t> patch_grid(std::size_t height, std::size_t width, const VisionConfig& cfg,
                                               PatchMode mode);

/// Square mode resamples to (max_side, max_side). Aspect-preserving mode
/// scales the longer side to min(longer, max_side) and floors both sides to
/// whole patches (at least one per side).
PatchSequence patchify(const ImageGrid& image, const VisionConfig& cfg, PatchMode mode);

/// Re-lays a sequence into `capacity` slots, leaving `padding_slots` empty.
PatchSequence with_padding(const PatchSequence& seq, std::size_t capacity, std::span<const std::size_t> padding_slots);

/// Align-corners bilinear resampling of the embedding grid, each channel
/// independently. Differentiable with respect to src.table.
PosEmbedTable interpolate_pos_embed(const PosEmbedTable& src, std::size_t dst_rows, std::size_t dst_cols);

class VisionEncoder : public Module {
 public:
  VisionEncoder() = default;
  VisionEncoder(const VisionConfig& cfg, Rng& rng);

  const VisionConfig& config() const { return cfg_; }
  PosEmbedTable base_pos() const { return {cfg_.base_rows, cfg_.base_cols, pos_table.value}; }

  /// Patch embedding + positions + pre-norm blocks, with attention limited
  /// to valid slots. Output is [capacity, d_vision]; padding rows are zero.
  Tensor encode(const PatchSequence& seq, const PosEmbedTable& pos, const ForwardContext& ctx = {}) const;
  /// patchify + positional interpolation + encode. Returns valid rows only.
  Tensor encode_image(const ImageGrid& image, PatchMode mode, const ForwardContext& ctx = {}) const;

  void visit(ModuleVisitor& v) override;
  double flops(std::size_t n_patches) const;

  Linear patch_embed;
  Parameter pos_table;
  std::vector<TransformerBlock> blocks;

 private:
  VisionConfig cfg_;
};

/// vit_encode as a free function over an encoder's weights.
inline Tensor vit_encode(const VisionEncoder& encoder, const PatchSequence& seq, const PosEmbedTable& pos) {
  return encoder.encode(seq, pos);
}

}  // namespace vlm::vision

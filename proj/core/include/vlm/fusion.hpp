#pragma once

#include <map>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

#include "vlm/connector.hpp"
#include "vlm/lm.hpp"
#include "vlm/vision.hpp"

namespace vlm {

enum class Architecture { kFullyAutoregressive, kCrossAttention };

Architecture parse_architecture(std::string_view s);
std::string_view to_string(Architecture arch);

struct TextSegment {
  std::string text;
  /// Byte ranges [begin, end) of text that are answer tokens (loss-masked in).
  std::vector<std::pair<std::size_t, std::size_t>> answer_spans;
};

struct ImageSegment {
  std::size_t image_index = 0;
};

struct SpecialSegment {
  int token = lm::tokens::kEndOfUtterance;
  bool answer = false;
};

using Segment = std::variant<TextSegment, ImageSegment, SpecialSegment>;

/// An interleaved document. Image segments refer into `images` by index.
struct Document {
  std::vector<Segment> segments;
  std::vector<std::shared_ptr<const vision::ImageGrid>> images;

  std::size_t n_image_refs() const;
};

struct VisualSpan {
  std::size_t start = 0;
  std::size_t length = 0;
  std::size_t image_index = 0;
};

struct MultimodalSequence {
  std::vector<int> token_ids;
  std::vector<VisualSpan> visual_spans;
  std::vector<std::uint8_t> attn_mask;
  std::vector<std::uint8_t> loss_mask;

  std::size_t size() const { return token_ids.size(); }
  /// Throws a shape error if masks, spans and placeholder runs disagree.
  void validate() const;
};

/// Tokenizes doc in order. Each image reference expands to tokens_per_image
/// placeholders (fully autoregressive) or exactly one (cross-attention).
MultimodalSequence build_sequence(const Document& doc, Architecture arch, std::size_t tokens_per_image);
/// Per-reference placeholder counts, in order of appearance (fully autoregressive).
MultimodalSequence build_sequence(const Document& doc, Architecture arch, std::span<const std::size_t> per_image);

struct VLMConfig {
  Architecture architecture = Architecture::kFullyAutoregressive;
  vision::VisionConfig vision;
  connector::ConnectorConfig connector;
  lm::LMConfig lm;
  vision::PatchMode patch_mode = vision::PatchMode::kAspectPreserving;
  double neftune_alpha = 0.0;

  /// Fills inherited fields (connector widths and heads) and validates.
  VLMConfig resolved() const;
  void validate() const;
};

class VLMModel : public Module {
 public:
  VLMModel() = default;
  /// Each component draws from its own stream derived from seed, so the two
  /// architectures built from one seed share vision and LM base weights.
  VLMModel(const VLMConfig& cfg, std::uint64_t seed);

  const VLMConfig& config() const { return cfg_; }
  Architecture architecture() const { return cfg_.architecture; }

  /// Placeholder count an image expands to in this model's sequences.
  std::size_t tokens_per_image(const vision::ImageGrid& image) const;
  /// Same for the reference square resolution.
  std::size_t reference_tokens_per_image() const;
  MultimodalSequence build(const Document& doc) const;

  /// Vision hidden states for an image: [n_patches, d_vision].
  Tensor encode_image(const vision::ImageGrid& image, const ForwardContext& ctx = {}) const;

  /// Logits [T, vocab].
  Tensor forward(const MultimodalSequence& seq, std::span<const std::shared_ptr<const vision::ImageGrid>> images,
                 const ForwardContext& ctx = {}) const;
  /// Mean next-token NLL over positions whose target is loss-masked in.
  Tensor loss(const MultimodalSequence& seq, std::span<const std::shared_ptr<const vision::ImageGrid>> images,
              const ForwardContext& ctx = {}) const;

  void visit(ModuleVisitor& v) override;

  vision::VisionEncoder vision;
  connector::Connector connector;
  lm::LanguageModel lm;
  std::optional<Parameter> image_placeholder;  // [1, d_model], cross-attention only

 private:
  VLMConfig cfg_;
};

/// Next-token loss given logits: target at t is token t + 1, counted when the
/// target position is loss-masked in.
Tensor next_token_loss(const Tensor& logits, const MultimodalSequence& seq);

/// Greedy continuation of seq (no grad). Stop ids are not included.
std::vector<int> generate(const VLMModel& model, const MultimodalSequence& prompt,
                          std::span<const std::shared_ptr<const vision::ImageGrid>> images, std::size_t max_new,
                          std::span<const int> stop_ids);

struct ParamCounts {
  std::size_t total = 0;
  std::size_t trainable = 0;
  std::map<std::string, std::pair<std::size_t, std::size_t>> by_component;  // name -> (total, trainable)
};

/// Component of a parameter name: vision, connector, lm, cross_attn, fusion or adapters.
std::string component_of(std::string_view param_name);

/// Counts using each parameter's current trainable flag.
ParamCounts count_params(Module& model);

/// Analytic forward FLOPs (multiply-accumulate = 2 FLOPs, attention scores and
/// weighted sums included, norms/activations/embedding lookups ignored) for
/// seq_len text tokens plus n_images images at the reference resolution.
double estimate_flops(const VLMModel& model, std::size_t seq_len, std::size_t n_images);

}  // namespace vlm

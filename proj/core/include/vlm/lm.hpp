#pragma once

#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "vlm/nn.hpp"

namespace vlm::lm {

/// Byte-level vocabulary: ids 0..255 are raw bytes, followed by specials.
namespace tokens {
inline constexpr int kPad = 256;
inline constexpr int kEos = 257;
inline constexpr int kImage = 258;
inline constexpr int kEndOfUtterance = 259;
inline constexpr int kVocabSize = 260;
}  // namespace tokens

std::vector<int> tokenize(std::string_view text);
/// Bytes are emitted verbatim; specials render as <pad>, <eos>, <image>, <end_of_utterance>.
std::string detokenize(std::span<const int> ids);
std::optional<int> special_from_name(std::string_view name);
std::string_view special_name(int id);

struct LMConfig {
  std::size_t vocab_size = tokens::kVocabSize;
  std::size_t d_model = 32;
  std::size_t n_layers = 2;
  std::size_t n_heads = 2;
  std::size_t max_seq = 256;
  std::size_t mlp_ratio = 4;
  std::optional<std::size_t> cross_attn_every;

  void validate() const;
  /// Whether a gated cross-attention block precedes self-attention layer i.
  bool has_cross_block(std::size_t layer) const {
    return cross_attn_every && (layer + 1) % *cross_attn_every == 0;
  }
  std::size_t n_cross_blocks() const;
};

/// Image hidden states visible to the cross-attention blocks. State i belongs
/// to image state_image[i]; image j becomes visible to queries at positions
/// >= available_from[j] (its placeholder position).
struct ImageContext {
  Tensor states;  // [n_states, d_model]
  std::vector<std::size_t> state_image;
  std::vector<std::size_t> available_from;

  std::size_t n_states() const { return state_image.size(); }
};

struct GatedCrossAttention {
  GatedCrossAttention() = default;
  GatedCrossAttention(const std::string& name, std::size_t d_model, std::size_t n_heads, Rng& rng);

  /// x + tanh(gate) * attn(ln_text(x), ln_image(states)).
  Tensor forward(const Tensor& x, const ImageContext& images, const ForwardContext& ctx = {}) const;
  void visit(ModuleVisitor& v);
  double flops(std::size_t n_queries, std::size_t n_states) const { return attn.flops(n_queries, n_states); }

  LayerNorm ln_text;
  LayerNorm ln_image;
  MultiHeadAttention attn;
  Parameter gate;  // [1], initialized to zero
};

/// Closed form: 4 d^2 projections + 1 gate + two layer norms.
std::size_t cross_block_param_count(std::size_t d_model);

class LanguageModel : public Module {
 public:
  LanguageModel() = default;
  /// Base weights are drawn from rng first; cross-attention blocks (named
  /// "<cross_prefix>.<layer>") are drawn afterwards, so a model with and
  /// without cross-attention share identical base weights for a given seed.
  LanguageModel(const LMConfig& cfg, Rng& rng, const std::string& cross_prefix = "xattn");

  const LMConfig& config() const { return cfg_; }

  /// Token-embedding lookup without positions: [T, d_model].
  Tensor embed(std::span<const int> ids) const;
  /// Positions + causal blocks + final norm + head. attn_mask, when given,
  /// hides keys (padding) in addition to the causal mask.
  Tensor decode(const Tensor& embeddings, const ImageContext* images = nullptr,
                std::span<const std::uint8_t> attn_mask = {}, const ForwardContext& ctx = {}) const;
  Tensor forward_ids(std::span<const int> ids, const ForwardContext& ctx = {}) const;

  void visit(ModuleVisitor& v) override;
  /// Forward FLOPs for T positions; n_image_states feeds the cross blocks.
  double flops(std::size_t seq_len, std::size_t n_image_states = 0) const;

  Parameter tok_embed;  // [vocab, d]
  Parameter pos_embed;  // [max_seq, d]
  std::vector<TransformerBlock> blocks;
  std::vector<std::optional<GatedCrossAttention>> cross;  // one slot per layer
  LayerNorm final_norm;
  Linear head;  // [d, vocab], no bias

 private:
  LMConfig cfg_;
};

/// Returns next-token logits for the sequence ids (prompt + generated so far).
using NextTokenLogits = std::function<std::vector<double>(std::span<const int> ids)>;

/// Appends argmax tokens (ties go to the lowest id) until a stop id appears or
/// max_new tokens are produced. The stop id itself is not returned.
/// prompt.size() + max_new > max_seq is a capacity error.
std::vector<int> generate_greedy(const NextTokenLogits& next, std::span<const int> prompt, std::size_t max_new,
                                 std::span<const int> stop_ids, std::size_t max_seq);

std::size_t argmax_lowest(std::span<const double> logits);

}  // namespace vlm::lm

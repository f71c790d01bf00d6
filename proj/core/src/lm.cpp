#include "vlm/lm.hpp"

#include <algorithm>
#include <cmath>

#include "vlm/error.hpp"

namespace vlm::lm {

std::vector<int> tokenize(std::string_view text) {
  std::vector<int> ids;
  ids.reserve(text.size());
  for (unsigned char c : text) ids.push_back(c);
  return ids;
}

std::string_view special_name(int id) {
  switch (id) {
    case tokens::kPad: return "pad";
    case tokens::kEos: return "eos";
    case tokens::kImage: return "image";
    case tokens::kEndOfUtterance: return "end_of_utterance";
    default: return "";
  }
}

std::optional<int> special_from_name(std::string_view name) {
  for (int id = tokens::kPad; id < tokens::kVocabSize; ++id) {
    if (special_name(id) == name) return id;
  }
  return std::nullopt;
}

std::string detokenize(std::span<const int> ids) {
  std::string out;
  for (int id : ids) {
    if (id >= 0 && id < 256) {
      out.push_back(static_cast<char>(id));
    } else {
      out += "<";
      out += special_name(id);
      out += ">";
    }
  }
  return out;
}

void LMConfig::validate() const {
  if (vocab_size == 0 || d_model == 0 || max_seq == 0) throw Error(ErrorCode::kConfig, "LM sizes must be positive");
  if (n_heads == 0 || d_model % n_heads != 0) {
    throw Error(ErrorCode::kConfig, "d_model " + std::to_string(d_model) + " not divisible by n_heads " +
                                        std::to_string(n_heads));
  }
  if (cross_attn_every && (*cross_attn_every < 1 || *cross_attn_every > n_layers)) {
    throw Error(ErrorCode::kConfig, "cross_attn_every must lie in [1, n_layers], got " +
                                        std::to_string(*cross_attn_every));
  }
}

std::size_t LMConfig::n_cross_blocks() const {
  std::size_t n = 0;
  for (std::size_t i = 0; i < n_layers; ++i) n += has_cross_block(i);
  return n;
}

GatedCrossAttention::GatedCrossAttention(const std::string& name, std::size_t d_model, std::size_t n_heads, Rng& rng)
    : ln_text(name + ".ln_text", d_model),
      ln_image(name + ".ln_image", d_model),
      attn(name + ".attn", d_model, n_heads, rng),
      gate{name + ".gate", Tensor::zeros({1}, true), true} {}

Tensor GatedCrossAttention::forward(const Tensor& x, const ImageContext& images, const ForwardContext& ctx) const {
  const std::size_t t = x.dim(0), n = images.n_states();
  if (n == 0) return x;
  Mask visible;
  visible.shape = {t, n};
  visible.bits.resize(t * n);
  for (std::size_t q = 0; q < t; ++q)
    for (std::size_t s = 0; s < n; ++s) visible.bits[q * n + s] = images.available_from[images.state_image[s]] <= q;
  Tensor out = attn.forward(ln_text.forward(x), ln_image.forward(images.states), &visible, EmptyRowPolicy::kZero, ctx);
  return add(x, mul_scalar(out, tanh(gate.value)));
}

void GatedCrossAttention::visit(ModuleVisitor& v) {
  ln_text.visit(v);
  ln_image.visit(v);
  attn.visit(v);
  v.param(gate);
}

std::size_t cross_block_param_count(std::size_t d_model) { return attention_param_count(d_model) + 1 + 4 * d_model; }

LanguageModel::LanguageModel(const LMConfig& cfg, Rng& rng, const std::string& cross_prefix) : cfg_(cfg) {
  cfg_.validate();
  const std::size_t d = cfg.d_model;
  tok_embed = {"lm.tok_embed", Tensor::randn({cfg.vocab_size, d}, 0.02, rng, true), true};
  pos_embed = {"lm.pos_embed", Tensor::randn({cfg.max_seq, d}, 0.02, rng, true), true};
  for (std::size_t i = 0; i < cfg.n_layers; ++i) {
    blocks.emplace_back("lm.layers." + std::to_string(i), d, cfg.n_heads, cfg.mlp_ratio, rng);
  }
  final_norm = LayerNorm("lm.final_norm", d);
  head = Linear("lm.head", d, cfg.vocab_size, false, false, rng, 3.0 / std::sqrt(static_cast<double>(d)));
  cross.resize(cfg.n_layers);
  for (std::size_t i = 0; i < cfg.n_layers; ++i) {
    if (cfg_.has_cross_block(i)) cross[i].emplace(cross_prefix + "." + std::to_string(i), d, cfg.n_heads, rng);
  }
}

Tensor LanguageModel::embed(std::span<const int> ids) const {
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= cfg_.vocab_size) {
      throw Error(ErrorCode::kInput, "token id " + std::to_string(id) + " outside vocabulary");
    }
  }
  return gather_rows(tok_embed.value, ids);
}

Tensor LanguageModel::decode(const Tensor& embeddings, const ImageContext* images,
                             std::span<const std::uint8_t> attn_mask, const ForwardContext& ctx) const {
  if (embeddings.rank() != 2 || embeddings.dim(1) != cfg_.d_model) {
    throw Error(ErrorCode::kShape, "decode expects [T, " + std::to_string(cfg_.d_model) + "] embeddings, got " +
                                       shape_str(embeddings.shape()));
  }
  const std::size_t t = embeddings.dim(0);
  if (t > cfg_.max_seq) {
    throw Error(ErrorCode::kCapacity, "sequence of " + std::to_string(t) + " tokens exceeds max_seq " +
                                          std::to_string(cfg_.max_seq));
  }
  if (cfg_.cross_attn_every && !images) {
    throw Error(ErrorCode::kConfig, "cross-attention LM needs image states (possibly empty)");
  }
  if (!cfg_.cross_attn_every && images) throw Error(ErrorCode::kConfig, "LM has no cross-attention blocks");
  if (images && (images->states.defined() ? images->states.dim(0) : 0) != images->n_states()) {
    throw Error(ErrorCode::kShape, "image context rows disagree with its state index");
  }
  if (!attn_mask.empty() && attn_mask.size() != t) {
    throw Error(ErrorCode::kShape, "attn_mask length " + std::to_string(attn_mask.size()) + " != " + std::to_string(t));
  }

  Mask mask = Mask::causal(t);
  EmptyRowPolicy policy = EmptyRowPolicy::kError;
  if (!attn_mask.empty()) {
    for (std::size_t q = 0; q < t; ++q)
      for (std::size_t k = 0; k <= q; ++k) mask.bits[q * t + k] = attn_mask[k] != 0;
    policy = EmptyRowPolicy::kZero;
  }

  Tensor x = add(embeddings, slice_rows(pos_embed.value, 0, t));
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    if (cross[i]) x = cross[i]->forward(x, *images, ctx);
    x = blocks[i].forward(x, &mask, policy, ctx);
  }
  return head.forward(final_norm.forward(x), ctx);
}

Tensor LanguageModel::forward_ids(std::span<const int> ids, const ForwardContext& ctx) const {
  if (cfg_.cross_attn_every) {
    ImageContext none;
    return decode(embed(ids), &none, {}, ctx);
  }
  return decode(embed(ids), nullptr, {}, ctx);
}

void LanguageModel::visit(ModuleVisitor& v) {
  v.param(tok_embed);
  v.param(pos_embed);
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    if (cross[i]) cross[i]->visit(v);
    blocks[i].visit(v);
  }
  final_norm.visit(v);
  head.visit(v);
}

double LanguageModel::flops(std::size_t seq_len, std::size_t n_image_states) const {
  double f = head.flops(seq_len);
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    f += blocks[i].flops(seq_len);
    if (cross[i] && n_image_states > 0) f += cross[i]->flops(seq_len, n_image_states);
  }
  return f;
}

std::size_t argmax_lowest(std::span<const double> logits) {
  if (logits.empty()) throw Error(ErrorCode::kShape, "argmax of an empty logit row");
  std::size_t best = 0;
  for (std::size_t i = 1; i < logits.size(); ++i) {
    if (logits[i] > logits[best]) best = i;
  }
  return best;
}

std::vector<int> generate_greedy(const NextTokenLogits& next, std::span<const int> prompt, std::size_t max_new,
                                 std::span<const int> stop_ids, std::size_t max_seq) {
  if (prompt.size() + max_new > max_seq) {
    throw Error(ErrorCode::kCapacity, "prompt of " + std::to_string(prompt.size()) + " tokens plus " +
                                          std::to_string(max_new) + " new exceeds max_seq " + std::to_string(max_seq));
  }
  std::vector<int> ids(prompt.begin(), prompt.end());
  std::vector<int> out;
  for (std::size_t step = 0; step < max_new; ++step) {
    const std::vector<double> logits = next(ids);
    const int tok = static_cast<int>(argmax_lowest(logits));
    if (std::find(stop_ids.begin(), stop_ids.end(), tok) != stop_ids.end()) break;
    out.push_back(tok);
    ids.push_back(tok);
  }
  return out;
}

}  // namespace vlm::lm

#include "vlm/fusion.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "vlm/error.hpp"
#include "vlm/pipeline.hpp"

namespace vlm {

Architecture parse_architecture(std::string_view s) {
  if (s == "fully_autoregressive") return Architecture::kFullyAutoregressive;
  if (s == "cross_attention") return Architecture::kCrossAttention;
  throw Error(ErrorCode::kConfig, "unknown architecture '" + std::string(s) + "'");
}

std::string_view to_string(Architecture arch) {
  return arch == Architecture::kFullyAutoregressive ? "fully_autoregressive" : "cross_attention";
}

std::size_t Document::n_image_refs() const {
  return static_cast<std::size_t>(std::count_if(segments.begin(), segments.end(), [](const Segment& s) {
    return std::holds_alternative<ImageSegment>(s);
  }));
}

void MultimodalSequence::validate() const {
  const std::size_t t = token_ids.size();
  if (attn_mask.size() != t || loss_mask.size() != t) {
    throw Error(ErrorCode::kShape, "sequence of " + std::to_string(t) + " tokens has masks of length " +
                                       std::to_string(attn_mask.size()) + " and " + std::to_string(loss_mask.size()));
  }
  std::size_t prev_end = 0;
  for (const auto& span : visual_spans) {
    if (span.length == 0 || span.start < prev_end || span.start + span.length > t) {
      throw Error(ErrorCode::kShape, "visual span at " + std::to_string(span.start) + " overlaps or overruns");
    }
    for (std::size_t i = span.start; i < span.start + span.length; ++i) {
      if (token_ids[i] != lm::tokens::kImage || loss_mask[i]) {
        throw Error(ErrorCode::kShape, "visual span position " + std::to_string(i) + " is not a masked placeholder");
      }
    }
    prev_end = span.start + span.length;
  }
}

namespace {

MultimodalSequence build_impl(const Document& doc, const std::function<std::size_t(std::size_t)>& span_len) {
  if (doc.segments.empty()) throw Error(ErrorCode::kInput, "empty document");
  MultimodalSequence seq;
  auto push = [&](int id, bool answer) {
    seq.token_ids.push_back(id);
    seq.attn_mask.push_back(1);
    seq.loss_mask.push_back(answer ? 1 : 0);
  };
  std::size_t ref = 0;
  for (const auto& segment : doc.segments) {
    if (const auto* text = std::get_if<TextSegment>(&segment)) {
      std::vector<std::uint8_t> answer(text->text.size(), 0);
      for (const auto& [b, e] : text->answer_spans) {
        if (b > e || e > text->text.size()) {
          throw Error(ErrorCode::kInput, "answer span [" + std::to_string(b) + ", " + std::to_string(e) +
                                             ") outside text of length " + std::to_string(text->text.size()));
        }
        std::fill(answer.begin() + static_cast<std::ptrdiff_t>(b), answer.begin() + static_cast<std::ptrdiff_t>(e), 1);
      }
      const auto ids = lm::tokenize(text->text);
      for (std::size_t i = 0; i < ids.size(); ++i) push(ids[i], answer[i]);
    } else if (const auto* image = std::get_if<ImageSegment>(&segment)) {
      if (image->image_index >= doc.images.size() || !doc.images[image->image_index]) {
        throw Error(ErrorCode::kDanglingRef, "image reference " + std::to_string(image->image_index) +
                                                 " has no registered image (" + std::to_string(doc.images.size()) +
                                                 " registered)");
      }
      const std::size_t n = span_len(ref++);
      seq.visual_spans.push_back({seq.token_ids.size(), n, image->image_index});
      for (std::size_t i = 0; i < n; ++i) push(lm::tokens::kImage, false);
    } else {
      const auto& special = std::get<SpecialSegment>(segment);
      if (special.token < 0 || special.token >= lm::tokens::kVocabSize) {
        throw Error(ErrorCode::kInput, "special token id " + std::to_string(special.token) + " outside vocabulary");
      }
      push(special.token, special.answer);
    }
  }
  return seq;
}

}  // namespace

MultimodalSequence build_sequence(const Document& doc, Architecture arch, std::size_t tokens_per_image) {
  if (tokens_per_image == 0) throw Error(ErrorCode::kInput, "tokens_per_image must be positive");
  const std::size_t n = arch == Architecture::kCrossAttention ? 1 : tokens_per_image;
  return build_impl(doc, [n](std::size_t) { return n; });
}

MultimodalSequence build_sequence(const Document& doc, Architecture arch, std::span<const std::size_t> per_image) {
  if (arch == Architecture::kCrossAttention) return build_impl(doc, [](std::size_t) { return std::size_t{1}; });
  if (per_image.size() != doc.n_image_refs()) {
    throw Error(ErrorCode::kShape, std::to_string(per_image.size()) + " token counts for " +
                                       std::to_string(doc.n_image_refs()) + " image references");
  }
  for (auto n : per_image) {
    if (n == 0) throw Error(ErrorCode::kInput, "tokens_per_image must be positive");
  }
  return build_impl(doc, [per_image](std::size_t i) { return per_image[i]; });
}

VLMConfig VLMConfig::resolved() const {
  VLMConfig out = *this;
  out.connector.d_vision = vision.d_vision;
  out.connector.d_model = lm.d_model;
  if (out.connector.n_heads == 0) out.connector.n_heads = lm.n_heads;
  if (architecture == Architecture::kFullyAutoregressive) out.lm.cross_attn_every.reset();
  out.validate();
  return out;
}

void VLMConfig::validate() const {
  vision.validate();
  lm.validate();
  connector.validate();
  if (connector.d_model != lm.d_model) {
    throw Error(ErrorCode::kConfig, "connector width " + std::to_string(connector.d_model) + " != LM width " +
                                        std::to_string(lm.d_model));
  }
  if (connector.d_vision != vision.d_vision) {
    throw Error(ErrorCode::kConfig, "connector input width " + std::to_string(connector.d_vision) +
                                        " != vision width " + std::to_string(vision.d_vision));
  }
  if (architecture == Architecture::kCrossAttention && !lm.cross_attn_every) {
    throw Error(ErrorCode::kConfig, "cross-attention architecture requires lm.cross_attn_every");
  }
  if (neftune_alpha < 0.0) throw Error(ErrorCode::kConfig, "neftune_alpha must be non-negative");
}

namespace {

Rng component_rng(std::uint64_t seed, std::uint64_t component) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(component)};
  Rng rng;
  rng.seed(seq);
  return rng;
}

}  // namespace

VLMModel::VLMModel(const VLMConfig& cfg, std::uint64_t seed) {
  cfg_ = cfg.resolved();
  Rng vision_rng = component_rng(seed, 1);
  Rng connector_rng = component_rng(seed, 2);
  Rng lm_rng = component_rng(seed, 3);
  Rng fusion_rng = component_rng(seed, 4);
  vision = vision::VisionEncoder(cfg_.vision, vision_rng);
  const bool cross = cfg_.architecture == Architecture::kCrossAttention;
  connector = connector::Connector(cfg_.connector, connector_rng, cross);
  lm = lm::LanguageModel(cfg_.lm, lm_rng);
  if (cross) {
    const double std_dev = 1.0 / std::sqrt(static_cast<double>(cfg_.lm.d_model));
    image_placeholder = Parameter{"fusion.image_placeholder",
                                  Tensor::randn({1, cfg_.lm.d_model}, std_dev, fusion_rng, true), true};
  }
}

std::size_t VLMModel::tokens_per_image(const vision::ImageGrid& image) const {
  if (cfg_.architecture == Architecture::kCrossAttention) return 1;
  const auto [rows, cols] = vision::patch_grid(image.height, image.width, cfg_.vision, cfg_.patch_mode);
  return connector.tokens_for(rows * cols);
}

std::size_t VLMModel::reference_tokens_per_image() const {
  if (cfg_.architecture == Architecture::kCrossAttention) return 1;
  const std::size_t g = cfg_.vision.square_grid();
  return connector.tokens_for(g * g);
}

MultimodalSequence VLMModel::build(const Document& doc) const {
  std::vector<std::size_t> counts;
  for (const auto& segment : doc.segments) {
    if (const auto* image = std::get_if<ImageSegment>(&segment)) {
      if (image->image_index >= doc.images.size() || !doc.images[image->image_index]) {
        throw Error(ErrorCode::kDanglingRef, "image reference " + std::to_string(image->image_index) +
                                                 " has no registered image");
      }
      counts.push_back(tokens_per_image(*doc.images[image->image_index]));
    }
  }
  return build_sequence(doc, cfg_.architecture, counts);
}

Tensor VLMModel::encode_image(const vision::ImageGrid& image, const ForwardContext& ctx) const {
  return vision.encode_image(image, cfg_.patch_mode, ctx);
}

Tensor VLMModel::forward(const MultimodalSequence& seq,
                         std::span<const std::shared_ptr<const vision::ImageGrid>> images,
                         const ForwardContext& ctx) const {
  seq.validate();
  auto image_at = [&](std::size_t index) -> const vision::ImageGrid& {
    if (index >= images.size() || !images[index]) {
      throw Error(ErrorCode::kDanglingRef, "sequence references image " + std::to_string(index) + " but only " +
                                               std::to_string(images.size()) + " were supplied");
    }
    return *images[index];
  };

  Tensor emb = lm.embed(seq.token_ids);
  const bool cross = cfg_.architecture == Architecture::kCrossAttention;
  lm::ImageContext image_ctx;
  std::vector<Tensor> state_parts;
  for (std::size_t j = 0; j < seq.visual_spans.size(); ++j) {
    const auto& span = seq.visual_spans[j];
    Tensor states = encode_image(image_at(span.image_index), ctx);
    Tensor projected = connector.project(states, ctx);
    if (cross) {
      if (span.length != 1) {
        throw Error(ErrorCode::kShape, "cross-attention spans hold one placeholder, got " + std::to_string(span.length));
      }
      emb = replace_rows(emb, span.start, image_placeholder->value);
      image_ctx.available_from.push_back(span.start);
      image_ctx.state_image.insert(image_ctx.state_image.end(), projected.dim(0), j);
      state_parts.push_back(projected);
    } else {
      if (projected.dim(0) != span.length) {
        throw Error(ErrorCode::kShape, "connector produced " + std::to_string(projected.dim(0)) +
                                           " visual tokens for a span of " + std::to_string(span.length));
      }
      emb = replace_rows(emb, span.start, projected);
    }
  }

  if (ctx.training && cfg_.neftune_alpha > 0.0) {
    if (!ctx.rng) throw Error(ErrorCode::kState, "NEFTune needs an rng in training mode");
    std::vector<std::uint8_t> text_rows(seq.size(), 1);
    for (const auto& span : seq.visual_spans) {
      std::fill_n(text_rows.begin() + static_cast<std::ptrdiff_t>(span.start), span.length, 0);
    }
    emb = pipeline::neftune(emb, cfg_.neftune_alpha, *ctx.rng, text_rows);
  }

  if (cross) {
    if (!state_parts.empty()) image_ctx.states = concat_rows(state_parts);
    return lm.decode(emb, &image_ctx, seq.attn_mask, ctx);
  }
  return lm.decode(emb, nullptr, seq.attn_mask, ctx);
}

Tensor next_token_loss(const Tensor& logits, const MultimodalSequence& seq) {
  const std::size_t t = seq.size();
  if (logits.rank() != 2 || logits.dim(0) != t) {
    throw Error(ErrorCode::kShape, "logits " + shape_str(logits.shape()) + " for a sequence of " + std::to_string(t));
  }
  std::vector<int> targets(t, 0);
  std::vector<std::uint8_t> mask(t, 0);
  for (std::size_t i = 0; i + 1 < t; ++i) {
    targets[i] = seq.token_ids[i + 1];
    mask[i] = seq.loss_mask[i + 1] && seq.attn_mask[i + 1];
  }
  return cross_entropy_masked(logits, targets, mask);
}

Tensor VLMModel::loss(const MultimodalSequence& seq, std::span<const std::shared_ptr<const vision::ImageGrid>> images,
                      const ForwardContext& ctx) const {
  return next_token_loss(forward(seq, images, ctx), seq);
}

void VLMModel::visit(ModuleVisitor& v) {
  vision.visit(v);
  connector.visit(v);
  lm.visit(v);
  if (image_placeholder) v.param(*image_placeholder);
}

std::vector<int> generate(const VLMModel& model, const MultimodalSequence& prompt,
                          std::span<const std::shared_ptr<const vision::ImageGrid>> images, std::size_t max_new,
                          std::span<const int> stop_ids) {
  NoGradGuard no_grad;
  MultimodalSequence work = prompt;
  auto next = [&](std::span<const int> ids) {
    work.token_ids.assign(ids.begin(), ids.end());
    work.attn_mask.resize(ids.size(), 1);
    work.loss_mask.resize(ids.size(), 0);
    const Tensor logits = model.forward(work, images);
    const std::size_t v = logits.dim(1);
    const auto data = logits.data();
    return std::vector<double>(data.end() - static_cast<std::ptrdiff_t>(v), data.end());
  };
  return lm::generate_greedy(next, prompt.token_ids, max_new, stop_ids, model.config().lm.max_seq);
}

std::string component_of(std::string_view name) {
  for (std::string_view prefix : {"vision", "connector", "lm", "fusion", "adapters"}) {
    if (name.size() > prefix.size() && name.substr(0, prefix.size()) == prefix && name[prefix.size()] == '.') {
      return std::string(prefix);
    }
  }
  if (name.substr(0, 6) == "xattn.") return "cross_attn";
  return "other";
}

ParamCounts count_params(Module& model) {
  ParamCounts counts;
  for (Parameter* p : model.parameters()) {
    const std::size_t n = p->value.numel();
    auto& slot = counts.by_component[component_of(p->name)];
    counts.total += n;
    slot.first += n;
    if (p->trainable) {
      counts.trainable += n;
      slot.second += n;
    }
  }
  return counts;
}

double estimate_flops(const VLMModel& model, std::size_t seq_len, std::size_t n_images) {
  const auto& cfg = model.config();
  const std::size_t g = cfg.vision.square_grid();
  const std::size_t patches = g * g;
  const double n = static_cast<double>(n_images);
  double f = 0.0;
  if (n_images > 0) f += n * (model.vision.flops(patches) + model.connector.flops(patches));
  if (cfg.architecture == Architecture::kCrossAttention) {
    f += model.lm.flops(seq_len + n_images, n_images * patches);
  } else {
    f += model.lm.flops(seq_len + n_images * model.connector.tokens_for(patches));
  }
  return f;
}

}  // namespace vlm

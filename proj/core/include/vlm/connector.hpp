#pragma once

#include <string_view>
#include <vector>

#include "vlm/nn.hpp"

namespace vlm::connector {

enum class ConnectorKind { kLinear, kMappingNetwork, kPerceiver };

ConnectorKind parse_kind(std::string_view s);
std::string_view to_string(ConnectorKind kind);

struct ConnectorConfig {
  ConnectorKind kind = ConnectorKind::kPerceiver;
  std::size_t n_latents = 64;
  std::size_t n_layers = 3;  // perceiver depth, or mapping-network depth
  bool use_pre_mlp = true;
  std::size_t d_vision = 32;
  std::size_t d_model = 32;
  std::size_t n_heads = 0;     // 0 inherits the language model's head count
  std::size_t mlp_hidden = 0;  // mapping network / pre-MLP hidden width, 0 means d_model
  std::size_t mlp_ratio = 4;   // perceiver MLP expansion

  void validate() const;
  std::size_t hidden() const { return mlp_hidden ? mlp_hidden : d_model; }
  std::size_t heads() const { return n_heads ? n_heads : 1; }
};

struct VisualTokens {
  Tensor tokens;  // [n_tok, d_model]
  std::size_t source_image = 0;
};

struct PerceiverLayer {
  PerceiverLayer() = default;
  PerceiverLayer(const std::string& name, std::size_t d_model, std::size_t n_heads, std::size_t mlp_ratio, Rng& rng);
  void visit(ModuleVisitor& v);

  LayerNorm ln_latents;
  LayerNorm ln_context;
  MultiHeadAttention attn;
  LayerNorm ln_mlp;
  Mlp mlp;
};

class Connector : public Module {
 public:
  Connector() = default;
  /// projection_only drops the perceiver stage; the cross-attention
  /// architecture consumes pre-projected states directly.
  Connector(const ConnectorConfig& cfg, Rng& rng, bool projection_only = false);

  const ConnectorConfig& config() const { return cfg_; }
  bool projection_only() const { return projection_only_; }

  /// d_vision -> d_model per token: pre-MLP (or a linear map when the
  /// pre-MLP is disabled) for the perceiver, the single affine map for
  /// linear, the MLP stack for mapping_network.
  Tensor pre_project(const Tensor& h, const ForwardContext& ctx = {}) const;
  /// Latents cross-attend to h (already d_model wide). Output [n_latents, d_model].
  Tensor perceiver_resample(const Tensor& h, const ForwardContext& ctx = {}) const;
  /// Full connector: pre_project, then perceiver pooling unless projection-only.
  Tensor project(const Tensor& h, const ForwardContext& ctx = {}) const;
  VisualTokens project(const Tensor& h, std::size_t image_index, const ForwardContext& ctx = {}) const;

  /// Visual tokens produced from an image with n_patches patch states.
  std::size_t tokens_for(std::size_t n_patches) const;

  void visit(ModuleVisitor& v) override;
  double flops(std::size_t n_patches) const;

  // Exactly one projection path is populated, depending on kind / flags.
  std::optional<Linear> linear;
  std::vector<Linear> mapping;
  std::optional<Mlp> pre_mlp;
  std::optional<Linear> pre_proj;
  std::optional<Parameter> latents;  // [n_latents, d_model]
  std::vector<PerceiverLayer> layers;
  std::optional<LayerNorm> out_norm;

 private:
  ConnectorConfig cfg_;
  bool projection_only_ = false;
};

/// Closed-form parameter count for a connector built from cfg.
std::size_t connector_param_count(const ConnectorConfig& cfg, bool projection_only = false);

}  // namespace vlm::connector

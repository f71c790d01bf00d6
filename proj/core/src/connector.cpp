#include "vlm/connector.hpp"

#include <cmath>
#include <string>

#include "vlm/error.hpp"

namespace vlm::connector {

namespace {

double fan_in_std(std::size_t fan_in) { return 1.0 / std::sqrt(static_cast<double>(fan_in)); }

}  // namespace

ConnectorKind parse_kind(std::string_view s) {
  if (s == "linear") return ConnectorKind::kLinear;
  if (s == "mapping_network") return ConnectorKind::kMappingNetwork;
  if (s == "perceiver") return ConnectorKind::kPerceiver;
  throw Error(ErrorCode::kConfig, "unknown connector kind '" + std::string(s) + "'");
}

std::string_view to_string(ConnectorKind kind) {
  switch (kind) {
    case ConnectorKind::kLinear: return "linear";
    case ConnectorKind::kMappingNetwork: return "mapping_network";
    case ConnectorKind::kPerceiver: return "perceiver";
  }
  return "unknown";
}

void ConnectorConfig::validate() const {
  if (d_vision == 0 || d_model == 0) throw Error(ErrorCode::kConfig, "connector widths must be positive");
  if (kind == ConnectorKind::kPerceiver) {
    if (n_latents < 1) throw Error(ErrorCode::kConfig, "perceiver needs n_latents >= 1");
    if (d_model % heads() != 0) {
      throw Error(ErrorCode::kConfig, "perceiver d_model " + std::to_string(d_model) + " not divisible by " +
                                          std::to_string(heads()) + " heads");
    }
  }
  if (kind == ConnectorKind::kMappingNetwork && n_layers < 1) {
    throw Error(ErrorCode::kConfig, "mapping network needs at least one layer");
  }
}

PerceiverLayer::PerceiverLayer(const std::string& name, std::size_t d_model, std::size_t n_heads,
                               std::size_t mlp_ratio, Rng& rng)
    : ln_latents(name + ".ln_latents", d_model),
      ln_context(name + ".ln_context", d_model),
      attn(name + ".attn", d_model, n_heads, rng),
      ln_mlp(name + ".ln_mlp", d_model),
      mlp(name + ".mlp", d_model, mlp_ratio * d_model, d_model, true, rng) {}

void PerceiverLayer::visit(ModuleVisitor& v) {
  ln_latents.visit(v);
  ln_context.visit(v);
  attn.visit(v);
  ln_mlp.visit(v);
  mlp.visit(v);
}

Connector::Connector(const ConnectorConfig& cfg, Rng& rng, bool projection_only)
    : cfg_(cfg), projection_only_(projection_only) {
  cfg_.validate();
  const std::size_t dv = cfg.d_vision, d = cfg.d_model;
  switch (cfg.kind) {
    case ConnectorKind::kLinear:
      linear.emplace("connector.linear", dv, d, true, true, rng, fan_in_std(dv));
      break;
    case ConnectorKind::kMappingNetwork: {
      std::size_t in = dv;
      for (std::size_t i = 0; i < cfg.n_layers; ++i) {
        const std::size_t out = i + 1 == cfg.n_layers ? d : cfg_.hidden();
        mapping.emplace_back("connector.mapping." + std::to_string(i), in, out, true, true, rng, fan_in_std(in));
        in = out;
      }
      break;
    }
    case ConnectorKind::kPerceiver:
      if (cfg.use_pre_mlp) {
        pre_mlp.emplace("connector.pre_mlp", dv, cfg_.hidden(), d, true, rng);
      } else {
        pre_proj.emplace("connector.pre_proj", dv, d, true, true, rng, fan_in_std(dv));
      }
      if (!projection_only) {
        latents = Parameter{"connector.perceiver.latents",
                            Tensor::randn({cfg.n_latents, d}, fan_in_std(d), rng, true), true};
        for (std::size_t i = 0; i < cfg.n_layers; ++i) {
          layers.emplace_back("connector.perceiver.layers." + std::to_string(i), d, cfg_.heads(), cfg.mlp_ratio, rng);
        }
        out_norm.emplace("connector.perceiver.norm", d);
      }
      break;
  }
}

Tensor Connector::pre_project(const Tensor& h, const ForwardContext& ctx) const {
  if (h.rank() != 2 || h.dim(1) != cfg_.d_vision) {
    throw Error(ErrorCode::kShape, "connector expects [n, " + std::to_string(cfg_.d_vision) + "] states, got " +
                                       shape_str(h.shape()));
  }
  switch (cfg_.kind) {
    case ConnectorKind::kLinear: return linear->forward(h, ctx);
    case ConnectorKind::kMappingNetwork: {
      Tensor x = h;
      for (std::size_t i = 0; i < mapping.size(); ++i) {
        x = mapping[i].forward(x, ctx);
        if (i + 1 < mapping.size()) x = gelu(x);
      }
      return x;
    }
    case ConnectorKind::kPerceiver: return pre_mlp ? pre_mlp->forward(h, ctx) : pre_proj->forward(h, ctx);
  }
  throw Error(ErrorCode::kConfig, "unknown connector kind");
}

Tensor Connector::perceiver_resample(const Tensor& h, const ForwardContext& ctx) const {
  if (!latents) throw Error(ErrorCode::kConfig, "connector has no perceiver stage");
  if (h.rank() != 2 || h.dim(1) != cfg_.d_model || h.dim(0) < 1) {
    throw Error(ErrorCode::kShape, "perceiver expects [n >= 1, " + std::to_string(cfg_.d_model) + "], got " +
                                       shape_str(h.shape()));
  }
  Tensor lat = latents->value;
  for (const auto& layer : layers) {
    Tensor lat_n = layer.ln_latents.forward(lat);
    const Tensor kv_parts[] = {layer.ln_context.forward(h), lat_n};
    lat = add(lat, layer.attn.forward(lat_n, concat_rows(kv_parts), nullptr, EmptyRowPolicy::kError, ctx));
    lat = add(lat, layer.mlp.forward(layer.ln_mlp.forward(lat), ctx));
  }
  return out_norm->forward(lat);
}

Tensor Connector::project(const Tensor& h, const ForwardContext& ctx) const {
  Tensor x = pre_project(h, ctx);
  if (cfg_.kind == ConnectorKind::kPerceiver && !projection_only_) return perceiver_resample(x, ctx);
  return x;
}

VisualTokens Connector::project(const Tensor& h, std::size_t image_index, const ForwardContext& ctx) const {
  return {project(h, ctx), image_index};
}

std::size_t Connector::tokens_for(std::size_t n_patches) const {
  if (cfg_.kind == ConnectorKind::kPerceiver && !projection_only_) return cfg_.n_latents;
  return n_patches;
}

void Connector::visit(ModuleVisitor& v) {
  if (linear) linear->visit(v);
  for (auto& m : mapping) m.visit(v);
  if (pre_mlp) pre_mlp->visit(v);
  if (pre_proj) pre_proj->visit(v);
  if (latents) v.param(*latents);
  for (auto& l : layers) l.visit(v);
  if (out_norm) out_norm->visit(v);
}

double Connector::flops(std::size_t n_patches) const {
  double f = 0.0;
  if (linear) f += linear->flops(n_patches);
  for (const auto& m : mapping) f += m.flops(n_patches);
  if (pre_mlp) f += pre_mlp->flops(n_patches);
  if (pre_proj) f += pre_proj->flops(n_patches);
  const std::size_t n_lat = cfg_.n_latents;
  for (const auto& l : layers) f += l.attn.flops(n_lat, n_patches + n_lat) + l.mlp.flops(n_lat);
  return f;
}

std::size_t connector_param_count(const ConnectorConfig& cfg, bool projection_only) {
  const std::size_t dv = cfg.d_vision, d = cfg.d_model, hid = cfg.hidden();
  switch (cfg.kind) {
    case ConnectorKind::kLinear: return dv * d + d;
    case ConnectorKind::kMappingNetwork: {
      std::size_t n = 0, in = dv;
      for (std::size_t i = 0; i < cfg.n_layers; ++i) {
        const std::size_t out = i + 1 == cfg.n_layers ? d : hid;
        n += in * out + out;
        in = out;
      }
      return n;
    }
    case ConnectorKind::kPerceiver: {
      std::size_t n = cfg.use_pre_mlp ? mlp_param_count(dv, hid, d) : dv * d + d;
      if (projection_only) return n;
      const std::size_t per_layer =
          3 * 2 * d + attention_param_count(d) + mlp_param_count(d, cfg.mlp_ratio * d, d);
      return n + cfg.n_latents * d + cfg.n_layers * per_layer + 2 * d;
    }
  }
  return 0;
}

}  // namespace vlm::connector

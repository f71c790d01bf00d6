#include "vlm/adapters.hpp"

#include <cmath>

#include "vlm/error.hpp"

namespace vlm::adapters {

AdapterKind parse_kind(std::string_view s) {
  if (s == "lora") return AdapterKind::kLora;
  if (s == "dora") return AdapterKind::kDora;
  throw Error(ErrorCode::kConfig, "unknown adapter kind '" + std::string(s) + "'");
}

std::string_view to_string(AdapterKind kind) { return kind == AdapterKind::kLora ? "lora" : "dora"; }

void AdapterSpec::validate() const {
  if (rank < 1) throw Error(ErrorCode::kConfig, "adapter rank must be >= 1");
  if (!(dropout_p >= 0.0 && dropout_p < 1.0)) throw Error(ErrorCode::kConfig, "adapter dropout must lie in [0, 1)");
  if (target_pattern.empty()) throw Error(ErrorCode::kConfig, "adapter target pattern is empty");
}

bool FreezePolicy::trainable(std::string_view param_name) const {
  for (const auto& [pattern, on] : rules) {
    if (glob_match(pattern, param_name)) return on;
  }
  return default_trainable;
}

FreezePolicy FreezePolicy::full() { return {}; }

FreezePolicy FreezePolicy::frozen_backbones() { return {{{"vision.*", false}, {"lm.*", false}}, true}; }

std::size_t attach(Module& model, const AdapterSpec& spec, Rng& rng) {
  spec.validate();
  bool matched_any = false;
  for (Parameter* p : model.parameters()) matched_any = matched_any || glob_match(spec.target_pattern, p->name);
  if (!matched_any) throw Error(ErrorCode::kPolicy, "pattern '" + spec.target_pattern + "' matches no parameter");

  std::vector<Linear*> targets;
  for (Linear* l : model.linears()) {
    if (!glob_match(spec.target_pattern, l->weight.name)) continue;
    if (!l->adaptable()) continue;
    if (l->adapter) throw Error(ErrorCode::kTarget, l->name() + " already carries an adapter");
    targets.push_back(l);
  }
  if (targets.empty()) {
    throw Error(ErrorCode::kTarget, "pattern '" + spec.target_pattern +
                                        "' matches no attention or MLP projection weight");
  }

  NoGradGuard no_grad;
  const double alpha = spec.resolved_alpha();
  for (Linear* l : targets) {
    const std::size_t in = l->fan_in(), out = l->fan_out(), r = spec.rank;
    const std::string base = "adapters." + l->name();
    Adapter a;
    a.kind = spec.kind;
    a.rank = r;
    a.alpha = alpha;
    a.dropout_p = spec.dropout_p;
    a.down = {base + ".lora_a", Tensor::randn({in, r}, 1.0 / std::sqrt(static_cast<double>(in)), rng, true), true};
    a.up = {base + ".lora_b", Tensor::zeros({r, out}, true), true};
    if (spec.kind == AdapterKind::kDora) {
      // Same op sequence as the forward pass, so the initial ratio is exactly 1.
      const Tensor& w = l->weight.value;
      Tensor norms = sqrt(sum_rows(mul(w, w)));
      a.magnitude = Parameter{base + ".magnitude", Tensor::from({out}, {norms.data().begin(), norms.data().end()}, true),
                              true};
    }
    l->adapter = std::move(a);
    l->weight.trainable = false;
    l->weight.value.set_requires_grad(false);
    if (l->bias) {
      l->bias->trainable = false;
      l->bias->value.set_requires_grad(false);
    }
  }
  return targets.size();
}

void merge(Module& model) {
  for (Parameter* p : model.parameters()) {
    if (p->value.has_grad()) {
      throw Error(ErrorCode::kState, "cannot merge while " + p->name + " holds an unapplied gradient");
    }
  }
  NoGradGuard no_grad;
  for (Linear* l : model.linears()) {
    if (!l->adapter) continue;
    const Adapter& a = *l->adapter;
    Tensor merged = add(l->weight.value, scale(matmul(a.down.value, a.up.value), a.scaling()));
    if (a.kind == AdapterKind::kDora) {
      Tensor norms = sqrt(sum_rows(mul(merged, merged)));
      merged = mul_row(merged, div(a.magnitude->value, norms));
    }
    const auto d = merged.data();
    l->weight.value = Tensor::from(merged.shape(), {d.begin(), d.end()}, true);
    l->weight.trainable = true;
    if (l->bias) {
      l->bias->trainable = true;
      l->bias->value.set_requires_grad(true);
    }
    l->adapter.reset();
  }
}

std::size_t count_adapters(Module& model) {
  std::size_t n = 0;
  for (Linear* l : model.linears()) n += l->adapter.has_value();
  return n;
}

void apply_policy(Module& model, const FreezePolicy& policy) {
  for (Parameter* p : model.parameters()) {
    p->trainable = policy.trainable(p->name);
    p->value.set_requires_grad(p->trainable);
  }
}

ParamCounts count_params(Module& model, const FreezePolicy& policy) {
  const auto params = model.parameters();
  for (const auto& [pattern, on] : policy.rules) {
    bool hit = false;
    for (Parameter* p : params) hit = hit || glob_match(pattern, p->name);
    if (!hit) throw Error(ErrorCode::kPolicy, "policy rule '" + pattern + "' matches no parameter");
  }
  ParamCounts counts;
  for (Parameter* p : params) {
    const std::size_t n = p->value.numel();
    auto& slot = counts.by_component[component_of(p->name)];
    counts.total += n;
    slot.first += n;
    if (policy.trainable(p->name)) {
      counts.trainable += n;
      slot.second += n;
    }
  }
  return counts;
}

void apply_named_policy(Module& model, std::string_view name, const AdapterSpec& base_spec, Rng& rng) {
  if (name == "full") {
    apply_policy(model, FreezePolicy::full());
  } else if (name == "frozen") {
    apply_policy(model, FreezePolicy::frozen_backbones());
  } else if (name == "lora" || name == "dora") {
    AdapterSpec spec = base_spec;
    spec.kind = name == "lora" ? AdapterKind::kLora : AdapterKind::kDora;
    for (const char* pattern : {"vision.*", "lm.*"}) {
      spec.target_pattern = pattern;
      attach(model, spec, rng);
    }
    apply_policy(model, FreezePolicy::frozen_backbones());
  } else {
    throw Error(ErrorCode::kConfig, "unknown training policy '" + std::string(name) + "'");
  }
}

}  // namespace vlm::adapters

#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "vlm/fusion.hpp"
#include "vlm/nn.hpp"

namespace vlm::adapters {

AdapterKind parse_kind(std::string_view s);
std::string_view to_string(AdapterKind kind);

struct AdapterSpec {
  std::string target_pattern = "*";
  std::size_t rank = 4;
  std::optional<double> alpha;  // defaults to 2 * rank
  AdapterKind kind = AdapterKind::kLora;
  double dropout_p = 0.0;

  double resolved_alpha() const { return alpha ? *alpha : 2.0 * static_cast<double>(rank); }
  void validate() const;
};

/// Ordered (pattern, trainable) rules; the first matching rule wins.
struct FreezePolicy {
  std::vector<std::pair<std::string, bool>> rules;
  bool default_trainable = true;

  bool trainable(std::string_view param_name) const;

  /// Everything trainable.
  static FreezePolicy full();
  /// Vision and LM frozen; connector, cross-attention blocks, placeholders
  /// and adapters trainable.
  static FreezePolicy frozen_backbones();
};

/// Attaches an adapter to every adaptable linear layer (attention and MLP
/// projections) whose weight name matches spec.target_pattern. Base weight
/// and bias become frozen. Returns the number of adapted layers.
/// Nothing matched is a policy error; matches that contain no adaptable
/// weight, or that are already adapted, are a target error.
std::size_t attach(Module& model, const AdapterSpec& spec, Rng& rng);

/// Folds every adapter into its base weight and removes it; the merged weight
/// becomes trainable. A parameter holding an unapplied gradient is a state error.
void merge(Module& model);

std::size_t count_adapters(Module& model);

/// Sets trainable flags from the policy. Frozen parameters stop recording
/// gradients, so their gradient stays identically zero.
void apply_policy(Module& model, const FreezePolicy& policy);

/// Counts as if policy were applied, without mutating the model. A rule that
/// matches no parameter is a policy error.
ParamCounts count_params(Module& model, const FreezePolicy& policy);

/// Named training setups used by the harness: "frozen", "lora", "dora" and "full".
/// lora/dora attach to the vision and LM backbones, then freeze them.
void apply_named_policy(Module& model, std::string_view name, const AdapterSpec& base_spec, Rng& rng);

}  // namespace vlm::adapters

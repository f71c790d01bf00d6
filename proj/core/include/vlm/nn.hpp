#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "vlm/ops.hpp"
#include "vlm/tensor.hpp"

namespace vlm {

/// A named, gradient-tracked model weight. Names are dotted paths, unique
/// within a model. Freezing a parameter also turns off its gradient tracking.
struct Parameter {
  std::string name;
  Tensor value;
  bool trainable = true;
};

/// `*` matches any run of characters (dots included), `?` any single one.
bool glob_match(std::string_view pattern, std::string_view text);

struct ForwardContext {
  bool training = false;
  Rng* rng = nullptr;  // required only when training with dropout
};

enum class AdapterKind { kLora, kDora };

/// Low-rank update attached to a Linear. `down` is [fan_in, r] and `up` is
/// [r, fan_out] in the row-vector convention used by Linear (y = x W).
struct Adapter {
  AdapterKind kind = AdapterKind::kLora;
  std::size_t rank = 1;
  double alpha = 2.0;
  double dropout_p = 0.0;
  Parameter down;
  Parameter up;
  std::optional<Parameter> magnitude;  // [fan_out], DoRA only

  double scaling() const { return alpha / static_cast<double>(rank); }
};

class Linear;

class ModuleVisitor {
 public:
  virtual ~ModuleVisitor() = default;
  virtual void param(Parameter& p) = 0;
  virtual void linear(Linear&) {}
};

/// Anything that owns parameters and can enumerate them in a fixed order.
class Module {
 public:
  virtual ~Module() = default;
  virtual void visit(ModuleVisitor& v) = 0;

  std::vector<Parameter*> parameters();
  std::vector<Linear*> linears();
};

class Linear {
 public:
  Linear() = default;
  /// Weight ~ N(0, init_std), bias zero.
  Linear(std::string name, std::size_t in, std::size_t out, bool with_bias, bool adaptable, Rng& rng,
         double init_std);

  Tensor forward(const Tensor& x, const ForwardContext& ctx = {}) const;
  void visit(ModuleVisitor& v);
  /// Multiply-accumulates x2 for `rows` inputs, adapter branch included.
  double flops(std::size_t rows) const;

  const std::string& name() const { return name_; }
  std::size_t fan_in() const { return weight.value.dim(0); }
  std::size_t fan_out() const { return weight.value.dim(1); }
  bool adaptable() const { return adaptable_; }

  Parameter weight;  // [fan_in, fan_out]
  std::optional<Parameter> bias;
  std::optional<Adapter> adapter;

 private:
  std::string name_;
  bool adaptable_ = false;
};

struct LayerNorm {
  LayerNorm() = default;
  LayerNorm(const std::string& name, std::size_t dim);
  Tensor forward(const Tensor& x) const { return layer_norm(x, gain.value, bias.value, eps); }
  void visit(ModuleVisitor& v) {
    v.param(gain);
    v.param(bias);
  }

  Parameter gain;
  Parameter bias;
  double eps = 1e-5;
};

/// Multi-head attention without projection biases: 4 d^2 parameters.
struct MultiHeadAttention {
  MultiHeadAttention() = default;
  MultiHeadAttention(const std::string& name, std::size_t d_model, std::size_t n_heads, Rng& rng);

  /// queries [Tq, d], keys/values [Tk, d]; mask [Tq, Tk] marks visible pairs.
  Tensor forward(const Tensor& queries, const Tensor& keys_values, const Mask* mask,
                 EmptyRowPolicy empty_rows = EmptyRowPolicy::kError, const ForwardContext& ctx = {}) const;
  void visit(ModuleVisitor& v);
  double flops(std::size_t n_queries, std::size_t n_keys) const;

  Linear wq, wk, wv, wo;
  std::size_t n_heads = 1;
};

/// fc1 -> GELU -> fc2, both with bias.
struct Mlp {
  Mlp() = default;
  Mlp(const std::string& name, std::size_t d_in, std::size_t d_hidden, std::size_t d_out, bool adaptable, Rng& rng);
  Tensor forward(const Tensor& x, const ForwardContext& ctx = {}) const;
  void visit(ModuleVisitor& v);
  double flops(std::size_t rows) const { return fc1.flops(rows) + fc2.flops(rows); }

  Linear fc1, fc2;
};

/// Pre-norm self-attention + MLP block with residual connections.
struct TransformerBlock {
  TransformerBlock() = default;
  TransformerBlock(const std::string& name, std::size_t d_model, std::size_t n_heads, std::size_t mlp_ratio, Rng& rng);
  Tensor forward(const Tensor& x, const Mask* mask, EmptyRowPolicy empty_rows = EmptyRowPolicy::kError,
                 const ForwardContext& ctx = {}) const;
  void visit(ModuleVisitor& v);
  double flops(std::size_t rows) const { return attn.flops(rows, rows) + mlp.flops(rows); }

  LayerNorm ln_attn;
  MultiHeadAttention attn;
  LayerNorm ln_mlp;
  Mlp mlp;
};

std::size_t attention_param_count(std::size_t d_model);
std::size_t mlp_param_count(std::size_t d_in, std::size_t d_hidden, std::size_t d_out);
std::size_t block_param_count(std::size_t d_model, std::size_t mlp_ratio);

}  // namespace vlm

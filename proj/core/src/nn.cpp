#include "vlm/nn.hpp"

#include <cmath>

#include "vlm/error.hpp"

namespace vlm {

bool glob_match(std::string_view pattern, std::string_view text) {
  std::size_t p = 0, t = 0, star = std::string_view::npos, mark = 0;
  while (t < text.size()) {
    if (p < pattern.size() && (pattern[p] == '?' || pattern[p] == text[t])) {
      ++p;
      ++t;
    } else if (p < pattern.size() && pattern[p] == '*') {
      star = p++;
      mark = t;
    } else if (star != std::string_view::npos) {
      p = star + 1;
      t = ++mark;
    } else {
      return false;
    }
  }
  while (p < pattern.size() && pattern[p] == '*') ++p;
  return p == pattern.size();
}

std::vector<Parameter*> Module::parameters() {
  struct Collect : ModuleVisitor {
    std::vector<Parameter*> out;
    void param(Parameter& p) override { out.push_back(&p); }
  } c;
  visit(c);
  return c.out;
}

std::vector<Linear*> Module::linears() {
  struct Collect : ModuleVisitor {
    std::vector<Linear*> out;
    void param(Parameter&) override {}
    void linear(Linear& l) override { out.push_back(&l); }
  } c;
  visit(c);
  return c.out;
}

Linear::Linear(std::string name, std::size_t in, std::size_t out, bool with_bias, bool adaptable, Rng& rng,
               double init_std)
    : name_(std::move(name)), adaptable_(adaptable) {
  weight = {name_ + ".weight", Tensor::randn({in, out}, init_std, rng, true), true};
  if (with_bias) bias = Parameter{name_ + ".bias", Tensor::zeros({out}, true), true};
}

Tensor Linear::forward(const Tensor& x, const ForwardContext& ctx) const {
  Tensor y = matmul(x, weight.value);
  if (adapter) {
    const Adapter& a = *adapter;
    Tensor xd = x;
    if (ctx.training && a.dropout_p > 0.0) {
      if (!ctx.rng) throw Error(ErrorCode::kState, "adapter dropout needs an rng in training mode");
      std::bernoulli_distribution keep(1.0 - a.dropout_p);
      std::vector<double> m(x.numel());
      for (auto& v : m) v = keep(*ctx.rng) ? 1.0 / (1.0 - a.dropout_p) : 0.0;
      xd = mul(x, Tensor::from(x.shape(), std::move(m)));
    }
    Tensor delta = scale(matmul(matmul(xd, a.down.value), a.up.value), a.scaling());
    y = add(y, delta);
    if (a.kind == AdapterKind::kDora) {
      // Column-normalized direction of W + s*A*B, rescaled by the learned magnitude.
      Tensor composed = add(weight.value, scale(matmul(a.down.value, a.up.value), a.scaling()));
      Tensor norms = sqrt(sum_rows(mul(composed, composed)));
      y = mul_row(y, div(a.magnitude->value, norms));
    }
  }
  if (bias) y = add_row(y, bias->value);
  return y;
}

double Linear::flops(std::size_t rows) const {
  const double n = static_cast<double>(rows);
  const double in = static_cast<double>(fan_in()), out = static_cast<double>(fan_out());
  double f = 2.0 * n * in * out;
  if (adapter) {
    const double r = static_cast<double>(adapter->rank);
    f += 2.0 * n * (in * r + r * out);
    if (adapter->kind == AdapterKind::kDora) f += 2.0 * in * r * out;
  }
  return f;
}

void Linear::visit(ModuleVisitor& v) {
  v.linear(*this);
  v.param(weight);
  if (bias) v.param(*bias);
  if (adapter) {
    v.param(adapter->down);
    v.param(adapter->up);
    if (adapter->magnitude) v.param(*adapter->magnitude);
  }
}

LayerNorm::LayerNorm(const std::string& name, std::size_t dim)
    : gain{name + ".gain", Tensor::full({dim}, 1.0, true), true},
      bias{name + ".bias", Tensor::zeros({dim}, true), true} {}

MultiHeadAttention::MultiHeadAttention(const std::string& name, std::size_t d_model, std::size_t n_heads_in, Rng& rng)
    : n_heads(n_heads_in) {
  if (n_heads == 0 || d_model % n_heads != 0) {
    throw Error(ErrorCode::kConfig, name + ": d_model " + std::to_string(d_model) + " not divisible by " +
                                        std::to_string(n_heads) + " heads");
  }
  const double std_in = 1.0 / std::sqrt(static_cast<double>(d_model));
  wq = Linear(name + ".wq", d_model, d_model, false, true, rng, std_in);
  wk = Linear(name + ".wk", d_model, d_model, false, true, rng, std_in);
  wv = Linear(name + ".wv", d_model, d_model, false, true, rng, std_in);
  wo = Linear(name + ".wo", d_model, d_model, false, true, rng, std_in);
}

Tensor MultiHeadAttention::forward(const Tensor& queries, const Tensor& keys_values, const Mask* mask,
                                   EmptyRowPolicy empty_rows, const ForwardContext& ctx) const {
  Tensor q = wq.forward(queries, ctx);
  Tensor k = wk.forward(keys_values, ctx);
  Tensor v = wv.forward(keys_values, ctx);
  const std::size_t d = q.dim(1), dh = d / n_heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Tensor> heads;
  heads.reserve(n_heads);
  for (std::size_t h = 0; h < n_heads; ++h) {
    Tensor qh = n_heads == 1 ? q : slice_cols(q, h * dh, (h + 1) * dh);
    Tensor kh = n_heads == 1 ? k : slice_cols(k, h * dh, (h + 1) * dh);
    Tensor vh = n_heads == 1 ? v : slice_cols(v, h * dh, (h + 1) * dh);
    Tensor scores = scale(matmul(qh, transpose(kh)), inv_sqrt);
    Tensor probs = softmax_last(scores, mask, empty_rows);
    heads.push_back(matmul(probs, vh));
  }
  Tensor merged = n_heads == 1 ? heads[0] : concat_cols(heads);
  return wo.forward(merged, ctx);
}

double MultiHeadAttention::flops(std::size_t n_queries, std::size_t n_keys) const {
  const double d = static_cast<double>(wq.fan_out());
  // Scores and the probability-weighted sum are each 2 * Tq * Tk * d.
  return wq.flops(n_queries) + wk.flops(n_keys) + wv.flops(n_keys) + wo.flops(n_queries) +
         4.0 * static_cast<double>(n_queries) * static_cast<double>(n_keys) * d;
}

void MultiHeadAttention::visit(ModuleVisitor& v) {
  wq.visit(v);
  wk.visit(v);
  wv.visit(v);
  wo.visit(v);
}

Mlp::Mlp(const std::string& name, std::size_t d_in, std::size_t d_hidden, std::size_t d_out, bool adaptable, Rng& rng)
    : fc1(name + ".fc1", d_in, d_hidden, true, adaptable, rng, 1.0 / std::sqrt(static_cast<double>(d_in))),
      fc2(name + ".fc2", d_hidden, d_out, true, adaptable, rng, 1.0 / std::sqrt(static_cast<double>(d_hidden))) {}

Tensor Mlp::forward(const Tensor& x, const ForwardContext& ctx) const {
  return fc2.forward(gelu(fc1.forward(x, ctx)), ctx);
}

void Mlp::visit(ModuleVisitor& v) {
  fc1.visit(v);
  fc2.visit(v);
}

TransformerBlock::TransformerBlock(const std::string& name, std::size_t d_model, std::size_t n_heads,
                                   std::size_t mlp_ratio, Rng& rng)
    : ln_attn(name + ".ln_attn", d_model),
      attn(name + ".attn", d_model, n_heads, rng),
      ln_mlp(name + ".ln_mlp", d_model),
      mlp(name + ".mlp", d_model, mlp_ratio * d_model, d_model, true, rng) {}

Tensor TransformerBlock::forward(const Tensor& x, const Mask* mask, EmptyRowPolicy empty_rows,
                                 const ForwardContext& ctx) const {
  Tensor normed = ln_attn.forward(x);
  Tensor h = add(x, attn.forward(normed, normed, mask, empty_rows, ctx));
  return add(h, mlp.forward(ln_mlp.forward(h), ctx));
}

void TransformerBlock::visit(ModuleVisitor& v) {
  ln_attn.visit(v);
  attn.visit(v);
  ln_mlp.visit(v);
  mlp.visit(v);
}

std::size_t attention_param_count(std::size_t d_model) { return 4 * d_model * d_model; }

std::size_t mlp_param_count(std::size_t d_in, std::size_t d_hidden, std::size_t d_out) {
  return d_in * d_hidden + d_hidden + d_hidden * d_out + d_out;
}

std::size_t block_param_count(std::size_t d_model, std::size_t mlp_ratio) {
  return 2 * d_model + attention_param_count(d_model) + 2 * d_model +
         mlp_param_count(d_model, mlp_ratio * d_model, d_model);
}

}  // namespace vlm

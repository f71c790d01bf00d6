#include "vlm/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "vlm/error.hpp"

namespace vlm {

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw Error(ErrorCode::kShape, std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                                       shape_str(b.shape()) + " differ");
  }
}

void require_rank2(const Tensor& x, const char* op) {
  if (x.rank() != 2) {
    throw Error(ErrorCode::kShape, std::string(op) + ": expected a 2-D tensor, got " + shape_str(x.shape()));
  }
}

std::size_t last_dim(const Tensor& x) { return x.shape().back(); }

template <typename Forward, typename Deriv>
Tensor unary(const Tensor& x, Forward f, Deriv df) {
  auto in = x.data();
  std::vector<double> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = f(in[i]);
  return make_result(x.shape(), std::move(out), {x},
                     [df](const detail::Node& self, std::span<const double> g,
                          std::span<std::vector<double>*> gin) {
                       const auto& xin = self.inputs[0]->data;
                       auto& gx = *gin[0];
                       for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * df(xin[i], self.data[i]);
                     });
}

// C[m, n] += A[m, k] * B[k, n]
void gemm_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// dA[m, k] += dC[m, n] * B[k, n]^T
void gemm_nt_acc(const double* dc, const double* b, double* da, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* grow = dc + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double* brow = b + p * n;
      double acc = 0.0;
      for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
      da[i * k + p] += acc;
    }
  }
}

// dB[k, n] += A[m, k]^T * dC[m, n]
void gemm_tn_acc(const double* a, const double* dc, double* db, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* grow = dc + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      double* drow = db + p * n;
      for (std::size_t j = 0; j < n; ++j) drow[j] += av * grow[j];
    }
  }
}

}  // namespace

Mask Mask::all(Shape shape, bool value) {
  Mask m;
  m.bits.assign(numel_of(shape), value ? 1 : 0);
  m.shape = std::move(shape);
  return m;
}

Mask Mask::causal(std::size_t n) {
  Mask m;
  m.shape = {n, n};
  m.bits.assign(n * n, 0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j <= i; ++j) m.bits[i * n + j] = 1;
  return m;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() < 2) {
    throw Error(ErrorCode::kShape, "matmul: operands must be at least 2-D, got " + shape_str(a.shape()) +
                                       " and " + shape_str(b.shape()));
  }
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  const std::size_t m = sa[sa.size() - 2], k = sa.back();
  const std::size_t kb = sb[sb.size() - 2], n = sb.back();
  Shape lead_a(sa.begin(), sa.end() - 2), lead_b(sb.begin(), sb.end() - 2);
  if (k != kb || !(lead_a == lead_b || lead_a.empty() || lead_b.empty())) {
    throw Error(ErrorCode::kShape, "matmul: incompatible shapes " + shape_str(sa) + " and " + shape_str(sb));
  }
  const Shape& lead = lead_a.empty() ? lead_b : lead_a;
  const std::size_t batch = numel_of(lead);
  const std::size_t stride_a = lead_a.empty() ? 0 : m * k;
  const std::size_t stride_b = lead_b.empty() ? 0 : k * n;

  Shape out_shape = lead;
  out_shape.push_back(m);
  out_shape.push_back(n);
  std::vector<double> out(batch * m * n, 0.0);
  auto ad = a.data(), bd = b.data();
  for (std::size_t t = 0; t < batch; ++t)
    gemm_acc(ad.data() + t * stride_a, bd.data() + t * stride_b, out.data() + t * m * n, m, k, n);

  return make_result(std::move(out_shape), std::move(out), {a, b},
                     [=](const detail::Node& self, std::span<const double> g,
                         std::span<std::vector<double>*> gin) {
                       const auto& av = self.inputs[0]->data;
                       const auto& bv = self.inputs[1]->data;
                       for (std::size_t t = 0; t < batch; ++t) {
                         const double* gt = g.data() + t * m * n;
                         if (gin[0]) gemm_nt_acc(gt, bv.data() + t * stride_b, gin[0]->data() + t * stride_a, m, k, n);
                         if (gin[1]) gemm_tn_acc(av.data() + t * stride_a, gt, gin[1]->data() + t * stride_b, m, k, n);
                       }
                     });
}

Tensor transpose(const Tensor& x) {
  if (x.rank() < 2) throw Error(ErrorCode::kShape, "transpose: need at least 2-D, got " + shape_str(x.shape()));
  Shape s = x.shape();
  const std::size_t r = s[s.size() - 2], c = s.back();
  const std::size_t batch = x.numel() / (r * c);
  std::swap(s[s.size() - 2], s[s.size() - 1]);
  auto in = x.data();
  std::vector<double> out(in.size());
  for (std::size_t t = 0; t < batch; ++t)
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) out[t * r * c + j * r + i] = in[t * r * c + i * c + j];
  return make_result(std::move(s), std::move(out), {x},
                     [=](const detail::Node&, std::span<const double> g, std::span<std::vector<double>*> gin) {
                       auto& gx = *gin[0];
                       for (std::size_t t = 0; t < batch; ++t)
                         for (std::size_t i = 0; i < r; ++i)
                           for (std::size_t j = 0; j < c; ++j) gx[t * r * c + i * c + j] += g[t * r * c + j * r + i];
                     });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  auto x = a.data(), y = b.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + y[i];
  return make_result(a.shape(), std::move(out), {a, b},
                     [](const detail::Node&, std::span<const double> g, std::span<std::vector<double>*> gin) {
                       for (auto* gi : gin)
                         if (gi)
                           for (std::size_t i = 0; i < g.size(); ++i) (*gi)[i] += g[i];
                     });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  auto x = a.data(), y = b.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] - y[i];
  return make_result(a.shape(), std::move(out), {a, b},
                     [](const detail::Node&, std::span<const double> g, std::span<std::vector<double>*> gin) {
                       if (gin[0])
                         for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i];
                       if (gin[1])
                         for (std::size_t i = 0; i < g.size(); ++i) (*gin[1])[i] -= g[i];
                     });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  auto x = a.data(), y = b.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * y[i];
  return make_result(a.shape(), std::move(out), {a, b},
                     [](const detail::Node& self, std::span<const double> g, std::span<std::vector<double>*> gin) {
                       const auto& xv = self.inputs[0]->data;
                       const auto& yv = self.inputs[1]->data;
                       if (gin[0])
                         for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i] * yv[i];
                       if (gin[1])
                         for (std::size_t i = 0; i < g.size(); ++i) (*gin[1])[i] += g[i] * xv[i];
                     });
}

Tensor div(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "div");
  auto x = a.data(), y = b.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] / y[i];
  return make_result(a.shape(), std::move(out), {a, b},
                     [](const detail::Node& self, std::span<const double> g, std::span<std::vector<double>*> gin) {
                       const auto& yv = self.inputs[1]->data;
                       if (gin[0])
                         for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i] / yv[i];
                       if (gin[1])
                         for (std::size_t i = 0; i < g.size(); ++i) (*gin[1])[i] -= g[i] * self.data[i] / yv[i];
                     });
}

Tensor scale(const Tensor& x, double factor) {
  return unary(
      x, [factor](double v) { return v * factor; }, [factor](double, double) { return factor; });
}

Tensor mul_scalar(const Tensor& x, const Tensor& s) {
  if (s.numel() != 1) throw Error(ErrorCode::kShape, "mul_scalar: factor must have one element, got " + shape_str(s.shape()));
  const double f = s.data()[0];
  auto xv = x.data();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] * f;
  return make_result(x.shape(), std::move(out), {x, s},
                     [](const detail::Node& self, std::span<const double> g, std::span<std::vector<double>*> gin) {
                       const auto& xd = self.inputs[0]->data;
                       const double fs = self.inputs[1]->data[0];
                       if (gin[0])
                         for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i] * fs;
                       if (gin[1]) {
                         double acc = 0.0;
                         for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * xd[i];
                         (*gin[1])[0] += acc;
                       }
                     });
}

Tensor sqrt(const Tensor& x) {
  return unary(
      x, [](double v) { return std::sqrt(v); }, [](double, double y) { return 0.5 / y; });
}

Tensor tanh(const Tensor& x) {
  return unary(
      x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor gelu(const Tensor& x) {
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
  return unary(
      x, [](double v) { return 0.5 * v * (1.0 + std::erf(v * kInvSqrt2)); },
      [inv_sqrt_2pi](double v, double) {
        return 0.5 * (1.0 + std::erf(v * kInvSqrt2)) + v * inv_sqrt_2pi * std::exp(-0.5 * v * v);
      });
}

Tensor add_row(const Tensor& x, const Tensor& row) {
  const std::size_t n = last_dim(x);
  if (row.numel() != n) {
    throw Error(ErrorCode::kShape, "add_row: row " + shape_str(row.shape()) + " vs " + shape_str(x.shape()));
  }
  auto xv = x.data(), rv = row.data();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] + rv[i % n];
  return make_result(x.shape(), std::move(out), {x, row},
                     [n](const detail::Node&, std::span<const double> g, std::span<std::vector<double>*> gin) {
                       if (gin[0])
                         for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i];
                       if (gin[1])
                         for (std::size_t i = 0; i < g.size(); ++i) (*gin[1])[i % n] += g[i];
                     });
}

Tensor mul_row(const Tensor& x, const Tensor& row) {
  const std::size_t n = last_dim(x);
  if (row.numel() != n) {
    throw Error(ErrorCode::kShape, "mul_row: row " + shape_str(row.shape()) + " vs " + shape_str(x.shape()));
  }
  auto xv = x.data(), rv = row.data();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] * rv[i % n];
  return make_result(x.shape(), std::move(out), {x, row},
                     [n](const detail::Node& self, std::span<const double> g, std::span<std::vector<double>*> gin) {
                       const auto& xd = self.inputs[0]->data;
                       const auto& rd = self.inputs[1]->data;
                       if (gin[0])
                         for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i] * rd[i % n];
                       if (gin[1])
                         for (std::size_t i = 0; i < g.size(); ++i) (*gin[1])[i % n] += g[i] * xd[i];
                     });
}

Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  return make_result({1}, {acc}, {x},
                     [](const detail::Node&, std::span<const double> g, std::span<std::vector<double>*> gin) {
                       for (auto& v : *gin[0]) v += g[0];
                     });
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor sum_rows(const Tensor& x) {
  require_rank2(x, "sum_rows");
  const std::size_t r = x.dim(0), c = x.dim(1);
  auto xv = x.data();
  std::vector<double> out(c, 0.0);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j] += xv[i * c + j];
  return make_result({c}, std::move(out), {x},
                     [r, c](const detail::Node&, std::span<const double> g, std::span<std::vector<double>*> gin) {
                       for (std::size_t i = 0; i < r; ++i)
                         for (std::size_t j = 0; j < c; ++j) (*gin[0])[i * c + j] += g[j];
                     });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel_of(shape) != x.numel()) {
    throw Error(ErrorCode::kShape, "reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  return make_result(std::move(shape), std::move(out), {x},
                     [](const detail::Node&, std::span<const double> g, std::span<std::vector<double>*> gin) {
                       for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i];
                     });
}

Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end) {
  require_rank2(x, "slice_rows");
  const std::size_t c = x.dim(1);
  if (begin >= end || end > x.dim(0)) {
    throw Error(ErrorCode::kShape, "slice_rows: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                                       ") invalid for " + shape_str(x.shape()));
  }
  auto xv = x.data();
  std::vector<double> out(xv.begin() + begin * c, xv.begin() + end * c);
  return make_result({end - begin, c}, std::move(out), {x},
                     [begin, c](const detail::Node&, std::span<const double> g, std::span<std::vector<double>*> gin) {
                       for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[begin * c + i] += g[i];
                     });
}

Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t end) {
  require_rank2(x, "slice_cols");
  const std::size_t r = x.dim(0), c = x.dim(1), w = end - begin;
  if (begin >= end || end > c) {
    throw Error(ErrorCode::kShape, "slice_cols: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                                       ") invalid for " + shape_str(x.shape()));
  }
  auto xv = x.data();
  std::vector<double> out(r * w);
  for (std::size_t i = 0; i < r; ++i)
    std::copy_n(xv.begin() + i * c + begin, w, out.begin() + i * w);
  return make_result({r, w}, std::move(out), {x},
                     [=](const detail::Node&, std::span<const double> g, std::span<std::vector<double>*> gin) {
                       for (std::size_t i = 0; i < r; ++i)
                         for (std::size_t j = 0; j < w; ++j) (*gin[0])[i * c + begin + j] += g[i * w + j];
                     });
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw Error(ErrorCode::kShape, "concat_rows: no inputs");
  const std::size_t c = parts[0].dim(1);
  std::size_t rows = 0;
  for (const auto& p : parts) {
    require_rank2(p, "concat_rows");
    if (p.dim(1) != c) throw Error(ErrorCode::kShape, "concat_rows: column mismatch " + shape_str(p.shape()));
    rows += p.dim(0);
  }
  std::vector<double> out;
  out.reserve(rows * c);
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    offsets.push_back(out.size());
    out.insert(out.end(), p.data().begin(), p.data().end());
  }
  return make_result({rows, c}, std::move(out), std::vector<Tensor>(parts.begin(), parts.end()),
                     [offsets](const detail::Node& self, std::span<const double> g,
                               std::span<std::vector<double>*> gin) {
                       for (std::size_t k = 0; k < gin.size(); ++k) {
                         if (!gin[k]) continue;
                         const std::size_t n = self.inputs[k]->data.size();
                         for (std::size_t i = 0; i < n; ++i) (*gin[k])[i] += g[offsets[k] + i];
                       }
                     });
}

Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw Error(ErrorCode::kShape, "concat_cols: no inputs");
  const std::size_t r = parts[0].dim(0);
  std::size_t cols = 0;
  std::vector<std::size_t> widths, col_offsets;
  for (const auto& p : parts) {
    require_rank2(p, "concat_cols");
    if (p.dim(0) != r) throw Error(ErrorCode::kShape, "concat_cols: row mismatch " + shape_str(p.shape()));
    col_offsets.push_back(cols);
    widths.push_back(p.dim(1));
    cols += p.dim(1);
  }
  std::vector<double> out(r * cols);
  for (std::size_t k = 0; k < parts.size(); ++k) {
    auto pv = parts[k].data();
    for (std::size_t i = 0; i < r; ++i)
      std::copy_n(pv.begin() + i * widths[k], widths[k], out.begin() + i * cols + col_offsets[k]);
  }
  return make_result({r, cols}, std::move(out), std::vector<Tensor>(parts.begin(), parts.end()),
                     [=](const detail::Node&, std::span<const double> g, std::span<std::vector<double>*> gin) {
                       for (std::size_t k = 0; k < gin.size(); ++k) {
                         if (!gin[k]) continue;
                         for (std::size_t i = 0; i < r; ++i)
                           for (std::size_t j = 0; j < widths[k]; ++j)
                             (*gin[k])[i * widths[k] + j] += g[i * cols + col_offsets[k] + j];
                       }
                     });
}

Tensor gather_rows(const Tensor& table, std::span<const int> ids) {
  require_rank2(table, "gather_rows");
  const std::size_t rows = table.dim(0), d = table.dim(1);
  if (ids.empty()) throw Error(ErrorCode::kShape, "gather_rows: empty id list");
  std::vector<int> idx(ids.begin(), ids.end());
  auto tv = table.data();
  std::vector<double> out(idx.size() * d);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || static_cast<std::size_t>(idx[i]) >= rows) {
      throw Error(ErrorCode::kInput, "gather_rows: id " + std::to_string(idx[i]) + " out of range [0, " +
                                         std::to_string(rows) + ")");
    }
    std::copy_n(tv.begin() + idx[i] * d, d, out.begin() + i * d);
  }
  return make_result({idx.size(), d}, std::move(out), {table},
                     [idx, d](const detail::Node&, std::span<const double> g, std::span<std::vector<double>*> gin) {
                       for (std::size_t i = 0; i < idx.size(); ++i)
                         for (std::size_t j = 0; j < d; ++j) (*gin[0])[idx[i] * d + j] += g[i * d + j];
                     });
}

Tensor replace_rows(const Tensor& base, std::size_t start, const Tensor& src) {
  require_rank2(base, "replace_rows");
  require_rank2(src, "replace_rows");
  const std::size_t d = base.dim(1), n = src.dim(0);
  if (src.dim(1) != d || start + n > base.dim(0)) {
    throw Error(ErrorCode::kShape, "replace_rows: cannot place " + shape_str(src.shape()) + " at row " +
                                       std::to_string(start) + " of " + shape_str(base.shape()));
  }
  std::vector<double> out(base.data().begin(), base.data().end());
  std::copy(src.data().begin(), src.data().end(), out.begin() + start * d);
  return make_result(base.shape(), std::move(out), {base, src},
                     [=](const detail::Node&, std::span<const double> g, std::span<std::vector<double>*> gin) {
                       const std::size_t lo = start * d, hi = (start + n) * d;
                       if (gin[0])
                         for (std::size_t i = 0; i < g.size(); ++i)
                           if (i < lo || i >= hi) (*gin[0])[i] += g[i];
                       if (gin[1])
                         for (std::size_t i = lo; i < hi; ++i) (*gin[1])[i - lo] += g[i];
                     });
}

Tensor combine_rows(const Tensor& x, const std::vector<std::vector<std::pair<std::size_t, double>>>& taps) {
  require_rank2(x, "combine_rows");
  const std::size_t rows = x.dim(0), d = x.dim(1);
  if (taps.empty()) throw Error(ErrorCode::kShape, "combine_rows: no output rows");
  auto xv = x.data();
  std::vector<double> out(taps.size() * d, 0.0);
  for (std::size_t i = 0; i < taps.size(); ++i) {
    for (auto [src, w] : taps[i]) {
      if (src >= rows) throw Error(ErrorCode::kShape, "combine_rows: source row out of range");
      for (std::size_t j = 0; j < d; ++j) out[i * d + j] += w * xv[src * d + j];
    }
  }
  return make_result({taps.size(), d}, std::move(out), {x},
                     [taps, d](const detail::Node&, std::span<const double> g, std::span<std::vector<double>*> gin) {
                       for (std::size_t i = 0; i < taps.size(); ++i)
                         for (auto [src, w] : taps[i])
                           for (std::size_t j = 0; j < d; ++j) (*gin[0])[src * d + j] += w * g[i * d + j];
                     });
}

Tensor softmax_last(const Tensor& x, const Mask* mask, EmptyRowPolicy empty_rows) {
  const Shape& s = x.shape();
  const std::size_t n = s.back();
  const std::size_t rows = x.numel() / n;
  std::size_t mask_numel = 0;
  if (mask) {
    const auto& ms = mask->shape;
    if (ms.size() > s.size() || !std::equal(ms.rbegin(), ms.rend(), s.rbegin())) {
      throw Error(ErrorCode::kShape, "softmax_last: mask " + shape_str(ms) + " does not broadcast to " + shape_str(s));
    }
    mask_numel = mask->bits.size();
  }
  auto xv = x.data();
  std::vector<double> out(xv.size(), 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t base = r * n;
    const std::size_t mbase = mask ? base % mask_numel : 0;
    auto visible = [&](std::size_t j) { return !mask || mask->bits[mbase + j] != 0; };
    double mx = -std::numeric_limits<double>::infinity();
    bool any = false;
    for (std::size_t j = 0; j < n; ++j) {
      if (visible(j)) {
        mx = std::max(mx, xv[base + j]);
        any = true;
      }
    }
    if (!any) {
      if (empty_rows == EmptyRowPolicy::kZero) continue;
      throw Error(ErrorCode::kDegenerateMask, "softmax_last: row " + std::to_string(r) + " is fully masked");
    }
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (visible(j)) {
        out[base + j] = std::exp(xv[base + j] - mx);
        total += out[base + j];
      }
    }
    for (std::size_t j = 0; j < n; ++j) out[base + j] /= total;
  }
  return make_result(s, std::move(out), {x},
                     [n, rows](const detail::Node& self, std::span<const double> g, std::span<std::vector<double>*> gin) {
                       const auto& y = self.data;
                       for (std::size_t r = 0; r < rows; ++r) {
                         const std::size_t base = r * n;
                         double dot = 0.0;
                         for (std::size_t j = 0; j < n; ++j) dot += y[base + j] * g[base + j];
                         for (std::size_t j = 0; j < n; ++j) (*gin[0])[base + j] += y[base + j] * (g[base + j] - dot);
                       }
                     });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  const std::size_t n = last_dim(x);
  if (gain.numel() != n || bias.numel() != n) {
    throw Error(ErrorCode::kShape, "layer_norm: gain/bias " + shape_str(gain.shape()) + "/" + shape_str(bias.shape()) +
                                       " vs input " + shape_str(x.shape()));
  }
  if (!(eps > 0.0)) throw Error(ErrorCode::kInput, "layer_norm: eps must be positive");
  const std::size_t rows = x.numel() / n;
  auto xv = x.data(), gv = gain.data(), bv = bias.data();
  std::vector<double> out(xv.size());
  std::vector<double> xhat(xv.size());
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv.data() + r * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += row[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(n);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[r * n + j] = (row[j] - mu) * inv_std[r];
      out[r * n + j] = gv[j] * xhat[r * n + j] + bv[j];
    }
  }
  return make_result(x.shape(), std::move(out), {x, gain, bias},
                     [n, rows, xhat = std::move(xhat), inv_std = std::move(inv_std)](
                         const detail::Node& self, std::span<const double> g, std::span<std::vector<double>*> gin) {
                       const auto& gv = self.inputs[1]->data;
                       for (std::size_t r = 0; r < rows; ++r) {
                         const std::size_t base = r * n;
                         if (gin[1])
                           for (std::size_t j = 0; j < n; ++j) (*gin[1])[j] += g[base + j] * xhat[base + j];
                         if (gin[2])
                           for (std::size_t j = 0; j < n; ++j) (*gin[2])[j] += g[base + j];
                         if (gin[0]) {
                           double mean_d = 0.0, mean_dx = 0.0;
                           for (std::size_t j = 0; j < n; ++j) {
                             const double d = g[base + j] * gv[j];
                             mean_d += d;
                             mean_dx += d * xhat[base + j];
                           }
                           mean_d /= static_cast<double>(n);
                           mean_dx /= static_cast<double>(n);
                           for (std::size_t j = 0; j < n; ++j) {
                             const double d = g[base + j] * gv[j];
                             (*gin[0])[base + j] += inv_std[r] * (d - mean_d - xhat[base + j] * mean_dx);
                           }
                         }
                       }
                     });
}

Tensor cross_entropy_masked(const Tensor& logits, std::span<const int> targets,
                            std::span<const std::uint8_t> loss_mask) {
  require_rank2(logits, "cross_entropy_masked");
  const std::size_t t_len = logits.dim(0), vocab = logits.dim(1);
  if (targets.size() != t_len || loss_mask.size() != t_len) {
    throw Error(ErrorCode::kShape, "cross_entropy_masked: " + std::to_string(targets.size()) + " targets and " +
                                       std::to_string(loss_mask.size()) + " mask entries for logits " +
                                       shape_str(logits.shape()));
  }
  std::size_t count = 0;
  for (std::size_t t = 0; t < t_len; ++t) {
    if (targets[t] < 0 || static_cast<std::size_t>(targets[t]) >= vocab) {
      throw Error(ErrorCode::kInput, "cross_entropy_masked: target " + std::to_string(targets[t]) + " out of range");
    }
    if (loss_mask[t]) ++count;
  }
  if (count == 0) throw Error(ErrorCode::kEmptyLoss, "cross_entropy_masked: loss mask selects no positions");

  auto lv = logits.data();
  std::vector<double> probs(t_len * vocab, 0.0);
  double total = 0.0;
  for (std::size_t t = 0; t < t_len; ++t) {
    if (!loss_mask[t]) continue;
    const double* row = lv.data() + t * vocab;
    const double mx = *std::max_element(row, row + vocab);
    double z = 0.0;
    for (std::size_t j = 0; j < vocab; ++j) z += std::exp(row[j] - mx);
    const double lse = mx + std::log(z);
    total += lse - row[targets[t]];
    for (std::size_t j = 0; j < vocab; ++j) probs[t * vocab + j] = std::exp(row[j] - lse);
  }
  const double inv_count = 1.0 / static_cast<double>(count);
  std::vector<int> tgt(targets.begin(), targets.end());
  std::vector<std::uint8_t> msk(loss_mask.begin(), loss_mask.end());
  return make_result({1}, {total * inv_count}, {logits},
                     [=, probs = std::move(probs)](const detail::Node&, std::span<const double> g,
                                                   std::span<std::vector<double>*> gin) {
                       const double s = g[0] * inv_count;
                       for (std::size_t t = 0; t < t_len; ++t) {
                         if (!msk[t]) continue;
                         for (std::size_t j = 0; j < vocab; ++j) (*gin[0])[t * vocab + j] += s * probs[t * vocab + j];
                         (*gin[0])[t * vocab + tgt[t]] -= s;
                       }
                     });
}

}  // namespace vlm

#include "parshare/graph.hpp"

#include <algorithm>
#include <cmath>

#include "parshare/errors.hpp"

namespace parshare {

namespace {

template <typename T>
void check_finite(std::span<const T> values, const char* op) {
  for (auto v : values) {
    if (!std::isfinite(v)) throw NonFiniteError(std::string("non-finite value produced by ") + op);
  }
}

// c[m x n] += a[m x k] * b[k x n]
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    const T* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      if (av == T(0)) continue;
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[k x n] += a[m x k]^T * b[m x n]
template <typename T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    const T* brow = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      if (av == T(0)) continue;
      T* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[m x n] += a[m x k] * b[n x k]^T
template <typename T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n,
             std::vector<T>& scratch) {
  scratch.resize(k * n);
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t p = 0; p < k; ++p) scratch[p * n + j] = b[j * k + p];
  }
  gemm_nn(a, scratch.data(), c, m, k, n);
}

}  // namespace

template <typename T>
Graph<T>::Graph(GraphOptions options) : options_(options), rng_(options.seed) {}

template <typename T>
Tensor<T> Graph<T>::make_output(Shape shape, std::vector<T> values,
                                std::initializer_list<const Tensor<T>*> inputs) {
  bool needs_grad = false;
  for (const auto* in : inputs) needs_grad = needs_grad || in->requires_grad();
  return Tensor<T>(std::move(shape), std::move(values), needs_grad && options_.record);
}

template <typename T>
void Graph<T>::record(const char* op, const Tensor<T>& output, std::function<void()> rule) {
  if (!output.requires_grad()) return;
  tape_.push_back(Node{op, output.storage(), std::move(rule)});
}

template <typename T>
double Graph<T>::next_uniform() {
  return static_cast<double>(rng_() >> 11) * 0x1.0p-53;
}

template <typename T>
Tensor<T> Graph<T>::matmul(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  const bool ok_rank = (sa.size() == 2 && sb.size() == 2) ||
                       (sa.size() == 3 && sb.size() == 3 && sa[0] == sb[0]);
  if (!ok_rank) {
    throw DimensionError("matmul rank mismatch: " + shape_string(sa) + " and " + shape_string(sb));
  }
  const std::size_t batch = sa.size() == 3 ? sa[0] : 1;
  const std::size_t m = sa[sa.size() - 2];
  const std::size_t k = sa.back();
  const std::size_t kb = transpose_b ? sb.back() : sb[sb.size() - 2];
  const std::size_t n = transpose_b ? sb[sb.size() - 2] : sb.back();
  if (k != kb) {
    throw DimensionError("matmul inner dimension mismatch: " + shape_string(sa) + " and " +
                         shape_string(sb) + (transpose_b ? " (transposed)" : ""));
  }
  Shape out_shape = sa.size() == 3 ? Shape{batch, m, n} : Shape{m, n};
  std::vector<T> out(batch * m * n, T(0));
  std::vector<T> scratch;
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  for (std::size_t s = 0; s < batch; ++s) {
    if (transpose_b) {
      gemm_nt(pa + s * m * k, pb + s * n * k, out.data() + s * m * n, m, k, n, scratch);
    } else {
      gemm_nn(pa + s * m * k, pb + s * k * n, out.data() + s * m * n, m, k, n);
    }
  }
  check_finite<T>(out, "matmul");
  auto result = make_output(std::move(out_shape), std::move(out), {&a, &b});
  auto as = a.storage(), bs = b.storage(), cs = result.storage();
  record("matmul", result, [as, bs, cs, batch, m, k, n, transpose_b] {
    std::vector<T> scratch;
    const T* dc = cs->grad.data();
    for (std::size_t s = 0; s < batch; ++s) {
      const T* dcs = dc + s * m * n;
      const T* av = as->value.data() + s * m * k;
      const T* bv = bs->value.data() + s * n * k;
      if (as->requires_grad) {
        T* da = as->grad_buffer().data() + s * m * k;
        if (transpose_b) {
          gemm_nn(dcs, bv, da, m, n, k);
        } else {
          gemm_nt(dcs, bv, da, m, n, k, scratch);
        }
      }
      if (bs->requires_grad) {
        T* db = bs->grad_buffer().data() + s * n * k;
        if (transpose_b) {
          gemm_tn(dcs, av, db, m, n, k);
        } else {
          gemm_tn(av, dcs, db, m, k, n);
        }
      }
    }
  });
  return result;
}

template <typename T>
Tensor<T> Graph<T>::add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("add shape mismatch: " + shape_string(a.shape()) + " and " +
                         shape_string(b.shape()));
  }
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  check_finite<T>(out, "add");
  auto result = make_output(a.shape(), std::move(out), {&a, &b});
  auto as = a.storage(), bs = b.storage(), cs = result.storage();
  record("add", result, [as, bs, cs] {
    for (auto* in : {as.get(), bs.get()}) {
      if (!in->requires_grad) continue;
      auto& g = in->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += cs->grad[i];
    }
  });
  return result;
}

template <typename T>
Tensor<T> Graph<T>::add_row(const Tensor<T>& a, const Tensor<T>& bias) {
  const std::size_t cols = a.cols();
  if (bias.size() != cols) {
    throw DimensionError("add_row bias " + shape_string(bias.shape()) + " does not match " +
                         shape_string(a.shape()));
  }
  std::vector<T> out(a.data().begin(), a.data().end());
  const T* pb = bias.data().data();
  for (std::size_t r = 0; r < a.rows(); ++r) {
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] += pb[c];
  }
  check_finite<T>(out, "add_row");
  auto result = make_output(a.shape(), std::move(out), {&a, &bias});
  auto as = a.storage(), bs = bias.storage(), cs = result.storage();
  record("add_row", result, [as, bs, cs, cols] {
    const auto& dc = cs->grad;
    if (as->requires_grad) {
      auto& g = as->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += dc[i];
    }
    if (bs->requires_grad) {
      auto& g = bs->grad_buffer();
      for (std::size_t r = 0; r < dc.size() / cols; ++r) {
        for (std::size_t c = 0; c < cols; ++c) g[c] += dc[r * cols + c];
      }
    }
  });
  return result;
}

template <typename T>
Tensor<T> Graph<T>::add_constant(const Tensor<T>& a, const Tensor<T>& constant) {
  if (a.shape() != constant.shape()) {
    throw DimensionError("add_constant shape mismatch: " + shape_string(a.shape()) + " and " +
                         shape_string(constant.shape()));
  }
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + constant[i];
  check_finite<T>(out, "add_constant");
  auto result = make_output(a.shape(), std::move(out), {&a});
  auto as = a.storage(), cs = result.storage();
  record("add_constant", result, [as, cs] {
    auto& g = as->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += cs->grad[i];
  });
  return result;
}

template <typename T>
Tensor<T> Graph<T>::scale(const Tensor<T>& a, T factor) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * factor;
  check_finite<T>(out, "scale");
  auto result = make_output(a.shape(), std::move(out), {&a});
  auto as = a.storage(), cs = result.storage();
  record("scale", result, [as, cs, factor] {
    auto& g = as->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += cs->grad[i] * factor;
  });
  return result;
}

template <typename T>
Tensor<T> Graph<T>::relu(const Tensor<T>& x) {
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] > T(0) ? x[i] : T(0);
  auto result = make_output(x.shape(), std::move(out), {&x});
  auto xs = x.storage(), cs = result.storage();
  record("relu", result, [xs, cs] {
    auto& g = xs->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (xs->value[i] > T(0)) g[i] += cs->grad[i];
    }
  });
  return result;
}

template <typename T>
Tensor<T> Graph<T>::softmax_rows(const Tensor<T>& x) {
  const std::size_t cols = x.cols();
  const std::size_t rows = x.rows();
  std::vector<T> out(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x.data().data() + r * cols;
    T* o = out.data() + r * cols;
    T peak = -std::numeric_limits<T>::infinity();
    for (std::size_t c = 0; c < cols; ++c) peak = std::max(peak, in[c]);
    if (!std::isfinite(peak)) {
      if (peak == -std::numeric_limits<T>::infinity()) {
        throw DegenerateRowError("softmax row " + std::to_string(r) + " is entirely masked");
      }
      throw NonFiniteError("softmax input contains non-finite values");
    }
    T total = T(0);
    for (std::size_t c = 0; c < cols; ++c) {
      if (std::isnan(in[c])) throw NonFiniteError("softmax input contains NaN");
      o[c] = in[c] == -std::numeric_limits<T>::infinity() ? T(0) : std::exp(in[c] - peak);
      total += o[c];
    }
    for (std::size_t c = 0; c < cols; ++c) o[c] /= total;
  }
  auto result = make_output(x.shape(), std::move(out), {&x});
  auto xs = x.storage(), cs = result.storage();
  record("softmax_rows", result, [xs, cs, rows, cols] {
    auto& g = xs->grad_buffer();
    const auto& y = cs->value;
    const auto& dy = cs->grad;
    for (std::size_t r = 0; r < rows; ++r) {
      const std::size_t base = r * cols;
      T dot = T(0);
      for (std::size_t c = 0; c < cols; ++c) dot += dy[base + c] * y[base + c];
      for (std::size_t c = 0; c < cols; ++c) g[base + c] += y[base + c] * (dy[base + c] - dot);
    }
  });
  return result;
}

template <typename T>
Tensor<T> Graph<T>::layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                               T eps) {
  const std::size_t d = x.cols();
  if (d < 2) throw DimensionError("layer_norm needs at least 2 features, got " + shape_string(x.shape()));
  if (gain.size() != d || bias.size() != d) {
    throw DimensionError("layer_norm parameters " + shape_string(gain.shape()) + "/" +
                         shape_string(bias.shape()) + " do not match " + shape_string(x.shape()));
  }
  if (!(eps > T(0))) throw ConfigError("layer_norm eps must be positive");
  const std::size_t rows = x.rows();
  std::vector<T> out(x.size());
  std::vector<T> normalized(x.size());
  std::vector<T> inv_std(rows);
  const T* pg = gain.data().data();
  const T* pb = bias.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x.data().data() + r * d;
    T mean = T(0);
    for (std::size_t c = 0; c < d; ++c) mean += in[c];
    mean /= T(d);
    T var = T(0);
    for (std::size_t c = 0; c < d; ++c) var += (in[c] - mean) * (in[c] - mean);
    var /= T(d);
    const T inv = T(1) / std::sqrt(var + eps);
    inv_std[r] = inv;
    for (std::size_t c = 0; c < d; ++c) {
      const T xhat = (in[c] - mean) * inv;
      normalized[r * d + c] = xhat;
      out[r * d + c] = xhat * pg[c] + pb[c];
    }
  }
  check_finite<T>(out, "layer_norm");
  auto result = make_output(x.shape(), std::move(out), {&x, &gain, &bias});
  auto xs = x.storage(), gs = gain.storage(), bs = bias.storage(), cs = result.storage();
  record("layer_norm", result,
         [xs, gs, bs, cs, rows, d, normalized = std::move(normalized), inv_std = std::move(inv_std)] {
           const auto& dy = cs->grad;
           if (gs->requires_grad) {
             auto& gg = gs->grad_buffer();
             for (std::size_t r = 0; r < rows; ++r) {
               for (std::size_t c = 0; c < d; ++c) gg[c] += dy[r * d + c] * normalized[r * d + c];
             }
           }
           if (bs->requires_grad) {
             auto& gb = bs->grad_buffer();
             for (std::size_t r = 0; r < rows; ++r) {
               for (std::size_t c = 0; c < d; ++c) gb[c] += dy[r * d + c];
             }
           }
           if (xs->requires_grad) {
             auto& gx = xs->grad_buffer();
             const auto& gain_v = gs->value;
             for (std::size_t r = 0; r < rows; ++r) {
               T mean_dxhat = T(0);
               T mean_dxhat_xhat = T(0);
               for (std::size_t c = 0; c < d; ++c) {
                 const T dxhat = dy[r * d + c] * gain_v[c];
                 mean_dxhat += dxhat;
                 mean_dxhat_xhat += dxhat * normalized[r * d + c];
               }
               mean_dxhat /= T(d);
               mean_dxhat_xhat /= T(d);
               for (std::size_t c = 0; c < d; ++c) {
                 const T dxhat = dy[r * d + c] * gain_v[c];
                 gx[r * d + c] +=
                     inv_std[r] * (dxhat - mean_dxhat - normalized[r * d + c] * mean_dxhat_xhat);
               }
             }
           }
         });
  return result;
}

template <typename T>
Tensor<T> Graph<T>::dropout(const Tensor<T>& x, double p) {
  if (!(p >= 0.0 && p < 1.0)) throw ConfigError("dropout probability must be in [0, 1), got " + std::to_string(p));
  if (!options_.training || p == 0.0) {
    // Identity; keep a node so the op still appears on the tape.
    std::vector<T> out(x.data().begin(), x.data().end());
    auto result = make_output(x.shape(), std::move(out), {&x});
    auto xs = x.storage(), cs = result.storage();
    record("dropout", result, [xs, cs] {
      auto& g = xs->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += cs->grad[i];
    });
    return result;
  }
  stochastic_ = true;
  const T keep_scale = T(1.0 / (1.0 - p));
  std::vector<T> mask(x.size());
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    mask[i] = next_uniform() < p ? T(0) : keep_scale;
    out[i] = x[i] * mask[i];
  }
  auto result = make_output(x.shape(), std::move(out), {&x});
  auto xs = x.storage(), cs = result.storage();
  record("dropout", result, [xs, cs, mask = std::move(mask)] {
    auto& g = xs->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += cs->grad[i] * mask[i];
  });
  return result;
}

template <typename T>
Tensor<T> Graph<T>::gather_rows(const Tensor<T>& table, std::span<const int> ids) {
  if (table.rank() != 2) throw DimensionError("gather_rows expects a matrix, got " + shape_string(table.shape()));
  const std::size_t rows = table.shape()[0];
  const std::size_t cols = table.cols();
  if (ids.empty()) throw DimensionError("gather_rows with no ids");
  std::vector<T> out(ids.size() * cols);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= rows) {
      throw VocabularyError("id " + std::to_string(ids[i]) + " outside table of " + std::to_string(rows) + " rows");
    }
    std::copy_n(table.data().data() + ids[i] * cols, cols, out.data() + i * cols);
  }
  auto result = make_output({ids.size(), cols}, std::move(out), {&table});
  auto ts = table.storage(), cs = result.storage();
  record("gather_rows", result, [ts, cs, cols, index = std::vector<int>(ids.begin(), ids.end())] {
    auto& g = ts->grad_buffer();
    for (std::size_t i = 0; i < index.size(); ++i) {
      T* dst = g.data() + index[i] * cols;
      const T* src = cs->grad.data() + i * cols;
      for (std::size_t c = 0; c < cols; ++c) dst[c] += src[c];
    }
  });
  return result;
}

template <typename T>
Tensor<T> Graph<T>::split_heads(const Tensor<T>& x, std::size_t batch, std::size_t heads) {
  const std::size_t width_all = x.cols();
  if (x.rank() != 2 || batch == 0 || heads == 0 || x.rows() % batch != 0 || width_all % heads != 0) {
    throw DimensionError("split_heads cannot split " + shape_string(x.shape()) + " into " +
                         std::to_string(batch) + " sequences x " + std::to_string(heads) + " heads");
  }
  const std::size_t time = x.rows() / batch;
  const std::size_t width = width_all / heads;
  std::vector<T> out(x.size());
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t t = 0; t < time; ++t)
        std::copy_n(x.data().data() + (b * time + t) * width_all + h * width, width,
                    out.data() + ((b * heads + h) * time + t) * width);
  auto result = make_output({batch * heads, time, width}, std::move(out), {&x});
  auto xs = x.storage(), cs = result.storage();
  record("split_heads", result, [xs, cs, batch, heads, time, width, width_all] {
    auto& g = xs->grad_buffer();
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t t = 0; t < time; ++t) {
          T* dst = g.data() + (b * time + t) * width_all + h * width;
          const T* src = cs->grad.data() + ((b * heads + h) * time + t) * width;
          for (std::size_t c = 0; c < width; ++c) dst[c] += src[c];
        }
  });
  return result;
}

template <typename T>
Tensor<T> Graph<T>::merge_heads(const Tensor<T>& x, std::size_t batch, std::size_t heads) {
  if (x.rank() != 3 || batch == 0 || heads == 0 || x.shape()[0] != batch * heads) {
    throw DimensionError("merge_heads cannot merge " + shape_string(x.shape()) + " as " +
                         std::to_string(batch) + " sequences x " + std::to_string(heads) + " heads");
  }
  const std::size_t time = x.shape()[1];
  const std::size_t width = x.shape()[2];
  const std::size_t width_all = width * heads;
  std::vector<T> out(x.size());
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t t = 0; t < time; ++t)
        std::copy_n(x.data().data() + ((b * heads + h) * time + t) * width, width,
                    out.data() + (b * time + t) * width_all + h * width);
  auto result = make_output({batch * time, width_all}, std::move(out), {&x});
  auto xs = x.storage(), cs = result.storage();
  record("merge_heads", result, [xs, cs, batch, heads, time, width, width_all] {
    auto& g = xs->grad_buffer();
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t t = 0; t < time; ++t) {
          T* dst = g.data() + ((b * heads + h) * time + t) * width;
          const T* src = cs->grad.data() + (b * time + t) * width_all + h * width;
          for (std::size_t c = 0; c < width; ++c) dst[c] += src[c];
        }
  });
  return result;
}

template <typename T>
Tensor<T> Graph<T>::masked_fill(const Tensor<T>& scores, const Tensor<T>& mask, std::size_t heads) {
  const auto& ss = scores.shape();
  const auto& ms = mask.shape();
  if (ss.size() != 3 || ms.size() != 3 || heads == 0 || ss[0] != ms[0] * heads || ss[1] != ms[1] ||
      ss[2] != ms[2]) {
    throw DimensionError("mask " + shape_string(ms) + " does not fit scores " + shape_string(ss) +
                         " with " + std::to_string(heads) + " heads");
  }
  const std::size_t block = ss[1] * ss[2];
  std::vector<T> out(scores.size());
  for (std::size_t s = 0; s < ss[0]; ++s) {
    const T* m = mask.data().data() + (s / heads) * block;
    const T* in = scores.data().data() + s * block;
    T* o = out.data() + s * block;
    for (std::size_t i = 0; i < block; ++i) o[i] = in[i] + m[i];
  }
  auto result = make_output(ss, std::move(out), {&scores});
  auto xs = scores.storage(), cs = result.storage();
  record("masked_fill", result, [xs, cs] {
    auto& g = xs->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += cs->grad[i];
  });
  return result;
}

template <typename T>
Tensor<T> Graph<T>::sum(const Tensor<T>& x) {
  T total = T(0);
  for (auto v : x.data()) total += v;
  auto result = make_output({1}, {total}, {&x});
  auto xs = x.storage(), cs = result.storage();
  record("sum", result, [xs, cs] {
    auto& g = xs->grad_buffer();
    for (auto& v : g) v += cs->grad[0];
  });
  return result;
}

template <typename T>
Tensor<T> Graph<T>::smoothed_cross_entropy(const Tensor<T>& logits, std::span<const int> targets,
                                           T eps, int ignore_id) {
  const std::size_t vocab = logits.cols();
  const std::size_t rows = logits.rows();
  if (targets.size() != rows) {
    throw DimensionError("cross entropy has " + std::to_string(targets.size()) + " targets for " +
                         std::to_string(rows) + " logit rows");
  }
  if (!(eps >= T(0) && eps < T(1))) throw ConfigError("label smoothing must be in [0, 1)");
  std::vector<T> probs(logits.size(), T(0));
  double total = 0.0;
  const T uniform = eps / T(vocab);
  for (std::size_t r = 0; r < rows; ++r) {
    const int target = targets[r];
    if (target == ignore_id) continue;
    if (target < 0 || static_cast<std::size_t>(target) >= vocab) {
      throw VocabularyError("target id " + std::to_string(target) + " outside vocabulary of " +
                            std::to_string(vocab));
    }
    const T* z = logits.data().data() + r * vocab;
    T peak = z[0];
    for (std::size_t c = 1; c < vocab; ++c) peak = std::max(peak, z[c]);
    T denom = T(0);
    for (std::size_t c = 0; c < vocab; ++c) denom += std::exp(z[c] - peak);
    const T log_denom = peak + std::log(denom);
    T sum_logp = T(0);
    for (std::size_t c = 0; c < vocab; ++c) {
      const T logp = z[c] - log_denom;
      probs[r * vocab + c] = std::exp(logp);
      sum_logp += logp;
    }
    const T gold = z[target] - log_denom;
    total -= static_cast<double>((T(1) - eps) * gold + uniform * sum_logp);
  }
  if (!std::isfinite(total)) throw NonFiniteError("non-finite cross entropy");
  auto result = make_output({1}, {static_cast<T>(total)}, {&logits});
  auto ls = logits.storage(), cs = result.storage();
  record("smoothed_cross_entropy", result,
         [ls, cs, rows, vocab, eps, uniform, ignore_id, probs = std::move(probs),
          targets = std::vector<int>(targets.begin(), targets.end())] {
           auto& g = ls->grad_buffer();
           const T up = cs->grad[0];
           for (std::size_t r = 0; r < rows; ++r) {
             if (targets[r] == ignore_id) continue;
             for (std::size_t c = 0; c < vocab; ++c) {
               T q = uniform;
               if (static_cast<int>(c) == targets[r]) q += T(1) - eps;
               g[r * vocab + c] += up * (probs[r * vocab + c] - q);
             }
           }
         });
  return result;
}

template <typename T>
void Graph<T>::backward(const Tensor<T>& loss) {
  if (loss.size() != 1) throw DimensionError("backward needs a scalar loss, got " + shape_string(loss.shape()));
  if (!loss.requires_grad()) throw ConfigError("backward on a loss that does not depend on any parameter");
  for (auto& node : tape_) node.output->grad.assign(node.output->value.size(), T(0));
  loss.storage()->grad_buffer()[0] += T(1);
  for (auto it = tape_.rbegin(); it != tape_.rend(); ++it) it->backward();
}

template class Graph<float>;
template class Graph<double>;

double GradCheckReport::worst() const {
  double w = 0.0;
  for (auto e : max_relative_error) w = std::max(w, e);
  return w;
}

GradCheckReport grad_check(const LossBuilder& loss_fn, std::vector<Tensor<double>> parameters, double h,
                           GraphOptions options) {
  if (!(h > 0.0)) throw ConfigError("grad_check step must be positive");
  options.record = true;
  std::vector<std::vector<double>> saved;
  for (auto& p : parameters) {
    if (!p.requires_grad()) throw ConfigError("grad_check parameter does not require a gradient");
    saved.emplace_back(p.grad().begin(), p.grad().end());
    p.zero_grad();
  }
  {
    Graph<double> graph(options);
    auto loss = loss_fn(graph);
    if (graph.stochastic()) throw ConfigError("grad_check rejects graphs with active dropout");
    graph.backward(loss);
  }
  auto evaluate = [&] {
    GraphOptions eval = options;
    eval.record = false;
    Graph<double> graph(eval);
    return loss_fn(graph).item();
  };
  GradCheckReport report;
  for (std::size_t pi = 0; pi < parameters.size(); ++pi) {
    auto& p = parameters[pi];
    std::vector<double> analytic(p.size(), 0.0);
    if (p.has_grad()) analytic.assign(p.grad().begin(), p.grad().end());
    auto values = p.mutable_data();
    double worst = 0.0;
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double original = values[i];
      values[i] = original + h;
      const double up = evaluate();
      values[i] = original - h;
      const double down = evaluate();
      values[i] = original;
      const double numeric = (up - down) / (2.0 * h);
      const double denom = std::max({std::abs(numeric), std::abs(analytic[i]), 1e-8});
      worst = std::max(worst, std::abs(numeric - analytic[i]) / denom);
    }
    report.max_relative_error.push_back(worst);
  }
  for (std::size_t pi = 0; pi < parameters.size(); ++pi) {
    auto g = parameters[pi].mutable_grad();
    std::copy(saved[pi].begin(), saved[pi].end(), g.begin());
    if (saved[pi].empty()) std::fill(g.begin(), g.end(), 0.0);
  }
  return report;
}

double grad_check(const LossBuilder& loss_fn, Tensor<double> parameter, double h, GraphOptions options) {
  std::vector<Tensor<double>> params{parameter};
  return grad_check(loss_fn, params, h, options).worst();
}

}  // namespace parshare

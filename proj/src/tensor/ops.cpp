#include "hypermoe/ops.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "hypermoe/errors.hpp"

namespace hypermoe {

namespace {

thread_local std::map<std::string, double> g_faults;

void require_rank2(const Tensor& t, const char* op) {
  if (!t.defined() || t.rank() != 2) {
    throw DimensionError(std::string(op) + ": expected a 2-D tensor, got " +
                         (t.defined() ? shape_to_string(t.shape())
                                      : std::string("undefined")));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.defined() || !b.defined() || a.shape() != b.shape()) {
    throw DimensionError(
        std::string(op) + ": shape mismatch " +
        (a.defined() ? shape_to_string(a.shape()) : std::string("undefined")) +
        " vs " +
        (b.defined() ? shape_to_string(b.shape()) : std::string("undefined")));
  }
}

detail::Node& parent(detail::Node& self, std::size_t i) {
  return *self.parents[i];
}

// c[m x n] += a[m x k] * b[k x n]
void gemm_acc(const double* a, const double* b, double* c, std::size_t m,
              std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = a[i * k + p];
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
}

double stable_softplus(double x) {
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// Row-wise softmax of an [rows x n] buffer in place.
void softmax_rows(std::vector<double>& v, std::size_t n) {
  for (std::size_t r = 0; r < v.size() / n; ++r) {
    double* row = v.data() + r * n;
    const double top = *std::max_element(row, row + n);
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      row[j] = std::exp(row[j] - top);
      total += row[j];
    }
    for (std::size_t j = 0; j < n; ++j) row[j] /= total;
  }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw DimensionError("matmul: inner extents differ for " +
                         shape_to_string(a.shape()) + " and " +
                         shape_to_string(b.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  gemm_acc(a.data().data(), b.data().data(), out.data(), m, k, n);
  return Tensor::make_result({m, n}, std::move(out), {a, b},
                             [m, k, n](detail::Node& self) {
    detail::Node& pa = parent(self, 0);
    detail::Node& pb = parent(self, 1);
    const double* g = self.grad.data();
    if (pa.requires_grad) {
      // dA = G * B^T
      auto& ga = pa.grad_buffer();
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          double acc = 0.0;
          for (std::size_t j = 0; j < n; ++j) {
            acc += g[i * n + j] * pb.data[p * n + j];
          }
          ga[i * k + p] += acc;
        }
      }
    }
    if (pb.requires_grad) {
      // dB = A^T * G
      auto& gb = pb.grad_buffer();
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = pa.data[i * k + p];
          for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += aip * g[i * n + j];
        }
      }
    }
  });
}

Tensor transpose(const Tensor& a) {
  require_rank2(a, "transpose");
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(m * n);
  const auto in = a.data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = in[i * n + j];
  }
  return Tensor::make_result({n, m}, std::move(out), {a},
                             [m, n](detail::Node& self) {
    auto& ga = parent(self, 0).grad_buffer();
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += self.grad[j * m + i];
    }
  });
}

Tensor elementwise(Elementwise kind, const Tensor& a, const Tensor& b) {
  switch (kind) {
    case Elementwise::kAdd: return add(a, b);
    case Elementwise::kSub: return sub(a, b);
    case Elementwise::kMul: return mul(a, b);
    case Elementwise::kRelu: return relu(a);
    case Elementwise::kSoftplus: return softplus(a);
  }
  throw ContractError("unknown elementwise kind");
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.data().begin(), a.data().end());
  const auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bd[i];
  return Tensor::make_result(a.shape(), std::move(out), {a, b},
                             [](detail::Node& self) {
    for (std::size_t p = 0; p < 2; ++p) {
      detail::Node& in = parent(self, p);
      if (!in.requires_grad) continue;
      auto& g = in.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.data().begin(), a.data().end());
  const auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bd[i];
  return Tensor::make_result(a.shape(), std::move(out), {a, b},
                             [](detail::Node& self) {
    detail::Node& pa = parent(self, 0);
    detail::Node& pb = parent(self, 1);
    if (pa.requires_grad) {
      auto& g = pa.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (pb.requires_grad) {
      auto& g = pb.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.data().begin(), a.data().end());
  const auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bd[i];
  return Tensor::make_result(a.shape(), std::move(out), {a, b},
                             [](detail::Node& self) {
    detail::Node& pa = parent(self, 0);
    detail::Node& pb = parent(self, 1);
    if (pa.requires_grad) {
      auto& g = pa.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb.data[i];
    }
    if (pb.requires_grad) {
      auto& g = pb.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa.data[i];
    }
  });
}

Tensor relu(const Tensor& a) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (double& v : out) v = v > 0.0 ? v : 0.0;
  return Tensor::make_result(a.shape(), std::move(out), {a},
                             [](detail::Node& self) {
    detail::Node& in = parent(self, 0);
    auto& g = in.grad_buffer();
    // Subgradient 0 at exactly 0.
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (in.data[i] > 0.0) g[i] += self.grad[i];
    }
  });
}

Tensor softplus(const Tensor& a) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (double& v : out) v = stable_softplus(v);
  return Tensor::make_result(a.shape(), std::move(out), {a},
                             [](detail::Node& self) {
    detail::Node& in = parent(self, 0);
    auto& g = in.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      g[i] += self.grad[i] * sigmoid(in.data[i]);
    }
  });
}

Tensor scale(const Tensor& a, double factor) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (double& v : out) v *= factor;
  return Tensor::make_result(a.shape(), std::move(out), {a},
                             [factor](detail::Node& self) {
    auto& g = parent(self, 0).grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * factor;
  });
}

Tensor add_row(const Tensor& a, const Tensor& row) {
  require_rank2(a, "add_row");
  const std::size_t m = a.rows(), n = a.cols();
  if (row.size() != n) {
    throw DimensionError("add_row: row " + shape_to_string(row.shape()) +
                         " does not match " + shape_to_string(a.shape()));
  }
  std::vector<double> out(a.data().begin(), a.data().end());
  const auto rd = row.data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += rd[j];
  }
  return Tensor::make_result(a.shape(), std::move(out), {a, row},
                             [m, n](detail::Node& self) {
    detail::Node& pa = parent(self, 0);
    detail::Node& pr = parent(self, 1);
    if (pa.requires_grad) {
      auto& g = pa.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (pr.requires_grad) {
      auto& g = pr.grad_buffer();
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[i * n + j];
      }
    }
  });
}

Tensor mul_col(const Tensor& a, const Tensor& col) {
  require_rank2(a, "mul_col");
  const std::size_t m = a.rows(), n = a.cols();
  if (col.size() != m) {
    throw DimensionError("mul_col: column " + shape_to_string(col.shape()) +
                         " does not match " + shape_to_string(a.shape()));
  }
  std::vector<double> out(a.data().begin(), a.data().end());
  const auto cd = col.data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] *= cd[i];
  }
  return Tensor::make_result(a.shape(), std::move(out), {a, col},
                             [m, n](detail::Node& self) {
    detail::Node& pa = parent(self, 0);
    detail::Node& pc = parent(self, 1);
    if (pa.requires_grad) {
      auto& g = pa.grad_buffer();
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
          g[i * n + j] += self.grad[i * n + j] * pc.data[i];
        }
      }
    }
    if (pc.requires_grad) {
      auto& g = pc.grad_buffer();
      for (std::size_t i = 0; i < m; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
          acc += self.grad[i * n + j] * pa.data[i * n + j];
        }
        g[i] += acc;
      }
    }
  });
}

Tensor softmax(const Tensor& x) {
  if (!x.defined() || x.rank() == 0) {
    throw DimensionError("softmax: empty input");
  }
  const std::size_t n = x.shape().back();
  std::vector<double> out(x.data().begin(), x.data().end());
  softmax_rows(out, n);
  return Tensor::make_result(x.shape(), out, {x}, [n](detail::Node& self) {
    auto& g = parent(self, 0).grad_buffer();
    const auto& y = self.data;
    for (std::size_t r = 0; r < y.size() / n; ++r) {
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += self.grad[r * n + j] * y[r * n + j];
      for (std::size_t j = 0; j < n; ++j) {
        g[r * n + j] += y[r * n + j] * (self.grad[r * n + j] - dot);
      }
    }
  });
}

Tensor sum(const Tensor& a) {
  double total = 0.0;
  for (double v : a.data()) total += v;
  return Tensor::make_result({1}, {total}, {a}, [](detail::Node& self) {
    auto& g = parent(self, 0).grad_buffer();
    for (double& v : g) v += self.grad[0];
  });
}

Tensor mean(const Tensor& a) {
  double total = 0.0;
  for (double v : a.data()) total += v;
  const double count = static_cast<double>(a.size());
  return Tensor::make_result({1}, {total / count}, {a},
                             [count](detail::Node& self) {
    auto& g = parent(self, 0).grad_buffer();
    for (double& v : g) v += self.grad[0] / count;
  });
}

Tensor mean_rows(const Tensor& a) {
  require_rank2(a, "mean_rows");
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(n, 0.0);
  const auto d = a.data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[j] += d[i * n + j];
  }
  for (double& v : out) v /= static_cast<double>(m);
  return Tensor::make_result({1, n}, std::move(out), {a},
                             [m, n](detail::Node& self) {
    auto& g = parent(self, 0).grad_buffer();
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        g[i * n + j] += self.grad[j] / static_cast<double>(m);
      }
    }
  });
}

Tensor mse(const Tensor& prediction, const Tensor& target) {
  require_same_shape(prediction, target, "mse");
  const auto p = prediction.data();
  const auto t = target.data();
  double total = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) total += (p[i] - t[i]) * (p[i] - t[i]);
  const double count = static_cast<double>(p.size());
  return Tensor::make_result({1}, {total / count}, {prediction, target},
                             [count](detail::Node& self) {
    detail::Node& pp = parent(self, 0);
    detail::Node& pt = parent(self, 1);
    const double g0 = self.grad[0] * 2.0 / count;
    for (std::size_t i = 0; i < pp.data.size(); ++i) {
      const double diff = pp.data[i] - pt.data[i];
      if (pp.requires_grad) pp.grad_buffer()[i] += g0 * diff;
      if (pt.requires_grad) pt.grad_buffer()[i] -= g0 * diff;
    }
  });
}

Tensor softmax_cross_entropy(const Tensor& logits,
                             std::span<const std::size_t> targets) {
  require_rank2(logits, "softmax_cross_entropy");
  const std::size_t m = logits.rows(), n = logits.cols();
  if (targets.size() != m) {
    throw DimensionError("softmax_cross_entropy: " + std::to_string(m) +
                         " rows but " + std::to_string(targets.size()) +
                         " targets");
  }
  for (std::size_t target : targets) {
    if (target >= n) {
      throw IndexError("softmax_cross_entropy: target " +
                       std::to_string(target) + " out of range for " +
                       std::to_string(n) + " classes");
    }
  }
  std::vector<double> probs(logits.data().begin(), logits.data().end());
  softmax_rows(probs, n);
  double total = 0.0;
  const auto z = logits.data();
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = z.data() + i * n;
    const double top = *std::max_element(row, row + n);
    double acc = 0.0;
    for (std::size_t j = 0; j < n; ++j) acc += std::exp(row[j] - top);
    total += top + std::log(acc) - row[targets[i]];
  }
  std::vector<std::size_t> kept(targets.begin(), targets.end());
  return Tensor::make_result(
      {1}, {total / static_cast<double>(m)}, {logits},
      [m, n, probs = std::move(probs), kept = std::move(kept)](detail::Node& self) {
        auto& g = parent(self, 0).grad_buffer();
        const double g0 = self.grad[0] / static_cast<double>(m);
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t j = 0; j < n; ++j) {
            const double onehot = j == kept[i] ? 1.0 : 0.0;
            g[i * n + j] += g0 * (probs[i * n + j] - onehot);
          }
        }
      });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_volume(shape) != a.size()) {
    throw DimensionError("reshape: cannot view " + shape_to_string(a.shape()) +
                         " as " + shape_to_string(shape));
  }
  return Tensor::make_result(std::move(shape),
                             {a.data().begin(), a.data().end()}, {a},
                             [](detail::Node& self) {
    auto& g = parent(self, 0).grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor concat_cols(const Tensor& a, const Tensor& b) {
  require_rank2(a, "concat_cols");
  require_rank2(b, "concat_cols");
  if (a.rows() != b.rows()) {
    throw DimensionError("concat_cols: row counts differ for " +
                         shape_to_string(a.shape()) + " and " +
                         shape_to_string(b.shape()));
  }
  const std::size_t m = a.rows(), na = a.cols(), nb = b.cols();
  std::vector<double> out;
  out.reserve(m * (na + nb));
  const auto ad = a.data();
  const auto bd = b.data();
  for (std::size_t i = 0; i < m; ++i) {
    out.insert(out.end(), ad.begin() + i * na, ad.begin() + (i + 1) * na);
    out.insert(out.end(), bd.begin() + i * nb, bd.begin() + (i + 1) * nb);
  }
  return Tensor::make_result({m, na + nb}, std::move(out), {a, b},
                             [m, na, nb](detail::Node& self) {
    detail::Node& pa = parent(self, 0);
    detail::Node& pb = parent(self, 1);
    const std::size_t w = na + nb;
    for (std::size_t i = 0; i < m; ++i) {
      if (pa.requires_grad) {
        auto& g = pa.grad_buffer();
        for (std::size_t j = 0; j < na; ++j) g[i * na + j] += self.grad[i * w + j];
      }
      if (pb.requires_grad) {
        auto& g = pb.grad_buffer();
        for (std::size_t j = 0; j < nb; ++j) {
          g[i * nb + j] += self.grad[i * w + na + j];
        }
      }
    }
  });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: nothing to stack");
  const std::size_t n = parts.front().cols();
  std::vector<double> out;
  std::vector<std::size_t> offsets;
  std::size_t rows = 0;
  for (const Tensor& part : parts) {
    require_rank2(part, "concat_rows");
    if (part.cols() != n) {
      throw DimensionError("concat_rows: column counts differ (" +
                           shape_to_string(parts.front().shape()) + " vs " +
                           shape_to_string(part.shape()) + ")");
    }
    offsets.push_back(out.size());
    out.insert(out.end(), part.data().begin(), part.data().end());
    rows += part.rows();
  }
  return Tensor::make_result({rows, n}, std::move(out), parts,
                             [offsets = std::move(offsets)](detail::Node& self) {
    for (std::size_t p = 0; p < self.parents.size(); ++p) {
      detail::Node& in = parent(self, p);
      if (!in.requires_grad) continue;
      auto& g = in.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[offsets[p] + i];
    }
  });
}

Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end) {
  require_rank2(a, "slice_rows");
  if (begin >= end || end > a.rows()) {
    throw IndexError("slice_rows: [" + std::to_string(begin) + ", " +
                     std::to_string(end) + ") out of range for " +
                     shape_to_string(a.shape()));
  }
  const std::size_t n = a.cols();
  std::vector<double> out(a.data().begin() + begin * n,
                          a.data().begin() + end * n);
  return Tensor::make_result({end - begin, n}, std::move(out), {a},
                             [begin, n](detail::Node& self) {
    auto& g = parent(self, 0).grad_buffer();
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      g[begin * n + i] += self.grad[i];
    }
  });
}

Tensor gather_rows(const Tensor& a, std::span<const std::size_t> indices) {
  require_rank2(a, "gather_rows");
  if (indices.empty()) throw DimensionError("gather_rows: no indices");
  const std::size_t n = a.cols();
  std::vector<double> out;
  out.reserve(indices.size() * n);
  const auto d = a.data();
  for (std::size_t r : indices) {
    if (r >= a.rows()) {
      throw IndexError("gather_rows: row " + std::to_string(r) +
                       " out of range for " + shape_to_string(a.shape()));
    }
    out.insert(out.end(), d.begin() + r * n, d.begin() + (r + 1) * n);
  }
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  const std::size_t count = idx.size();
  return Tensor::make_result({count, n}, std::move(out), {a},
                             [n, idx = std::move(idx)](detail::Node& self) {
    auto& g = parent(self, 0).grad_buffer();
    for (std::size_t i = 0; i < idx.size(); ++i) {
      for (std::size_t j = 0; j < n; ++j) g[idx[i] * n + j] += self.grad[i * n + j];
    }
  });
}

Tensor scatter_add_rows(const Tensor& src,
                        std::span<const std::size_t> indices,
                        std::size_t n_rows) {
  require_rank2(src, "scatter_add_rows");
  if (indices.size() != src.rows()) {
    throw DimensionError("scatter_add_rows: " + std::to_string(src.rows()) +
                         " rows but " + std::to_string(indices.size()) +
                         " indices");
  }
  const std::size_t n = src.cols();
  std::vector<double> out(n_rows * n, 0.0);
  const auto d = src.data();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= n_rows) {
      throw IndexError("scatter_add_rows: row " + std::to_string(indices[i]) +
                       " out of range for " + std::to_string(n_rows) + " rows");
    }
    for (std::size_t j = 0; j < n; ++j) out[indices[i] * n + j] += d[i * n + j];
  }
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  return Tensor::make_result({n_rows, n}, std::move(out), {src},
                             [n, idx = std::move(idx)](detail::Node& self) {
    auto& g = parent(self, 0).grad_buffer();
    for (std::size_t i = 0; i < idx.size(); ++i) {
      for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[idx[i] * n + j];
    }
  });
}

Tensor pick(const Tensor& a, std::span<const std::size_t> rows,
            std::span<const std::size_t> cols) {
  require_rank2(a, "pick");
  if (rows.size() != cols.size() || rows.empty()) {
    throw DimensionError("pick: need equally many row and column indices");
  }
  const std::size_t n = a.cols();
  std::vector<std::size_t> flat(rows.size());
  std::vector<double> out(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= a.rows() || cols[i] >= n) {
      throw IndexError("pick: (" + std::to_string(rows[i]) + ", " +
                       std::to_string(cols[i]) + ") out of range for " +
                       shape_to_string(a.shape()));
    }
    flat[i] = rows[i] * n + cols[i];
    out[i] = a.data()[flat[i]];
  }
  return Tensor::make_result({rows.size(), 1}, std::move(out), {a},
                             [flat = std::move(flat)](detail::Node& self) {
    auto& g = parent(self, 0).grad_buffer();
    for (std::size_t i = 0; i < flat.size(); ++i) g[flat[i]] += self.grad[i];
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps) {
  require_rank2(x, "layer_norm");
  const std::size_t m = x.rows(), n = x.cols();
  if (gain.size() != n || bias.size() != n) {
    throw DimensionError("layer_norm: gain/bias must have " +
                         std::to_string(n) + " entries");
  }
  std::vector<double> xhat(m * n);
  std::vector<double> inv_std(m);
  std::vector<double> out(m * n);
  const auto xd = x.data();
  const auto gd = gain.data();
  const auto bd = bias.data();
  for (std::size_t i = 0; i < m; ++i) {
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += xd[i * n + j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      var += (xd[i * n + j] - mu) * (xd[i * n + j] - mu);
    }
    var /= static_cast<double>(n);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[i * n + j] = (xd[i * n + j] - mu) * inv_std[i];
      out[i * n + j] = xhat[i * n + j] * gd[j] + bd[j];
    }
  }
  return Tensor::make_result(
      {m, n}, std::move(out), {x, gain, bias},
      [m, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](detail::Node& self) {
        detail::Node& px = parent(self, 0);
        detail::Node& pg = parent(self, 1);
        detail::Node& pb = parent(self, 2);
        const double fault = debug::backward_fault_scale("layer_norm");
        const auto& g = self.grad;
        if (pg.requires_grad) {
          auto& gg = pg.grad_buffer();
          for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < n; ++j) gg[j] += g[i * n + j] * xhat[i * n + j];
          }
        }
        if (pb.requires_grad) {
          auto& gb = pb.grad_buffer();
          for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
          }
        }
        if (!px.requires_grad) return;
        auto& gx = px.grad_buffer();
        std::vector<double> dxhat(n);
        for (std::size_t i = 0; i < m; ++i) {
          double mean_d = 0.0, mean_dx = 0.0;
          for (std::size_t j = 0; j < n; ++j) {
            dxhat[j] = g[i * n + j] * pg.data[j];
            mean_d += dxhat[j];
            mean_dx += dxhat[j] * xhat[i * n + j];
          }
          mean_d /= static_cast<double>(n);
          mean_dx /= static_cast<double>(n);
          for (std::size_t j = 0; j < n; ++j) {
            gx[i * n + j] += fault * inv_std[i] *
                             (dxhat[j] - mean_d - xhat[i * n + j] * mean_dx);
          }
        }
      });
}

Tensor batched_vecmat(const Tensor& x, const Tensor& w, std::size_t n) {
  require_rank2(x, "batched_vecmat");
  require_rank2(w, "batched_vecmat");
  const std::size_t t = x.rows(), m = x.cols();
  if (w.rows() != t || w.cols() != m * n) {
    throw DimensionError("batched_vecmat: weights " +
                         shape_to_string(w.shape()) + " do not match input " +
                         shape_to_string(x.shape()) + " with output width " +
                         std::to_string(n));
  }
  std::vector<double> out(t * n, 0.0);
  const auto xd = x.data();
  const auto wd = w.data();
  for (std::size_t i = 0; i < t; ++i) {
    gemm_acc(xd.data() + i * m, wd.data() + i * m * n, out.data() + i * n, 1,
             m, n);
  }
  return Tensor::make_result({t, n}, std::move(out), {x, w},
                             [t, m, n](detail::Node& self) {
    detail::Node& px = parent(self, 0);
    detail::Node& pw = parent(self, 1);
    const double fault = debug::backward_fault_scale("batched_vecmat");
    for (std::size_t i = 0; i < t; ++i) {
      const double* g = self.grad.data() + i * n;
      const double* wi = pw.data.data() + i * m * n;
      if (px.requires_grad) {
        auto& gx = px.grad_buffer();
        for (std::size_t r = 0; r < m; ++r) {
          double acc = 0.0;
          for (std::size_t c = 0; c < n; ++c) acc += g[c] * wi[r * n + c];
          gx[i * m + r] += acc;
        }
      }
      if (pw.requires_grad) {
        auto& gw = pw.grad_buffer();
        for (std::size_t r = 0; r < m; ++r) {
          const double xr = px.data[i * m + r];
          for (std::size_t c = 0; c < n; ++c) {
            gw[i * m * n + r * n + c] += fault * xr * g[c];
          }
        }
      }
    }
  });
}

Tensor sequence_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                          std::size_t seq_len) {
  require_same_shape(q, k, "sequence_attention");
  require_same_shape(q, v, "sequence_attention");
  require_rank2(q, "sequence_attention");
  const std::size_t t = q.rows(), d = q.cols();
  if (seq_len == 0 || t % seq_len != 0) {
    throw DimensionError("sequence_attention: " + std::to_string(t) +
                         " rows are not a multiple of sequence length " +
                         std::to_string(seq_len));
  }
  const std::size_t s = seq_len;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(d));
  const auto qd = q.data(), kd = k.data(), vd = v.data();
  std::vector<double> attn(t * s);  // per sequence an s x s block
  std::vector<double> out(t * d, 0.0);
  for (std::size_t base = 0; base < t; base += s) {
    double* a = attn.data() + base * s;
    for (std::size_t i = 0; i < s; ++i) {
      for (std::size_t j = 0; j < s; ++j) {
        double dot = 0.0;
        for (std::size_t c = 0; c < d; ++c) {
          dot += qd[(base + i) * d + c] * kd[(base + j) * d + c];
        }
        a[i * s + j] = dot * inv_sqrt;
      }
    }
    std::vector<double> block(a, a + s * s);
    softmax_rows(block, s);
    std::copy(block.begin(), block.end(), a);
    gemm_acc(a, vd.data() + base * d, out.data() + base * d, s, s, d);
  }
  return Tensor::make_result(
      {t, d}, std::move(out), {q, k, v},
      [t, d, s, inv_sqrt, attn = std::move(attn)](detail::Node& self) {
        detail::Node& pq = parent(self, 0);
        detail::Node& pk = parent(self, 1);
        detail::Node& pv = parent(self, 2);
        std::vector<double> da(s * s), ds(s * s);
        for (std::size_t base = 0; base < t; base += s) {
          const double* a = attn.data() + base * s;
          const double* g = self.grad.data() + base * d;
          if (pv.requires_grad) {
            auto& gv = pv.grad_buffer();
            for (std::size_t i = 0; i < s; ++i) {
              for (std::size_t j = 0; j < s; ++j) {
                for (std::size_t c = 0; c < d; ++c) {
                  gv[(base + j) * d + c] += a[i * s + j] * g[i * d + c];
                }
              }
            }
          }
          if (!pq.requires_grad && !pk.requires_grad) continue;
          for (std::size_t i = 0; i < s; ++i) {
            for (std::size_t j = 0; j < s; ++j) {
              double acc = 0.0;
              for (std::size_t c = 0; c < d; ++c) {
                acc += g[i * d + c] * pv.data[(base + j) * d + c];
              }
              da[i * s + j] = acc;
            }
            double dot = 0.0;
            for (std::size_t j = 0; j < s; ++j) dot += da[i * s + j] * a[i * s + j];
            for (std::size_t j = 0; j < s; ++j) {
              ds[i * s + j] = a[i * s + j] * (da[i * s + j] - dot) * inv_sqrt;
            }
          }
          for (std::size_t i = 0; i < s; ++i) {
            for (std::size_t j = 0; j < s; ++j) {
              const double w = ds[i * s + j];
              for (std::size_t c = 0; c < d; ++c) {
                if (pq.requires_grad) {
                  pq.grad_buffer()[(base + i) * d + c] += w * pk.data[(base + j) * d + c];
                }
                if (pk.requires_grad) {
                  pk.grad_buffer()[(base + j) * d + c] += w * pq.data[(base + i) * d + c];
                }
              }
            }
          }
        }
      });
}

namespace debug {

ScopedBackwardFault::ScopedBackwardFault(std::string op, double scale) {
  g_faults[std::move(op)] = scale;
}

ScopedBackwardFault::~ScopedBackwardFault() { g_faults.clear(); }

double backward_fault_scale(const char* op) {
  if (g_faults.empty()) return 1.0;
  auto it = g_faults.find(op);
  return it == g_faults.end() ? 1.0 : it->second;
}

}  // namespace debug

}  // namespace hypermoe

#include "ood/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <sstream>

#include "ood/errors.hpp"

namespace ood {

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "×" : "") << shape[i];
  os << ']';
  return os.str();
}

namespace {

std::size_t shape_size(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
}

void require(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

void require_matrix(const Tensor& t, const char* op) {
  require(t.rank() == 2, std::string(op) + " expects a matrix, got " + shape_str(t.shape));
}

void require_same_tape(Var a, Var b) {
  if (a.tape != b.tape) throw ContractError("operands recorded on different tapes");
}

// C[m×n] += A[m×k]·B[k×n]
void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m×k] += G[m×n]·B[k×n]ᵀ, via an explicit Bᵀ so the inner loop is a
// contiguous axpy.
void gemm_nt(const double* g, const double* b, double* c, std::size_t m, std::size_t n,
             std::size_t k) {
  std::vector<double> bt(n * k);
  for (std::size_t p = 0; p < k; ++p)
    for (std::size_t j = 0; j < n; ++j) bt[j * k + p] = b[p * n + j];
  gemm_nn(g, bt.data(), c, m, n, k);
}

// C[k×n] += A[m×k]ᵀ·G[m×n]
void gemm_tn(const double* a, const double* g, double* c, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* grow = g + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      double* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * grow[j];
    }
  }
}

}  // namespace

// ---- Tensor ---------------------------------------------------------------

Tensor::Tensor(Shape s, double fill) : shape(std::move(s)), data(shape_size(shape), fill) {
  for (auto d : shape) require(d > 0, "dimensions must be positive");
}

Tensor::Tensor(Shape s, std::vector<double> values) : shape(std::move(s)), data(std::move(values)) {
  for (auto d : shape) require(d > 0, "dimensions must be positive");
  require(shape_size(shape) == data.size(),
          "shape " + shape_str(shape) + " does not match " + std::to_string(data.size()) +
              " values");
}

std::size_t Tensor::rows() const {
  if (rank() != 2) throw ShapeError("rows() on non-matrix " + shape_str(shape));
  return shape[0];
}

std::size_t Tensor::cols() const {
  if (shape.empty()) throw ShapeError("cols() on rank-0 tensor");
  return shape.back();
}

std::vector<double>& Tensor::ensure_grad() {
  if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  return grad;
}

void Tensor::zero_grad() {
  if (!grad.empty()) std::fill(grad.begin(), grad.end(), 0.0);
}

const Tensor& Var::value() const { return tape->value(id); }

// ---- Tape -----------------------------------------------------------------

Var Tape::leaf(Tensor& t) {
  Node n;
  n.value = &t;
  n.requires_grad = true;
  n.is_leaf = true;
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

Var Tape::constant(Tensor t) {
  Node n;
  n.owned = std::make_unique<Tensor>(std::move(t));
  n.value = n.owned.get();
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

Var Tape::reference(const Tensor& t) {
  Node n;
  // Never written through: nodes without requires_grad skip backward.
  n.value = const_cast<Tensor*>(&t);
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

Var Tape::record(Tensor out, std::initializer_list<Var> inputs, BackwardFn fn) {
  return record(std::move(out), std::span<const Var>(inputs.begin(), inputs.size()),
                std::move(fn));
}

Var Tape::record(Tensor out, std::span<const Var> inputs, BackwardFn fn) {
  Node n;
  n.owned = std::make_unique<Tensor>(std::move(out));
  n.value = n.owned.get();
  for (const Var& v : inputs) {
    if (v.tape != this) throw ContractError("input recorded on a different tape");
    n.requires_grad = n.requires_grad || nodes_[v.id].requires_grad;
  }
  if (n.requires_grad) n.backward = std::move(fn);
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

void Tape::backward(Var loss) {
  if (loss.tape != this) throw ContractError("loss recorded on a different tape");
  if (value(loss.id).size() != 1) {
    throw ContractError("backward needs a scalar loss, got " + shape_str(value(loss.id).shape));
  }
  for (std::size_t i = 0; i <= loss.id; ++i) {
    Node& n = nodes_[i];
    if (!n.requires_grad) continue;
    if (n.is_leaf) {
      n.value->ensure_grad();
    } else {
      n.value->grad.assign(n.value->data.size(), 0.0);
    }
  }
  if (!nodes_[loss.id].requires_grad) return;
  nodes_[loss.id].value->grad[0] += 1.0;
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.requires_grad && n.backward) n.backward(*this, i);
  }
}

// ---- operations -----------------------------------------------------------

Var matmul(Var a, Var b) {
  require_same_tape(a, b);
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  require_matrix(A, "matmul");
  require_matrix(B, "matmul");
  const std::size_t m = A.shape[0], k = A.shape[1], n = B.shape[1];
  require(B.shape[0] == k,
          "matmul inner dimensions " + shape_str(A.shape) + " · " + shape_str(B.shape));
  Tensor out({m, n});
  gemm_nn(A.data.data(), B.data.data(), out.data.data(), m, k, n);
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record(std::move(out), {a, b}, [=](Tape& t, std::size_t self) {
    const double* g = t.grad(self).data();
    if (t.requires_grad(ia)) gemm_nt(g, t.value(ib).data.data(), t.grad(ia).data(), m, n, k);
    if (t.requires_grad(ib)) gemm_tn(t.value(ia).data.data(), g, t.grad(ib).data(), m, k, n);
  });
}

Var transpose(Var a) {
  const Tensor& A = a.value();
  require_matrix(A, "transpose");
  const std::size_t m = A.shape[0], n = A.shape[1];
  Tensor out({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.data[j * m + i] = A.data[i * n + j];
  const std::size_t ia = a.id;
  return a.tape->record(std::move(out), {a}, [=](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    auto& ga = t.grad(ia);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[j * m + i];
  });
}

Var add(Var a, Var b) {
  require_same_tape(a, b);
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  require(A.shape == B.shape, "add " + shape_str(A.shape) + " + " + shape_str(B.shape));
  Tensor out = A;
  out.grad.clear();
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += B.data[i];
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record(std::move(out), {a, b}, [=](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    for (std::size_t id : {ia, ib}) {
      if (!t.requires_grad(id)) continue;
      auto& gi = t.grad(id);
      for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
    }
  });
}

Var add_row_bias(Var x, Var bias) {
  require_same_tape(x, bias);
  const Tensor& X = x.value();
  const Tensor& b = bias.value();
  require_matrix(X, "add_row_bias");
  const std::size_t m = X.shape[0], n = X.shape[1];
  require(b.size() == n, "bias of length " + std::to_string(b.size()) + " for rows of " +
                             std::to_string(n));
  Tensor out = X;
  out.grad.clear();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.data[i * n + j] += b.data[j];
  const std::size_t ix = x.id, ib = bias.id;
  return x.tape->record(std::move(out), {x, bias}, [=](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    if (t.requires_grad(ix)) {
      auto& gx = t.grad(ix);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    }
    if (t.requires_grad(ib)) {
      auto& gb = t.grad(ib);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
    }
  });
}

Var scale(Var x, double factor) {
  Tensor out = x.value();
  out.grad.clear();
  for (double& v : out.data) v *= factor;
  const std::size_t ix = x.id;
  return x.tape->record(std::move(out), {x}, [=](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    auto& gx = t.grad(ix);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += factor * g[i];
  });
}

Var softmax_rows(Var x) {
  const Tensor& X = x.value();
  require(X.rank() >= 1, "softmax_rows on rank-0 tensor");
  const std::size_t n = X.cols();
  const std::size_t m = X.size() / n;
  Tensor out(X.shape);
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = X.data.data() + i * n;
    double* o = out.data.data() + i * n;
    const double mx = *std::max_element(row, row + n);
    double sum = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      o[j] = std::exp(row[j] - mx);
      sum += o[j];
    }
    for (std::size_t j = 0; j < n; ++j) o[j] /= sum;
  }
  const std::size_t ix = x.id;
  return x.tape->record(std::move(out), {x}, [=](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    const auto& y = t.value(self).data;
    auto& gx = t.grad(ix);
    for (std::size_t i = 0; i < m; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += g[i * n + j] * y[i * n + j];
      for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += y[i * n + j] * (g[i * n + j] - dot);
    }
  });
}

Var causal_mask(Var x) {
  const Tensor& X = x.value();
  require_matrix(X, "causal_mask");
  const std::size_t n = X.shape[0];
  require(X.shape[1] == n, "causal_mask expects a square matrix, got " + shape_str(X.shape));
  Tensor out = X;
  out.grad.clear();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      out.data[i * n + j] = -std::numeric_limits<double>::infinity();
  const std::size_t ix = x.id;
  return x.tape->record(std::move(out), {x}, [=](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    auto& gx = t.grad(ix);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j <= i; ++j) gx[i * n + j] += g[i * n + j];
  });
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
  require_same_tape(x, gamma);
  require_same_tape(x, beta);
  if (!(eps > 0.0)) throw ContractError("layer_norm eps must be positive");
  const Tensor& X = x.value();
  require(X.rank() >= 1, "layer_norm on rank-0 tensor");
  const std::size_t n = X.cols();
  require(n >= 2, "layer_norm needs at least 2 features");
  require(gamma.value().size() == n && beta.value().size() == n,
          "layer_norm affine parameters must have length " + std::to_string(n));
  const std::size_t m = X.size() / n;
  const auto& gm = gamma.value().data;
  const auto& bt = beta.value().data;

  Tensor out(X.shape);
  // Normalized activations and inverse deviations, kept for the backward rule.
  auto xhat = std::make_shared<std::vector<double>>(X.size());
  auto inv_std = std::make_shared<std::vector<double>>(m);
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = X.data.data() + i * n;
    double mean = 0.0;
    for (std::size_t j = 0; j < n; ++j) mean += row[j];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<double>(n);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[i] = is;
    for (std::size_t j = 0; j < n; ++j) {
      const double h = (row[j] - mean) * is;
      (*xhat)[i * n + j] = h;
      out.data[i * n + j] = gm[j] * h + bt[j];
    }
  }
  const std::size_t ix = x.id, ig = gamma.id, ib = beta.id;
  return x.tape->record(std::move(out), {x, gamma, beta}, [=](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    const auto& gmv = t.value(ig).data;
    const auto& xh = *xhat;
    if (t.requires_grad(ig)) {
      auto& gg = t.grad(ig);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gg[j] += g[i * n + j] * xh[i * n + j];
    }
    if (t.requires_grad(ib)) {
      auto& gb = t.grad(ib);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
    }
    if (t.requires_grad(ix)) {
      auto& gx = t.grad(ix);
      const double inv_n = 1.0 / static_cast<double>(n);
      for (std::size_t i = 0; i < m; ++i) {
        double sum_d = 0.0, sum_dx = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
          const double d = g[i * n + j] * gmv[j];
          sum_d += d;
          sum_dx += d * xh[i * n + j];
        }
        const double is = (*inv_std)[i];
        for (std::size_t j = 0; j < n; ++j) {
          const double d = g[i * n + j] * gmv[j];
          gx[i * n + j] += is * (d - inv_n * sum_d - xh[i * n + j] * inv_n * sum_dx);
        }
      }
    }
  });
}

namespace {
constexpr double kGeluCoeff = 0.044715;
const double kSqrt2OverPi = std::sqrt(2.0 / std::numbers::pi);
}  // namespace

double gelu_value(double x) {
  return 0.5 * x * (1.0 + std::tanh(kSqrt2OverPi * (x + kGeluCoeff * x * x * x)));
}

double gelu_derivative(double x) {
  const double u = kSqrt2OverPi * (x + kGeluCoeff * x * x * x);
  const double th = std::tanh(u);
  const double du = kSqrt2OverPi * (1.0 + 3.0 * kGeluCoeff * x * x);
  return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du;
}

Var gelu(Var x) {
  Tensor out = x.value();
  out.grad.clear();
  for (double& v : out.data) v = gelu_value(v);
  const std::size_t ix = x.id;
  return x.tape->record(std::move(out), {x}, [=](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    const auto& xv = t.value(ix).data;
    auto& gx = t.grad(ix);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * gelu_derivative(xv[i]);
  });
}

Var slice_rows(Var x, std::size_t start, std::size_t count) {
  const Tensor& X = x.value();
  require_matrix(X, "slice_rows");
  require(count > 0 && start + count <= X.shape[0],
          "row slice [" + std::to_string(start) + ", " + std::to_string(start + count) +
              ") of " + shape_str(X.shape));
  const std::size_t n = X.shape[1];
  Tensor out({count, n});
  std::copy_n(X.data.begin() + static_cast<std::ptrdiff_t>(start * n), count * n,
              out.data.begin());
  const std::size_t ix = x.id;
  return x.tape->record(std::move(out), {x}, [=](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    auto& gx = t.grad(ix);
    for (std::size_t i = 0; i < count * n; ++i) gx[start * n + i] += g[i];
  });
}

Var slice_cols(Var x, std::size_t start, std::size_t count) {
  const Tensor& X = x.value();
  require_matrix(X, "slice_cols");
  const std::size_t m = X.shape[0], n = X.shape[1];
  require(count > 0 && start + count <= n,
          "column slice [" + std::to_string(start) + ", " + std::to_string(start + count) +
              ") of " + shape_str(X.shape));
  Tensor out({m, count});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < count; ++j) out.data[i * count + j] = X.data[i * n + start + j];
  const std::size_t ix = x.id;
  return x.tape->record(std::move(out), {x}, [=](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    auto& gx = t.grad(ix);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < count; ++j) gx[i * n + start + j] += g[i * count + j];
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ContractError("concat_cols of nothing");
  Tape* tape = parts.front().tape;
  const std::size_t m = parts.front().value().rows();
  std::vector<std::size_t> ids, widths;
  std::size_t total = 0;
  for (const Var& p : parts) {
    require_same_tape(parts.front(), p);
    const Tensor& P = p.value();
    require_matrix(P, "concat_cols");
    require(P.shape[0] == m, "concat_cols row mismatch");
    ids.push_back(p.id);
    widths.push_back(P.shape[1]);
    total += P.shape[1];
  }
  Tensor out({m, total});
  std::size_t offset = 0;
  for (const Var& p : parts) {
    const Tensor& P = p.value();
    const std::size_t w = P.shape[1];
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < w; ++j) out.data[i * total + offset + j] = P.data[i * w + j];
    offset += w;
  }
  return tape->record(std::move(out), parts, [=](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    std::size_t off = 0;
    for (std::size_t p = 0; p < ids.size(); ++p) {
      const std::size_t w = widths[p];
      if (t.requires_grad(ids[p])) {
        auto& gp = t.grad(ids[p]);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < w; ++j) gp[i * w + j] += g[i * total + off + j];
      }
      off += w;
    }
  });
}

Var gather(Var x, std::span<const std::size_t> indices) {
  const Tensor& X = x.value();
  require(!indices.empty(), "gather with no indices");
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  Tensor out({idx.size()});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    require(idx[i] < X.size(), "gather index out of range");
    out.data[i] = X.data[idx[i]];
  }
  const std::size_t ix = x.id;
  return x.tape->record(std::move(out), {x}, [=](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    auto& gx = t.grad(ix);
    for (std::size_t i = 0; i < idx.size(); ++i) gx[idx[i]] += g[i];
  });
}

Var mse(Var pred, const Tensor& target) {
  const Tensor& P = pred.value();
  require(P.shape == target.shape,
          "mse " + shape_str(P.shape) + " vs target " + shape_str(target.shape));
  const std::size_t n = P.size();
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = P.data[i] - target.data[i];
    sum += d * d;
  }
  auto tgt = std::make_shared<std::vector<double>>(target.data);
  const std::size_t ip = pred.id;
  return pred.tape->record(Tensor::scalar(sum / static_cast<double>(n)), {pred},
                           [=](Tape& t, std::size_t self) {
                             const double g = t.grad(self)[0];
                             const auto& pv = t.value(ip).data;
                             auto& gp = t.grad(ip);
                             const double c = 2.0 * g / static_cast<double>(n);
                             for (std::size_t i = 0; i < n; ++i) gp[i] += c * (pv[i] - (*tgt)[i]);
                           });
}

Var add_scalars(Var a, Var b) {
  require(a.value().size() == 1 && b.value().size() == 1, "add_scalars on non-scalars");
  return add(a, b);
}

}  // namespace ood

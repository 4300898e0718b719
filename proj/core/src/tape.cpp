#include "dpruner/tape.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "dpruner/errors.hpp"

namespace dpruner {

namespace {

constexpr double kMaskedScore = -1e30;

[[noreturn]] void shape_error(const char* op, const Tensor& a, const Tensor& b) {
  throw ValidationError(std::string(op) + ": incompatible shapes " + shape_string(a.shape()) + " and " +
                        shape_string(b.shape()));
}

void require_rank2(const char* op, const Tensor& a) {
  if (a.rank() != 2) throw ValidationError(std::string(op) + ": expected a matrix, got " + shape_string(a.shape()));
}

// out[n,m] (+)= a[n,k] * b[k,m]
void gemm_nn(const double* a, const double* b, double* out, std::size_t n, std::size_t k, std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    double* row = out + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      const double* brow = b + p * m;
      for (std::size_t j = 0; j < m; ++j) row[j] += av * brow[j];
    }
  }
}

// out[n,m] (+)= a[n,k] * b[m,k]^T, via an explicit transpose so the inner
// loop is the same contiguous axpy as gemm_nn.
void gemm_nt(const double* a, const double* b, double* out, std::size_t n, std::size_t k, std::size_t m) {
  std::vector<double> bt(k * m);
  for (std::size_t j = 0; j < m; ++j) {
    for (std::size_t p = 0; p < k; ++p) bt[p * m + j] = b[j * k + p];
  }
  gemm_nn(a, bt.data(), out, n, k, m);
}

// out[k,m] (+)= a[n,k]^T * b[n,m]
void gemm_tn(const double* a, const double* b, double* out, std::size_t n, std::size_t k, std::size_t m) {
  for (std::size_t p = 0; p < n; ++p) {
    const double* brow = b + p * m;
    for (std::size_t i = 0; i < k; ++i) {
      const double av = a[p * k + i];
      double* row = out + i * m;
      for (std::size_t j = 0; j < m; ++j) row[j] += av * brow[j];
    }
  }
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{"constant", std::move(value), {}, {}, false, {}});
  return Var{nodes_.size() - 1};
}

Var Tape::weight(std::string name, Tensor value) {
  nodes_.push_back(Node{"weight", std::move(value), {}, {}, true, std::move(name)});
  return Var{nodes_.size() - 1};
}

void Tape::clear() {
  nodes_.clear();
  trace_.clear();
}

Var Tape::record(std::string_view op, Tensor value, std::vector<std::size_t> inputs, Backprop backprop) {
  bool needs = false;
  for (auto i : inputs) needs = needs || nodes_[i].requires_grad;
  nodes_.push_back(Node{op, std::move(value), std::move(inputs), std::move(backprop), needs, {}});
  return Var{nodes_.size() - 1};
}

Tensor& Tape::grad_slot(std::vector<Tensor>& grads, const Tape& tape, std::size_t node) {
  if (grads[node].empty()) grads[node] = Tensor(tape.nodes_[node].value.shape());
  return grads[node];
}

Gradients Tape::backward(Var loss) {
  if (nodes_.empty()) throw ValidationError("backward: tape is empty");
  if (loss.index >= nodes_.size()) throw ValidationError("backward: loss is not on this tape");
  if (nodes_[loss.index].value.size() != 1) {
    throw ValidationError("backward: loss must be a scalar, got " + shape_string(nodes_[loss.index].value.shape()));
  }

  std::vector<Tensor> grads(nodes_.size());
  grads[loss.index] = Tensor(nodes_[loss.index].value.shape(), 1.0);
  trace_.clear();
  for (std::size_t i = loss.index + 1; i-- > 0;) {
    trace_.push_back(i);
    const Node& node = nodes_[i];
    if (!node.requires_grad || grads[i].empty() || !node.backprop) continue;
    node.backprop(*this, i, grads[i], grads);
  }

  Gradients out;
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    const Node& node = nodes_[i];
    if (node.weight_name.empty()) continue;
    Tensor g = grads[i].empty() ? Tensor(node.value.shape()) : std::move(grads[i]);
    if (auto it = out.find(node.weight_name); it != out.end()) {
      // Same name registered twice: gradients add.
      auto dst = it->second.data();
      for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += g[j];
    } else {
      out.emplace(node.weight_name, std::move(g));
    }
  }
  return out;
}

Var matmul(Tape& t, Var a, Var b) {
  const Tensor& x = t.value(a);
  const Tensor& y = t.value(b);
  require_rank2("matmul", x);
  require_rank2("matmul", y);
  if (x.cols() != y.rows()) shape_error("matmul", x, y);
  const std::size_t n = x.rows(), k = x.cols(), m = y.cols();
  Tensor out({n, m});
  gemm_nn(x.data().data(), y.data().data(), out.data().data(), n, k, m);
  return t.record("matmul", std::move(out), {a.index, b.index},
                  [n, k, m](const Tape& tp, std::size_t self, const Tensor& g, std::vector<Tensor>& grads) {
                    const std::size_t ia = tp.input(self, 0), ib = tp.input(self, 1);
                    const Tensor& av = tp.value(Var{ia});
                    const Tensor& bv = tp.value(Var{ib});
                    if (tp.requires_grad(Var{ia})) {
                      Tensor& ga = Tape::grad_slot(grads, tp, ia);
                      gemm_nt(g.data().data(), bv.data().data(), ga.data().data(), n, m, k);
                    }
                    if (tp.requires_grad(Var{ib})) {
                      Tensor& gb = Tape::grad_slot(grads, tp, ib);
                      gemm_tn(av.data().data(), g.data().data(), gb.data().data(), n, k, m);
                    }
                  });
}

Var matmul_transposed(Tape& t, Var a, Var b) {
  const Tensor& x = t.value(a);
  const Tensor& y = t.value(b);
  require_rank2("matmul_transposed", x);
  require_rank2("matmul_transposed", y);
  if (x.cols() != y.cols()) shape_error("matmul_transposed", x, y);
  const std::size_t n = x.rows(), k = x.cols(), m = y.rows();
  Tensor out({n, m});
  gemm_nt(x.data().data(), y.data().data(), out.data().data(), n, k, m);
  return t.record("matmul_transposed", std::move(out), {a.index, b.index},
                  [n, k, m](const Tape& tp, std::size_t self, const Tensor& g, std::vector<Tensor>& grads) {
                    const std::size_t ia = tp.input(self, 0), ib = tp.input(self, 1);
                    const Tensor& av = tp.value(Var{ia});
                    const Tensor& bv = tp.value(Var{ib});
                    if (tp.requires_grad(Var{ia})) {
                      // dA[n,k] = G[n,m] * B[m,k]
                      Tensor& ga = Tape::grad_slot(grads, tp, ia);
                      gemm_nn(g.data().data(), bv.data().data(), ga.data().data(), n, m, k);
                    }
                    if (tp.requires_grad(Var{ib})) {
                      // dB[m,k] = G[n,m]^T * A[n,k]
                      Tensor& gb = Tape::grad_slot(grads, tp, ib);
                      gemm_tn(g.data().data(), av.data().data(), gb.data().data(), n, m, k);
                    }
                  });
}

Var add(Tape& t, Var a, Var b) {
  const Tensor& x = t.value(a);
  const Tensor& y = t.value(b);
  if (x.shape() != y.shape()) shape_error("add", x, y);
  Tensor out = x;
  auto o = out.data();
  auto yv = y.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += yv[i];
  return t.record("add", std::move(out), {a.index, b.index},
                  [](const Tape& tp, std::size_t self, const Tensor& g, std::vector<Tensor>& grads) {
                    for (std::size_t slot = 0; slot < 2; ++slot) {
                      const std::size_t in = tp.input(self, slot);
                      if (!tp.requires_grad(Var{in})) continue;
                      auto dst = Tape::grad_slot(grads, tp, in).data();
                      auto src = g.data();
                      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
                    }
                  });
}

Var multiply(Tape& t, Var a, Var b) {
  const Tensor& x = t.value(a);
  const Tensor& y = t.value(b);
  if (x.shape() != y.shape()) shape_error("multiply", x, y);
  Tensor out = x;
  auto o = out.data();
  auto yv = y.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] *= yv[i];
  return t.record("multiply", std::move(out), {a.index, b.index},
                  [](const Tape& tp, std::size_t self, const Tensor& g, std::vector<Tensor>& grads) {
                    const std::size_t ia = tp.input(self, 0), ib = tp.input(self, 1);
                    auto gv = g.data();
                    if (tp.requires_grad(Var{ia})) {
                      auto other = tp.value(Var{ib}).data();
                      auto dst = Tape::grad_slot(grads, tp, ia).data();
                      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += gv[i] * other[i];
                    }
                    if (tp.requires_grad(Var{ib})) {
                      auto other = tp.value(Var{ia}).data();
                      auto dst = Tape::grad_slot(grads, tp, ib).data();
                      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += gv[i] * other[i];
                    }
                  });
}

Var scale(Tape& t, Var a, double factor) {
  Tensor out = t.value(a);
  for (double& v : out.data()) v *= factor;
  return t.record("scale", std::move(out), {a.index},
                  [factor](const Tape& tp, std::size_t self, const Tensor& g, std::vector<Tensor>& grads) {
                    const std::size_t in = tp.input(self, 0);
                    auto dst = Tape::grad_slot(grads, tp, in).data();
                    auto gv = g.data();
                    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += factor * gv[i];
                  });
}

Var silu(Tape& t, Var a) {
  Tensor out = t.value(a);
  for (double& v : out.data()) v = v * sigmoid(v);
  return t.record("silu", std::move(out), {a.index},
                  [](const Tape& tp, std::size_t self, const Tensor& g, std::vector<Tensor>& grads) {
                    const std::size_t in = tp.input(self, 0);
                    auto x = tp.value(Var{in}).data();
                    auto dst = Tape::grad_slot(grads, tp, in).data();
                    auto gv = g.data();
                    for (std::size_t i = 0; i < dst.size(); ++i) {
                      const double s = sigmoid(x[i]);
                      dst[i] += gv[i] * s * (1.0 + x[i] * (1.0 - s));
                    }
                  });
}

Var softmax(Tape& t, Var a) {
  const Tensor& x = t.value(a);
  require_rank2("softmax", x);
  const std::size_t n = x.rows(), m = x.cols();
  Tensor out = x;
  for (std::size_t i = 0; i < n; ++i) {
    double* row = out.data().data() + i * m;
    const double mx = *std::max_element(row, row + m);
    double total = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      row[j] = std::exp(row[j] - mx);
      total += row[j];
    }
    for (std::size_t j = 0; j < m; ++j) row[j] /= total;
  }
  return t.record("softmax", std::move(out), {a.index},
                  [n, m](const Tape& tp, std::size_t self, const Tensor& g, std::vector<Tensor>& grads) {
                    const std::size_t in = tp.input(self, 0);
                    const double* y = tp.value(Var{self}).data().data();
                    const double* gv = g.data().data();
                    double* dst = Tape::grad_slot(grads, tp, in).data().data();
                    for (std::size_t i = 0; i < n; ++i) {
                      double dot = 0.0;
                      for (std::size_t j = 0; j < m; ++j) dot += gv[i * m + j] * y[i * m + j];
                      for (std::size_t j = 0; j < m; ++j) dst[i * m + j] += y[i * m + j] * (gv[i * m + j] - dot);
                    }
                  });
}

Var rms_norm(Tape& t, Var x, Var gain, double eps) {
  const Tensor& xv = t.value(x);
  const Tensor& gv = t.value(gain);
  require_rank2("rms_norm", xv);
  if (gv.rank() != 1 || gv.size() != xv.cols()) shape_error("rms_norm", xv, gv);
  const std::size_t n = xv.rows(), m = xv.cols();
  Tensor out({n, m});
  std::vector<double> inv_rms(n);
  for (std::size_t i = 0; i < n; ++i) {
    double ss = 0.0;
    for (std::size_t j = 0; j < m; ++j) ss += xv.at(i, j) * xv.at(i, j);
    inv_rms[i] = 1.0 / std::sqrt(ss / static_cast<double>(m) + eps);
    for (std::size_t j = 0; j < m; ++j) out.at(i, j) = xv.at(i, j) * inv_rms[i] * gv[j];
  }
  return t.record(
      "rms_norm", std::move(out), {x.index, gain.index},
      [n, m, inv_rms = std::move(inv_rms)](const Tape& tp, std::size_t self, const Tensor& g,
                                           std::vector<Tensor>& grads) {
        const std::size_t ix = tp.input(self, 0), ig = tp.input(self, 1);
        const Tensor& xin = tp.value(Var{ix});
        const Tensor& gain_v = tp.value(Var{ig});
        if (tp.requires_grad(Var{ig})) {
          auto dg = Tape::grad_slot(grads, tp, ig).data();
          for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < m; ++j) dg[j] += g.at(i, j) * xin.at(i, j) * inv_rms[i];
          }
        }
        if (tp.requires_grad(Var{ix})) {
          Tensor& dx = Tape::grad_slot(grads, tp, ix);
          for (std::size_t i = 0; i < n; ++i) {
            // xhat = x * r; dxhat = g * gain; dx = r * (dxhat - xhat * mean(dxhat * xhat))
            const double r = inv_rms[i];
            double dot = 0.0;
            for (std::size_t j = 0; j < m; ++j) dot += g.at(i, j) * gain_v[j] * xin.at(i, j) * r;
            dot /= static_cast<double>(m);
            for (std::size_t j = 0; j < m; ++j) {
              dx.at(i, j) += r * (g.at(i, j) * gain_v[j] - xin.at(i, j) * r * dot);
            }
          }
        }
      });
}

Var embedding(Tape& t, Var table, std::span<const TokenId> ids) {
  const Tensor& tv = t.value(table);
  require_rank2("embedding", tv);
  if (ids.empty()) throw ValidationError("embedding: empty id list");
  const std::size_t m = tv.cols();
  Tensor out({ids.size(), m});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= tv.rows()) {
      throw ValidationError("embedding: id " + std::to_string(ids[i]) + " out of range for table " +
                            shape_string(tv.shape()));
    }
    std::copy_n(tv.data().begin() + static_cast<std::ptrdiff_t>(ids[i] * m), m,
                out.data().begin() + static_cast<std::ptrdiff_t>(i * m));
  }
  return t.record("embedding", std::move(out), {table.index},
                  [m, ids = std::vector<TokenId>(ids.begin(), ids.end())](
                      const Tape& tp, std::size_t self, const Tensor& g, std::vector<Tensor>& grads) {
                    const std::size_t in = tp.input(self, 0);
                    Tensor& dt = Tape::grad_slot(grads, tp, in);
                    for (std::size_t i = 0; i < ids.size(); ++i) {
                      for (std::size_t j = 0; j < m; ++j) dt.at(ids[i], j) += g.at(i, j);
                    }
                  });
}

Var causal_mask(Tape& t, Var scores) {
  const Tensor& s = t.value(scores);
  require_rank2("causal_mask", s);
  if (s.rows() != s.cols()) shape_error("causal_mask", s, s);
  Tensor out = s;
  for (std::size_t i = 0; i < s.rows(); ++i) {
    for (std::size_t j = i + 1; j < s.cols(); ++j) out.at(i, j) += kMaskedScore;
  }
  return t.record("causal_mask", std::move(out), {scores.index},
                  [](const Tape& tp, std::size_t self, const Tensor& g, std::vector<Tensor>& grads) {
                    const std::size_t in = tp.input(self, 0);
                    Tensor& dst = Tape::grad_slot(grads, tp, in);
                    for (std::size_t i = 0; i < dst.rows(); ++i) {
                      for (std::size_t j = 0; j <= i; ++j) dst.at(i, j) += g.at(i, j);
                    }
                  });
}

std::vector<double> row_cross_entropy(const Tensor& logits, std::span<const TokenId> targets) {
  require_rank2("cross_entropy", logits);
  if (targets.size() != logits.rows()) {
    throw ValidationError("cross_entropy: " + std::to_string(targets.size()) + " targets for logits " +
                          shape_string(logits.shape()));
  }
  const std::size_t m = logits.cols();
  std::vector<double> out(logits.rows());
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    if (targets[i] >= m) {
      throw ValidationError("cross_entropy: target " + std::to_string(targets[i]) + " out of range for " +
                            std::to_string(m) + " classes");
    }
    const double* row = logits.data().data() + i * m;
    const double mx = *std::max_element(row, row + m);
    double total = 0.0;
    for (std::size_t j = 0; j < m; ++j) total += std::exp(row[j] - mx);
    out[i] = std::log(total) + mx - row[targets[i]];
  }
  return out;
}

Var cross_entropy(Tape& t, Var logits, std::span<const TokenId> targets) {
  const Tensor& z = t.value(logits);
  const auto per_row = row_cross_entropy(z, targets);
  double total = 0.0;
  for (double v : per_row) total += v;
  const std::size_t n = z.rows(), m = z.cols();
  return t.record("cross_entropy", Tensor::scalar(total / static_cast<double>(n)), {logits.index},
                  [n, m, targets = std::vector<TokenId>(targets.begin(), targets.end())](
                      const Tape& tp, std::size_t self, const Tensor& g, std::vector<Tensor>& grads) {
                    const std::size_t in = tp.input(self, 0);
                    const Tensor& zin = tp.value(Var{in});
                    Tensor& dz = Tape::grad_slot(grads, tp, in);
                    const double coeff = g[0] / static_cast<double>(n);
                    for (std::size_t i = 0; i < n; ++i) {
                      const double* row = zin.data().data() + i * m;
                      const double mx = *std::max_element(row, row + m);
                      double total = 0.0;
                      for (std::size_t j = 0; j < m; ++j) total += std::exp(row[j] - mx);
                      for (std::size_t j = 0; j < m; ++j) {
                        const double p = std::exp(row[j] - mx) / total;
                        dz.at(i, j) += coeff * (p - (j == targets[i] ? 1.0 : 0.0));
                      }
                    }
                  });
}

Var slice_columns(Tape& t, Var a, std::size_t begin, std::size_t count) {
  const Tensor& x = t.value(a);
  require_rank2("slice_columns", x);
  if (count == 0 || begin + count > x.cols()) {
    throw ValidationError("slice_columns: columns [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                          ") out of range for " + shape_string(x.shape()));
  }
  const std::size_t n = x.rows();
  Tensor out({n, count});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < count; ++j) out.at(i, j) = x.at(i, begin + j);
  }
  return t.record("slice_columns", std::move(out), {a.index},
                  [n, begin, count](const Tape& tp, std::size_t self, const Tensor& g, std::vector<Tensor>& grads) {
                    Tensor& dst = Tape::grad_slot(grads, tp, tp.input(self, 0));
                    for (std::size_t i = 0; i < n; ++i) {
                      for (std::size_t j = 0; j < count; ++j) dst.at(i, begin + j) += g.at(i, j);
                    }
                  });
}

Var concat_columns(Tape& t, std::span<const Var> parts) {
  if (parts.empty()) throw ValidationError("concat_columns: no inputs");
  const std::size_t n = t.value(parts[0]).rows();
  std::size_t total = 0;
  std::vector<std::size_t> inputs;
  for (Var p : parts) {
    const Tensor& x = t.value(p);
    require_rank2("concat_columns", x);
    if (x.rows() != n) shape_error("concat_columns", t.value(parts[0]), x);
    total += x.cols();
    inputs.push_back(p.index);
  }
  Tensor out({n, total});
  std::size_t offset = 0;
  for (Var p : parts) {
    const Tensor& x = t.value(p);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < x.cols(); ++j) out.at(i, offset + j) = x.at(i, j);
    }
    offset += x.cols();
  }
  return t.record("concat_columns", std::move(out), std::move(inputs),
                  [n](const Tape& tp, std::size_t self, const Tensor& g, std::vector<Tensor>& grads) {
                    std::size_t offset = 0;
                    for (std::size_t slot = 0; slot < tp.input_count(self); ++slot) {
                      const std::size_t in = tp.input(self, slot);
                      const std::size_t width = tp.value(Var{in}).cols();
                      if (tp.requires_grad(Var{in})) {
                        Tensor& dst = Tape::grad_slot(grads, tp, in);
                        for (std::size_t i = 0; i < n; ++i) {
                          for (std::size_t j = 0; j < width; ++j) dst.at(i, j) += g.at(i, offset + j);
                        }
                      }
                      offset += width;
                    }
                  });
}

Var sum(Tape& t, Var a) {
  double total = 0.0;
  for (double v : t.value(a).data()) total += v;
  return t.record("sum", Tensor::scalar(total), {a.index},
                  [](const Tape& tp, std::size_t self, const Tensor& g, std::vector<Tensor>& grads) {
                    for (double& v : Tape::grad_slot(grads, tp, tp.input(self, 0)).data()) v += g[0];
                  });
}

double finite_difference_gradient(const std::function<double()>& loss, Tensor& weight, std::size_t index,
                                  double step) {
  if (!(step > 0.0)) throw ValidationError("finite_difference_gradient: step must be positive");
  if (index >= weight.size()) {
    throw ValidationError("finite_difference_gradient: index " + std::to_string(index) + " out of range for " +
                          shape_string(weight.shape()));
  }
  const double original = weight[index];
  weight[index] = original + step;
  const double up = loss();
  weight[index] = original - step;
  const double down = loss();
  weight[index] = original;
  return (up - down) / (2.0 * step);
}

}  // namespace dpruner

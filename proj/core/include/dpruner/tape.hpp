#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dpruner/tensor.hpp"

namespace dpruner {

using TokenId = std::uint32_t;

/// Handle to a value recorded on a Tape. Only meaningful for the tape that issued it.
struct Var {
  std::size_t index = 0;
};

/// dLoss/dW keyed by the name the weight was registered under.
using Gradients = std::map<std::string, Tensor, std::less<>>;

/// Records primitive operations during one forward pass and replays them in
/// reverse to compute weight gradients.
///
/// Each node owns its output value. Backprop closures refer to inputs by node
/// index, never by pointer, so a Tape can be moved freely.
class Tape {
 public:
  using Backprop = std::function<void(const Tape& tape, std::size_t self, const Tensor& out_grad,
                                      std::vector<Tensor>& grads)>;

  Var constant(Tensor value);
  /// Registers a leaf whose gradient backward() reports under `name`.
  Var weight(std::string name, Tensor value);

  const Tensor& value(Var v) const { return nodes_[v.index].value; }
  std::string_view op_name(Var v) const { return nodes_[v.index].op; }
  bool requires_grad(Var v) const { return nodes_[v.index].requires_grad; }
  std::size_t input(std::size_t node, std::size_t slot) const { return nodes_[node].inputs[slot]; }
  std::size_t input_count(std::size_t node) const { return nodes_[node].inputs.size(); }

  std::size_t size() const { return nodes_.size(); }
  bool empty() const { return nodes_.empty(); }
  void clear();

  Var record(std::string_view op, Tensor value, std::vector<std::size_t> inputs, Backprop backprop);

  /// Reverse-mode sweep from a scalar `loss`. Every registered weight appears in
  /// the result; weights the loss does not depend on get a zero gradient.
  Gradients backward(Var loss);

  /// Node indices in the order the last backward() visited them.
  const std::vector<std::size_t>& backward_trace() const { return trace_; }

  /// Zero-initialised gradient slot for `node`, created on first use.
  static Tensor& grad_slot(std::vector<Tensor>& grads, const Tape& tape, std::size_t node);

 private:
  struct Node {
    std::string_view op;
    Tensor value;
    std::vector<std::size_t> inputs;
    Backprop backprop;
    bool requires_grad = false;
    std::string weight_name;
  };

  std::vector<Node> nodes_;
  std::vector<std::size_t> trace_;
};

// Primitives. Shape errors throw ValidationError naming the op and the shapes.

Var matmul(Tape& t, Var a, Var b);              // [n,k] x [k,m]
Var matmul_transposed(Tape& t, Var a, Var b);   // [n,k] x [m,k]^T
Var add(Tape& t, Var a, Var b);
Var multiply(Tape& t, Var a, Var b);            // elementwise
Var scale(Tape& t, Var a, double factor);
Var silu(Tape& t, Var a);
Var softmax(Tape& t, Var a);                    // over the last axis of a rank-2 tensor
Var rms_norm(Tape& t, Var x, Var gain, double eps = 1e-6);
Var embedding(Tape& t, Var table, std::span<const TokenId> ids);
Var causal_mask(Tape& t, Var scores);           // square scores, masks j > i
Var cross_entropy(Tape& t, Var logits, std::span<const TokenId> targets);  // mean over rows
Var slice_columns(Tape& t, Var a, std::size_t begin, std::size_t count);
Var concat_columns(Tape& t, std::span<const Var> parts);
Var sum(Tape& t, Var a);

/// Per-row cross-entropy without recording anything.
std::vector<double> row_cross_entropy(const Tensor& logits, std::span<const TokenId> targets);

/// Central difference (f(w+h) - f(w-h)) / 2h for one element of `weight`.
/// `loss` is evaluated with `weight` perturbed in place; the original value is
/// restored before returning.
double finite_difference_gradient(const std::function<double()>& loss, Tensor& weight, std::size_t index,
                                  double step);

}  // namespace dpruner

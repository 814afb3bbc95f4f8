#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "plate/tensor.hpp"

namespace plate {

/// A trainable tensor and the gradient accumulated into it by Tape::backward.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;

  void zero_grad() { grad = Tensor::zeros_like(value); }
};

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Tensor& grad() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t id() const noexcept { return id_; }
  Tape* tape() const noexcept { return tape_; }
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Define-by-run record of primitive applications.
///
/// Records are appended in execution order, so every input precedes the
/// record that consumes it and a single reverse sweep is a valid
/// topological traversal. A tape is single-threaded and is rebuilt for
/// every forward pass.
class Tape {
 public:
  /// Called during backward with the tape and the id of the record whose
  /// output gradient is ready.
  using Backward = std::function<void(Tape&, std::size_t)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  Var variable(Tensor value);
  /// Leaf bound to `p`; backward adds d(loss)/d(p.value) into p.grad.
  Var parameter(Parameter& p);

  /// Appends a record. The backward closure is dropped when no input
  /// requires a gradient.
  Var record(Tensor value, std::initializer_list<Var> inputs, Backward backward);
  Var record(Tensor value, std::span<const Var> inputs, Backward backward);

  /// Reverse sweep from a scalar loss. Throws std::invalid_argument when the
  /// loss is not a single element or does not belong to this tape.
  void backward(Var loss);

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  /// Gradient buffer of a record, zero-initialised on first access.
  Tensor& grad(std::size_t id);
  bool has_grad(std::size_t id) const { return !nodes_[id].grad.empty(); }
  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    Backward backward;
    Parameter* param = nullptr;
  };

  Var push(Node node);

  std::vector<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Differentiable primitives. All inputs must live on the same tape.

Var matmul(Var a, Var b);
/// x W + b, with x (n x in), W (in x out), b (out).
Var linear(Var x, Var w, Var b);
Var transpose(Var x);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var gelu(Var x);
Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);
/// Gathers rows of `table` (vocab x width).
Var embedding(Var table, std::span<const std::int32_t> ids);
/// Inverted dropout; identity when rate == 0.
Var dropout(Var x, double rate, std::mt19937_64& rng);
Var concat_rows(std::span<const Var> parts);
/// Entries with mask[i] != 0 are replaced by `fill`; their gradient is zero.
Var masked_fill(Var x, std::span<const std::uint8_t> mask, double fill);
/// Row-wise softmax of x / tau. Rows that are entirely -inf are rejected.
Var softmax_rows(Var x, double tau = 1.0);
Var sum(Var x);
Var mean(Var x);

/// Label-smoothed negative log-likelihood:
///   sum_t w_t [ (1-eps)(-log p_t[y_t]) + eps * mean_j(-log p_t[j]) ].
/// With empty `row_weights` every row weighs 1/steps (a per-token mean).
Var label_smoothed_nll(Var logits, std::span<const std::int32_t> targets, double epsilon,
                       std::span<const double> row_weights = {});

/// One attention block inside packed query/key buffers.
struct AttentionSegment {
  std::size_t q_begin = 0;
  std::size_t q_len = 0;
  std::size_t k_begin = 0;
  std::size_t k_len = 0;
  bool causal = false;
};

/// Multi-head scaled dot-product attention over packed rows.
///
/// q is (Nq x width), k and v are (Nk x width); each segment attends its
/// query rows to its key rows independently, per head, with
/// tau = sqrt(lambda * width / heads). Query rows not covered by any segment
/// produce zeros. When `capture` is non-null it receives one
/// (q_len x k_len) weight matrix per (segment, head), segment-major.
Var multi_head_attention(Var q, Var k, Var v, std::span<const AttentionSegment> segments, std::size_t heads,
                         double lambda, std::vector<Tensor>* capture = nullptr);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }

}  // namespace plate

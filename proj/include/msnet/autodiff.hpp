#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "msnet/ops.hpp"
#include "msnet/tensor.hpp"

namespace msnet::ad {

/// A named tensor owned by a ParamStore. Non-trainable entries hold batch norm
/// running statistics; they are serialized but never updated by the optimizer.
template <class T>
struct Parameter {
  std::string name;
  BasicTensor<T> value;
  BasicTensor<T> grad;
  bool trainable = true;
};

template <class T>
class ParamStore {
 public:
  ParamStore() = default;
  ParamStore(ParamStore&&) noexcept = default;
  ParamStore& operator=(ParamStore&&) noexcept = default;

  /// Registers a new entry. Names must be unique.
  Parameter<T>& add(const std::string& name, BasicTensor<T> value, bool trainable = true);

  Parameter<T>* find(const std::string& name);
  const Parameter<T>* find(const std::string& name) const;
  /// Throws ConfigError when the name is unknown.
  Parameter<T>& get(const std::string& name);
  const Parameter<T>& get(const std::string& name) const;

  std::size_t size() const { return entries_.size(); }
  Parameter<T>& operator[](std::size_t i) { return *entries_[i]; }
  const Parameter<T>& operator[](std::size_t i) const { return *entries_[i]; }

  /// Number of trainable scalars.
  std::int64_t trainable_count() const;
  /// Number of scalars across every entry, running statistics included.
  std::int64_t total_count() const;

  void zero_grad();

  /// Deep copy with every value converted to U, names and order preserved.
  template <class U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (const auto& e : entries_) out.add(e->name, e->value.template cast<U>(), e->trainable);
    return out;
  }

 private:
  std::vector<std::unique_ptr<Parameter<T>>> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

template <class T>
using ValueRefs = std::vector<const BasicTensor<T>*>;

/// Computes an op's output from its input values.
template <class T>
using ForwardFn = std::function<BasicTensor<T>(const ValueRefs<T>&)>;

/// Adds the op's input gradients into `in_grads`. Entries are null for inputs
/// that do not require gradients.
template <class T>
using BackwardFn = std::function<void(const ValueRefs<T>& in_values, const BasicTensor<T>& out_value,
                                      const BasicTensor<T>& grad_out,
                                      const std::vector<BasicTensor<T>*>& in_grads)>;

template <class T>
struct Node {
  BasicTensor<T> value;
  BasicTensor<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  ForwardFn<T> forward;
  BackwardFn<T> backward;
  Parameter<T>* param = nullptr;
  std::string op;
};

template <class T>
class Tape;

template <class T>
class Var {
 public:
  Var() = default;
  Var(std::shared_ptr<Node<T>> node, Tape<T>* tape) : node_(std::move(node)), tape_(tape) {}

  bool defined() const { return node_ != nullptr; }
  const BasicTensor<T>& value() const { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::int64_t dim(std::size_t axis) const { return node_->value.dim(axis); }
  /// Gradient after Tape::backward (null tensor when unreachable from the loss).
  const BasicTensor<T>& grad() const { return node_->grad; }
  bool requires_grad() const { return node_->requires_grad; }
  Tape<T>& tape() const { return *tape_; }
  const std::shared_ptr<Node<T>>& node() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
  Tape<T>* tape_ = nullptr;
};

/// Ordered record of op applications. A non-recording tape evaluates ops
/// eagerly and keeps no graph, which is the inference path.
template <class T>
class Tape {
 public:
  explicit Tape(bool recording = true) : recording_(recording) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return recording_; }

  Var<T> constant(BasicTensor<T> value);
  /// Leaf that receives a gradient.
  Var<T> leaf(BasicTensor<T> value);
  /// Leaf bound to a parameter; one node per parameter per tape.
  Var<T> param(Parameter<T>& p);

  Var<T> apply(std::string op, const std::vector<Var<T>>& inputs, ForwardFn<T> forward,
               BackwardFn<T> backward);

  /// As apply, for ops whose first evaluation has side effects: `value` is
  /// the already computed output and `forward` is only used by replay.
  Var<T> record(std::string op, const std::vector<Var<T>>& inputs, BasicTensor<T> value,
                ForwardFn<T> forward, BackwardFn<T> backward);

  /// Propagates d(loss)/d(node) through the recorded graph and adds the
  /// result into every reachable trainable parameter's gradient. Throws
  /// ShapeError unless the loss holds exactly one element.
  void backward(const Var<T>& loss, double seed = 1.0);

  /// Re-evaluates every recorded op from the leaf values, in order.
  std::vector<BasicTensor<T>> replay() const;

  const std::vector<std::shared_ptr<Node<T>>>& nodes() const { return nodes_; }
  void clear();

 private:
  Var<T> push(std::shared_ptr<Node<T>> node);

  bool recording_;
  std::vector<std::shared_ptr<Node<T>>> nodes_;
  std::unordered_map<const Parameter<T>*, std::shared_ptr<Node<T>>> param_nodes_;
};

/// Adds g into *dst, allocating zeros first when *dst is null.
template <class T>
void accumulate(BasicTensor<T>& dst, const BasicTensor<T>& g);

// ---------------------------------------------------------------------------
// Differentiable ops

template <class T>
Var<T> conv(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, const ConvOptions& opt);

template <class T>
Var<T> conv_transposed(const Var<T>& x, const Var<T>& weight, const ConvOptions& opt);

/// Running statistics are updated in train mode as a side effect.
template <class T>
Var<T> batch_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                  Parameter<T>& running_mean, Parameter<T>& running_var, BnMode mode);

template <class T>
Var<T> relu(const Var<T>& x);

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b);

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b);

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b);

template <class T>
Var<T> scale(const Var<T>& x, double s);

template <class T>
Var<T> softmax(const Var<T>& x, std::size_t axis);

template <class T>
Var<T> interpolate(const Var<T>& x, const std::vector<double>& scales, InterpMode mode);

template <class T>
Var<T> reshape(const Var<T>& x, Shape shape);

/// Concatenation along `axis`; all other extents must match.
template <class T>
Var<T> concat(const std::vector<Var<T>>& xs, std::size_t axis);

/// Scalar [1] holding the sum of every element.
template <class T>
Var<T> sum(const Var<T>& x);

// ---------------------------------------------------------------------------
// Gradient checking

struct GradcheckOptions {
  double step = 1e-4;
  double tolerance = 1e-5;
  /// Coordinates probed per tensor; 0 probes all of them.
  std::size_t max_coords = 0;
  std::uint64_t seed = 0;
  /// A coordinate that misses the tolerance while its one-sided differences
  /// disagree by more than this relative amount straddles a kink of a
  /// piecewise-linear op; it is counted as skipped instead of failed.
  double kink_tolerance = 1e-3;
  /// Fails the check when more than this fraction of probes is skipped.
  double max_skipped_fraction = 0.1;
};

struct GradcheckReport {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t skipped = 0;
  std::string worst;
  bool passed = false;
};

/// Differentiable scalar map of one input tensor.
using ScalarFn = std::function<Var<double>(Tape<double>&, const Var<double>&)>;

/// Compares the tape gradient of f at x with central differences
/// (f(x+h) - f(x-h)) / 2h. Relative error uses the denominator
/// max(|analytic|, |numeric|, 1e-3 * largest analytic magnitude).
GradcheckReport gradcheck(const ScalarFn& f, const TensorD& x, const GradcheckOptions& opt = {});

/// Same comparison for the gradients of every trainable parameter in `store`
/// whose name passes `select` (all when empty).
GradcheckReport gradcheck_params(const std::function<Var<double>(Tape<double>&)>& f,
                                 ParamStore<double>& store, const GradcheckOptions& opt = {},
                                 const std::function<bool(const std::string&)>& select = {});

// ---------------------------------------------------------------------------
// Optimizer

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  /// The learning rate halves at each listed epoch.
  std::vector<int> halve_at{10, 12, 14, 16};
};

/// Learning rate in effect during `epoch` (0-based).
double scheduled_lr(const AdamOptions& opt, int epoch);

template <class T>
class Adam {
 public:
  Adam(ParamStore<T>& store, AdamOptions opt = {});

  /// One bias-corrected update of every trainable parameter using its current
  /// gradient. Throws NumericError naming the parameter on a non-finite
  /// gradient, before touching any value.
  void step(int epoch = 0);

  std::int64_t steps() const { return step_; }
  const AdamOptions& options() const { return opt_; }

 private:
  ParamStore<T>* store_;
  AdamOptions opt_;
  std::int64_t step_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

}  // namespace msnet::ad

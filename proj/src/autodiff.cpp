#include "msnet/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

namespace msnet::ad {

// ---------------------------------------------------------------------------
// ParamStore

template <class T>
Parameter<T>& ParamStore<T>::add(const std::string& name, BasicTensor<T> value, bool trainable) {
  if (index_.count(name)) throw ConfigError("duplicate parameter name '" + name + "'");
  auto p = std::make_unique<Parameter<T>>();
  p->name = name;
  p->value = std::move(value);
  p->trainable = trainable;
  index_.emplace(name, entries_.size());
  entries_.push_back(std::move(p));
  return *entries_.back();
}

template <class T>
Parameter<T>* ParamStore<T>::find(const std::string& name) {
  auto it = index_.find(name);
  return it == index_.end() ? nullptr : entries_[it->second].get();
}

template <class T>
const Parameter<T>* ParamStore<T>::find(const std::string& name) const {
  auto it = index_.find(name);
  return it == index_.end() ? nullptr : entries_[it->second].get();
}

template <class T>
Parameter<T>& ParamStore<T>::get(const std::string& name) {
  if (auto* p = find(name)) return *p;
  throw ConfigError("unknown parameter '" + name + "'");
}

template <class T>
const Parameter<T>& ParamStore<T>::get(const std::string& name) const {
  if (const auto* p = find(name)) return *p;
  throw ConfigError("unknown parameter '" + name + "'");
}

template <class T>
std::int64_t ParamStore<T>::trainable_count() const {
  std::int64_t n = 0;
  for (const auto& e : entries_)
    if (e->trainable) n += static_cast<std::int64_t>(e->value.size());
  return n;
}

template <class T>
std::int64_t ParamStore<T>::total_count() const {
  std::int64_t n = 0;
  for (const auto& e : entries_) n += static_cast<std::int64_t>(e->value.size());
  return n;
}

template <class T>
void ParamStore<T>::zero_grad() {
  for (auto& e : entries_) e->grad = BasicTensor<T>();
}

// ---------------------------------------------------------------------------
// Tape

template <class T>
void accumulate(BasicTensor<T>& dst, const BasicTensor<T>& g) {
  if (dst.empty()) {
    dst = g;
    return;
  }
  require_same_shape(dst.shape(), g.shape(), "gradient accumulation");
  T* d = dst.data();
  const T* s = g.data();
  for (std::size_t i = 0; i < dst.size(); ++i) d[i] += s[i];
}

template <class T>
Var<T> Tape<T>::push(std::shared_ptr<Node<T>> node) {
  if (recording_) nodes_.push_back(node);
  return Var<T>(std::move(node), this);
}

template <class T>
Var<T> Tape<T>::constant(BasicTensor<T> value) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  n->op = "constant";
  return push(std::move(n));
}

template <class T>
Var<T> Tape<T>::leaf(BasicTensor<T> value) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  n->requires_grad = recording_;
  n->op = "leaf";
  return push(std::move(n));
}

template <class T>
Var<T> Tape<T>::param(Parameter<T>& p) {
  auto it = param_nodes_.find(&p);
  if (it != param_nodes_.end()) return Var<T>(it->second, this);
  auto n = std::make_shared<Node<T>>();
  n->value = p.value;
  n->requires_grad = recording_ && p.trainable;
  n->param = &p;
  n->op = "param:" + p.name;
  param_nodes_.emplace(&p, n);
  return push(std::move(n));
}

template <class T>
Var<T> Tape<T>::apply(std::string op, const std::vector<Var<T>>& inputs, ForwardFn<T> forward,
                      BackwardFn<T> backward) {
  ValueRefs<T> refs;
  refs.reserve(inputs.size());
  for (const auto& v : inputs) refs.push_back(&v.value());
  BasicTensor<T> value = forward(refs);
  return record(std::move(op), inputs, std::move(value), std::move(forward), std::move(backward));
}

template <class T>
Var<T> Tape<T>::record(std::string op, const std::vector<Var<T>>& inputs, BasicTensor<T> value,
                       ForwardFn<T> forward, BackwardFn<T> backward) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  n->op = std::move(op);
  if (recording_) {
    bool needs = false;
    for (const auto& v : inputs) needs = needs || v.requires_grad();
    n->requires_grad = needs;
    n->inputs.reserve(inputs.size());
    for (const auto& v : inputs) n->inputs.push_back(v.node());
    n->forward = std::move(forward);
    if (needs) n->backward = std::move(backward);
  }
  return push(std::move(n));
}

template <class T>
void Tape<T>::backward(const Var<T>& loss, double seed) {
  if (!recording_) throw Error("backward called on a non-recording tape");
  if (loss.value().size() != 1) {
    throw ShapeError("backward needs a scalar loss, got shape " + to_string(loss.shape()));
  }
  for (auto& n : nodes_) n->grad = BasicTensor<T>();
  loss.node()->grad = BasicTensor<T>(loss.shape(), static_cast<T>(seed));
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    Node<T>& n = **it;
    if (n.grad.empty() || !n.backward) continue;
    ValueRefs<T> in_values;
    std::vector<BasicTensor<T>*> in_grads;
    in_values.reserve(n.inputs.size());
    in_grads.reserve(n.inputs.size());
    for (auto& in : n.inputs) {
      in_values.push_back(&in->value);
      if (in->requires_grad) {
        if (in->grad.empty()) in->grad = BasicTensor<T>(in->value.shape());
        in_grads.push_back(&in->grad);
      } else {
        in_grads.push_back(nullptr);
      }
    }
    n.backward(in_values, n.value, n.grad, in_grads);
  }
  for (auto& n : nodes_) {
    if (n->param && n->param->trainable && !n->grad.empty()) accumulate(n->param->grad, n->grad);
  }
}

template <class T>
std::vector<BasicTensor<T>> Tape<T>::replay() const {
  std::unordered_map<const Node<T>*, std::size_t> index;
  std::vector<BasicTensor<T>> values;
  values.reserve(nodes_.size());
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    const Node<T>& n = *nodes_[i];
    index.emplace(&n, i);
    if (!n.forward) {
      values.push_back(n.value);
      continue;
    }
    ValueRefs<T> refs;
    for (const auto& in : n.inputs) {
      auto it = index.find(in.get());
      refs.push_back(it == index.end() ? &in->value : &values[it->second]);
    }
    values.push_back(n.forward(refs));
  }
  return values;
}

template <class T>
void Tape<T>::clear() {
  nodes_.clear();
  param_nodes_.clear();
}

// ---------------------------------------------------------------------------
// Ops

namespace {

template <class T>
Tape<T>& tape_of(const Var<T>& v, const char* op) {
  if (!v.defined()) throw Error(std::string(op) + ": undefined input");
  return v.tape();
}

}  // namespace

template <class T>
Var<T> conv(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, const ConvOptions& opt) {
  std::vector<Var<T>> inputs{x, weight};
  const bool has_bias = bias.defined();
  if (has_bias) inputs.push_back(bias);
  return tape_of(x, "conv").apply(
      "conv", inputs,
      [opt, has_bias](const ValueRefs<T>& in) {
        ConvParams<T> p{*in[1], has_bias ? *in[2] : BasicTensor<T>(), opt};
        return msnet::conv(*in[0], p);
      },
      [opt, has_bias](const ValueRefs<T>& in, const BasicTensor<T>&, const BasicTensor<T>& gy,
                      const std::vector<BasicTensor<T>*>& g) {
        if (g[0]) accumulate(*g[0], conv_backward_input(gy, *in[1], in[0]->shape(), opt));
        if (g[1]) accumulate(*g[1], conv_backward_weight(*in[0], gy, in[1]->shape(), opt));
        if (has_bias && g[2]) accumulate(*g[2], channel_sum(gy));
      });
}

template <class T>
Var<T> conv_transposed(const Var<T>& x, const Var<T>& weight, const ConvOptions& opt) {
  return tape_of(x, "conv_transposed").apply(
      "conv_transposed", {x, weight},
      [opt](const ValueRefs<T>& in) {
        return msnet::conv_transposed(*in[0], ConvParams<T>{*in[1], {}, opt});
      },
      [opt](const ValueRefs<T>& in, const BasicTensor<T>& out, const BasicTensor<T>& gy,
            const std::vector<BasicTensor<T>*>& g) {
        // y = A^T x where A is the forward conv mapping out-shaped tensors to
        // x-shaped ones, so dx = A gy and dw follows the forward-conv rule
        // with the roles of input and output exchanged.
        if (g[0]) accumulate(*g[0], msnet::conv(gy, ConvParams<T>{*in[1], {}, opt}));
        if (g[1]) accumulate(*g[1], conv_backward_weight(gy, *in[0], in[1]->shape(), opt));
        (void)out;
      });
}

template <class T>
Var<T> batch_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                  Parameter<T>& running_mean, Parameter<T>& running_var, BnMode mode) {
  Tape<T>& tape = tape_of(x, "batch_norm");
  BasicTensor<T> rm0 = running_mean.value;
  BasicTensor<T> rv0 = running_var.value;
  auto saved = std::make_shared<BnSaved>();
  BasicTensor<T> y = msnet::batch_norm(x.value(), gamma.value(), beta.value(), running_mean.value,
                                       running_var.value, mode, kBatchNormEps, kBatchNormMomentum,
                                       saved.get());
  return tape.record(
      "batch_norm", {x, gamma, beta}, std::move(y),
      [rm0, rv0, mode](const ValueRefs<T>& in) {
        BasicTensor<T> rm = rm0, rv = rv0;
        return msnet::batch_norm(*in[0], *in[1], *in[2], rm, rv, mode);
      },
      [saved, mode](const ValueRefs<T>& in, const BasicTensor<T>&, const BasicTensor<T>& gy,
                    const std::vector<BasicTensor<T>*>& g) {
        BnGrads<T> r = batch_norm_backward(*in[0], *in[1], *saved, gy, mode);
        if (g[0]) accumulate(*g[0], r.input);
        if (g[1]) accumulate(*g[1], r.gamma);
        if (g[2]) accumulate(*g[2], r.beta);
      });
}

template <class T>
Var<T> relu(const Var<T>& x) {
  return tape_of(x, "relu").apply(
      "relu", {x}, [](const ValueRefs<T>& in) { return msnet::relu(*in[0]); },
      [](const ValueRefs<T>& in, const BasicTensor<T>&, const BasicTensor<T>& gy,
         const std::vector<BasicTensor<T>*>& g) {
        if (g[0]) accumulate(*g[0], relu_backward(*in[0], gy));
      });
}

namespace {

template <class T, class F>
BasicTensor<T> zip(const BasicTensor<T>& a, const BasicTensor<T>& b, const char* what, F f) {
  require_same_shape(a.shape(), b.shape(), what);
  BasicTensor<T> y(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) y[i] = f(a[i], b[i]);
  return y;
}

}  // namespace

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  return tape_of(a, "add").apply(
      "add", {a, b},
      [](const ValueRefs<T>& in) { return zip(*in[0], *in[1], "add", [](T u, T v) { return u + v; }); },
      [](const ValueRefs<T>&, const BasicTensor<T>&, const BasicTensor<T>& gy,
         const std::vector<BasicTensor<T>*>& g) {
        if (g[0]) accumulate(*g[0], gy);
        if (g[1]) accumulate(*g[1], gy);
      });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  return tape_of(a, "sub").apply(
      "sub", {a, b},
      [](const ValueRefs<T>& in) { return zip(*in[0], *in[1], "sub", [](T u, T v) { return u - v; }); },
      [](const ValueRefs<T>&, const BasicTensor<T>&, const BasicTensor<T>& gy,
         const std::vector<BasicTensor<T>*>& g) {
        if (g[0]) accumulate(*g[0], gy);
        if (g[1]) {
          BasicTensor<T> n(gy.shape());
          for (std::size_t i = 0; i < gy.size(); ++i) n[i] = -gy[i];
          accumulate(*g[1], n);
        }
      });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  return tape_of(a, "mul").apply(
      "mul", {a, b},
      [](const ValueRefs<T>& in) { return zip(*in[0], *in[1], "mul", [](T u, T v) { return u * v; }); },
      [](const ValueRefs<T>& in, const BasicTensor<T>&, const BasicTensor<T>& gy,
         const std::vector<BasicTensor<T>*>& g) {
        if (g[0]) accumulate(*g[0], zip(gy, *in[1], "mul", [](T u, T v) { return u * v; }));
        if (g[1]) accumulate(*g[1], zip(gy, *in[0], "mul", [](T u, T v) { return u * v; }));
      });
}

template <class T>
Var<T> scale(const Var<T>& x, double s) {
  auto scaled = [s](const BasicTensor<T>& t) {
    BasicTensor<T> y(t.shape());
    for (std::size_t i = 0; i < t.size(); ++i) y[i] = static_cast<T>(static_cast<double>(t[i]) * s);
    return y;
  };
  return tape_of(x, "scale").apply(
      "scale", {x}, [scaled](const ValueRefs<T>& in) { return scaled(*in[0]); },
      [scaled](const ValueRefs<T>&, const BasicTensor<T>&, const BasicTensor<T>& gy,
               const std::vector<BasicTensor<T>*>& g) {
        if (g[0]) accumulate(*g[0], scaled(gy));
      });
}

template <class T>
Var<T> softmax(const Var<T>& x, std::size_t axis) {
  return tape_of(x, "softmax").apply(
      "softmax", {x}, [axis](const ValueRefs<T>& in) { return msnet::softmax(*in[0], axis); },
      [axis](const ValueRefs<T>&, const BasicTensor<T>& out, const BasicTensor<T>& gy,
             const std::vector<BasicTensor<T>*>& g) {
        if (g[0]) accumulate(*g[0], softmax_backward(out, gy, axis));
      });
}

template <class T>
Var<T> interpolate(const Var<T>& x, const std::vector<double>& scales, InterpMode mode) {
  return tape_of(x, "interpolate").apply(
      "interpolate", {x},
      [scales, mode](const ValueRefs<T>& in) { return msnet::interpolate(*in[0], scales, mode); },
      [scales, mode](const ValueRefs<T>& in, const BasicTensor<T>&, const BasicTensor<T>& gy,
                     const std::vector<BasicTensor<T>*>& g) {
        if (g[0]) accumulate(*g[0], interpolate_backward(in[0]->shape(), gy, scales, mode));
      });
}

template <class T>
Var<T> reshape(const Var<T>& x, Shape shape) {
  return tape_of(x, "reshape").apply(
      "reshape", {x}, [shape](const ValueRefs<T>& in) { return in[0]->reshaped(shape); },
      [](const ValueRefs<T>& in, const BasicTensor<T>&, const BasicTensor<T>& gy,
         const std::vector<BasicTensor<T>*>& g) {
        if (g[0]) accumulate(*g[0], gy.reshaped(in[0]->shape()));
      });
}

template <class T>
Var<T> concat(const std::vector<Var<T>>& xs, std::size_t axis) {
  if (xs.empty()) throw ShapeError("concat needs at least one input");
  const Shape& first = xs[0].shape();
  if (axis >= first.size()) throw ShapeError("concat axis out of range for " + to_string(first));
  for (const auto& v : xs) {
    const Shape& s = v.shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = i == axis || s[i] == first[i];
    if (!ok) throw ShapeError("concat shape mismatch: " + to_string(first) + " vs " + to_string(s));
  }
  std::int64_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= first[i];
  for (std::size_t i = axis + 1; i < first.size(); ++i) inner *= first[i];
  return tape_of(xs[0], "concat").apply(
      "concat", xs,
      [axis, outer, inner](const ValueRefs<T>& in) {
        Shape s = in[0]->shape();
        std::int64_t total = 0;
        for (const auto* t : in) total += t->dim(axis);
        s[axis] = total;
        BasicTensor<T> y(s);
        for (std::int64_t o = 0; o < outer; ++o) {
          T* dst = y.data() + o * total * inner;
          for (const auto* t : in) {
            const std::int64_t len = t->dim(axis) * inner;
            std::copy_n(t->data() + o * len, len, dst);
            dst += len;
          }
        }
        return y;
      },
      [axis, outer, inner](const ValueRefs<T>& in, const BasicTensor<T>& out, const BasicTensor<T>& gy,
                           const std::vector<BasicTensor<T>*>& g) {
        const std::int64_t total = out.dim(axis);
        std::int64_t offset = 0;
        for (std::size_t k = 0; k < in.size(); ++k) {
          const std::int64_t len = in[k]->dim(axis) * inner;
          if (g[k]) {
            BasicTensor<T> part(in[k]->shape());
            for (std::int64_t o = 0; o < outer; ++o) {
              std::copy_n(gy.data() + o * total * inner + offset, len, part.data() + o * len);
            }
            accumulate(*g[k], part);
          }
          offset += len;
        }
      });
}

template <class T>
Var<T> sum(const Var<T>& x) {
  return tape_of(x, "sum").apply(
      "sum", {x},
      [](const ValueRefs<T>& in) {
        double s = 0.0;
        for (std::size_t i = 0; i < in[0]->size(); ++i) s += static_cast<double>((*in[0])[i]);
        return BasicTensor<T>({1}, static_cast<T>(s));
      },
      [](const ValueRefs<T>& in, const BasicTensor<T>&, const BasicTensor<T>& gy,
         const std::vector<BasicTensor<T>*>& g) {
        if (g[0]) accumulate(*g[0], BasicTensor<T>(in[0]->shape(), gy[0]));
      });
}

// ---------------------------------------------------------------------------
// Gradcheck

namespace {

std::vector<std::size_t> probe_indices(std::size_t n, std::size_t max_coords, std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  if (max_coords == 0 || max_coords >= n) return idx;
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(max_coords);
  std::sort(idx.begin(), idx.end());
  return idx;
}

struct Probe {
  std::string label;
  TensorD* values;
  const TensorD* analytic;
};

GradcheckReport run_probes(const std::vector<Probe>& probes, const std::function<double()>& eval,
                           const GradcheckOptions& opt) {
  GradcheckReport r;
  double scale = 0.0;
  for (const auto& p : probes)
    for (std::size_t i = 0; i < p.analytic->size(); ++i) scale = std::max(scale, std::abs((*p.analytic)[i]));
  const double floor = std::max(1e-3 * scale, 1e-12);
  const double h = opt.step;
  std::uint64_t seed = opt.seed;
  const double f0 = eval();
  for (const auto& p : probes) {
    for (std::size_t i : probe_indices(p.values->size(), opt.max_coords, seed++)) {
      double& xi = (*p.values)[i];
      const double orig = xi;
      xi = orig + h;
      const double fp = eval();
      xi = orig - h;
      const double fm = eval();
      xi = orig;
      const double numeric = (fp - fm) / (2.0 * h);
      const double fwd = (fp - f0) / h;
      const double bwd = (f0 - fm) / h;
      const double analytic = (*p.analytic)[i];
      const double den = std::max({std::abs(analytic), std::abs(numeric), floor});
      const double err = std::abs(analytic - numeric) / den;
      const double side_den = std::max({std::abs(fwd), std::abs(bwd), floor});
      if (err >= opt.tolerance && std::abs(fwd - bwd) / side_den > opt.kink_tolerance) {
        ++r.skipped;
        continue;
      }
      ++r.checked;
      if (err >= r.max_rel_error) {
        r.max_rel_error = err;
        std::ostringstream os;
        os << p.label << "[" << i << "] analytic=" << analytic << " numeric=" << numeric;
        r.worst = os.str();
      }
    }
  }
  const std::size_t total = r.checked + r.skipped;
  const bool few_skips = total == 0 ||
                         static_cast<double>(r.skipped) <= opt.max_skipped_fraction * static_cast<double>(total);
  r.passed = r.checked > 0 && few_skips && r.max_rel_error < opt.tolerance;
  return r;
}

double scalar_of(const Var<double>& v) {
  if (v.value().size() != 1) {
    throw ShapeError("gradcheck needs a scalar function, got shape " + to_string(v.shape()));
  }
  return v.value()[0];
}

}  // namespace

GradcheckReport gradcheck(const ScalarFn& f, const TensorD& x, const GradcheckOptions& opt) {
  TensorD analytic;
  {
    Tape<double> tape;
    Var<double> in = tape.leaf(x);
    Var<double> out = f(tape, in);
    tape.backward(out);
    analytic = in.grad().empty() ? TensorD(x.shape()) : in.grad();
  }
  TensorD probe = x;
  auto eval = [&] {
    Tape<double> tape(false);
    return scalar_of(f(tape, tape.constant(probe)));
  };
  return run_probes({{"x", &probe, &analytic}}, eval, opt);
}

GradcheckReport gradcheck_params(const std::function<Var<double>(Tape<double>&)>& f,
                                 ParamStore<double>& store, const GradcheckOptions& opt,
                                 const std::function<bool(const std::string&)>& select) {
  // Running statistics change in train mode; restore them around every probe
  // so each evaluation sees the same state.
  std::vector<TensorD> frozen;
  for (std::size_t i = 0; i < store.size(); ++i) frozen.push_back(store[i].value);
  auto restore_stats = [&] {
    for (std::size_t i = 0; i < store.size(); ++i)
      if (!store[i].trainable) store[i].value = frozen[i];
  };
  store.zero_grad();
  {
    Tape<double> tape;
    tape.backward(f(tape));
  }
  restore_stats();
  std::vector<TensorD> analytic;
  std::vector<Probe> probes;
  analytic.reserve(store.size());
  for (std::size_t i = 0; i < store.size(); ++i) {
    Parameter<double>& p = store[i];
    if (!p.trainable || (select && !select(p.name))) continue;
    analytic.push_back(p.grad.empty() ? TensorD(p.value.shape()) : p.grad);
  }
  std::size_t k = 0;
  for (std::size_t i = 0; i < store.size(); ++i) {
    Parameter<double>& p = store[i];
    if (!p.trainable || (select && !select(p.name))) continue;
    probes.push_back({p.name, &p.value, &analytic[k++]});
  }
  auto eval = [&] {
    Tape<double> tape(false);
    const double v = scalar_of(f(tape));
    restore_stats();
    return v;
  };
  GradcheckReport r = run_probes(probes, eval, opt);
  store.zero_grad();
  return r;
}

// ---------------------------------------------------------------------------
// Adam

double scheduled_lr(const AdamOptions& opt, int epoch) {
  double lr = opt.lr;
  for (int e : opt.halve_at)
    if (epoch >= e) lr *= 0.5;
  return lr;
}

template <class T>
Adam<T>::Adam(ParamStore<T>& store, AdamOptions opt) : store_(&store), opt_(std::move(opt)) {
  m_.resize(store.size());
  v_.resize(store.size());
  for (std::size_t i = 0; i < store.size(); ++i) {
    if (!store[i].trainable) continue;
    m_[i].assign(store[i].value.size(), 0.0);
    v_[i].assign(store[i].value.size(), 0.0);
  }
}

template <class T>
void Adam<T>::step(int epoch) {
  ParamStore<T>& s = *store_;
  if (s.size() != m_.size()) throw Error("parameter store changed after the optimizer was created");
  for (std::size_t i = 0; i < s.size(); ++i) {
    const Parameter<T>& p = s[i];
    if (!p.trainable || p.grad.empty()) continue;
    for (std::size_t j = 0; j < p.grad.size(); ++j) {
      if (!std::isfinite(static_cast<double>(p.grad[j]))) {
        throw NumericError("non-finite gradient in parameter '" + p.name + "'");
      }
    }
  }
  ++step_;
  const double lr = scheduled_lr(opt_, epoch);
  const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(step_));
  for (std::size_t i = 0; i < s.size(); ++i) {
    Parameter<T>& p = s[i];
    if (!p.trainable || p.grad.empty()) continue;
    require_same_shape(p.value.shape(), p.grad.shape(), "adam step");
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < p.value.size(); ++j) {
      const double g = static_cast<double>(p.grad[j]);
      m[j] = opt_.beta1 * m[j] + (1.0 - opt_.beta1) * g;
      v[j] = opt_.beta2 * v[j] + (1.0 - opt_.beta2) * g * g;
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      p.value[j] = static_cast<T>(static_cast<double>(p.value[j]) - lr * mhat / (std::sqrt(vhat) + opt_.eps));
    }
  }
}

#define MSNET_INSTANTIATE_AD(T)                                                                  \
  template class ParamStore<T>;                                                                  \
  template class Tape<T>;                                                                        \
  template class Adam<T>;                                                                        \
  template void accumulate(BasicTensor<T>&, const BasicTensor<T>&);                              \
  template Var<T> conv(const Var<T>&, const Var<T>&, const Var<T>&, const ConvOptions&);         \
  template Var<T> conv_transposed(const Var<T>&, const Var<T>&, const ConvOptions&);             \
  template Var<T> batch_norm(const Var<T>&, const Var<T>&, const Var<T>&, Parameter<T>&,         \
                             Parameter<T>&, BnMode);                                             \
  template Var<T> relu(const Var<T>&);                                                           \
  template Var<T> add(const Var<T>&, const Var<T>&);                                             \
  template Var<T> sub(const Var<T>&, const Var<T>&);                                             \
  template Var<T> mul(const Var<T>&, const Var<T>&);                                             \
  template Var<T> scale(const Var<T>&, double);                                                  \
  template Var<T> softmax(const Var<T>&, std::size_t);                                           \
  template Var<T> interpolate(const Var<T>&, const std::vector<double>&, InterpMode);            \
  template Var<T> reshape(const Var<T>&, Shape);                                                 \
  template Var<T> concat(const std::vector<Var<T>>&, std::size_t);                               \
  template Var<T> sum(const Var<T>&);

MSNET_INSTANTIATE_AD(float)
MSNET_INSTANTIATE_AD(double)

#undef MSNET_INSTANTIATE_AD

}  // namespace msnet::ad

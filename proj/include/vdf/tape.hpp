#pragma once

#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "vdf/batchnorm.hpp"
#include "vdf/ops.hpp"

namespace vdf {

/// Handle to a value recorded on a Tape.
struct Var {
  static constexpr std::size_t kNone = std::numeric_limits<std::size_t>::max();
  std::size_t id = kNone;
};

/// Records executed ops so that gradients can be propagated back through them.
/// Backward visits nodes in exact reverse execution order and gradients that
/// reach a value along several paths are summed.  Parameters are referenced,
/// not copied: their gradients accumulate into the tensor's own grad slot.
template <typename Scalar>
class Tape {
 public:
  using Tensor = Tensor5<Scalar>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Constant leaf.  Set `requires_grad` to obtain d(output)/d(input).
  Var input(Tensor value, bool requires_grad = false) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    return push(std::move(n));
  }

  Var parameter(Tensor& p) {
    Node n;
    n.external = &p;
    n.requires_grad = true;
    return push(std::move(n));
  }

  const Tensor& value(Var v) const {
    const Node& n = node(v);
    return n.external ? *n.external : n.value;
  }

  /// Gradient accumulated for a non-parameter node by the last backward call.
  const Tensor& grad(Var v) const {
    const Node& n = node(v);
    if (n.external) throw UsageError("parameter gradients live in the parameter tensor's grad slot");
    if (!n.grad) throw UsageError("no gradient reached tape entry " + std::to_string(v.id));
    return *n.grad;
  }

  bool has_grad(Var v) const { return node(v).grad.has_value(); }
  std::size_t size() const { return nodes_.size(); }

  void clear() { nodes_.clear(); }

  Var conv3d(Var x, Var weight, Var bias, Padding padding = Padding::Same) {
    Tensor y = vdf::conv3d(value(x), value(weight), value(bias), padding);
    return record(std::move(y), {x, weight, bias}, [x, weight, bias, padding](Tape& t, const Tensor& up) {
      const bool need_input = t.node(x).requires_grad;
      auto g = conv3d_backward(t.value(x), t.value(weight), up, padding, need_input);
      if (need_input) t.accumulate(x, std::move(g.input));
      t.accumulate(weight, std::move(g.weight));
      t.accumulate(bias, std::move(g.bias));
    });
  }

  Var relu(Var x) {
    return record(vdf::relu(value(x)), {x}, [x](Tape& t, const Tensor& up) {
      t.accumulate(x, relu_backward(t.value(x), up));
    });
  }

  Var sigmoid(Var x) {
    const std::size_t self = nodes_.size();
    return record(vdf::sigmoid(value(x)), {x}, [x, self](Tape& t, const Tensor& up) {
      t.accumulate(x, sigmoid_backward(t.nodes_[self].value, up));
    });
  }

  Var maxpool(Var x) {
    auto pooled = maxpool3d(value(x));
    auto argmax = std::make_shared<std::vector<Index>>(std::move(pooled.argmax));
    const Shape5 in_shape = value(x).shape();
    return record(std::move(pooled.output), {x}, [x, argmax, in_shape](Tape& t, const Tensor& up) {
      t.accumulate(x, maxpool3d_backward(in_shape, *argmax, up));
    });
  }

  Var upsample(Var x) {
    return record(upsample_nearest3d(value(x)), {x}, [x](Tape& t, const Tensor& up) {
      t.accumulate(x, upsample_nearest3d_backward(up));
    });
  }

  Var concat(Var a, Var b) {
    const Index ca = value(a).shape().c();
    return record(concat_channels(value(a), value(b)), {a, b}, [a, b, ca](Tape& t, const Tensor& up) {
      auto [ga, gb] = concat_channels_backward(up, ca);
      t.accumulate(a, std::move(ga));
      t.accumulate(b, std::move(gb));
    });
  }

  /// Running statistics are updated in place (train mode) and are not
  /// differentiated.
  Var batchnorm(Var x, Var gamma, Var beta, Tensor& running_mean, Tensor& running_var, Mode mode,
                double momentum = 0.1, double epsilon = 1e-5) {
    auto cache = std::make_shared<BatchNormCache<Scalar>>();
    Tensor y = batchnorm3d(value(x), value(gamma), value(beta), running_mean, running_var, mode, momentum,
                           epsilon, cache.get());
    return record(std::move(y), {x, gamma, beta}, [x, gamma, beta, cache](Tape& t, const Tensor& up) {
      auto g = batchnorm3d_backward(*cache, t.value(gamma), up);
      t.accumulate(x, std::move(g.input));
      t.accumulate(gamma, std::move(g.gamma));
      t.accumulate(beta, std::move(g.beta));
    });
  }

  /// Seeds `root` with `upstream` and propagates to every recorded input.
  void backward(Var root, const Tensor& upstream) {
    Node& r = node(root);
    require_same_shape(value(root).shape(), upstream.shape(), "backward seed");
    for (std::size_t i = 0; i <= root.id; ++i)
      if (!nodes_[i].external) nodes_[i].grad.reset();
    accumulate(root, Tensor(upstream));
    if (!r.requires_grad) return;
    for (std::size_t i = root.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.backward || !n.grad) continue;
      Tensor up = std::move(*n.grad);
      n.grad.reset();
      n.backward(*this, up);
      n.grad = std::move(up);
    }
  }

 private:
  using BackwardFn = std::function<void(Tape&, const Tensor&)>;

  struct Node {
    Tensor value;
    Tensor* external = nullptr;
    std::optional<Tensor> grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  Var push(Node n) {
    nodes_.push_back(std::move(n));
    return Var{nodes_.size() - 1};
  }

  Node& node(Var v) {
    if (v.id >= nodes_.size()) throw UsageError("unknown tape entry " + std::to_string(v.id));
    return nodes_[v.id];
  }
  const Node& node(Var v) const {
    if (v.id >= nodes_.size()) throw UsageError("unknown tape entry " + std::to_string(v.id));
    return nodes_[v.id];
  }

  Var record(Tensor value, std::initializer_list<Var> parents, BackwardFn fn) {
    Node n;
    n.value = std::move(value);
    for (Var p : parents) n.requires_grad = n.requires_grad || node(p).requires_grad;
    if (n.requires_grad) n.backward = std::move(fn);
    return push(std::move(n));
  }

  void accumulate(Var v, Tensor g) {
    Node& n = node(v);
    if (!n.requires_grad) return;
    if (n.external) {
      require_same_shape(n.external->shape(), g.shape(), "parameter gradient");
      n.external->grad() += g.data();
      return;
    }
    if (!n.grad)
      n.grad = std::move(g);
    else
      n.grad->data() += g.data();
  }

  std::vector<Node> nodes_;
};

}  // namespace vdf

#pragma once

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "afflow/autodiff/tensor.hpp"

namespace afflow::ad {

// Backward rule for one recorded operation. grad_inputs[i] is null when
// input i does not need a gradient; otherwise the rule adds its
// contribution into the pointed-to buffer.
using BackwardFn = std::function<void(std::span<const double> grad_output,
                                      std::span<std::vector<double>* const> grad_inputs)>;

// Append-only tape. Constructing a Graph makes it the recording target for
// the current thread until it is destroyed; graphs nest like scopes. Ops run
// while no graph is active are not recorded (inference mode).
class Graph {
 public:
  Graph();
  ~Graph();
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  static Graph* active();

  // Returns true when the op was recorded (some input requires grad).
  bool record(std::string op, const std::vector<Tensor>& inputs, Tensor& output,
              BackwardFn backward);

  // Populates grads of every requires_grad leaf reachable from loss. Leaf
  // grads accumulate across calls; intermediate grads are reset each call.
  void backward(const Tensor& loss);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    std::string op;
    std::vector<std::shared_ptr<detail::TensorImpl>> inputs;
    std::shared_ptr<detail::TensorImpl> output;
    BackwardFn backward;
  };

  std::vector<Node> nodes_;
  Graph* previous_ = nullptr;
};

// Records a node on the active graph if any input requires grad.
bool record_op(std::string op, const std::vector<Tensor>& inputs, Tensor& output,
               BackwardFn backward);

// Throws NumericError naming op if any value is NaN or infinite.
void check_finite(std::span<const double> values, const std::string& op);

}  // namespace afflow::ad

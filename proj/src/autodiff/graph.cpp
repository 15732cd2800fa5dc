#include <bit>
#include <cstdint>
#include "afflow/autodiff/graph.hpp"

#include <cmath>

#include "afflow/errors.hpp"

namespace afflow::ad {

namespace {
thread_local Graph* g_active = nullptr;
}

void check_finite(std::span<const double> values, const std::string& op) {
  // exponent all ones means inf or nan; integer test vectorizes
  constexpr std::uint64_t kExp = 0x7ff0000000000000ULL;
  std::uint64_t bad = 0;
  for (double v : values) bad |= static_cast<std::uint64_t>((std::bit_cast<std::uint64_t>(v) & kExp) == kExp);
  if (bad) throw NumericError(op + ": non-finite value");
}

Graph::Graph() : previous_(g_active) { g_active = this; }

Graph::~Graph() { g_active = previous_; }

Graph* Graph::active() { return g_active; }

bool Graph::record(std::string op, const std::vector<Tensor>& inputs, Tensor& output,
                   BackwardFn backward) {
  bool any = false;
  for (const auto& t : inputs) any = any || t.requires_grad();
  if (!any) return false;
  Node node;
  node.op = std::move(op);
  node.inputs.reserve(inputs.size());
  for (const auto& t : inputs) node.inputs.push_back(t.impl());
  output.impl()->requires_grad = true;
  output.impl()->is_leaf = false;
  node.output = output.impl();
  node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return true;
}

void Graph::backward(const Tensor& loss) {
  if (!loss.defined() || loss.size() != 1)
    throw ShapeError("backward: loss must be a scalar, got " +
                     (loss.defined() ? shape_string(loss.shape()) : std::string("undefined")));
  if (!loss.requires_grad())
    throw ShapeError("backward: loss was not produced by a recorded graph");

  for (auto& node : nodes_) node.output->grad.clear();
  auto& seed = loss.impl()->grad;
  if (loss.is_leaf()) {
    if (seed.empty()) seed.assign(1, 0.0);
    seed[0] += 1.0;
    return;
  }
  seed.assign(1, 1.0);

  std::vector<std::vector<double>*> targets;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    Node& node = *it;
    if (node.output->grad.empty()) continue;
    targets.assign(node.inputs.size(), nullptr);
    for (std::size_t i = 0; i < node.inputs.size(); ++i) {
      auto& in = *node.inputs[i];
      if (!in.requires_grad) continue;
      if (in.grad.empty()) in.grad.assign(in.data.size(), 0.0);
      targets[i] = &in.grad;
    }
    node.backward(node.output->grad, targets);
    for (auto* g : targets)
      if (g) check_finite(*g, "backward of " + node.op);
  }
}

bool record_op(std::string op, const std::vector<Tensor>& inputs, Tensor& output,
               BackwardFn backward) {
  Graph* g = Graph::active();
  if (!g) return false;
  return g->record(std::move(op), inputs, output, std::move(backward));
}

}  // namespace afflow::ad

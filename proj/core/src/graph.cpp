#include "moestack/graph.hpp"

namespace moestack {

namespace {
thread_local bool g_grad_enabled = true;
}

Tape& Tape::current() {
  thread_local Tape tape;
  return tape;
}

bool Tape::recording() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

void Tape::backward(Tensor loss) {
  if (loss.numel() != 1) {
    throw ArgumentError("backward: loss must be scalar, got " +
                        shape_str(loss.shape()));
  }
  // Find the node that produced the loss; a leaf loss (no node) is legal
  // but then there is nothing to do beyond seeding its own grad.
  size_t end = nodes_.size();
  while (end > 0 && nodes_[end - 1].output.id() != loss.id()) --end;

  loss.grad()[0] += 1.0f;
  for (size_t i = end; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.output.has_grad() && n.backward) n.backward();
  }
  clear();
}

void backward(Tensor loss) { Tape::current().backward(std::move(loss)); }

}  // namespace moestack

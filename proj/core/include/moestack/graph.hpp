#pragma once

#include <functional>
#include <vector>

#include "moestack/tensor.hpp"

namespace moestack {

// Reverse-mode tape. Ops append a node when recording is active and at
// least one input requires grad; backward() replays the closures from the
// loss position down. One tape per thread (thread_local), so independent
// runs on different threads never interact.
class Tape {
 public:
  struct Node {
    const char* op;
    Tensor output;
    std::function<void()> backward;  // reads output grad, accumulates into inputs
  };

  static Tape& current();

  // True when ops should record (grad mode on and not inside NoGradGuard).
  static bool recording();

  void push(const char* op, Tensor output, std::function<void()> backward) {
    nodes_.push_back(Node{op, std::move(output), std::move(backward)});
  }

  size_t position() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

  // Seeds loss grad with 1 and runs closures in reverse topological
  // (= tape) order. Only nodes whose output grad was populated do work.
  // Clears the tape afterwards.
  void backward(Tensor loss);

 private:
  std::vector<Node> nodes_;
};

// RAII guard disabling recording, used for all eval-mode forwards.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// Convenience: Tape::current().backward(loss)
void backward(Tensor loss);

}  // namespace moestack

#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "ust/matrix.hpp"

namespace ust {

// Reverse-mode tape over Mat values. Operations append nodes in execution
// order; backward() replays them strictly in reverse, accumulating into
// per-node gradient buffers that start at zero. One tape serves one
// logical thread of execution; batching is done with one tape per
// sequence and an ordered reduction of leaf gradients.
class Tape {
 public:
  using Var = int32_t;

  Var leaf(const Mat& v) { return emit(v, nullptr); }

  Var emit(Mat value, std::function<void(Tape&)> back) {
    nodes_.push_back(Node{std::move(value), Mat(), std::move(back)});
    return static_cast<Var>(nodes_.size() - 1);
  }

  const Mat& val(Var v) const { return nodes_[v].val; }

  Mat& grad(Var v) {
    Node& n = nodes_[v];
    if (n.grad.size() == 0) n.grad = Mat::Zero(n.val.rows(), n.val.cols());
    return n.grad;
  }

  // Seeds d(out)/d(out) = seed for a 1x1 output node and propagates.
  void backward(Var out, double seed = 1.0);

  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat val;
    Mat grad;
    std::function<void(Tape&)> back;
  };
  std::vector<Node> nodes_;
};

using Var = Tape::Var;

Var tp_add(Tape& t, Var a, Var b);
Var tp_add_rowvec(Tape& t, Var a, Var bias);  // bias: 1 x cols, broadcast over rows
Var tp_scale(Tape& t, Var a, double s);
Var tp_matmul(Tape& t, Var a, Var b);
Var tp_gelu(Tape& t, Var a);
Var tp_layer_norm(Tape& t, Var x, Var gain, Var bias, double eps = 1e-5);
Var tp_dropout(Tape& t, Var a, double rate, CounterRng& rng);

// Sum of row gathers from several (table, ids) pairs; every ids vector has
// the same length T and the tables share their column count. Output is T x d.
struct GatherSpec {
  Var table;
  std::vector<int> ids;
};
Var tp_embed_sum(Tape& t, const std::vector<GatherSpec>& gathers);

// Multi-head scaled dot-product attention over one sequence.
// q, k, v: T x d with d divisible by heads. Causal restricts position i
// to keys 0..i. Softmax probabilities are kept for the backward pass.
Var tp_attention(Tape& t, Var q, Var k, Var v, int heads, bool causal);

// Scalar node: sum over rows with mask[i] != 0 of -log softmax(logits_i)[target_i],
// divided by denom. Gradient flows only into masked rows.
Var tp_masked_cross_entropy(Tape& t, Var logits, const std::vector<int>& targets,
                            const std::vector<uint8_t>& mask, double denom);

}  // namespace ust

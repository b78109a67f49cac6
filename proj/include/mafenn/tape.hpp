#pragma once

#include <unordered_map>
#include <vector>

#include "mafenn/tensor.hpp"

namespace mafenn {

// Reverse-mode autodiff over a flat op recording.  Nodes are identified by
// their record index, so the graph is acyclic by construction and
// backward() is a single reverse sweep in exact reverse recording order.
//
// Shapes: most ops are batched with an optional leading batch axis —
// linear accepts [B,I] or [I], conv1d accepts [B,T,C] or [T,C], and the
// output keeps the input's rank.  Weight tensors use the conventional
// orientations (linear W is [out,in], conv kernels are [F,w,Cin]); the
// tape internally caches transposed copies in the layout the compute
// kernels prefer, keyed by node id, so each weight is transposed once per
// tape no matter how many times it is consumed.
class Tape {
 public:
  // Records a leaf holding `value`.  Parameters pass requires_grad=true;
  // constants (inputs, targets) leave it false and never receive grads.
  int leaf(Tensor value, bool requires_grad = false);

  // y = W x + b with W [O,I], b [O], x [B,I] or [I].
  int linear(int x, int W, int b);
  // Valid cross-correlation over time: x [B,T,Cin] or [T,Cin], kernels
  // [F,w,Cin], bias [F] -> [B,T-w+1,F].  Requires w <= T.
  int conv1d(int x, int kernels, int bias);
  int relu(int x);
  // Row-wise softmax over the last axis of [B,M] or [M].
  int softmax(int x);
  // One LSTM step.  x [B,I]; hc_prev [B,2H] packs [h | c]; w_ih [4H,I],
  // w_hh [4H,H], b [4H] in gate order (input, forget, cell, output).
  // Returns the packed [B,2H] next state.
  int lstm_cell(int x, int hc_prev, int w_ih, int w_hh, int b);
  // Column slice [B, lo:hi) of a rank-2 node (e.g. h out of [h | c]).
  int slice_cols(int x, int lo, int hi);
  // Row t of the time axis: [B,T,C] -> [B,C].
  int time_slice(int x, int t);
  // Append one time row: block [B,T,C] + row [B,C] -> [B,T+1,C].
  int append_time_row(int block, int row);
  // Mean complex squared error between pred [B,2] and a constant target.
  int mse(int pred, const Tensor& target);
  // Mean negative log-likelihood of `labels` under probs [B,M]; the log
  // argument is floored at 1e-12.
  int cross_entropy(int probs, const std::vector<int>& labels);
  // value(a) + beta * value(b) for scalar nodes.
  int add_weighted(int a, int b, double beta);

  // Reverse sweep seeding d(loss) = 1.  `loss` must be a scalar node.
  // Gradients of all earlier calls are discarded.
  void backward(int loss);

  const Tensor& value(int id) const { return nodes_[check(id)].val; }
  // Valid after backward(); zero for nodes the loss does not reach.
  const Tensor& grad(int id) const { return nodes_[check(id)].grad; }
  std::size_t size() const { return nodes_.size(); }

 private:
  enum class Op {
    kLeaf,
    kLinear,
    kConv1d,
    kRelu,
    kSoftmax,
    kLstm,
    kSliceCols,
    kTimeSlice,
    kAppendRow,
    kMse,
    kCrossEntropy,
    kAddWeighted,
  };

  struct Node {
    Op op = Op::kLeaf;
    int in[5] = {-1, -1, -1, -1, -1};
    int n_in = 0;
    bool req = false;  // reachable from a requires_grad leaf
    Tensor val;
    Tensor grad;
    Tensor aux;               // op-specific (LSTM activated gates, ...)
    Tensor target;            // mse target
    std::vector<int> labels;  // cross-entropy labels
    double beta = 0.0;        // add_weighted
    int a0 = 0, a1 = 0;       // slice bounds / time index
  };

  int push(Node n);
  int check(int id) const;
  bool any_req(std::initializer_list<int> ids) const;
  // Transposed copy of a weight node in kernel layout, cached per tape.
  const Tensor& transposed(int id);

  void backward_node(int id);

  std::vector<Node> nodes_;
  std::unordered_map<int, Tensor> wt_cache_;
};

}  // namespace mafenn

#include "mafenn/tape.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "mafenn/kernels.hpp"

namespace mafenn {

namespace {

constexpr double kLogFloor = 1e-12;

[[noreturn]] void shape_error(const char* what) {
  throw std::invalid_argument(std::string("tape: ") + what);
}

}  // namespace

int Tape::push(Node n) {
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size()) - 1;
}

int Tape::check(int id) const {
  if (id < 0 || id >= static_cast<int>(nodes_.size()))
    throw std::invalid_argument("tape: unknown node id");
  return id;
}

bool Tape::any_req(std::initializer_list<int> ids) const {
  for (int id : ids)
    if (nodes_[id].req) return true;
  return false;
}

const Tensor& Tape::transposed(int id) {
  auto it = wt_cache_.find(id);
  if (it != wt_cache_.end()) return it->second;
  const Tensor& w = nodes_[id].val;
  Tensor t;
  if (w.rank() == 2) {
    // [O,I] -> [I,O]
    const int O = w.dim(0), I = w.dim(1);
    t = Tensor({I, O});
    for (int o = 0; o < O; ++o)
      for (int i = 0; i < I; ++i) t(i, o) = w(o, i);
  } else {
    // conv kernels [F,w,C] -> [w*C, F]
    const int F = w.dim(0), W = w.dim(1), C = w.dim(2);
    t = Tensor({W * C, F});
    for (int f = 0; f < F; ++f)
      for (int j = 0; j < W; ++j)
        for (int c = 0; c < C; ++c) t(j * C + c, f) = w(f, j, c);
  }
  return wt_cache_.emplace(id, std::move(t)).first->second;
}

int Tape::leaf(Tensor value, bool requires_grad) {
  Node n;
  n.op = Op::kLeaf;
  n.req = requires_grad;
  n.val = std::move(value);
  return push(std::move(n));
}

int Tape::linear(int x, int W, int b) {
  const Tensor& xv = value(x);
  const Tensor& wv = value(W);
  const Tensor& bv = value(b);
  if (wv.rank() != 2 || bv.rank() != 1 || bv.dim(0) != wv.dim(0))
    shape_error("linear: bad weight/bias shapes");
  const int O = wv.dim(0), I = wv.dim(1);
  const bool batched = xv.rank() == 2;
  if (!batched && xv.rank() != 1) shape_error("linear: input rank");
  const int B = batched ? xv.dim(0) : 1;
  if ((batched ? xv.dim(1) : xv.dim(0)) != I)
    shape_error("linear: input width mismatch");

  Node n;
  n.op = Op::kLinear;
  n.in[0] = x;
  n.in[1] = W;
  n.in[2] = b;
  n.n_in = 3;
  n.req = any_req({x, W, b});
  n.val = Tensor(batched ? std::vector<int>{B, O} : std::vector<int>{O});
  const Tensor& wt = transposed(W);
  kernels::matmul(xv.ptr(), wt.ptr(), n.val.ptr(), B, I, O, false);
  kernels::add_bias_rows(n.val.ptr(), bv.ptr(), B, O);
  return push(std::move(n));
}

int Tape::conv1d(int x, int kernels_id, int bias) {
  const Tensor& xv = value(x);
  const Tensor& kv = value(kernels_id);
  const Tensor& bv = value(bias);
  if (kv.rank() != 3) shape_error("conv1d: kernels must be [F,w,C]");
  const int F = kv.dim(0), w = kv.dim(1), C = kv.dim(2);
  if (bv.rank() != 1 || bv.dim(0) != F) shape_error("conv1d: bias shape");
  const bool batched = xv.rank() == 3;
  if (!batched && xv.rank() != 2) shape_error("conv1d: input rank");
  const int B = batched ? xv.dim(0) : 1;
  const int T = batched ? xv.dim(1) : xv.dim(0);
  const int Cx = batched ? xv.dim(2) : xv.dim(1);
  if (Cx != C) shape_error("conv1d: channel mismatch");
  if (w > T) shape_error("conv1d: kernel wider than input");
  const int Tout = T - w + 1;

  Node n;
  n.op = Op::kConv1d;
  n.in[0] = x;
  n.in[1] = kernels_id;
  n.in[2] = bias;
  n.n_in = 3;
  n.req = any_req({x, kernels_id, bias});
  n.val = Tensor(batched ? std::vector<int>{B, Tout, F}
                         : std::vector<int>{Tout, F});
  const Tensor& kt = transposed(kernels_id);
  kernels::conv1d(xv.ptr(), kt.ptr(), bv.ptr(), n.val.ptr(), B, T, C, F, w);
  return push(std::move(n));
}

int Tape::relu(int x) {
  const Tensor& xv = value(x);
  Node n;
  n.op = Op::kRelu;
  n.in[0] = x;
  n.n_in = 1;
  n.req = nodes_[x].req;
  n.val = Tensor(xv.shape);
  kernels::relu(xv.ptr(), n.val.ptr(), xv.numel());
  return push(std::move(n));
}

int Tape::softmax(int x) {
  const Tensor& xv = value(x);
  if (xv.rank() != 1 && xv.rank() != 2) shape_error("softmax: input rank");
  const int B = xv.rank() == 2 ? xv.dim(0) : 1;
  const int M = xv.rank() == 2 ? xv.dim(1) : xv.dim(0);
  Node n;
  n.op = Op::kSoftmax;
  n.in[0] = x;
  n.n_in = 1;
  n.req = nodes_[x].req;
  n.val = Tensor(xv.shape);
  kernels::softmax_rows(xv.ptr(), n.val.ptr(), B, M);
  return push(std::move(n));
}

int Tape::lstm_cell(int x, int hc_prev, int w_ih, int w_hh, int b) {
  const Tensor& xv = value(x);
  const Tensor& hcv = value(hc_prev);
  const Tensor& wihv = value(w_ih);
  const Tensor& whhv = value(w_hh);
  const Tensor& bv = value(b);
  if (xv.rank() != 2 || hcv.rank() != 2) shape_error("lstm: inputs must be rank 2");
  const int B = xv.dim(0), I = xv.dim(1);
  if (hcv.dim(0) != B || hcv.dim(1) % 2 != 0) shape_error("lstm: state shape");
  const int H = hcv.dim(1) / 2;
  if (wihv.rank() != 2 || wihv.dim(0) != 4 * H || wihv.dim(1) != I)
    shape_error("lstm: w_ih shape");
  if (whhv.rank() != 2 || whhv.dim(0) != 4 * H || whhv.dim(1) != H)
    shape_error("lstm: w_hh shape");
  if (bv.rank() != 1 || bv.dim(0) != 4 * H) shape_error("lstm: bias shape");

  // Split the packed previous state.
  Tensor h_prev({B, H}), c_prev({B, H});
  for (int bb = 0; bb < B; ++bb)
    for (int j = 0; j < H; ++j) {
      h_prev(bb, j) = hcv(bb, j);
      c_prev(bb, j) = hcv(bb, H + j);
    }

  Tensor a({B, 4 * H});
  kernels::matmul(xv.ptr(), transposed(w_ih).ptr(), a.ptr(), B, I, 4 * H,
                  false);
  kernels::add_bias_rows(a.ptr(), bv.ptr(), B, 4 * H);
  kernels::matmul(h_prev.ptr(), transposed(w_hh).ptr(), a.ptr(), B, H, 4 * H,
                  true);

  Node n;
  n.op = Op::kLstm;
  n.in[0] = x;
  n.in[1] = hc_prev;
  n.in[2] = w_ih;
  n.in[3] = w_hh;
  n.in[4] = b;
  n.n_in = 5;
  n.req = any_req({x, hc_prev, w_ih, w_hh, b});
  n.aux = Tensor({B, 4 * H});  // activated gates, kept for backward
  Tensor c_new({B, H}), h_new({B, H});
  kernels::lstm_point(a.ptr(), c_prev.ptr(), n.aux.ptr(), c_new.ptr(),
                      h_new.ptr(), B, H);
  n.val = Tensor({B, 2 * H});
  for (int bb = 0; bb < B; ++bb)
    for (int j = 0; j < H; ++j) {
      n.val(bb, j) = h_new(bb, j);
      n.val(bb, H + j) = c_new(bb, j);
    }
  return push(std::move(n));
}

int Tape::slice_cols(int x, int lo, int hi) {
  const Tensor& xv = value(x);
  if (xv.rank() != 2 || lo < 0 || hi > xv.dim(1) || lo >= hi)
    shape_error("slice_cols: bad bounds");
  const int B = xv.dim(0), W = hi - lo;
  Node n;
  n.op = Op::kSliceCols;
  n.in[0] = x;
  n.n_in = 1;
  n.req = nodes_[x].req;
  n.a0 = lo;
  n.a1 = hi;
  n.val = Tensor({B, W});
  for (int b = 0; b < B; ++b)
    for (int j = 0; j < W; ++j) n.val(b, j) = xv(b, lo + j);
  return push(std::move(n));
}

int Tape::time_slice(int x, int t) {
  const Tensor& xv = value(x);
  if (xv.rank() != 3 || t < 0 || t >= xv.dim(1))
    shape_error("time_slice: bad index");
  const int B = xv.dim(0), C = xv.dim(2);
  Node n;
  n.op = Op::kTimeSlice;
  n.in[0] = x;
  n.n_in = 1;
  n.req = nodes_[x].req;
  n.a0 = t;
  n.val = Tensor({B, C});
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) n.val(b, c) = xv(b, t, c);
  return push(std::move(n));
}

int Tape::append_time_row(int block, int row) {
  const Tensor& bv = value(block);
  const Tensor& rv = value(row);
  if (bv.rank() != 3 || rv.rank() != 2 || bv.dim(0) != rv.dim(0) ||
      bv.dim(2) != rv.dim(1))
    shape_error("append_time_row: shape mismatch");
  const int B = bv.dim(0), T = bv.dim(1), C = bv.dim(2);
  Node n;
  n.op = Op::kAppendRow;
  n.in[0] = block;
  n.in[1] = row;
  n.n_in = 2;
  n.req = any_req({block, row});
  n.val = Tensor({B, T + 1, C});
  for (int b = 0; b < B; ++b) {
    for (int t = 0; t < T; ++t)
      for (int c = 0; c < C; ++c) n.val(b, t, c) = bv(b, t, c);
    for (int c = 0; c < C; ++c) n.val(b, T, c) = rv(b, c);
  }
  return push(std::move(n));
}

int Tape::mse(int pred, const Tensor& target) {
  const Tensor& pv = value(pred);
  if (pv.rank() != 2 || pv.dim(1) != 2) shape_error("mse: pred must be [B,2]");
  if (!pv.same_shape(target)) shape_error("mse: length mismatch");
  const int B = pv.dim(0);
  Node n;
  n.op = Op::kMse;
  n.in[0] = pred;
  n.n_in = 1;
  n.req = nodes_[pred].req;
  n.target = target;
  double s = 0.0;
  for (int b = 0; b < B; ++b) {
    const double di = pv(b, 0) - target(b, 0);
    const double dq = pv(b, 1) - target(b, 1);
    s += di * di + dq * dq;
  }
  n.val = Tensor({1});
  n.val(0) = s / B;
  return push(std::move(n));
}

int Tape::cross_entropy(int probs, const std::vector<int>& labels) {
  const Tensor& pv = value(probs);
  if (pv.rank() != 2) shape_error("cross_entropy: probs must be [B,M]");
  const int B = pv.dim(0), M = pv.dim(1);
  if (static_cast<int>(labels.size()) != B)
    shape_error("cross_entropy: label count mismatch");
  Node n;
  n.op = Op::kCrossEntropy;
  n.in[0] = probs;
  n.n_in = 1;
  n.req = nodes_[probs].req;
  n.labels = labels;
  double s = 0.0;
  for (int b = 0; b < B; ++b) {
    const int m = labels[b];
    if (m < 0 || m >= M) shape_error("cross_entropy: label out of range");
    s -= std::log(std::max(pv(b, m), kLogFloor));
  }
  n.val = Tensor({1});
  n.val(0) = s / B;
  return push(std::move(n));
}

int Tape::add_weighted(int a, int b, double beta) {
  const Tensor& av = value(a);
  const Tensor& bv = value(b);
  if (av.numel() != 1 || bv.numel() != 1)
    shape_error("add_weighted: scalar nodes required");
  Node n;
  n.op = Op::kAddWeighted;
  n.in[0] = a;
  n.in[1] = b;
  n.n_in = 2;
  n.req = any_req({a, b});
  n.beta = beta;
  n.val = Tensor({1});
  n.val(0) = av(0) + beta * bv(0);
  return push(std::move(n));
}

void Tape::backward(int loss) {
  check(loss);
  if (nodes_[loss].val.numel() != 1)
    throw std::invalid_argument("tape: backward loss must be scalar");
  for (auto& n : nodes_) {
    n.grad = Tensor(n.val.shape);  // zero-filled
  }
  nodes_[loss].grad(0) = 1.0;
  for (int id = loss; id >= 0; --id) {
    if (nodes_[id].req && nodes_[id].op != Op::kLeaf) backward_node(id);
  }
}

void Tape::backward_node(int id) {
  Node& n = nodes_[id];
  const Tensor& dy = n.grad;
  auto req = [&](int slot) { return nodes_[n.in[slot]].req; };
  auto g = [&](int slot) -> Tensor& { return nodes_[n.in[slot]].grad; };
  auto v = [&](int slot) -> const Tensor& { return nodes_[n.in[slot]].val; };

  switch (n.op) {
    case Op::kLinear: {
      const Tensor& xv = v(0);
      const bool batched = xv.rank() == 2;
      const int B = batched ? xv.dim(0) : 1;
      const int I = batched ? xv.dim(1) : xv.dim(0);
      const int O = v(1).dim(0);
      if (req(0))
        kernels::matmul_dx(dy.ptr(), transposed(n.in[1]).ptr(), g(0).ptr(), B,
                           I, O, true);
      if (req(1)) {
        Tensor dwt({I, O});
        kernels::matmul_dw(dy.ptr(), xv.ptr(), dwt.ptr(), B, I, O, false);
        Tensor& gw = g(1);
        for (int o = 0; o < O; ++o)
          for (int i = 0; i < I; ++i) gw(o, i) += dwt(i, o);
      }
      if (req(2)) kernels::col_sums(dy.ptr(), g(2).ptr(), B, O, true);
      break;
    }
    case Op::kConv1d: {
      const Tensor& xv = v(0);
      const Tensor& kv = v(1);
      const bool batched = xv.rank() == 3;
      const int B = batched ? xv.dim(0) : 1;
      const int T = batched ? xv.dim(1) : xv.dim(0);
      const int F = kv.dim(0), w = kv.dim(1), C = kv.dim(2);
      if (req(0))
        kernels::conv1d_dx(dy.ptr(), transposed(n.in[1]).ptr(), g(0).ptr(), B,
                           T, C, F, w, true);
      if (req(1) || req(2)) {
        Tensor dkt({w * C, F}), dbt({F});
        kernels::conv1d_dk(dy.ptr(), xv.ptr(), dkt.ptr(), dbt.ptr(), B, T, C,
                           F, w, false);
        if (req(1)) {
          Tensor& gk = g(1);
          for (int f = 0; f < F; ++f)
            for (int j = 0; j < w; ++j)
              for (int c = 0; c < C; ++c) gk(f, j, c) += dkt(j * C + c, f);
        }
        if (req(2)) {
          Tensor& gb = g(2);
          for (int f = 0; f < F; ++f) gb(f) += dbt(f);
        }
      }
      break;
    }
    case Op::kRelu:
      if (req(0))
        kernels::relu_dx(v(0).ptr(), dy.ptr(), g(0).ptr(), dy.numel(), true);
      break;
    case Op::kSoftmax: {
      if (req(0)) {
        const int B = n.val.rank() == 2 ? n.val.dim(0) : 1;
        const int M = n.val.rank() == 2 ? n.val.dim(1) : n.val.dim(0);
        kernels::softmax_dx(n.val.ptr(), dy.ptr(), g(0).ptr(), B, M, true);
      }
      break;
    }
    case Op::kLstm: {
      const Tensor& xv = v(0);
      const Tensor& hcv = v(1);
      const int B = xv.dim(0), I = xv.dim(1), H = hcv.dim(1) / 2;
      Tensor h_prev({B, H}), c_prev({B, H}), c_new({B, H}), dh({B, H}),
          dc({B, H});
      for (int b = 0; b < B; ++b)
        for (int j = 0; j < H; ++j) {
          h_prev(b, j) = hcv(b, j);
          c_prev(b, j) = hcv(b, H + j);
          c_new(b, j) = n.val(b, H + j);
          dh(b, j) = dy(b, j);
          dc(b, j) = dy(b, H + j);
        }
      Tensor da({B, 4 * H}), dc_prev({B, H});
      kernels::lstm_point_back(n.aux.ptr(), c_prev.ptr(), c_new.ptr(),
                               dh.ptr(), dc.ptr(), da.ptr(), dc_prev.ptr(), B,
                               H);
      if (req(0))
        kernels::matmul_dx(da.ptr(), transposed(n.in[2]).ptr(), g(0).ptr(), B,
                           I, 4 * H, true);
      if (req(1)) {
        Tensor dhp({B, H});
        kernels::matmul_dx(da.ptr(), transposed(n.in[3]).ptr(), dhp.ptr(), B,
                           H, 4 * H, false);
        Tensor& ghc = g(1);
        for (int b = 0; b < B; ++b)
          for (int j = 0; j < H; ++j) {
            ghc(b, j) += dhp(b, j);
            ghc(b, H + j) += dc_prev(b, j);
          }
      }
      if (req(2)) {
        Tensor dwt({I, 4 * H});
        kernels::matmul_dw(da.ptr(), xv.ptr(), dwt.ptr(), B, I, 4 * H, false);
        Tensor& gw = g(2);
        for (int o = 0; o < 4 * H; ++o)
          for (int i = 0; i < I; ++i) gw(o, i) += dwt(i, o);
      }
      if (req(3)) {
        Tensor dwt({H, 4 * H});
        kernels::matmul_dw(da.ptr(), h_prev.ptr(), dwt.ptr(), B, H, 4 * H,
                           false);
        Tensor& gw = g(3);
        for (int o = 0; o < 4 * H; ++o)
          for (int i = 0; i < H; ++i) gw(o, i) += dwt(i, o);
      }
      if (req(4)) kernels::col_sums(da.ptr(), g(4).ptr(), B, 4 * H, true);
      break;
    }
    case Op::kSliceCols: {
      if (req(0)) {
        Tensor& gx = g(0);
        const int B = n.val.dim(0), W = n.val.dim(1);
        for (int b = 0; b < B; ++b)
          for (int j = 0; j < W; ++j) gx(b, n.a0 + j) += dy(b, j);
      }
      break;
    }
    case Op::kTimeSlice: {
      if (req(0)) {
        Tensor& gx = g(0);
        const int B = n.val.dim(0), C = n.val.dim(1);
        for (int b = 0; b < B; ++b)
          for (int c = 0; c < C; ++c) gx(b, n.a0, c) += dy(b, c);
      }
      break;
    }
    case Op::kAppendRow: {
      const int B = n.val.dim(0), T1 = n.val.dim(1), C = n.val.dim(2);
      if (req(0)) {
        Tensor& gb = g(0);
        for (int b = 0; b < B; ++b)
          for (int t = 0; t < T1 - 1; ++t)
            for (int c = 0; c < C; ++c) gb(b, t, c) += dy(b, t, c);
      }
      if (req(1)) {
        Tensor& gr = g(1);
        for (int b = 0; b < B; ++b)
          for (int c = 0; c < C; ++c) gr(b, c) += dy(b, T1 - 1, c);
      }
      break;
    }
    case Op::kMse: {
      if (req(0)) {
        const Tensor& pv = v(0);
        const int B = pv.dim(0);
        const double gs = 2.0 * dy(0) / B;
        Tensor& gp = g(0);
        for (int b = 0; b < B; ++b) {
          gp(b, 0) += gs * (pv(b, 0) - n.target(b, 0));
          gp(b, 1) += gs * (pv(b, 1) - n.target(b, 1));
        }
      }
      break;
    }
    case Op::kCrossEntropy: {
      if (req(0)) {
        const Tensor& pv = v(0);
        const int B = pv.dim(0);
        Tensor& gp = g(0);
        for (int b = 0; b < B; ++b) {
          const int m = n.labels[b];
          gp(b, m) -= dy(0) / (B * std::max(pv(b, m), kLogFloor));
        }
      }
      break;
    }
    case Op::kAddWeighted:
      if (req(0)) g(0)(0) += dy(0);
      if (req(1)) g(1)(0) += n.beta * dy(0);
      break;
    case Op::kLeaf:
      break;
  }
}

}  // namespace mafenn

// SPDX-License-Identifier: Apache-2.0
#include "dpf/autodiff.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <unordered_set>

namespace dpf {

namespace {

thread_local bool g_grad_enabled = true;

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using CMatMap = Eigen::Map<const RowMat>;

NodePtr leaf(Tensor v, bool requires_grad = false) {
  auto n = std::make_shared<Node>();
  n->value = std::move(v);
  n->requires_grad = requires_grad;
  return n;
}

bool any_requires_grad(const std::vector<NodePtr>& ins) {
  for (const auto& n : ins) {
    if (n && n->requires_grad) return true;
  }
  return false;
}

// Creates a graph node when autograd is on; otherwise a detached leaf.
Var make_op(Tensor value, std::vector<NodePtr> inputs, std::function<void(Node&)> bwd) {
  if (!g_grad_enabled || !any_requires_grad(inputs)) {
    return Var(leaf(std::move(value)));
  }
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = true;
  n->inputs = std::move(inputs);
  n->backward_fn = std::move(bwd);
  return Var(n);
}

void require_defined(const Var& v, const char* who) {
  if (!v.defined()) throw ContractError(std::string(who) + ": undefined operand");
}

}  // namespace

Var::Var(Tensor v, bool requires_grad) : node(leaf(std::move(v), requires_grad)) {}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

void backward(const Var& root) {
  require_defined(root, "backward");
  if (root.value().numel() != 1) {
    throw ContractError("backward: root must be scalar, got " + root.value().shape_str());
  }
  // Iterative DFS post-order.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, size_t>> stack;
  stack.emplace_back(root.node.get(), 0);
  visited.insert(root.node.get());
  while (!stack.empty()) {
    auto& [n, idx] = stack.back();
    if (idx < n->inputs.size()) {
      Node* child = n->inputs[idx++].get();
      if (child && child->requires_grad && !visited.count(child)) {
        visited.insert(child);
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  root.node->ensure_grad()(0) += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && n->grad.defined()) n->backward_fn(*n);
  }
}

namespace ops {

Var constant(Tensor v) { return Var(leaf(std::move(v))); }

Var add(const Var& a, const Var& b) {
  require_defined(a, "add");
  require_defined(b, "add");
  if (!a.value().same_shape(b.value())) {
    throw ShapeError("add: shape mismatch " + a.value().shape_str() + " vs " +
                     b.value().shape_str());
  }
  Tensor out = a.value();
  out.add_(b.value());
  return make_op(std::move(out), {a.node, b.node}, [](Node& self) {
    for (int k = 0; k < 2; ++k) {
      Node* in = self.inputs[k].get();
      if (in->requires_grad) in->ensure_grad().add_(self.grad);
    }
  });
}

Var sub(const Var& a, const Var& b) {
  require_defined(a, "sub");
  require_defined(b, "sub");
  if (!a.value().same_shape(b.value())) {
    throw ShapeError("sub: shape mismatch");
  }
  Tensor out = a.value();
  out.add_(b.value(), -1.0);
  return make_op(std::move(out), {a.node, b.node}, [](Node& self) {
    Node* a = self.inputs[0].get();
    Node* b = self.inputs[1].get();
    if (a->requires_grad) a->ensure_grad().add_(self.grad);
    if (b->requires_grad) b->ensure_grad().add_(self.grad, -1.0);
  });
}

namespace {

// Strides with 0 on broadcast (size-1) dims, so a flat walk over the output
// indexes both operands.
std::vector<int64_t> bcast_strides(const std::vector<int64_t>& shape,
                                   const std::vector<int64_t>& out_shape) {
  std::vector<int64_t> strides(shape.size());
  int64_t s = 1;
  for (int64_t i = static_cast<int64_t>(shape.size()) - 1; i >= 0; --i) {
    strides[i] = (shape[i] == 1) ? 0 : s;
    s *= shape[i];
  }
  for (size_t i = 0; i < shape.size(); ++i) {
    if (shape[i] != out_shape[i] && shape[i] != 1) {
      throw ShapeError("mul: dims not broadcastable");
    }
  }
  return strides;
}

template <typename F>
void bcast_walk(const std::vector<int64_t>& out_shape, const std::vector<int64_t>& sa,
                const std::vector<int64_t>& sb, F&& f) {
  // Generic rank<=4 walk; lower ranks padded conceptually by the caller.
  int64_t d0 = out_shape.size() > 0 ? out_shape[0] : 1;
  int64_t d1 = out_shape.size() > 1 ? out_shape[1] : 1;
  int64_t d2 = out_shape.size() > 2 ? out_shape[2] : 1;
  int64_t d3 = out_shape.size() > 3 ? out_shape[3] : 1;
  auto st = [](const std::vector<int64_t>& s, size_t i) {
    return i < s.size() ? s[i] : 0;
  };
  int64_t idx = 0;
  for (int64_t i = 0; i < d0; ++i) {
    for (int64_t j = 0; j < d1; ++j) {
      for (int64_t k = 0; k < d2; ++k) {
        int64_t oa = i * st(sa, 0) + j * st(sa, 1) + k * st(sa, 2);
        int64_t ob = i * st(sb, 0) + j * st(sb, 1) + k * st(sb, 2);
        int64_t sa3 = st(sa, 3), sb3 = st(sb, 3);
        for (int64_t l = 0; l < d3; ++l) {
          f(idx++, oa + l * sa3, ob + l * sb3);
        }
      }
    }
  }
}

}  // namespace

Var mul(const Var& a, const Var& b) {
  require_defined(a, "mul");
  require_defined(b, "mul");
  const auto& as = a.value().shape();
  const auto& bs = b.value().shape();
  if (as.size() != bs.size()) throw ShapeError("mul: rank mismatch");
  std::vector<int64_t> os(as.size());
  for (size_t i = 0; i < as.size(); ++i) {
    if (as[i] != bs[i] && as[i] != 1 && bs[i] != 1) {
      throw ShapeError("mul: dims not broadcastable");
    }
    os[i] = std::max(as[i], bs[i]);
  }
  auto sa = bcast_strides(as, os);
  auto sb = bcast_strides(bs, os);
  Tensor out(os);
  {
    const double* pa = a.value().data();
    const double* pb = b.value().data();
    double* po = out.data();
    bcast_walk(os, sa, sb, [&](int64_t o, int64_t ia, int64_t ib) { po[o] = pa[ia] * pb[ib]; });
  }
  return make_op(std::move(out), {a.node, b.node}, [os, sa, sb](Node& self) {
    Node* a = self.inputs[0].get();
    Node* b = self.inputs[1].get();
    const double* g = self.grad.data();
    const double* pa = a->value.data();
    const double* pb = b->value.data();
    double* ga = a->requires_grad ? a->ensure_grad().data() : nullptr;
    double* gb = b->requires_grad ? b->ensure_grad().data() : nullptr;
    bcast_walk(os, sa, sb, [&](int64_t o, int64_t ia, int64_t ib) {
      if (ga) ga[ia] += g[o] * pb[ib];
      if (gb) gb[ib] += g[o] * pa[ia];
    });
  });
}

Var scale(const Var& a, double k) {
  require_defined(a, "scale");
  Tensor out = a.value();
  out.scale_(k);
  return make_op(std::move(out), {a.node}, [k](Node& self) {
    self.inputs[0]->ensure_grad().add_(self.grad, k);
  });
}

Var relu(const Var& x) {
  require_defined(x, "relu");
  Tensor out = x.value();
  for (double& v : out.vec()) v = v > 0.0 ? v : 0.0;
  return make_op(std::move(out), {x.node}, [](Node& self) {
    Node* in = self.inputs[0].get();
    const double* xv = in->value.data();
    const double* g = self.grad.data();
    double* gx = in->ensure_grad().data();
    int64_t n = self.value.numel();
    for (int64_t i = 0; i < n; ++i) {
      if (xv[i] > 0.0) gx[i] += g[i];
    }
  });
}

Var sigmoid(const Var& x) {
  require_defined(x, "sigmoid");
  Tensor out = x.value();
  for (double& v : out.vec()) v = 1.0 / (1.0 + std::exp(-v));
  return make_op(std::move(out), {x.node}, [](Node& self) {
    Node* in = self.inputs[0].get();
    const double* y = self.value.data();
    const double* g = self.grad.data();
    double* gx = in->ensure_grad().data();
    int64_t n = self.value.numel();
    for (int64_t i = 0; i < n; ++i) gx[i] += g[i] * y[i] * (1.0 - y[i]);
  });
}

Var softplus(const Var& x) {
  require_defined(x, "softplus");
  Tensor out = x.value();
  for (double& v : out.vec()) {
    if (v > 30.0) {
      // v unchanged: softplus(v) ~ v
    } else if (v < -30.0) {
      v = std::exp(v);
    } else {
      v = std::log1p(std::exp(v));
    }
  }
  return make_op(std::move(out), {x.node}, [](Node& self) {
    Node* in = self.inputs[0].get();
    const double* xv = in->value.data();
    const double* g = self.grad.data();
    double* gx = in->ensure_grad().data();
    int64_t n = self.value.numel();
    for (int64_t i = 0; i < n; ++i) gx[i] += g[i] / (1.0 + std::exp(-xv[i]));
  });
}

Var abs(const Var& x) {
  require_defined(x, "abs");
  Tensor out = x.value();
  for (double& v : out.vec()) v = std::fabs(v);
  return make_op(std::move(out), {x.node}, [](Node& self) {
    Node* in = self.inputs[0].get();
    const double* xv = in->value.data();
    const double* g = self.grad.data();
    double* gx = in->ensure_grad().data();
    int64_t n = self.value.numel();
    for (int64_t i = 0; i < n; ++i) {
      if (xv[i] > 0.0) {
        gx[i] += g[i];
      } else if (xv[i] < 0.0) {
        gx[i] -= g[i];
      }
    }
  });
}

Var exp(const Var& x) {
  require_defined(x, "exp");
  Tensor out = x.value();
  for (double& v : out.vec()) v = std::exp(v);
  return make_op(std::move(out), {x.node}, [](Node& self) {
    Node* in = self.inputs[0].get();
    const double* y = self.value.data();
    const double* g = self.grad.data();
    double* gx = in->ensure_grad().data();
    int64_t n = self.value.numel();
    for (int64_t i = 0; i < n; ++i) gx[i] += g[i] * y[i];
  });
}

Var log_floor(const Var& x, double eps) {
  require_defined(x, "log_floor");
  if (eps <= 0.0) throw ValueError("log_floor: eps must be positive");
  Tensor out = x.value();
  for (double& v : out.vec()) v = std::log(std::max(v, eps));
  return make_op(std::move(out), {x.node}, [eps](Node& self) {
    Node* in = self.inputs[0].get();
    const double* xv = in->value.data();
    const double* g = self.grad.data();
    double* gx = in->ensure_grad().data();
    int64_t n = self.value.numel();
    for (int64_t i = 0; i < n; ++i) {
      if (xv[i] > eps) gx[i] += g[i] / xv[i];
    }
  });
}

Var mean_all(const Var& x) {
  require_defined(x, "mean_all");
  Tensor out = Tensor::scalar(x.value().mean());
  int64_t n = x.value().numel();
  return make_op(std::move(out), {x.node}, [n](Node& self) {
    double g = self.grad(0) / static_cast<double>(n);
    double* gx = self.inputs[0]->ensure_grad().data();
    for (int64_t i = 0; i < n; ++i) gx[i] += g;
  });
}

Var reshape(const Var& x, std::vector<int64_t> shape) {
  require_defined(x, "reshape");
  Tensor out = x.value().reshaped(shape);
  return make_op(std::move(out), {x.node}, [](Node& self) {
    Node* in = self.inputs[0].get();
    Tensor& gx = in->ensure_grad();
    const double* g = self.grad.data();
    double* p = gx.data();
    int64_t n = gx.numel();
    for (int64_t i = 0; i < n; ++i) p[i] += g[i];
  });
}

Var concat(const Var& a, const Var& b, int64_t axis) {
  require_defined(a, "concat");
  require_defined(b, "concat");
  const auto& as = a.value().shape();
  const auto& bs = b.value().shape();
  if (as.size() != bs.size()) throw ShapeError("concat: rank mismatch");
  if (axis < 0) axis += static_cast<int64_t>(as.size());
  for (size_t i = 0; i < as.size(); ++i) {
    if (static_cast<int64_t>(i) != axis && as[i] != bs[i]) {
      throw ShapeError("concat: non-axis dims must match");
    }
  }
  std::vector<int64_t> os = as;
  os[axis] += bs[axis];
  int64_t outer = 1, inner = 1;
  for (int64_t i = 0; i < axis; ++i) outer *= as[i];
  for (size_t i = axis + 1; i < as.size(); ++i) inner *= as[i];
  int64_t wa = as[axis] * inner, wb = bs[axis] * inner;
  Tensor out(os);
  {
    const double* pa = a.value().data();
    const double* pb = b.value().data();
    double* po = out.data();
    for (int64_t o = 0; o < outer; ++o) {
      std::memcpy(po + o * (wa + wb), pa + o * wa, wa * sizeof(double));
      std::memcpy(po + o * (wa + wb) + wa, pb + o * wb, wb * sizeof(double));
    }
  }
  return make_op(std::move(out), {a.node, b.node}, [outer, wa, wb](Node& self) {
    Node* a = self.inputs[0].get();
    Node* b = self.inputs[1].get();
    const double* g = self.grad.data();
    double* ga = a->requires_grad ? a->ensure_grad().data() : nullptr;
    double* gb = b->requires_grad ? b->ensure_grad().data() : nullptr;
    for (int64_t o = 0; o < outer; ++o) {
      const double* gs = g + o * (wa + wb);
      if (ga) {
        for (int64_t i = 0; i < wa; ++i) ga[o * wa + i] += gs[i];
      }
      if (gb) {
        for (int64_t i = 0; i < wb; ++i) gb[o * wb + i] += gs[wa + i];
      }
    }
  });
}

Var gap2d(const Var& x) {
  require_defined(x, "gap2d");
  const auto& s = x.value().shape();
  if (s.size() != 4) throw ShapeError("gap2d expects (N,C,H,W)");
  int64_t n = s[0], c = s[1], hw = s[2] * s[3];
  Tensor out({n, c, 1, 1});
  const double* px = x.value().data();
  double* po = out.data();
  for (int64_t i = 0; i < n * c; ++i) {
    double acc = 0.0;
    const double* p = px + i * hw;
    for (int64_t j = 0; j < hw; ++j) acc += p[j];
    po[i] = acc / static_cast<double>(hw);
  }
  return make_op(std::move(out), {x.node}, [n, c, hw](Node& self) {
    const double* g = self.grad.data();
    double* gx = self.inputs[0]->ensure_grad().data();
    for (int64_t i = 0; i < n * c; ++i) {
      double v = g[i] / static_cast<double>(hw);
      double* p = gx + i * hw;
      for (int64_t j = 0; j < hw; ++j) p[j] += v;
    }
  });
}

Var channel_mean(const Var& x) {
  require_defined(x, "channel_mean");
  const auto& s = x.value().shape();
  if (s.size() != 4) throw ShapeError("channel_mean expects (N,C,H,W)");
  int64_t n = s[0], c = s[1], hw = s[2] * s[3];
  Tensor out({n, 1, s[2], s[3]});
  const double* px = x.value().data();
  double* po = out.data();
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t j = 0; j < hw; ++j) {
      double acc = 0.0;
      for (int64_t ch = 0; ch < c; ++ch) acc += px[(i * c + ch) * hw + j];
      po[i * hw + j] = acc / static_cast<double>(c);
    }
  }
  return make_op(std::move(out), {x.node}, [n, c, hw](Node& self) {
    const double* g = self.grad.data();
    double* gx = self.inputs[0]->ensure_grad().data();
    for (int64_t i = 0; i < n; ++i) {
      for (int64_t ch = 0; ch < c; ++ch) {
        double* p = gx + (i * c + ch) * hw;
        const double* gs = g + i * hw;
        for (int64_t j = 0; j < hw; ++j) p[j] += gs[j] / static_cast<double>(c);
      }
    }
  });
}

namespace {

struct ConvDims {
  int64_t n, cin, h, w, cout, k, stride, pad, ho, wo;
};

ConvDims conv_dims(const Tensor& x, const Tensor& w, int64_t stride, int64_t pad) {
  if (x.ndim() != 4) throw ShapeError("conv2d: input must be (N,C,H,W)");
  if (w.ndim() != 4) throw ShapeError("conv2d: weight must be (Cout,Cin,k,k)");
  if (w.dim(2) != w.dim(3)) throw ShapeError("conv2d: kernel must be square");
  if (stride <= 0) throw ValueError("conv2d: stride must be positive");
  ConvDims d;
  d.n = x.dim(0);
  d.cin = x.dim(1);
  d.h = x.dim(2);
  d.w = x.dim(3);
  d.cout = w.dim(0);
  d.k = w.dim(2);
  d.stride = stride;
  d.pad = pad < 0 ? d.k / 2 : pad;
  if (w.dim(1) != d.cin) {
    throw ShapeError("conv2d: channel mismatch, input " + x.shape_str() + " weight " +
                     w.shape_str());
  }
  d.ho = (d.h + 2 * d.pad - d.k) / d.stride + 1;
  d.wo = (d.w + 2 * d.pad - d.k) / d.stride + 1;
  if (d.ho <= 0 || d.wo <= 0) throw ShapeError("conv2d: output would be empty");
  return d;
}

// cols: (Cin*k*k) x (Ho*Wo), row-major.
void im2col(const double* x, const ConvDims& d, double* cols) {
  int64_t m = d.ho * d.wo;
  for (int64_t ci = 0; ci < d.cin; ++ci) {
    const double* plane = x + ci * d.h * d.w;
    for (int64_t ky = 0; ky < d.k; ++ky) {
      for (int64_t kx = 0; kx < d.k; ++kx) {
        double* row = cols + ((ci * d.k + ky) * d.k + kx) * m;
        for (int64_t oy = 0; oy < d.ho; ++oy) {
          int64_t iy = oy * d.stride - d.pad + ky;
          double* dst = row + oy * d.wo;
          if (iy < 0 || iy >= d.h) {
            std::memset(dst, 0, d.wo * sizeof(double));
            continue;
          }
          const double* src = plane + iy * d.w;
          for (int64_t ox = 0; ox < d.wo; ++ox) {
            int64_t ix = ox * d.stride - d.pad + kx;
            dst[ox] = (ix >= 0 && ix < d.w) ? src[ix] : 0.0;
          }
        }
      }
    }
  }
}

void col2im_add(const double* cols, const ConvDims& d, double* x) {
  int64_t m = d.ho * d.wo;
  for (int64_t ci = 0; ci < d.cin; ++ci) {
    double* plane = x + ci * d.h * d.w;
    for (int64_t ky = 0; ky < d.k; ++ky) {
      for (int64_t kx = 0; kx < d.k; ++kx) {
        const double* row = cols + ((ci * d.k + ky) * d.k + kx) * m;
        for (int64_t oy = 0; oy < d.ho; ++oy) {
          int64_t iy = oy * d.stride - d.pad + ky;
          if (iy < 0 || iy >= d.h) continue;
          double* dst = plane + iy * d.w;
          const double* src = row + oy * d.wo;
          for (int64_t ox = 0; ox < d.wo; ++ox) {
            int64_t ix = ox * d.stride - d.pad + kx;
            if (ix >= 0 && ix < d.w) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

}  // namespace

Var conv2d(const Var& x, const Var& w, const Var* b, int64_t stride, int64_t pad) {
  require_defined(x, "conv2d");
  require_defined(w, "conv2d");
  ConvDims d = conv_dims(x.value(), w.value(), stride, pad);
  if (b && b->value().numel() != d.cout) throw ShapeError("conv2d: bias size mismatch");
  int64_t kdim = d.cin * d.k * d.k;
  int64_t m = d.ho * d.wo;
  Tensor out({d.n, d.cout, d.ho, d.wo});
  {
    RowMat cols(kdim, m);
    CMatMap wm(w.value().data(), d.cout, kdim);
    for (int64_t i = 0; i < d.n; ++i) {
      im2col(x.value().data() + i * d.cin * d.h * d.w, d, cols.data());
      MatMap om(out.data() + i * d.cout * m, d.cout, m);
      om.noalias() = wm * cols;
    }
    if (b) {
      const double* pb = b->value().data();
      double* po = out.data();
      for (int64_t i = 0; i < d.n; ++i) {
        for (int64_t co = 0; co < d.cout; ++co) {
          double bv = pb[co];
          double* p = po + (i * d.cout + co) * m;
          for (int64_t j = 0; j < m; ++j) p[j] += bv;
        }
      }
    }
  }
  std::vector<NodePtr> ins = {x.node, w.node};
  if (b) ins.push_back(b->node);
  return make_op(std::move(out), std::move(ins), [d, kdim, m](Node& self) {
    Node* xn = self.inputs[0].get();
    Node* wn = self.inputs[1].get();
    Node* bn = self.inputs.size() > 2 ? self.inputs[2].get() : nullptr;
    const double* g = self.grad.data();
    CMatMap wm(wn->value.data(), d.cout, kdim);
    RowMat cols(kdim, m);
    RowMat dcols(kdim, m);
    double* gx = xn->requires_grad ? xn->ensure_grad().data() : nullptr;
    double* gw = wn->requires_grad ? wn->ensure_grad().data() : nullptr;
    for (int64_t i = 0; i < d.n; ++i) {
      CMatMap gm(g + i * d.cout * m, d.cout, m);
      if (gw) {
        im2col(xn->value.data() + i * d.cin * d.h * d.w, d, cols.data());
        MatMap gwm(gw, d.cout, kdim);
        gwm.noalias() += gm * cols.transpose();
      }
      if (gx) {
        dcols.noalias() = wm.transpose() * gm;
        col2im_add(dcols.data(), d, gx + i * d.cin * d.h * d.w);
      }
    }
    if (bn && bn->requires_grad) {
      double* gb = bn->ensure_grad().data();
      for (int64_t i = 0; i < d.n; ++i) {
        for (int64_t co = 0; co < d.cout; ++co) {
          const double* p = g + (i * d.cout + co) * m;
          double acc = 0.0;
          for (int64_t j = 0; j < m; ++j) acc += p[j];
          gb[co] += acc;
        }
      }
    }
  });
}

Var conv_transpose2d(const Var& x, const Var& w, const Var* b, int64_t factor) {
  require_defined(x, "conv_transpose2d");
  require_defined(w, "conv_transpose2d");
  if (factor <= 0) throw ValueError("conv_transpose2d: factor must be positive");
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  if (xv.ndim() != 4) throw ShapeError("conv_transpose2d: input must be (N,C,H,W)");
  if (wv.ndim() != 4 || wv.dim(2) != factor || wv.dim(3) != factor) {
    throw ShapeError("conv_transpose2d: weight must be (Cin,Cout,f,f)");
  }
  int64_t n = xv.dim(0), cin = xv.dim(1), h = xv.dim(2), ww = xv.dim(3);
  if (wv.dim(0) != cin) throw ShapeError("conv_transpose2d: channel mismatch");
  int64_t cout = wv.dim(1), f = factor;
  int64_t oh = h * f, ow = ww * f, hw = h * ww, cff = cout * f * f;
  if (b && b->value().numel() != cout) throw ShapeError("conv_transpose2d: bias size mismatch");
  Tensor out({n, cout, oh, ow});
  {
    CMatMap wm(wv.data(), cin, cff);
    RowMat patches(cff, hw);
    for (int64_t i = 0; i < n; ++i) {
      CMatMap xm(xv.data() + i * cin * hw, cin, hw);
      patches.noalias() = wm.transpose() * xm;
      double* po = out.data() + i * cout * oh * ow;
      for (int64_t co = 0; co < cout; ++co) {
        for (int64_t a = 0; a < f; ++a) {
          for (int64_t bb = 0; bb < f; ++bb) {
            const double* prow = patches.data() + ((co * f + a) * f + bb) * hw;
            for (int64_t y = 0; y < h; ++y) {
              double* dst = po + co * oh * ow + (y * f + a) * ow + bb;
              const double* src = prow + y * ww;
              for (int64_t z = 0; z < ww; ++z) dst[z * f] = src[z];
            }
          }
        }
      }
      if (b) {
        const double* pb = b->value().data();
        for (int64_t co = 0; co < cout; ++co) {
          double bv = pb[co];
          double* p = po + co * oh * ow;
          for (int64_t j = 0; j < oh * ow; ++j) p[j] += bv;
        }
      }
    }
  }
  std::vector<NodePtr> ins = {x.node, w.node};
  if (b) ins.push_back(b->node);
  return make_op(std::move(out), std::move(ins), [n, cin, cout, h, ww, f, hw, cff](Node& self) {
    Node* xn = self.inputs[0].get();
    Node* wn = self.inputs[1].get();
    Node* bn = self.inputs.size() > 2 ? self.inputs[2].get() : nullptr;
    int64_t oh = h * f, ow = ww * f;
    const double* g = self.grad.data();
    CMatMap wm(wn->value.data(), cin, cff);
    RowMat gp(cff, hw);
    double* gx = xn->requires_grad ? xn->ensure_grad().data() : nullptr;
    double* gw = wn->requires_grad ? wn->ensure_grad().data() : nullptr;
    for (int64_t i = 0; i < n; ++i) {
      // Gather the upstream grad into patch-major layout.
      const double* go = g + i * cout * oh * ow;
      for (int64_t co = 0; co < cout; ++co) {
        for (int64_t a = 0; a < f; ++a) {
          for (int64_t bb = 0; bb < f; ++bb) {
            double* prow = gp.data() + ((co * f + a) * f + bb) * hw;
            for (int64_t y = 0; y < h; ++y) {
              const double* src = go + co * oh * ow + (y * f + a) * ow + bb;
              double* dst = prow + y * ww;
              for (int64_t z = 0; z < ww; ++z) dst[z] = src[z * f];
            }
          }
        }
      }
      if (gx) {
        MatMap gxm(gx + i * cin * hw, cin, hw);
        gxm.noalias() += wm * gp;
      }
      if (gw) {
        CMatMap xm(xn->value.data() + i * cin * hw, cin, hw);
        MatMap gwm(gw, cin, cff);
        gwm.noalias() += xm * gp.transpose();
      }
      if (bn && bn->requires_grad) {
        double* gb = bn->ensure_grad().data();
        for (int64_t co = 0; co < cout; ++co) {
          const double* p = go + co * oh * ow;
          double acc = 0.0;
          for (int64_t j = 0; j < oh * ow; ++j) acc += p[j];
          gb[co] += acc;
        }
      }
    }
  });
}

Var maxpool2d(const Var& x, int64_t k, int64_t stride, int64_t pad) {
  require_defined(x, "maxpool2d");
  const Tensor& xv = x.value();
  if (xv.ndim() != 4) throw ShapeError("maxpool2d: input must be (N,C,H,W)");
  int64_t n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  int64_t ho = (h + 2 * pad - k) / stride + 1;
  int64_t wo = (w + 2 * pad - k) / stride + 1;
  if (ho <= 0 || wo <= 0) throw ShapeError("maxpool2d: output would be empty");
  Tensor out({n, c, ho, wo});
  auto argmax = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(n * c * ho * wo));
  {
    const double* px = xv.data();
    double* po = out.data();
    int64_t* pa = argmax->data();
    for (int64_t i = 0; i < n * c; ++i) {
      const double* plane = px + i * h * w;
      for (int64_t oy = 0; oy < ho; ++oy) {
        for (int64_t ox = 0; ox < wo; ++ox) {
          double best = -std::numeric_limits<double>::infinity();
          int64_t bidx = -1;
          for (int64_t ky = 0; ky < k; ++ky) {
            int64_t iy = oy * stride - pad + ky;
            if (iy < 0 || iy >= h) continue;
            for (int64_t kx = 0; kx < k; ++kx) {
              int64_t ix = ox * stride - pad + kx;
              if (ix < 0 || ix >= w) continue;
              double v = plane[iy * w + ix];
              if (v > best) {
                best = v;
                bidx = iy * w + ix;
              }
            }
          }
          po[(i * ho + oy) * wo + ox] = best;
          pa[(i * ho + oy) * wo + ox] = bidx;
        }
      }
    }
  }
  return make_op(std::move(out), {x.node}, [n, c, h, w, ho, wo, argmax](Node& self) {
    const double* g = self.grad.data();
    double* gx = self.inputs[0]->ensure_grad().data();
    const int64_t* pa = argmax->data();
    for (int64_t i = 0; i < n * c; ++i) {
      double* plane = gx + i * h * w;
      const double* gp = g + i * ho * wo;
      const int64_t* ap = pa + i * ho * wo;
      for (int64_t j = 0; j < ho * wo; ++j) {
        if (ap[j] >= 0) plane[ap[j]] += gp[j];
      }
    }
  });
}

Var linear(const Var& x, const Var& w, const Var* b) {
  require_defined(x, "linear");
  require_defined(w, "linear");
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  if (xv.ndim() != 2 || wv.ndim() != 2) throw ShapeError("linear: expects 2-d operands");
  int64_t n = xv.dim(0), cin = xv.dim(1), cout = wv.dim(0);
  if (wv.dim(1) != cin) throw ShapeError("linear: weight/input mismatch");
  if (b && b->value().numel() != cout) throw ShapeError("linear: bias size mismatch");
  Tensor out({n, cout});
  {
    CMatMap xm(xv.data(), n, cin);
    CMatMap wm(wv.data(), cout, cin);
    MatMap om(out.data(), n, cout);
    om.noalias() = xm * wm.transpose();
    if (b) {
      const double* pb = b->value().data();
      double* po = out.data();
      for (int64_t i = 0; i < n; ++i) {
        for (int64_t j = 0; j < cout; ++j) po[i * cout + j] += pb[j];
      }
    }
  }
  std::vector<NodePtr> ins = {x.node, w.node};
  if (b) ins.push_back(b->node);
  return make_op(std::move(out), std::move(ins), [n, cin, cout](Node& self) {
    Node* xn = self.inputs[0].get();
    Node* wn = self.inputs[1].get();
    Node* bn = self.inputs.size() > 2 ? self.inputs[2].get() : nullptr;
    CMatMap gm(self.grad.data(), n, cout);
    if (xn->requires_grad) {
      CMatMap wm(wn->value.data(), cout, cin);
      MatMap gxm(xn->ensure_grad().data(), n, cin);
      gxm.noalias() += gm * wm;
    }
    if (wn->requires_grad) {
      CMatMap xm(xn->value.data(), n, cin);
      MatMap gwm(wn->ensure_grad().data(), cout, cin);
      gwm.noalias() += gm.transpose() * xm;
    }
    if (bn && bn->requires_grad) {
      double* gb = bn->ensure_grad().data();
      const double* g = self.grad.data();
      for (int64_t i = 0; i < n; ++i) {
        for (int64_t j = 0; j < cout; ++j) gb[j] += g[i * cout + j];
      }
    }
  });
}

Var batchnorm2d(const Var& x, const Var& gamma, const Var& beta, Tensor& running_mean,
                Tensor& running_var, bool training, double momentum, double eps) {
  require_defined(x, "batchnorm2d");
  const Tensor& xv = x.value();
  if (xv.ndim() != 4) throw ShapeError("batchnorm2d: input must be (N,C,H,W)");
  int64_t n = xv.dim(0), c = xv.dim(1), hw = xv.dim(2) * xv.dim(3);
  if (gamma.value().numel() != c || beta.value().numel() != c) {
    throw ShapeError("batchnorm2d: affine parameter size mismatch");
  }
  int64_t m = n * hw;
  Tensor out(xv.shape());
  const double* px = xv.data();
  const double* pg = gamma.value().data();
  const double* pb = beta.value().data();
  double* po = out.data();

  if (!training) {
    // Running-stat affine transform.
    std::vector<double> scale(c), shift(c);
    for (int64_t ch = 0; ch < c; ++ch) {
      double inv = 1.0 / std::sqrt(running_var(ch) + eps);
      scale[ch] = pg[ch] * inv;
      shift[ch] = pb[ch] - running_mean(ch) * scale[ch];
    }
    for (int64_t i = 0; i < n; ++i) {
      for (int64_t ch = 0; ch < c; ++ch) {
        const double* sp = px + (i * c + ch) * hw;
        double* dp = po + (i * c + ch) * hw;
        for (int64_t j = 0; j < hw; ++j) dp[j] = sp[j] * scale[ch] + shift[ch];
      }
    }
    auto inv_std = std::make_shared<std::vector<double>>(c);
    auto mean = std::make_shared<std::vector<double>>(c);
    for (int64_t ch = 0; ch < c; ++ch) {
      (*inv_std)[ch] = 1.0 / std::sqrt(running_var(ch) + eps);
      (*mean)[ch] = running_mean(ch);
    }
    return make_op(std::move(out), {x.node, gamma.node, beta.node},
                   [n, c, hw, inv_std, mean](Node& self) {
                     Node* xn = self.inputs[0].get();
                     Node* gn = self.inputs[1].get();
                     Node* bn = self.inputs[2].get();
                     const double* g = self.grad.data();
                     const double* px = xn->value.data();
                     const double* pg = gn->value.data();
                     double* gx = xn->requires_grad ? xn->ensure_grad().data() : nullptr;
                     double* gg = gn->requires_grad ? gn->ensure_grad().data() : nullptr;
                     double* gb = bn->requires_grad ? bn->ensure_grad().data() : nullptr;
                     for (int64_t i = 0; i < n; ++i) {
                       for (int64_t ch = 0; ch < c; ++ch) {
                         int64_t off = (i * c + ch) * hw;
                         double inv = (*inv_std)[ch];
                         double mu = (*mean)[ch];
                         for (int64_t j = 0; j < hw; ++j) {
                           double gj = g[off + j];
                           if (gx) gx[off + j] += gj * pg[ch] * inv;
                           if (gg) gg[ch] += gj * (px[off + j] - mu) * inv;
                           if (gb) gb[ch] += gj;
                         }
                       }
                     }
                   });
  }

  // Training mode: batch statistics.
  if (m < 1) throw ShapeError("batchnorm2d: empty batch");
  auto xhat = std::make_shared<Tensor>(xv.shape());
  auto inv_std = std::make_shared<std::vector<double>>(c);
  for (int64_t ch = 0; ch < c; ++ch) {
    double mu = 0.0;
    for (int64_t i = 0; i < n; ++i) {
      const double* sp = px + (i * c + ch) * hw;
      for (int64_t j = 0; j < hw; ++j) mu += sp[j];
    }
    mu /= static_cast<double>(m);
    double var = 0.0;
    for (int64_t i = 0; i < n; ++i) {
      const double* sp = px + (i * c + ch) * hw;
      for (int64_t j = 0; j < hw; ++j) {
        double dv = sp[j] - mu;
        var += dv * dv;
      }
    }
    var /= static_cast<double>(m);
    double inv = 1.0 / std::sqrt(var + eps);
    (*inv_std)[ch] = inv;
    double* xh = xhat->data();
    for (int64_t i = 0; i < n; ++i) {
      int64_t off = (i * c + ch) * hw;
      const double* sp = px + off;
      double* dp = po + off;
      for (int64_t j = 0; j < hw; ++j) {
        double v = (sp[j] - mu) * inv;
        xh[off + j] = v;
        dp[j] = v * pg[ch] + pb[ch];
      }
    }
    double unbiased = m > 1 ? var * static_cast<double>(m) / static_cast<double>(m - 1) : var;
    running_mean(ch) = (1.0 - momentum) * running_mean(ch) + momentum * mu;
    running_var(ch) = (1.0 - momentum) * running_var(ch) + momentum * unbiased;
  }
  return make_op(std::move(out), {x.node, gamma.node, beta.node},
                 [n, c, hw, m, xhat, inv_std](Node& self) {
                   Node* xn = self.inputs[0].get();
                   Node* gn = self.inputs[1].get();
                   Node* bn = self.inputs[2].get();
                   const double* g = self.grad.data();
                   const double* xh = xhat->data();
                   const double* pg = gn->value.data();
                   double* gx = xn->requires_grad ? xn->ensure_grad().data() : nullptr;
                   double* gg = gn->requires_grad ? gn->ensure_grad().data() : nullptr;
                   double* gb = bn->requires_grad ? bn->ensure_grad().data() : nullptr;
                   double dm = static_cast<double>(m);
                   for (int64_t ch = 0; ch < c; ++ch) {
                     double sum_g = 0.0, sum_gx = 0.0;
                     for (int64_t i = 0; i < n; ++i) {
                       int64_t off = (i * c + ch) * hw;
                       for (int64_t j = 0; j < hw; ++j) {
                         sum_g += g[off + j];
                         sum_gx += g[off + j] * xh[off + j];
                       }
                     }
                     if (gg) gg[ch] += sum_gx;
                     if (gb) gb[ch] += sum_g;
                     if (gx) {
                       double k = pg[ch] * (*inv_std)[ch];
                       for (int64_t i = 0; i < n; ++i) {
                         int64_t off = (i * c + ch) * hw;
                         for (int64_t j = 0; j < hw; ++j) {
                           gx[off + j] +=
                               k * (g[off + j] - sum_g / dm - xh[off + j] * sum_gx / dm);
                         }
                       }
                     }
                   }
                 });
}

}  // namespace ops

}  // namespace dpf

#pragma once

// Minimal dense-tensor engine with reverse-mode automatic differentiation.
// Tensors are 4-D (batch x channels x height x width) buffers owned by a
// Tape; ops append nodes in creation order and the backward sweep walks
// that order in reverse, once per node.

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "speckle/bayes.hpp"

namespace speckle::ad {

template <class S>
using Buffer = Eigen::Array<S, Eigen::Dynamic, 1>;

template <class S>
using MatRM = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct Shape4 {
  Eigen::Index n = 1, c = 1, h = 1, w = 1;

  Eigen::Index count() const { return n * c * h * w; }
  Eigen::Index plane() const { return h * w; }
  bool operator==(const Shape4&) const = default;
  std::string str() const {
    return std::to_string(n) + "x" + std::to_string(c) + "x" +
           std::to_string(h) + "x" + std::to_string(w);
  }
};

inline Eigen::Index flat(const Shape4& s, Eigen::Index n, Eigen::Index c,
                         Eigen::Index i, Eigen::Index j) {
  return ((n * s.c + c) * s.h + i) * s.w + j;
}

template <class S>
struct Node {
  Shape4 shape;
  Buffer<S> value;
  Buffer<S> grad;  // empty until touched by the backward sweep
  bool requires_grad = false;
  std::vector<Node*> inputs;
  std::function<void(Node&)> backprop;  // pulls grad into the inputs

  void ensure_grad() {
    if (grad.size() == 0) grad = Buffer<S>::Zero(shape.count());
  }
};

template <class S>
class Tape;

/// Value-semantic handle to a tape-owned node.
template <class S>
class Tensor {
 public:
  Tensor() = default;

  const Shape4& shape() const { return node_->shape; }
  Buffer<S>& value() { return node_->value; }
  const Buffer<S>& value() const { return node_->value; }
  const Buffer<S>& grad() const {
    if (node_->grad.size() == 0)
      throw std::logic_error("Tensor: gradient not populated");
    return node_->grad;
  }
  bool requires_grad() const { return node_->requires_grad; }
  bool defined() const { return node_ != nullptr; }

  Node<S>* node() const { return node_; }

 private:
  friend class Tape<S>;
  explicit Tensor(Node<S>* n) : node_(n) {}
  Node<S>* node_ = nullptr;
};

/// Ordered record of primitive operations. Owns every node created while
/// building a graph; destroying (or clearing) the tape frees the graph.
template <class S>
class Tape {
 public:
  Tensor<S> leaf(const Shape4& shape, bool requires_grad) {
    Node<S>* n = append(shape);
    n->value = Buffer<S>::Zero(shape.count());
    n->requires_grad = requires_grad;
    return Tensor<S>(n);
  }

  Tensor<S> leaf_from(const Buffer<S>& data, const Shape4& shape,
                      bool requires_grad) {
    if (data.size() != shape.count())
      throw std::invalid_argument("leaf_from: data size mismatch");
    Node<S>* n = append(shape);
    n->value = data;
    n->requires_grad = requires_grad;
    return Tensor<S>(n);
  }

  /// New op node; requires_grad is inherited from the inputs.
  Tensor<S> op(const Shape4& shape, std::vector<Node<S>*> inputs,
               std::function<void(Node<S>&)> backprop) {
    Node<S>* n = append(shape);
    n->value.resize(shape.count());
    n->inputs = std::move(inputs);
    for (Node<S>* in : n->inputs)
      if (in->requires_grad) n->requires_grad = true;
    if (n->requires_grad) n->backprop = std::move(backprop);
    return Tensor<S>(n);
  }

  /// Reverse sweep from a scalar loss. Gradients accumulate into every
  /// requires_grad node reachable from the loss.
  void backward(const Tensor<S>& loss) {
    if (loss.shape().count() != 1)
      throw std::invalid_argument("backward: loss must be scalar");
    Node<S>* root = loss.node();
    root->ensure_grad();
    root->grad.setOnes();
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      Node<S>* n = it->get();
      if (!n->requires_grad || n->grad.size() == 0 || !n->backprop) continue;
      n->backprop(*n);
    }
  }

  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

 private:
  Node<S>* append(const Shape4& shape) {
    nodes_.push_back(std::make_unique<Node<S>>());
    nodes_.back()->shape = shape;
    return nodes_.back().get();
  }

  std::vector<std::unique_ptr<Node<S>>> nodes_;
};

namespace detail {

template <class S>
void accumulate(Node<S>* target, const Buffer<S>& contribution) {
  if (!target->requires_grad) return;
  target->ensure_grad();
  target->grad += contribution;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise ops

template <class S>
Tensor<S> add(Tape<S>& tape, const Tensor<S>& a, const Tensor<S>& b) {
  if (!(a.shape() == b.shape()))
    throw std::invalid_argument("add: shape mismatch " + a.shape().str() +
                                " vs " + b.shape().str());
  auto out = tape.op(a.shape(), {a.node(), b.node()}, [](Node<S>& n) {
    detail::accumulate(n.inputs[0], n.grad);
    detail::accumulate(n.inputs[1], n.grad);
  });
  out.value() = a.value() + b.value();
  return out;
}

template <class S>
Tensor<S> mul(Tape<S>& tape, const Tensor<S>& a, const Tensor<S>& b) {
  if (!(a.shape() == b.shape()))
    throw std::invalid_argument("mul: shape mismatch");
  auto out = tape.op(a.shape(), {a.node(), b.node()}, [](Node<S>& n) {
    detail::accumulate<S>(n.inputs[0], n.grad * n.inputs[1]->value);
    detail::accumulate<S>(n.inputs[1], n.grad * n.inputs[0]->value);
  });
  out.value() = a.value() * b.value();
  return out;
}

template <class S>
Tensor<S> scale(Tape<S>& tape, const Tensor<S>& a, S k) {
  auto out = tape.op(a.shape(), {a.node()}, [k](Node<S>& n) {
    detail::accumulate<S>(n.inputs[0], n.grad * k);
  });
  out.value() = a.value() * k;
  return out;
}

template <class S>
Tensor<S> leaky_relu(Tape<S>& tape, const Tensor<S>& x, S slope) {
  if (!(slope > S(0) && slope < S(1)))
    throw std::invalid_argument("leaky_relu: slope must be in (0, 1)");
  auto out = tape.op(x.shape(), {x.node()}, [slope](Node<S>& n) {
    Buffer<S> d(n.grad.size());
    const Buffer<S>& x_val = n.inputs[0]->value;
    for (Eigen::Index i = 0; i < d.size(); ++i)
      d[i] = n.grad[i] * (x_val[i] > S(0) ? S(1) : slope);
    detail::accumulate(n.inputs[0], d);
  });
  out.value() = x.value().max(x.value() * slope);
  return out;
}

/// eps + softplus(raw); the smooth positive map used for (alpha, beta).
template <class S>
Tensor<S> softplus_eps(Tape<S>& tape, const Tensor<S>& x, S eps_pos) {
  auto out = tape.op(x.shape(), {x.node()}, [](Node<S>& n) {
    Buffer<S> d(n.grad.size());
    const Buffer<S>& x_val = n.inputs[0]->value;
    for (Eigen::Index i = 0; i < d.size(); ++i) {
      const double r = static_cast<double>(x_val[i]);
      const double sig = r > 30.0 ? 1.0 : 1.0 / (1.0 + std::exp(-r));
      d[i] = n.grad[i] * static_cast<S>(sig);
    }
    detail::accumulate(n.inputs[0], d);
  });
  const Buffer<S>& xv = x.value();
  for (Eigen::Index i = 0; i < xv.size(); ++i) {
    const double r = static_cast<double>(xv[i]);
    const double sp = r > 30.0 ? r : std::log1p(std::exp(r));
    out.value()[i] = static_cast<S>(sp) + eps_pos;
  }
  return out;
}

/// |x| with the subgradient at 0 defined as 0 (keeps TV from oscillating
/// on exact ties).
template <class S>
Tensor<S> abs_tv(Tape<S>& tape, const Tensor<S>& x) {
  auto out = tape.op(x.shape(), {x.node()}, [](Node<S>& n) {
    Buffer<S> d(n.grad.size());
    const Buffer<S>& x_val = n.inputs[0]->value;
    for (Eigen::Index i = 0; i < d.size(); ++i) {
      const S s = x_val[i] > S(0) ? S(1) : (x_val[i] < S(0) ? S(-1) : S(0));
      d[i] = n.grad[i] * s;
    }
    detail::accumulate(n.inputs[0], d);
  });
  out.value() = x.value().abs();
  return out;
}

template <class S>
Tensor<S> sum(Tape<S>& tape, const Tensor<S>& x) {
  auto out = tape.op(Shape4{1, 1, 1, 1}, {x.node()}, [](Node<S>& n) {
    detail::accumulate<S>(n.inputs[0],
                          Buffer<S>::Constant(n.inputs[0]->shape.count(),
                                              n.grad[0]));
  });
  out.value()[0] = x.value().sum();
  return out;
}

// ---------------------------------------------------------------------------
// index remaps: rotation, shift, crop, concat, diffs

/// Exact 90-degree counter-clockwise rotation applied k times (spatial dims).
template <class S>
Tensor<S> rot90(Tape<S>& tape, const Tensor<S>& x, int k) {
  k = ((k % 4) + 4) % 4;
  const Shape4 in = x.shape();
  Shape4 os = in;
  if (k % 2 == 1) std::swap(os.h, os.w);

  auto map_index = [](const Shape4& src, int kk, Eigen::Index i,
                      Eigen::Index j) -> std::pair<Eigen::Index, Eigen::Index> {
    // source coordinates of destination (i, j) for CCW rotation by kk
    switch (kk) {
      case 1: return {j, src.w - 1 - i};
      case 2: return {src.h - 1 - i, src.w - 1 - j};
      case 3: return {src.h - 1 - j, i};
      default: return {i, j};
    }
  };

  auto out = tape.op(os, {x.node()}, [in, os, k, map_index](Node<S>& n) {
    Node<S>* src = n.inputs[0];
    if (!src->requires_grad) return;
    src->ensure_grad();
    for (Eigen::Index b = 0; b < os.n; ++b)
      for (Eigen::Index c = 0; c < os.c; ++c)
        for (Eigen::Index i = 0; i < os.h; ++i)
          for (Eigen::Index j = 0; j < os.w; ++j) {
            auto [si, sj] = map_index(in, k, i, j);
            src->grad[flat(in, b, c, si, sj)] += n.grad[flat(os, b, c, i, j)];
          }
  });
  for (Eigen::Index b = 0; b < os.n; ++b)
    for (Eigen::Index c = 0; c < os.c; ++c)
      for (Eigen::Index i = 0; i < os.h; ++i)
        for (Eigen::Index j = 0; j < os.w; ++j) {
          auto [si, sj] = map_index(in, k, i, j);
          out.value()[flat(os, b, c, i, j)] = x.value()[flat(in, b, c, si, sj)];
        }
  return out;
}

/// Translation with zero fill: out(i, j) = in(i - dy, j - dx).
template <class S>
Tensor<S> shift2d(Tape<S>& tape, const Tensor<S>& x, Eigen::Index dy,
                  Eigen::Index dx) {
  const Shape4 s = x.shape();
  auto out = tape.op(s, {x.node()}, [s, dy, dx](Node<S>& n) {
    Node<S>* src = n.inputs[0];
    if (!src->requires_grad) return;
    src->ensure_grad();
    for (Eigen::Index b = 0; b < s.n; ++b)
      for (Eigen::Index c = 0; c < s.c; ++c)
        for (Eigen::Index i = 0; i < s.h; ++i) {
          const Eigen::Index si = i - dy;
          if (si < 0 || si >= s.h) continue;
          for (Eigen::Index j = 0; j < s.w; ++j) {
            const Eigen::Index sj = j - dx;
            if (sj < 0 || sj >= s.w) continue;
            src->grad[flat(s, b, c, si, sj)] += n.grad[flat(s, b, c, i, j)];
          }
        }
  });
  out.value().setZero();
  for (Eigen::Index b = 0; b < s.n; ++b)
    for (Eigen::Index c = 0; c < s.c; ++c)
      for (Eigen::Index i = 0; i < s.h; ++i) {
        const Eigen::Index si = i - dy;
        if (si < 0 || si >= s.h) continue;
        for (Eigen::Index j = 0; j < s.w; ++j) {
          const Eigen::Index sj = j - dx;
          if (sj < 0 || sj >= s.w) continue;
          out.value()[flat(s, b, c, i, j)] = x.value()[flat(s, b, c, si, sj)];
        }
      }
  return out;
}

/// Spatial crop; backward zero-pads the gradient back.
template <class S>
Tensor<S> crop(Tape<S>& tape, const Tensor<S>& x, Eigen::Index top,
               Eigen::Index bottom, Eigen::Index left, Eigen::Index right) {
  const Shape4 in = x.shape();
  Shape4 os = in;
  os.h = in.h - top - bottom;
  os.w = in.w - left - right;
  if (os.h <= 0 || os.w <= 0) throw std::invalid_argument("crop: empty output");
  auto out = tape.op(os, {x.node()}, [in, os, top, left](Node<S>& n) {
    Node<S>* src = n.inputs[0];
    if (!src->requires_grad) return;
    src->ensure_grad();
    for (Eigen::Index b = 0; b < os.n; ++b)
      for (Eigen::Index c = 0; c < os.c; ++c)
        for (Eigen::Index i = 0; i < os.h; ++i)
          for (Eigen::Index j = 0; j < os.w; ++j)
            src->grad[flat(in, b, c, i + top, j + left)] +=
                n.grad[flat(os, b, c, i, j)];
  });
  for (Eigen::Index b = 0; b < os.n; ++b)
    for (Eigen::Index c = 0; c < os.c; ++c)
      for (Eigen::Index i = 0; i < os.h; ++i)
        for (Eigen::Index j = 0; j < os.w; ++j)
          out.value()[flat(os, b, c, i, j)] =
              x.value()[flat(in, b, c, i + top, j + left)];
  return out;
}

template <class S>
Tensor<S> concat_channels(Tape<S>& tape, const std::vector<Tensor<S>>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_channels: empty");
  Shape4 os = parts[0].shape();
  std::vector<Node<S>*> ins;
  Eigen::Index total_c = 0;
  for (const auto& p : parts) {
    const Shape4& s = p.shape();
    if (s.n != os.n || s.h != os.h || s.w != os.w)
      throw std::invalid_argument("concat_channels: spatial shape mismatch");
    total_c += s.c;
    ins.push_back(p.node());
  }
  os.c = total_c;
  auto out = tape.op(os, ins, [os](Node<S>& n) {
    Eigen::Index c0 = 0;
    for (Node<S>* src : n.inputs) {
      const Shape4& s = src->shape;
      if (src->requires_grad) {
        src->ensure_grad();
        for (Eigen::Index b = 0; b < s.n; ++b)
          for (Eigen::Index c = 0; c < s.c; ++c)
            for (Eigen::Index i = 0; i < s.h; ++i)
              for (Eigen::Index j = 0; j < s.w; ++j)
                src->grad[flat(s, b, c, i, j)] +=
                    n.grad[flat(os, b, c0 + c, i, j)];
      }
      c0 += s.c;
    }
  });
  Eigen::Index c0 = 0;
  for (const auto& p : parts) {
    const Shape4& s = p.shape();
    for (Eigen::Index b = 0; b < s.n; ++b)
      for (Eigen::Index c = 0; c < s.c; ++c)
        for (Eigen::Index i = 0; i < s.h; ++i)
          for (Eigen::Index j = 0; j < s.w; ++j)
            out.value()[flat(os, b, c0 + c, i, j)] =
                p.value()[flat(s, b, c, i, j)];
    c0 += s.c;
  }
  return out;
}

/// Stacks tensors of identical [c, h, w] along the batch dimension.
template <class S>
Tensor<S> concat_batch(Tape<S>& tape, const std::vector<Tensor<S>>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_batch: empty");
  Shape4 os = parts[0].shape();
  std::vector<Node<S>*> ins;
  Eigen::Index total_n = 0;
  for (const auto& p : parts) {
    const Shape4& s = p.shape();
    if (s.c != os.c || s.h != os.h || s.w != os.w)
      throw std::invalid_argument("concat_batch: shape mismatch");
    total_n += s.n;
    ins.push_back(p.node());
  }
  os.n = total_n;
  auto out = tape.op(os, ins, [](Node<S>& n) {
    Eigen::Index off = 0;
    for (Node<S>* src : n.inputs) {
      const Eigen::Index cnt = src->shape.count();
      if (src->requires_grad) {
        src->ensure_grad();
        src->grad += n.grad.segment(off, cnt);
      }
      off += cnt;
    }
  });
  Eigen::Index off = 0;
  for (const auto& p : parts) {
    out.value().segment(off, p.value().size()) = p.value();
    off += p.value().size();
  }
  return out;
}

/// Batch slice [n0, n0 + count).
template <class S>
Tensor<S> slice_batch(Tape<S>& tape, const Tensor<S>& x, Eigen::Index n0,
                      Eigen::Index count) {
  const Shape4 in = x.shape();
  if (n0 < 0 || n0 + count > in.n)
    throw std::invalid_argument("slice_batch: out of range");
  Shape4 os = in;
  os.n = count;
  const Eigen::Index per = in.c * in.h * in.w;
  auto out = tape.op(os, {x.node()}, [n0, per, count](Node<S>& n) {
    Node<S>* src = n.inputs[0];
    if (!src->requires_grad) return;
    src->ensure_grad();
    src->grad.segment(n0 * per, count * per) += n.grad;
  });
  out.value() = x.value().segment(n0 * per, count * per);
  return out;
}

/// Channel slice [c0, c0 + count).
template <class S>
Tensor<S> slice_channels(Tape<S>& tape, const Tensor<S>& x, Eigen::Index c0,
                         Eigen::Index count) {
  const Shape4 in = x.shape();
  if (c0 < 0 || c0 + count > in.c)
    throw std::invalid_argument("slice_channels: out of range");
  Shape4 os = in;
  os.c = count;
  auto out = tape.op(os, {x.node()}, [in, os, c0](Node<S>& n) {
    Node<S>* src = n.inputs[0];
    if (!src->requires_grad) return;
    src->ensure_grad();
    for (Eigen::Index b = 0; b < os.n; ++b)
      for (Eigen::Index c = 0; c < os.c; ++c)
        for (Eigen::Index i = 0; i < os.h; ++i)
          for (Eigen::Index j = 0; j < os.w; ++j)
            src->grad[flat(in, b, c0 + c, i, j)] +=
                n.grad[flat(os, b, c, i, j)];
  });
  for (Eigen::Index b = 0; b < os.n; ++b)
    for (Eigen::Index c = 0; c < os.c; ++c)
      for (Eigen::Index i = 0; i < os.h; ++i)
        for (Eigen::Index j = 0; j < os.w; ++j)
          out.value()[flat(os, b, c, i, j)] =
              x.value()[flat(in, b, c0 + c, i, j)];
  return out;
}

/// Forward difference along rows: out(i, j) = x(i+1, j) - x(i, j).
template <class S>
Tensor<S> diff_down(Tape<S>& tape, const Tensor<S>& x) {
  const Shape4 in = x.shape();
  if (in.h < 2) throw std::invalid_argument("diff_down: needs h >= 2");
  Shape4 os = in;
  os.h = in.h - 1;
  auto out = tape.op(os, {x.node()}, [in, os](Node<S>& n) {
    Node<S>* src = n.inputs[0];
    if (!src->requires_grad) return;
    src->ensure_grad();
    for (Eigen::Index b = 0; b < os.n; ++b)
      for (Eigen::Index c = 0; c < os.c; ++c)
        for (Eigen::Index i = 0; i < os.h; ++i)
          for (Eigen::Index j = 0; j < os.w; ++j) {
            const S g = n.grad[flat(os, b, c, i, j)];
            src->grad[flat(in, b, c, i + 1, j)] += g;
            src->grad[flat(in, b, c, i, j)] -= g;
          }
  });
  for (Eigen::Index b = 0; b < os.n; ++b)
    for (Eigen::Index c = 0; c < os.c; ++c)
      for (Eigen::Index i = 0; i < os.h; ++i)
        for (Eigen::Index j = 0; j < os.w; ++j)
          out.value()[flat(os, b, c, i, j)] =
              x.value()[flat(in, b, c, i + 1, j)] -
              x.value()[flat(in, b, c, i, j)];
  return out;
}

/// Forward difference along columns: out(i, j) = x(i, j+1) - x(i, j).
template <class S>
Tensor<S> diff_right(Tape<S>& tape, const Tensor<S>& x) {
  const Shape4 in = x.shape();
  if (in.w < 2) throw std::invalid_argument("diff_right: needs w >= 2");
  Shape4 os = in;
  os.w = in.w - 1;
  auto out = tape.op(os, {x.node()}, [in, os](Node<S>& n) {
    Node<S>* src = n.inputs[0];
    if (!src->requires_grad) return;
    src->ensure_grad();
    for (Eigen::Index b = 0; b < os.n; ++b)
      for (Eigen::Index c = 0; c < os.c; ++c)
        for (Eigen::Index i = 0; i < os.h; ++i)
          for (Eigen::Index j = 0; j < os.w; ++j) {
            const S g = n.grad[flat(os, b, c, i, j)];
            src->grad[flat(in, b, c, i, j + 1)] += g;
            src->grad[flat(in, b, c, i, j)] -= g;
          }
  });
  for (Eigen::Index b = 0; b < os.n; ++b)
    for (Eigen::Index c = 0; c < os.c; ++c)
      for (Eigen::Index i = 0; i < os.h; ++i)
        for (Eigen::Index j = 0; j < os.w; ++j)
          out.value()[flat(os, b, c, i, j)] =
              x.value()[flat(in, b, c, i, j + 1)] -
              x.value()[flat(in, b, c, i, j)];
  return out;
}

// ---------------------------------------------------------------------------
// convolution

struct Padding {
  Eigen::Index top = 0, bottom = 0, left = 0, right = 0;
};

namespace detail {

// column matrix layout [C*kh*kw, OH*OW], row index (c*kh + a)*kw + b
template <class S>
void im2col(const Buffer<S>& x, const Shape4& s, Eigen::Index n,
            Eigen::Index kh, Eigen::Index kw, const Padding& p,
            Eigen::Index oh, Eigen::Index ow, MatRM<S>& col) {
  col.setZero();
  for (Eigen::Index c = 0; c < s.c; ++c)
    for (Eigen::Index a = 0; a < kh; ++a)
      for (Eigen::Index b = 0; b < kw; ++b) {
        const Eigen::Index row = (c * kh + a) * kw + b;
        S* dst = col.data() + row * col.cols();
        for (Eigen::Index oi = 0; oi < oh; ++oi) {
          const Eigen::Index si = oi - p.top + a;
          if (si < 0 || si >= s.h) continue;
          const S* src = x.data() + flat(s, n, c, si, 0);
          const Eigen::Index j0 = std::max<Eigen::Index>(0, p.left - b);
          const Eigen::Index j1 =
              std::min<Eigen::Index>(ow, s.w + p.left - b);
          for (Eigen::Index oj = j0; oj < j1; ++oj)
            dst[oi * ow + oj] = src[oj - p.left + b];
        }
      }
}

template <class S>
void col2im_add(const MatRM<S>& col, const Shape4& s, Eigen::Index n,
                Eigen::Index kh, Eigen::Index kw, const Padding& p,
                Eigen::Index oh, Eigen::Index ow, Buffer<S>& dx) {
  for (Eigen::Index c = 0; c < s.c; ++c)
    for (Eigen::Index a = 0; a < kh; ++a)
      for (Eigen::Index b = 0; b < kw; ++b) {
        const Eigen::Index row = (c * kh + a) * kw + b;
        const S* src = col.data() + row * col.cols();
        for (Eigen::Index oi = 0; oi < oh; ++oi) {
          const Eigen::Index si = oi - p.top + a;
          if (si < 0 || si >= s.h) continue;
          S* dst = dx.data() + flat(s, n, c, si, 0);
          const Eigen::Index j0 = std::max<Eigen::Index>(0, p.left - b);
          const Eigen::Index j1 =
              std::min<Eigen::Index>(ow, s.w + p.left - b);
          for (Eigen::Index oj = j0; oj < j1; ++oj)
            dst[oj - p.left + b] += src[oi * ow + oj];
        }
      }
}

}  // namespace detail

/// Cross-correlation with zero padding. kernel shape is
/// [filters, in_channels, kh, kw]; optional per-filter bias.
template <class S>
Tensor<S> conv2d(Tape<S>& tape, const Tensor<S>& x, const Tensor<S>& kernel,
                 const Padding& pad, const Tensor<S>* bias = nullptr) {
  const Shape4 xs = x.shape();
  const Shape4 ks = kernel.shape();
  if (ks.c != xs.c)
    throw std::invalid_argument("conv2d: channel mismatch, input " +
                                xs.str() + " kernel " + ks.str());
  if (pad.top < 0 || pad.bottom < 0 || pad.left < 0 || pad.right < 0)
    throw std::invalid_argument("conv2d: negative padding");
  const Eigen::Index f = ks.n, kh = ks.h, kw = ks.w;
  const Eigen::Index oh = xs.h + pad.top + pad.bottom - kh + 1;
  const Eigen::Index ow = xs.w + pad.left + pad.right - kw + 1;
  if (oh <= 0 || ow <= 0)
    throw std::invalid_argument("conv2d: kernel larger than padded input");
  if (bias && bias->shape().count() != f)
    throw std::invalid_argument("conv2d: bias size mismatch");

  Shape4 os{xs.n, f, oh, ow};
  std::vector<Node<S>*> ins{x.node(), kernel.node()};
  if (bias) ins.push_back(bias->node());

  const Eigen::Index ckk = xs.c * kh * kw;
  auto out = tape.op(os, ins, [=](Node<S>& n) {
    Node<S>* xn = n.inputs[0];
    Node<S>* kn = n.inputs[1];
    Node<S>* bn = n.inputs.size() > 2 ? n.inputs[2] : nullptr;
    Eigen::Map<const MatRM<S>> kmat(kn->value.data(), f, ckk);
    if (kn->requires_grad) kn->ensure_grad();
    if (xn->requires_grad) xn->ensure_grad();
    if (bn && bn->requires_grad) bn->ensure_grad();
    MatRM<S> col(ckk, oh * ow);
    MatRM<S> dcol;
    for (Eigen::Index b = 0; b < xs.n; ++b) {
      Eigen::Map<const MatRM<S>> dout(n.grad.data() + b * f * oh * ow, f,
                                      oh * ow);
      if (kn->requires_grad) {
        detail::im2col(xn->value, xs, b, kh, kw, pad, oh, ow, col);
        Eigen::Map<MatRM<S>> dk(kn->grad.data(), f, ckk);
        dk.noalias() += dout * col.transpose();
      }
      if (xn->requires_grad) {
        dcol.resize(ckk, oh * ow);
        dcol.noalias() = kmat.transpose() * dout;
        detail::col2im_add(dcol, xs, b, kh, kw, pad, oh, ow, xn->grad);
      }
      if (bn && bn->requires_grad) {
        Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, 1>> db(bn->grad.data(), f);
        db.noalias() += dout.rowwise().sum();
      }
    }
  });

  Eigen::Map<const MatRM<S>> kmat(kernel.value().data(), f, ckk);
  MatRM<S> col(ckk, oh * ow);
  for (Eigen::Index b = 0; b < xs.n; ++b) {
    detail::im2col(x.value(), xs, b, kh, kw, pad, oh, ow, col);
    Eigen::Map<MatRM<S>> omat(out.value().data() + b * f * oh * ow, f, oh * ow);
    omat.noalias() = kmat * col;
    if (bias) {
      Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, 1>> bv(
          bias->value().data(), f);
      omat.colwise() += bv;
    }
  }
  return out;
}

/// Causal convolution whose receptive field extends only upward: output
/// row i sees input rows <= i. The feature map is shifted down by
/// floor(k/2) (zero fill at the top, bottom rows dropped) before the
/// same-padded convolution.
template <class S>
Tensor<S> shifted_conv_up(Tape<S>& tape, const Tensor<S>& x,
                          const Tensor<S>& kernel,
                          const Tensor<S>* bias = nullptr) {
  const Shape4 ks = kernel.shape();
  if (ks.h % 2 == 0 || ks.w % 2 == 0)
    throw std::invalid_argument("shifted_conv_up: kernel must be odd");
  auto shifted = shift2d(tape, x, ks.h / 2, 0);
  Padding pad{ks.h / 2, ks.h / 2, ks.w / 2, ks.w / 2};
  return conv2d(tape, shifted, kernel, pad, bias);
}

// ---------------------------------------------------------------------------
// normalization

enum class Mode { kTrain, kEval };

/// Per-channel normalization statistics (frozen copies live in the
/// checkpoint; updated in train mode only).
template <class S>
struct RunningStats {
  Buffer<S> mean;
  Buffer<S> var;
};

/// Batch normalization over (batch, height, width) per channel. Train mode
/// normalizes with current batch statistics and updates the running
/// buffers in place; eval mode uses the frozen running statistics.
template <class S>
Tensor<S> batch_norm(Tape<S>& tape, const Tensor<S>& x, const Tensor<S>& gamma,
                     const Tensor<S>& delta, RunningStats<S>& stats, Mode mode,
                     double eps, double momentum) {
  const Shape4 s = x.shape();
  if (gamma.shape().count() != s.c || delta.shape().count() != s.c ||
      stats.mean.size() != s.c || stats.var.size() != s.c)
    throw std::invalid_argument("batch_norm: channel state mismatch");
  const Eigen::Index m = s.n * s.h * s.w;

  Buffer<S> mu(s.c), sigma_inv(s.c);
  if (mode == Mode::kTrain) {
    for (Eigen::Index c = 0; c < s.c; ++c) {
      double acc = 0.0;
      for (Eigen::Index b = 0; b < s.n; ++b) {
        const S* p = x.value().data() + flat(s, b, c, 0, 0);
        for (Eigen::Index i = 0; i < s.plane(); ++i) acc += p[i];
      }
      const double mean_c = acc / m;
      double var_acc = 0.0;
      for (Eigen::Index b = 0; b < s.n; ++b) {
        const S* p = x.value().data() + flat(s, b, c, 0, 0);
        for (Eigen::Index i = 0; i < s.plane(); ++i) {
          const double d = p[i] - mean_c;
          var_acc += d * d;
        }
      }
      const double var_c = var_acc / m;  // biased, used for normalization
      mu[c] = static_cast<S>(mean_c);
      sigma_inv[c] = static_cast<S>(1.0 / std::sqrt(var_c + eps));
      const double unbiased = m > 1 ? var_acc / (m - 1) : var_c;
      stats.mean[c] = static_cast<S>((1.0 - momentum) * stats.mean[c] +
                                     momentum * mean_c);
      stats.var[c] = static_cast<S>((1.0 - momentum) * stats.var[c] +
                                    momentum * unbiased);
    }
  } else {
    for (Eigen::Index c = 0; c < s.c; ++c) {
      mu[c] = stats.mean[c];
      sigma_inv[c] = static_cast<S>(
          1.0 / std::sqrt(static_cast<double>(stats.var[c]) + eps));
    }
  }

  auto out = tape.op(
      s, {x.node(), gamma.node(), delta.node()},
      [s, m, mu, sigma_inv, mode](Node<S>& n) {
        Node<S>* xn = n.inputs[0];
        Node<S>* gn = n.inputs[1];
        Node<S>* dn = n.inputs[2];
        if (xn->requires_grad) xn->ensure_grad();
        if (gn->requires_grad) gn->ensure_grad();
        if (dn->requires_grad) dn->ensure_grad();
        for (Eigen::Index c = 0; c < s.c; ++c) {
          const S si = sigma_inv[c];
          const S g = gn->value[c];
          double sum_dy = 0.0, sum_dy_xhat = 0.0;
          for (Eigen::Index b = 0; b < s.n; ++b) {
            const Eigen::Index base = flat(s, b, c, 0, 0);
            for (Eigen::Index i = 0; i < s.plane(); ++i) {
              const S dy = n.grad[base + i];
              const S xhat = (xn->value[base + i] - mu[c]) * si;
              sum_dy += dy;
              sum_dy_xhat += dy * xhat;
            }
          }
          if (gn->requires_grad) gn->grad[c] += static_cast<S>(sum_dy_xhat);
          if (dn->requires_grad) dn->grad[c] += static_cast<S>(sum_dy);
          if (!xn->requires_grad) continue;
          if (mode == Mode::kTrain) {
            const S mean_dy = static_cast<S>(sum_dy / m);
            const S mean_dy_xhat = static_cast<S>(sum_dy_xhat / m);
            for (Eigen::Index b = 0; b < s.n; ++b) {
              const Eigen::Index base = flat(s, b, c, 0, 0);
              for (Eigen::Index i = 0; i < s.plane(); ++i) {
                const S dy = n.grad[base + i];
                const S xhat = (xn->value[base + i] - mu[c]) * si;
                xn->grad[base + i] +=
                    g * si * (dy - mean_dy - xhat * mean_dy_xhat);
              }
            }
          } else {
            for (Eigen::Index b = 0; b < s.n; ++b) {
              const Eigen::Index base = flat(s, b, c, 0, 0);
              for (Eigen::Index i = 0; i < s.plane(); ++i)
                xn->grad[base + i] += n.grad[base + i] * g * si;
            }
          }
        }
      });

  for (Eigen::Index c = 0; c < s.c; ++c) {
    const S g = gamma.value()[c], d = delta.value()[c];
    for (Eigen::Index b = 0; b < s.n; ++b) {
      const Eigen::Index base = flat(s, b, c, 0, 0);
      for (Eigen::Index i = 0; i < s.plane(); ++i)
        out.value()[base + i] =
            (x.value()[base + i] - mu[c]) * sigma_inv[c] * g + d;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// fused statistical ops (forward values delegate to the closed forms)

/// Elementwise -ln p(y | alpha, beta) for fixed noisy observations y.
template <class S>
Tensor<S> g0_nll(Tape<S>& tape, const Tensor<S>& alpha, const Tensor<S>& beta,
                 const Buffer<S>& y, const bayes::LooksParam& looks) {
  if (!(alpha.shape() == beta.shape()) || alpha.shape().count() != y.size())
    throw std::invalid_argument("g0_nll: shape mismatch");
  const double L = looks.L;
  auto out = tape.op(
      alpha.shape(), {alpha.node(), beta.node()}, [y, L](Node<S>& n) {
        Node<S>* an = n.inputs[0];
        Node<S>* bn = n.inputs[1];
        if (an->requires_grad) an->ensure_grad();
        if (bn->requires_grad) bn->ensure_grad();
        const bayes::LooksParam looks_b(L);
        for (Eigen::Index i = 0; i < n.grad.size(); ++i) {
          auto [da, db] = bayes::neg_log_likelihood_grad(
              static_cast<double>(y[i]), static_cast<double>(an->value[i]),
              static_cast<double>(bn->value[i]), looks_b);
          if (an->requires_grad)
            an->grad[i] += n.grad[i] * static_cast<S>(da);
          if (bn->requires_grad)
            bn->grad[i] += n.grad[i] * static_cast<S>(db);
        }
      });
  for (Eigen::Index i = 0; i < y.size(); ++i) {
    const double ai = alpha.value()[i], bi = beta.value()[i];
    // diverged parameters surface as a non-finite loss, which aborts
    // training with a diagnostic instead of throwing mid-graph
    if (!std::isfinite(ai) || !std::isfinite(bi) || ai <= 0.0 || bi <= 0.0) {
      out.value()[i] = std::numeric_limits<S>::quiet_NaN();
      continue;
    }
    out.value()[i] = static_cast<S>(bayes::neg_log_likelihood(
        static_cast<double>(y[i]), ai, bi, looks));
  }
  return out;
}

/// Elementwise posterior mean (beta + L y) / (L + alpha - 1).
template <class S>
Tensor<S> posterior_mean_map(Tape<S>& tape, const Tensor<S>& alpha,
                             const Tensor<S>& beta, const Buffer<S>& y,
                             const bayes::LooksParam& looks) {
  if (!(alpha.shape() == beta.shape()) || alpha.shape().count() != y.size())
    throw std::invalid_argument("posterior_mean_map: shape mismatch");
  const double L = looks.L;
  auto out = tape.op(
      alpha.shape(), {alpha.node(), beta.node()}, [y, L](Node<S>& n) {
        Node<S>* an = n.inputs[0];
        Node<S>* bn = n.inputs[1];
        if (an->requires_grad) an->ensure_grad();
        if (bn->requires_grad) bn->ensure_grad();
        for (Eigen::Index i = 0; i < n.grad.size(); ++i) {
          const double denom = L + static_cast<double>(an->value[i]) - 1.0;
          const double xhat =
              (static_cast<double>(bn->value[i]) + L * y[i]) / denom;
          if (an->requires_grad)
            an->grad[i] += n.grad[i] * static_cast<S>(-xhat / denom);
          if (bn->requires_grad)
            bn->grad[i] += n.grad[i] * static_cast<S>(1.0 / denom);
        }
      });
  for (Eigen::Index i = 0; i < y.size(); ++i) {
    const double ai = alpha.value()[i], bi = beta.value()[i];
    if (!std::isfinite(ai) || !std::isfinite(bi) || ai <= 0.0 || bi <= 0.0) {
      out.value()[i] = std::numeric_limits<S>::quiet_NaN();
      continue;
    }
    out.value()[i] = static_cast<S>(bayes::posterior_mmse(
        static_cast<double>(y[i]), ai, bi, looks));
  }
  return out;
}

// ---------------------------------------------------------------------------
// masked non-local layer

inline constexpr double kNonlocalLogitClamp = 40.0;

/// Non-local block with a causal row mask: the output at (i, j) is a
/// softmax-weighted combination of embedded feature vectors from the q x q
/// patch around (i, j), restricted to rows <= i (and to the image). A
/// residual connection adds the combination to the input features.
/// w_theta, w_psi are [c, c] embeddings, w_g is [c, c]; logits are clamped
/// at +40 before exponentiation.
template <class S>
Tensor<S> masked_nonlocal(Tape<S>& tape, const Tensor<S>& x,
                          const Tensor<S>& w_theta, const Tensor<S>& w_psi,
                          const Tensor<S>& w_g, int q) {
  const Shape4 s = x.shape();
  const Eigen::Index c = s.c;
  if (q % 2 == 0 || q < 1)
    throw std::invalid_argument("masked_nonlocal: q must be odd");
  for (const Tensor<S>* w : {&w_theta, &w_psi, &w_g})
    if (w->shape().count() != c * c)
      throw std::invalid_argument("masked_nonlocal: weight shape mismatch");
  const int r = q / 2;

  // gather the feature matrix [h*w, c] of one sample
  auto gather = [s, c](const Buffer<S>& buf, Eigen::Index b, MatRM<S>& m) {
    m.resize(s.plane(), c);
    for (Eigen::Index ch = 0; ch < c; ++ch) {
      const S* p = buf.data() + flat(s, b, ch, 0, 0);
      for (Eigen::Index i = 0; i < s.plane(); ++i) m(i, ch) = p[i];
    }
  };
  auto scatter_add = [s, c](const MatRM<S>& m, Eigen::Index b, Buffer<S>& buf) {
    for (Eigen::Index ch = 0; ch < c; ++ch) {
      S* p = buf.data() + flat(s, b, ch, 0, 0);
      for (Eigen::Index i = 0; i < s.plane(); ++i) p[i] += m(i, ch);
    }
  };

  auto out = tape.op(
      s, {x.node(), w_theta.node(), w_psi.node(), w_g.node()},
      [s, c, r, gather, scatter_add](Node<S>& n) {
        Node<S>* xn = n.inputs[0];
        Node<S>* tn = n.inputs[1];
        Node<S>* pn = n.inputs[2];
        Node<S>* gn = n.inputs[3];
        Eigen::Map<const MatRM<S>> wt(tn->value.data(), c, c);
        Eigen::Map<const MatRM<S>> wp(pn->value.data(), c, c);
        Eigen::Map<const MatRM<S>> wg(gn->value.data(), c, c);
        for (Node<S>* nn : {xn, tn, pn, gn})
          if (nn->requires_grad) nn->ensure_grad();

        MatRM<S> xm, theta, psi, gmap;
        MatRM<S> dtheta, dpsi, dgmap, dxm;
        std::vector<double> wgt((2 * r + 1) * (r + 1));
        std::vector<Eigen::Index> idx(wgt.size());
        for (Eigen::Index b = 0; b < s.n; ++b) {
          gather(xn->value, b, xm);
          theta.noalias() = xm * wt;
          psi.noalias() = xm * wp;
          gmap.noalias() = xm * wg;
          dtheta = MatRM<S>::Zero(s.plane(), c);
          dpsi = MatRM<S>::Zero(s.plane(), c);
          dgmap = MatRM<S>::Zero(s.plane(), c);
          dxm = MatRM<S>::Zero(s.plane(), c);
          for (Eigen::Index i = 0; i < s.h; ++i)
            for (Eigen::Index j = 0; j < s.w; ++j) {
              const Eigen::Index o = i * s.w + j;
              // residual path
              for (Eigen::Index ch = 0; ch < c; ++ch)
                dxm(o, ch) += n.grad[flat(s, b, ch, i, j)];
              // recompute admitted weights
              int cnt = 0;
              double norm = 0.0;
              for (int di = -r; di <= 0; ++di) {
                const Eigen::Index pi = i + di;
                if (pi < 0) continue;
                for (int dj = -r; dj <= r; ++dj) {
                  const Eigen::Index pj = j + dj;
                  if (pj < 0 || pj >= s.w) continue;
                  const Eigen::Index po = pi * s.w + pj;
                  double logit = theta.row(o).dot(psi.row(po));
                  logit = std::min(logit, kNonlocalLogitClamp);
                  wgt[cnt] = std::exp(logit);
                  idx[cnt] = po;
                  norm += wgt[cnt];
                  ++cnt;
                }
              }
              double dz_dot_sum = 0.0;
              // dz = grad of Z at (i,j); dw_p = dz . g_p
              for (int k = 0; k < cnt; ++k) {
                wgt[k] /= norm;
                double dw = 0.0;
                for (Eigen::Index ch = 0; ch < c; ++ch)
                  dw += static_cast<double>(n.grad[flat(s, b, ch, i, j)]) *
                        gmap(idx[k], ch);
                dz_dot_sum += wgt[k] * dw;
              }
              for (int k = 0; k < cnt; ++k) {
                const Eigen::Index po = idx[k];
                double dw = 0.0;
                for (Eigen::Index ch = 0; ch < c; ++ch)
                  dw += static_cast<double>(n.grad[flat(s, b, ch, i, j)]) *
                        gmap(po, ch);
                // softmax jacobian; clamped logits pass zero gradient
                double logit = theta.row(o).dot(psi.row(po));
                const double ds =
                    logit >= kNonlocalLogitClamp ? 0.0 : wgt[k] * (dw - dz_dot_sum);
                if (ds != 0.0) {
                  dtheta.row(o) += static_cast<S>(ds) * psi.row(po);
                  dpsi.row(po) += static_cast<S>(ds) * theta.row(o);
                }
                for (Eigen::Index ch = 0; ch < c; ++ch)
                  dgmap(po, ch) +=
                      static_cast<S>(wgt[k]) * n.grad[flat(s, b, ch, i, j)];
              }
            }
          if (tn->requires_grad) {
            Eigen::Map<MatRM<S>> dwt(tn->grad.data(), c, c);
            dwt.noalias() += xm.transpose() * dtheta;
          }
          if (pn->requires_grad) {
            Eigen::Map<MatRM<S>> dwp(pn->grad.data(), c, c);
            dwp.noalias() += xm.transpose() * dpsi;
          }
          if (gn->requires_grad) {
            Eigen::Map<MatRM<S>> dwg(gn->grad.data(), c, c);
            dwg.noalias() += xm.transpose() * dgmap;
          }
          if (xn->requires_grad) {
            dxm.noalias() += dtheta * wt.transpose();
            dxm.noalias() += dpsi * wp.transpose();
            dxm.noalias() += dgmap * wg.transpose();
            scatter_add(dxm, b, xn->grad);
          }
        }
      });

  // forward
  Eigen::Map<const MatRM<S>> wt(w_theta.value().data(), c, c);
  Eigen::Map<const MatRM<S>> wp(w_psi.value().data(), c, c);
  Eigen::Map<const MatRM<S>> wg(w_g.value().data(), c, c);
  MatRM<S> xm, theta, psi, gmap;
  std::vector<double> wgt((2 * r + 1) * (r + 1));
  std::vector<Eigen::Index> idx(wgt.size());
  for (Eigen::Index b = 0; b < s.n; ++b) {
    gather(x.value(), b, xm);
    theta.noalias() = xm * wt;
    psi.noalias() = xm * wp;
    gmap.noalias() = xm * wg;
    for (Eigen::Index i = 0; i < s.h; ++i)
      for (Eigen::Index j = 0; j < s.w; ++j) {
        const Eigen::Index o = i * s.w + j;
        int cnt = 0;
        double norm = 0.0;
        for (int di = -r; di <= 0; ++di) {
          const Eigen::Index pi = i + di;
          if (pi < 0) continue;
          for (int dj = -r; dj <= r; ++dj) {
            const Eigen::Index pj = j + dj;
            if (pj < 0 || pj >= s.w) continue;
            const Eigen::Index po = pi * s.w + pj;
            double logit = theta.row(o).dot(psi.row(po));
            logit = std::min(logit, kNonlocalLogitClamp);
            wgt[cnt] = std::exp(logit);
            idx[cnt] = po;
            norm += wgt[cnt];
            ++cnt;
          }
        }
        for (Eigen::Index ch = 0; ch < c; ++ch) {
          double z = 0.0;
          for (int k = 0; k < cnt; ++k)
            z += wgt[k] / norm * gmap(idx[k], ch);
          out.value()[flat(s, b, ch, i, j)] =
              x.value()[flat(s, b, ch, i, j)] + static_cast<S>(z);
        }
      }
  }
  return out;
}

}  // namespace speckle::ad

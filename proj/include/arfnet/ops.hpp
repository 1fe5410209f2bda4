// Copyright 2026 the arfnet authors
// SPDX-License-Identifier: Apache-2.0

/**
 * @file ops.hpp
 * @brief Elementwise, shape, reduction and linear-algebra primitives.
 *
 * Every op is a pure function of its inputs. When a non-null tape is passed
 * and at least one input is tracked, the op records a pull closure that
 * accumulates gradients into its parents. Ops accept either unbatched
 * ([C,H,W]) or batched ([B,C,H,W]) layouts where noted.
 */

#pragma once

#include <algorithm>
#include <cmath>

#include "arfnet/tape.hpp"
#include "arfnet/tensor.hpp"

namespace arfnet {

enum class Axis { vertical, horizontal };

namespace detail {

/// Uniform view of [C,H,W] / [B,C,H,W] tensors.
struct BatchView {
  int b, c, h, w;
  bool batched;
};

template <typename T>
inline BatchView view_chw(const Tensor<T>& x, const char* what) {
  if (x.rank() == 3) return {1, x.shape[0], x.shape[1], x.shape[2], false};
  if (x.rank() == 4) return {x.shape[0], x.shape[1], x.shape[2], x.shape[3], true};
  throw DimensionError(std::string(what) + ": expected rank 3 or 4, got " + shape_to_string(x.shape));
}

template <typename T>
inline T stable_sigmoid(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

template <typename T, typename Fwd, typename Bwd>
Tensor<T> unary_elementwise(Tape<T>* tape, const Tensor<T>& x, Fwd f, Bwd dfdx_from_xy) {
  Tensor<T> y(x.shape);
  for (size_t i = 0; i < x.data.size(); ++i) y.data[i] = f(x.data[i]);
  if (!tape || !tape->tracked(x)) return y;
  const int xid = x.node;
  return tape->record(std::move(y), [xid, dfdx_from_xy](Tape<T>& t, int self) {
    const auto& g = t.grad_buf(self);
    const auto& xv = t.val(xid).data;
    const auto& yv = t.val(self).data;
    if (!t.wants_grad(xid)) return;
    auto& gx = t.grad_buf(xid);
    for (size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * dfdx_from_xy(xv[i], yv[i]);
  });
}

template <typename T>
Tensor<T> sigmoid(Tape<T>* tape, const Tensor<T>& x) {
  return unary_elementwise(
      tape, x, [](T v) { return detail::stable_sigmoid(v); },
      [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> tanh_act(Tape<T>* tape, const Tensor<T>& x) {
  return unary_elementwise(
      tape, x, [](T v) { return std::tanh(v); }, [](T, T y) { return T(1) - y * y; });
}

template <typename T>
Tensor<T> leaky_relu(Tape<T>* tape, const Tensor<T>& x, T slope) {
  return unary_elementwise(
      tape, x, [slope](T v) { return v >= T(0) ? v : slope * v; },
      [slope](T v, T) { return v >= T(0) ? T(1) : slope; });
}

template <typename T>
Tensor<T> softplus(Tape<T>* tape, const Tensor<T>& x) {
  return unary_elementwise(
      tape, x,
      [](T v) { return std::max(v, T(0)) + std::log1p(std::exp(-std::abs(v))); },
      [](T v, T) { return detail::stable_sigmoid(v); });
}

/// a*x + b, elementwise with scalar constants.
template <typename T>
Tensor<T> scale_shift(Tape<T>* tape, const Tensor<T>& x, T a, T b) {
  return unary_elementwise(
      tape, x, [a, b](T v) { return a * v + b; }, [a](T, T) { return a; });
}

template <typename T>
Tensor<T> neg(Tape<T>* tape, const Tensor<T>& x) {
  return scale_shift(tape, x, T(-1), T(0));
}

template <typename T, typename Combine>
Tensor<T> binary_elementwise(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b, const char* what,
                             Combine f, T wa_const, T wb_const, bool product) {
  if (!a.same_shape(b))
    throw DimensionError(std::string(what) + ": shape mismatch " + shape_to_string(a.shape) + " vs " +
                         shape_to_string(b.shape));
  Tensor<T> y(a.shape);
  for (size_t i = 0; i < y.data.size(); ++i) y.data[i] = f(a.data[i], b.data[i]);
  if (!tape || (!tape->tracked(a) && !tape->tracked(b))) return y;
  const int aid = tape->ensure(a), bid = tape->ensure(b);
  return tape->record(std::move(y), [aid, bid, wa_const, wb_const, product](Tape<T>& t, int self) {
    const auto& g = t.grad_buf(self);
    const auto& av = t.val(aid).data;
    const auto& bv = t.val(bid).data;
    if (t.wants_grad(aid)) {
      auto& ga = t.grad_buf(aid);
      for (size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * (product ? bv[i] : wa_const);
    }
    if (t.wants_grad(bid)) {
      auto& gb = t.grad_buf(bid);
      for (size_t i = 0; i < gb.size(); ++i) gb[i] += g[i] * (product ? av[i] : wb_const);
    }
  });
}

template <typename T>
Tensor<T> add(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
  return binary_elementwise(
      tape, a, b, "add", [](T x, T y) { return x + y; }, T(1), T(1), false);
}

template <typename T>
Tensor<T> sub(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
  return binary_elementwise(
      tape, a, b, "sub", [](T x, T y) { return x - y; }, T(1), T(-1), false);
}

template <typename T>
Tensor<T> mul(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
  return binary_elementwise(
      tape, a, b, "mul", [](T x, T y) { return x * y; }, T(0), T(0), true);
}

// ---------------------------------------------------------------------------
// broadcast products
// ---------------------------------------------------------------------------

/// x[B,C,H,W] * m[B,H,W]: one weight per pixel, shared across channels.
template <typename T>
Tensor<T> mul_pixel_map(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& m) {
  const auto v = detail::view_chw(x, "mul_pixel_map");
  require_rank(m, v.batched ? 3 : 2, "mul_pixel_map weights");
  const int hw = v.h * v.w;
  if ((v.batched && (m.shape[0] != v.b || m.shape[1] != v.h || m.shape[2] != v.w)) ||
      (!v.batched && (m.shape[0] != v.h || m.shape[1] != v.w)))
    throw DimensionError("mul_pixel_map: weight map " + shape_to_string(m.shape) +
                         " does not match input " + shape_to_string(x.shape));
  Tensor<T> y(x.shape);
  for (int b = 0; b < v.b; ++b)
    for (int c = 0; c < v.c; ++c) {
      const T* xs = x.data.data() + (static_cast<size_t>(b) * v.c + c) * hw;
      const T* ms = m.data.data() + static_cast<size_t>(b) * hw;
      T* ys = y.data.data() + (static_cast<size_t>(b) * v.c + c) * hw;
      for (int i = 0; i < hw; ++i) ys[i] = xs[i] * ms[i];
    }
  if (!tape || (!tape->tracked(x) && !tape->tracked(m))) return y;
  const int xid = tape->ensure(x), mid = tape->ensure(m);
  return tape->record(std::move(y), [xid, mid, v, hw](Tape<T>& t, int self) {
    const auto& g = t.grad_buf(self);
    const auto& xv = t.val(xid).data;
    const auto& mv = t.val(mid).data;
    if (t.wants_grad(xid)) {
      auto& gx = t.grad_buf(xid);
      for (int b = 0; b < v.b; ++b)
        for (int c = 0; c < v.c; ++c)
          for (int i = 0; i < hw; ++i)
            gx[(static_cast<size_t>(b) * v.c + c) * hw + i] +=
                g[(static_cast<size_t>(b) * v.c + c) * hw + i] * mv[static_cast<size_t>(b) * hw + i];
    }
    if (t.wants_grad(mid)) {
      auto& gm = t.grad_buf(mid);
      for (int b = 0; b < v.b; ++b)
        for (int c = 0; c < v.c; ++c)
          for (int i = 0; i < hw; ++i)
            gm[static_cast<size_t>(b) * hw + i] +=
                g[(static_cast<size_t>(b) * v.c + c) * hw + i] * xv[(static_cast<size_t>(b) * v.c + c) * hw + i];
    }
  });
}

/// x[B,C,H,W] * s[B,C]: one weight per channel per sample.
template <typename T>
Tensor<T> mul_channel_vec(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& s) {
  const auto v = detail::view_chw(x, "mul_channel_vec");
  require_rank(s, v.batched ? 2 : 1, "mul_channel_vec weights");
  if ((v.batched && (s.shape[0] != v.b || s.shape[1] != v.c)) || (!v.batched && s.shape[0] != v.c))
    throw DimensionError("mul_channel_vec: weights " + shape_to_string(s.shape) +
                         " do not match input " + shape_to_string(x.shape));
  const int hw = v.h * v.w;
  Tensor<T> y(x.shape);
  for (int bc = 0; bc < v.b * v.c; ++bc) {
    const T w = s.data[static_cast<size_t>(bc)];
    for (int i = 0; i < hw; ++i) y.data[static_cast<size_t>(bc) * hw + i] = x.data[static_cast<size_t>(bc) * hw + i] * w;
  }
  if (!tape || (!tape->tracked(x) && !tape->tracked(s))) return y;
  const int xid = tape->ensure(x), sid = tape->ensure(s);
  return tape->record(std::move(y), [xid, sid, v, hw](Tape<T>& t, int self) {
    const auto& g = t.grad_buf(self);
    const auto& xv = t.val(xid).data;
    const auto& sv = t.val(sid).data;
    if (t.wants_grad(xid)) {
      auto& gx = t.grad_buf(xid);
      for (int bc = 0; bc < v.b * v.c; ++bc)
        for (int i = 0; i < hw; ++i) gx[static_cast<size_t>(bc) * hw + i] += g[static_cast<size_t>(bc) * hw + i] * sv[static_cast<size_t>(bc)];
    }
    if (t.wants_grad(sid)) {
      auto& gs = t.grad_buf(sid);
      for (int bc = 0; bc < v.b * v.c; ++bc) {
        T acc = 0;
#pragma omp simd reduction(+ : acc)
        for (int i = 0; i < hw; ++i) acc += g[static_cast<size_t>(bc) * hw + i] * xv[static_cast<size_t>(bc) * hw + i];
        gs[static_cast<size_t>(bc)] += acc;
      }
    }
  });
}

/// x[B,C,H,W] * m[C,H,W]: one map shared across the batch.
template <typename T>
Tensor<T> mul_shared_map(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& m) {
  const auto v = detail::view_chw(x, "mul_shared_map");
  require_shape(m, {v.c, v.h, v.w}, "mul_shared_map weights");
  if (!v.batched) return mul(tape, x, m);
  const size_t chw = m.data.size();
  Tensor<T> y(x.shape);
  for (int b = 0; b < v.b; ++b)
    for (size_t i = 0; i < chw; ++i) y.data[static_cast<size_t>(b) * chw + i] = x.data[static_cast<size_t>(b) * chw + i] * m.data[i];
  if (!tape || (!tape->tracked(x) && !tape->tracked(m))) return y;
  const int xid = tape->ensure(x), mid = tape->ensure(m);
  return tape->record(std::move(y), [xid, mid, b = v.b, chw](Tape<T>& t, int self) {
    const auto& g = t.grad_buf(self);
    const auto& xv = t.val(xid).data;
    const auto& mv = t.val(mid).data;
    if (t.wants_grad(xid)) {
      auto& gx = t.grad_buf(xid);
      for (int s = 0; s < b; ++s)
        for (size_t i = 0; i < chw; ++i) gx[static_cast<size_t>(s) * chw + i] += g[static_cast<size_t>(s) * chw + i] * mv[i];
    }
    if (t.wants_grad(mid)) {
      auto& gm = t.grad_buf(mid);
      for (int s = 0; s < b; ++s)
        for (size_t i = 0; i < chw; ++i) gm[i] += g[static_cast<size_t>(s) * chw + i] * xv[static_cast<size_t>(s) * chw + i];
    }
  });
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum_all(Tape<T>* tape, const Tensor<T>& x) {
  T acc = 0;
  for (T v : x.data) acc += v;
  Tensor<T> y = Tensor<T>::scalar(acc);
  if (!tape || !tape->tracked(x)) return y;
  const int xid = x.node;
  return tape->record(std::move(y), [xid](Tape<T>& t, int self) {
    const T g = t.grad_buf(self)[0];
    if (!t.wants_grad(xid)) return;
    auto& gx = t.grad_buf(xid);
    for (auto& v : gx) v += g;
  });
}

template <typename T>
Tensor<T> mean_all(Tape<T>* tape, const Tensor<T>& x) {
  return scale_shift(tape, sum_all(tape, x), T(1) / static_cast<T>(x.numel()), T(0));
}

/// [B, ...] -> [B]: mean over everything but the leading axis.
template <typename T>
Tensor<T> mean_per_sample(Tape<T>* tape, const Tensor<T>& x) {
  if (x.rank() < 2) throw DimensionError("mean_per_sample: need rank >= 2, got " + shape_to_string(x.shape));
  const int b = x.shape[0];
  const size_t inner = x.numel() / static_cast<size_t>(b);
  Tensor<T> y({b});
  for (int s = 0; s < b; ++s) {
    T acc = 0;
    for (size_t i = 0; i < inner; ++i) acc += x.data[static_cast<size_t>(s) * inner + i];
    y.data[static_cast<size_t>(s)] = acc / static_cast<T>(inner);
  }
  if (!tape || !tape->tracked(x)) return y;
  const int xid = x.node;
  return tape->record(std::move(y), [xid, b, inner](Tape<T>& t, int self) {
    const auto& g = t.grad_buf(self);
    if (!t.wants_grad(xid)) return;
    auto& gx = t.grad_buf(xid);
    for (int s = 0; s < b; ++s) {
      const T gs = g[static_cast<size_t>(s)] / static_cast<T>(inner);
      for (size_t i = 0; i < inner; ++i) gx[static_cast<size_t>(s) * inner + i] += gs;
    }
  });
}

/// [B,C,H,W] -> [B,C] (or [C,H,W] -> [C]): global average pool.
template <typename T>
Tensor<T> spatial_mean(Tape<T>* tape, const Tensor<T>& x) {
  const auto v = detail::view_chw(x, "spatial_mean");
  const int hw = v.h * v.w;
  Tensor<T> y(v.batched ? std::vector<int>{v.b, v.c} : std::vector<int>{v.c});
  for (int bc = 0; bc < v.b * v.c; ++bc) {
    T acc = 0;
    for (int i = 0; i < hw; ++i) acc += x.data[static_cast<size_t>(bc) * hw + i];
    y.data[static_cast<size_t>(bc)] = acc / static_cast<T>(hw);
  }
  if (!tape || !tape->tracked(x)) return y;
  const int xid = x.node;
  return tape->record(std::move(y), [xid, n = v.b * v.c, hw](Tape<T>& t, int self) {
    const auto& g = t.grad_buf(self);
    if (!t.wants_grad(xid)) return;
    auto& gx = t.grad_buf(xid);
    for (int bc = 0; bc < n; ++bc) {
      const T gs = g[static_cast<size_t>(bc)] / static_cast<T>(hw);
      for (int i = 0; i < hw; ++i) gx[static_cast<size_t>(bc) * hw + i] += gs;
    }
  });
}

/// Mean over one spatial axis. vertical pools H (giving [..,C,W]),
/// horizontal pools W (giving [..,C,H]).
template <typename T>
Tensor<T> gap_axis(Tape<T>* tape, const Tensor<T>& x, Axis axis) {
  const auto v = detail::view_chw(x, "gap_axis");
  const bool pool_h = axis == Axis::vertical;
  const int keep = pool_h ? v.w : v.h;
  const int red = pool_h ? v.h : v.w;
  Tensor<T> y(v.batched ? std::vector<int>{v.b, v.c, keep} : std::vector<int>{v.c, keep});
  for (int bc = 0; bc < v.b * v.c; ++bc) {
    const T* src = x.data.data() + static_cast<size_t>(bc) * v.h * v.w;
    T* dst = y.data.data() + static_cast<size_t>(bc) * keep;
    for (int k = 0; k < keep; ++k) {
      T acc = 0;
      for (int r = 0; r < red; ++r) acc += pool_h ? src[r * v.w + k] : src[k * v.w + r];
      dst[k] = acc / static_cast<T>(red);
    }
  }
  if (!tape || !tape->tracked(x)) return y;
  const int xid = x.node;
  return tape->record(std::move(y), [xid, v, pool_h, keep, red](Tape<T>& t, int self) {
    const auto& g = t.grad_buf(self);
    if (!t.wants_grad(xid)) return;
    auto& gx = t.grad_buf(xid);
    for (int bc = 0; bc < v.b * v.c; ++bc) {
      T* dst = gx.data() + static_cast<size_t>(bc) * v.h * v.w;
      const T* src = g.data() + static_cast<size_t>(bc) * keep;
      for (int k = 0; k < keep; ++k) {
        const T gs = src[k] / static_cast<T>(red);
        for (int r = 0; r < red; ++r) dst[pool_h ? r * v.w + k : k * v.w + r] += gs;
      }
    }
  });
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> reshape_copy(Tape<T>* tape, const Tensor<T>& x, std::vector<int> new_shape) {
  if (numel_of(new_shape) != x.numel())
    throw DimensionError("reshape: cannot view " + shape_to_string(x.shape) + " as " + shape_to_string(new_shape));
  Tensor<T> y(std::move(new_shape), x.data);
  if (!tape || !tape->tracked(x)) return y;
  const int xid = x.node;
  return tape->record(std::move(y), [xid](Tape<T>& t, int self) {
    const auto& g = t.grad_buf(self);
    t.accumulate(xid, g);
  });
}

/// Concatenate along the channel axis of [B?,C,H,W] tensors.
template <typename T>
Tensor<T> concat_channels(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
  const auto va = detail::view_chw(a, "concat_channels");
  const auto vb = detail::view_chw(b, "concat_channels");
  if (va.b != vb.b || va.h != vb.h || va.w != vb.w || va.batched != vb.batched)
    throw DimensionError("concat_channels: incompatible shapes " + shape_to_string(a.shape) + " vs " +
                         shape_to_string(b.shape));
  const int hw = va.h * va.w;
  const int cc = va.c + vb.c;
  Tensor<T> y(va.batched ? std::vector<int>{va.b, cc, va.h, va.w} : std::vector<int>{cc, va.h, va.w});
  for (int s = 0; s < va.b; ++s) {
    std::copy_n(a.data.data() + static_cast<size_t>(s) * va.c * hw, static_cast<size_t>(va.c) * hw,
                y.data.data() + static_cast<size_t>(s) * cc * hw);
    std::copy_n(b.data.data() + static_cast<size_t>(s) * vb.c * hw, static_cast<size_t>(vb.c) * hw,
                y.data.data() + static_cast<size_t>(s) * cc * hw + static_cast<size_t>(va.c) * hw);
  }
  if (!tape || (!tape->tracked(a) && !tape->tracked(b))) return y;
  const int aid = tape->ensure(a), bid = tape->ensure(b);
  return tape->record(std::move(y), [aid, bid, va, vb, hw, cc](Tape<T>& t, int self) {
    const auto& g = t.grad_buf(self);
    if (t.wants_grad(aid)) {
      auto& ga = t.grad_buf(aid);
      for (int s = 0; s < va.b; ++s)
        for (size_t i = 0; i < static_cast<size_t>(va.c) * hw; ++i)
          ga[static_cast<size_t>(s) * va.c * hw + i] += g[static_cast<size_t>(s) * cc * hw + i];
    }
    if (t.wants_grad(bid)) {
      auto& gb = t.grad_buf(bid);
      for (int s = 0; s < vb.b; ++s)
        for (size_t i = 0; i < static_cast<size_t>(vb.c) * hw; ++i)
          gb[static_cast<size_t>(s) * vb.c * hw + i] += g[static_cast<size_t>(s) * cc * hw + static_cast<size_t>(va.c) * hw + i];
  });
}

/// Take `count` channels starting at `first` from a [B?,C,H,W] tensor.
template <typename T>
Tensor<T> slice_channels(Tape<T>* tape, const Tensor<T>& x, int first, int count) {
  const auto v = detail::view_chw(x, "slice_channels");
  if (first < 0 || count <= 0 || first + count > v.c)
    throw DimensionError("slice_channels: range [" + std::to_string(first) + "," +
                         std::to_string(first + count) + ") out of " + std::to_string(v.c));
  const int hw = v.h * v.w;
  Tensor<T> y(v.batched ? std::vector<int>{v.b, count, v.h, v.w} : std::vector<int>{count, v.h, v.w});
  for (int s = 0; s < v.b; ++s)
    std::copy_n(x.data.data() + (static_cast<size_t>(s) * v.c + first) * hw, static_cast<size_t>(count) * hw,
                y.data.data() + static_cast<size_t>(s) * count * hw);
  if (!tape || !tape->tracked(x)) return y;
  const int xid = x.node;
  return tape->record(std::move(y), [xid, v, first, count, hw](Tape<T>& t, int self) {
    const auto& g = t.grad_buf(self);
    if (!t.wants_grad(xid)) return;
    auto& gx = t.grad_buf(xid);
    for (int s = 0; s < v.b; ++s)
      for (size_t i = 0; i < static_cast<size_t>(count) * hw; ++i)
        gx[(static_cast<size_t>(s) * v.c + first) * hw + i] += g[static_cast<size_t>(s) * count * hw + i];
  });
}

/// Stack [C,H,W] samples into a [B,C,H,W] batch.
template <typename T>
Tensor<T> stack_batch(Tape<T>* tape, const std::vector<const Tensor<T>*>& samples) {
  if (samples.empty()) throw DimensionError("stack_batch: empty batch");
  const auto& s0 = samples.front()->shape;
  for (const auto* s : samples) require_shape(*s, s0, "stack_batch sample");
  const size_t chw = samples.front()->numel();
  Tensor<T> y({static_cast<int>(samples.size()), s0[0], s0[1], s0[2]});
  for (size_t b = 0; b < samples.size(); ++b)
    std::copy_n(samples[b]->data.data(), chw, y.data.data() + b * chw);
  bool any = false;
  if (tape)
    for (const auto* s : samples) any = any || tape->tracked(*s);
  if (!tape || !any) return y;
  std::vector<int> ids(samples.size());
  for (size_t b = 0; b < samples.size(); ++b) ids[b] = tape->ensure(*samples[b]);
  return tape->record(std::move(y), [ids, chw](Tape<T>& t, int self) {
    const auto& g = t.grad_buf(self);
    for (size_t b = 0; b < ids.size(); ++b) {
      if (!t.wants_grad(ids[b])) continue;
      auto& gx = t.grad_buf(ids[b]);
      for (size_t i = 0; i < chw; ++i) gx[i] += g[b * chw + i];
    }
  });
}

/// Slice sample b of a [B,C,H,W] batch as [C,H,W].
template <typename T>
Tensor<T> unbatch(Tape<T>* tape, const Tensor<T>& x, int b) {
  require_rank(x, 4, "unbatch");
  if (b < 0 || b >= x.shape[0]) throw DimensionError("unbatch: index out of range");
  const size_t chw = x.numel() / static_cast<size_t>(x.shape[0]);
  Tensor<T> y({x.shape[1], x.shape[2], x.shape[3]});
  std::copy_n(x.data.data() + static_cast<size_t>(b) * chw, chw, y.data.data());
  if (!tape || !tape->tracked(x)) return y;
  const int xid = x.node;
  return tape->record(std::move(y), [xid, b, chw](Tape<T>& t, int self) {
    const auto& g = t.grad_buf(self);
    if (!t.wants_grad(xid)) return;
    auto& gx = t.grad_buf(xid);
    for (size_t i = 0; i < chw; ++i) gx[static_cast<size_t>(b) * chw + i] += g[i];
  });
}

/// Stack N scalar tensors into one [N] vector.
template <typename T>
Tensor<T> stack_scalars(Tape<T>* tape, const std::vector<Tensor<T>>& xs) {
  Tensor<T> y({static_cast<int>(xs.size())});
  for (size_t i = 0; i < xs.size(); ++i) {
    if (xs[i].numel() != 1) throw DimensionError("stack_scalars: inputs must be scalars");
    y.data[i] = xs[i].data[0];
  }
  bool any = false;
  if (tape)
    for (const auto& x : xs) any = any || tape->tracked(x);
  if (!tape || !any) return y;
  std::vector<int> ids(xs.size());
  for (size_t i = 0; i < xs.size(); ++i) ids[i] = tape->ensure(xs[i]);
  return tape->record(std::move(y), [ids](Tape<T>& t, int self) {
    const auto& g = t.grad_buf(self);
    for (size_t i = 0; i < ids.size(); ++i)
      if (t.wants_grad(ids[i])) t.grad_buf(ids[i])[0] += g[i];
  });
}

template <typename T>
Tensor<T> select(Tape<T>* tape, const Tensor<T>& x, int index) {
  if (index < 0 || static_cast<size_t>(index) >= x.numel()) throw DimensionError("select: index out of range");
  Tensor<T> y = Tensor<T>::scalar(x.data[static_cast<size_t>(index)]);
  if (!tape || !tape->tracked(x)) return y;
  const int xid = x.node;
  return tape->record(std::move(y), [xid, index](Tape<T>& t, int self) {
    if (t.wants_grad(xid)) t.grad_buf(xid)[static_cast<size_t>(index)] += t.grad_buf(self)[0];
  });
}

// ---------------------------------------------------------------------------
// softmax family
// ---------------------------------------------------------------------------

namespace detail {

struct AxisView {
  size_t outer, len, inner;
};

template <typename T>
inline AxisView axis_view(const Tensor<T>& x, int axis, const char* what) {
  if (axis < 0 || axis >= x.rank())
    throw DimensionError(std::string(what) + ": axis " + std::to_string(axis) + " out of range for " +
                         shape_to_string(x.shape));
  AxisView v{1, static_cast<size_t>(x.shape[static_cast<size_t>(axis)]), 1};
  for (int a = 0; a < axis; ++a) v.outer *= static_cast<size_t>(x.shape[static_cast<size_t>(a)]);
  for (int a = axis + 1; a < x.rank(); ++a) v.inner *= static_cast<size_t>(x.shape[static_cast<size_t>(a)]);
  return v;
}

}  // namespace detail

/// Exp-normalization along `axis`, max-subtracted for stability.
template <typename T>
Tensor<T> softmax(Tape<T>* tape, const Tensor<T>& x, int axis) {
  const auto v = detail::axis_view(x, axis, "softmax");
  Tensor<T> y(x.shape);
  for (size_t o = 0; o < v.outer; ++o)
    for (size_t i = 0; i < v.inner; ++i) {
      const size_t base = o * v.len * v.inner + i;
      T mx = x.data[base];
      for (size_t k = 1; k < v.len; ++k) mx = std::max(mx, x.data[base + k * v.inner]);
      T z = 0;
      for (size_t k = 0; k < v.len; ++k) {
        const T e = std::exp(x.data[base + k * v.inner] - mx);
        y.data[base + k * v.inner] = e;
        z += e;
      }
      for (size_t k = 0; k < v.len; ++k) y.data[base + k * v.inner] /= z;
    }
  if (!tape || !tape->tracked(x)) return y;
  const int xid = x.node;
  return tape->record(std::move(y), [xid, v](Tape<T>& t, int self) {
    const auto& g = t.grad_buf(self);
    const auto& yv = t.val(self).data;
    if (!t.wants_grad(xid)) return;
    auto& gx = t.grad_buf(xid);
    for (size_t o = 0; o < v.outer; ++o)
      for (size_t i = 0; i < v.inner; ++i) {
        const size_t base = o * v.len * v.inner + i;
        T dot = 0;
        for (size_t k = 0; k < v.len; ++k) dot += g[base + k * v.inner] * yv[base + k * v.inner];
        for (size_t k = 0; k < v.len; ++k)
          gx[base + k * v.inner] += yv[base + k * v.inner] * (g[base + k * v.inner] - dot);
      }
  });
}

template <typename T>
Tensor<T> log_softmax(Tape<T>* tape, const Tensor<T>& x, int axis) {
  const auto v = detail::axis_view(x, axis, "log_softmax");
  Tensor<T> y(x.shape);
  for (size_t o = 0; o < v.outer; ++o)
    for (size_t i = 0; i < v.inner; ++i) {
      const size_t base = o * v.len * v.inner + i;
      T mx = x.data[base];
      for (size_t k = 1; k < v.len; ++k) mx = std::max(mx, x.data[base + k * v.inner]);
      T z = 0;
      for (size_t k = 0; k < v.len; ++k) z += std::exp(x.data[base + k * v.inner] - mx);
      const T lz = mx + std::log(z);
      for (size_t k = 0; k < v.len; ++k) y.data[base + k * v.inner] = x.data[base + k * v.inner] - lz;
    }
  if (!tape || !tape->tracked(x)) return y;
  const int xid = x.node;
  return tape->record(std::move(y), [xid, v](Tape<T>& t, int self) {
    const auto& g = t.grad_buf(self);
    const auto& yv = t.val(self).data;
    if (!t.wants_grad(xid)) return;
    auto& gx = t.grad_buf(xid);
    for (size_t o = 0; o < v.outer; ++o)
      for (size_t i = 0; i < v.inner; ++i) {
        const size_t base = o * v.len * v.inner + i;
        T gsum = 0;
        for (size_t k = 0; k < v.len; ++k) gsum += g[base + k * v.inner];
        for (size_t k = 0; k < v.len; ++k)
          gx[base + k * v.inner] += g[base + k * v.inner] - std::exp(yv[base + k * v.inner]) * gsum;
      }
  });
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

/// C[n,m] = A[n,k] * B[k,m]
template <typename T>
Tensor<T> matmul(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
  require_rank(a, 2, "matmul lhs");
  require_rank(b, 2, "matmul rhs");
  if (a.shape[1] != b.shape[0])
    throw DimensionError("matmul: inner dims " + shape_to_string(a.shape) + " x " + shape_to_string(b.shape));
  const int n = a.shape[0], k = a.shape[1], m = b.shape[1];
  Tensor<T> y({n, m});
  for (int i = 0; i < n; ++i)
    for (int p = 0; p < k; ++p) {
      const T av = a.data[static_cast<size_t>(i) * k + p];
      const T* bs = b.data.data() + static_cast<size_t>(p) * m;
      T* ys = y.data.data() + static_cast<size_t>(i) * m;
      for (int j = 0; j < m; ++j) ys[j] += av * bs[j];
    }
  if (!tape || (!tape->tracked(a) && !tape->tracked(b))) return y;
  const int aid = tape->ensure(a), bid = tape->ensure(b);
  return tape->record(std::move(y), [aid, bid, n, k, m](Tape<T>& t, int self) {
    const auto& g = t.grad_buf(self);
    const auto& av = t.val(aid).data;
    const auto& bv = t.val(bid).data;
    if (t.wants_grad(aid)) {
      auto& ga = t.grad_buf(aid);
      for (int i = 0; i < n; ++i)
        for (int p = 0; p < k; ++p) {
          T acc = 0;
#pragma omp simd reduction(+ : acc)
          for (int j = 0; j < m; ++j) acc += g[static_cast<size_t>(i) * m + j] * bv[static_cast<size_t>(p) * m + j];
          ga[static_cast<size_t>(i) * k + p] += acc;
        }
    }
    if (t.wants_grad(bid)) {
      auto& gb = t.grad_buf(bid);
      for (int i = 0; i < n; ++i)
        for (int p = 0; p < k; ++p) {
          const T a_ip = av[static_cast<size_t>(i) * k + p];
          for (int j = 0; j < m; ++j) gb[static_cast<size_t>(p) * m + j] += a_ip * g[static_cast<size_t>(i) * m + j];
        }
    }
  });
}

/// C[n,m] = A[n,k] * B[m,k]^T
template <typename T>
Tensor<T> matmul_nt(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
  require_rank(a, 2, "matmul_nt lhs");
  require_rank(b, 2, "matmul_nt rhs");
  if (a.shape[1] != b.shape[1])
    throw DimensionError("matmul_nt: inner dims " + shape_to_string(a.shape) + " x " + shape_to_string(b.shape) + "^T");
  const int n = a.shape[0], k = a.shape[1], m = b.shape[0];
  Tensor<T> y({n, m});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j) {
      T acc = 0;
#pragma omp simd reduction(+ : acc)
      for (int p = 0; p < k; ++p) acc += a.data[static_cast<size_t>(i) * k + p] * b.data[static_cast<size_t>(j) * k + p];
      y.data[static_cast<size_t>(i) * m + j] = acc;
    }
  if (!tape || (!tape->tracked(a) && !tape->tracked(b))) return y;
  const int aid = tape->ensure(a), bid = tape->ensure(b);
  return tape->record(std::move(y), [aid, bid, n, k, m](Tape<T>& t, int self) {
    const auto& g = t.grad_buf(self);
    const auto& av = t.val(aid).data;
    const auto& bv = t.val(bid).data;
    if (t.wants_grad(aid)) {
      auto& ga = t.grad_buf(aid);
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j) {
          const T gij = g[static_cast<size_t>(i) * m + j];
          for (int p = 0; p < k; ++p) ga[static_cast<size_t>(i) * k + p] += gij * bv[static_cast<size_t>(j) * k + p];
        }
    }
    if (t.wants_grad(bid)) {
      auto& gb = t.grad_buf(bid);
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j) {
          const T gij = g[static_cast<size_t>(i) * m + j];
          for (int p = 0; p < k; ++p) gb[static_cast<size_t>(j) * k + p] += gij * av[static_cast<size_t>(i) * k + p];
        }
    }
  });
}

/// sum((a - b)^2) as a scalar.
template <typename T>
Tensor<T> frobenius_sq_diff(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
  if (!a.same_shape(b))
    throw DimensionError("frobenius_sq_diff: shape mismatch " + shape_to_string(a.shape) + " vs " +
                         shape_to_string(b.shape));
  T acc = 0;
  for (size_t i = 0; i < a.data.size(); ++i) {
    const T d = a.data[i] - b.data[i];
    acc += d * d;
  }
  Tensor<T> y = Tensor<T>::scalar(acc);
  if (!tape || (!tape->tracked(a) && !tape->tracked(b))) return y;
  const int aid = tape->ensure(a), bid = tape->ensure(b);
  return tape->record(std::move(y), [aid, bid](Tape<T>& t, int self) {
    const T g = t.grad_buf(self)[0];
    const auto& av = t.val(aid).data;
    const auto& bv = t.val(bid).data;
    if (t.wants_grad(aid)) {
      auto& ga = t.grad_buf(aid);
      for (size_t i = 0; i < ga.size(); ++i) ga[i] += T(2) * g * (av[i] - bv[i]);
    }
    if (t.wants_grad(bid)) {
      auto& gb = t.grad_buf(bid);
      for (size_t i = 0; i < gb.size(); ++i) gb[i] -= T(2) * g * (av[i] - bv[i]);
    }
  });
}

}  // namespace arfnet

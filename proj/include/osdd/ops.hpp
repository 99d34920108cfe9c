#pragma once

#include <Eigen/Core>
#include <cmath>
#include <memory>

#include "osdd/tape.hpp"

namespace osdd {

namespace detail {

template <typename T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapRM = Eigen::Map<MatRM<T>>;
template <typename T>
using CMapRM = Eigen::Map<const MatRM<T>>;

template <typename T>
void check_same_tape(Var<T> a, Var<T> b, const char* who) {
  if (a.tape != b.tape) fail_validation(who, ": vars from different tapes");
}

inline int64_t conv_out_dim(int64_t in, int64_t k, int64_t stride, int64_t pad) {
  return (in + 2 * pad - k) / stride + 1;
}

// col layout: (OH*OW) x (IC*KH*KW), row-major
template <typename T>
void im2col(const Tensor<T>& x, int64_t n, int64_t kh, int64_t kw, int64_t stride, int64_t pad,
            std::vector<T>& col) {
  const int64_t ic = x.shape.c, h = x.shape.h, w = x.shape.w;
  const int64_t oh = conv_out_dim(h, kh, stride, pad);
  const int64_t ow = conv_out_dim(w, kw, stride, pad);
  const int64_t k = ic * kh * kw;
  col.assign(static_cast<size_t>(oh * ow * k), T(0));
  const T* xp = x.data.data() + n * ic * h * w;
  for (int64_t oy = 0; oy < oh; ++oy) {
    for (int64_t ox = 0; ox < ow; ++ox) {
      T* row = col.data() + (oy * ow + ox) * k;
      for (int64_t c = 0; c < ic; ++c) {
        const T* xc = xp + c * h * w;
        for (int64_t ky = 0; ky < kh; ++ky) {
          const int64_t iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          for (int64_t kx = 0; kx < kw; ++kx) {
            const int64_t ix = ox * stride - pad + kx;
            if (ix < 0 || ix >= w) continue;
            row[(c * kh + ky) * kw + kx] = xc[iy * w + ix];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const std::vector<T>& col, int64_t n, int64_t ic, int64_t h, int64_t w,
                int64_t kh, int64_t kw, int64_t stride, int64_t pad, Tensor<T>& dx) {
  const int64_t oh = conv_out_dim(h, kh, stride, pad);
  const int64_t ow = conv_out_dim(w, kw, stride, pad);
  const int64_t k = ic * kh * kw;
  T* xp = dx.data.data() + n * ic * h * w;
  for (int64_t oy = 0; oy < oh; ++oy) {
    for (int64_t ox = 0; ox < ow; ++ox) {
      const T* row = col.data() + (oy * ow + ox) * k;
      for (int64_t c = 0; c < ic; ++c) {
        T* xc = xp + c * h * w;
        for (int64_t ky = 0; ky < kh; ++ky) {
          const int64_t iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          for (int64_t kx = 0; kx < kw; ++kx) {
            const int64_t ix = ox * stride - pad + kx;
            if (ix < 0 || ix >= w) continue;
            xc[iy * w + ix] += row[(c * kh + ky) * kw + kx];
          }
        }
      }
    }
  }
}

template <typename T>
void accumulate(Tape<T>& t, int id, const Tensor<T>& delta) {
  Tensor<T>& g = t.grad_buf(id);
  for (size_t i = 0; i < delta.data.size(); ++i) g.data[i] += delta.data[i];
}

}  // namespace detail

// ------------------------------------------------------------- basic algebra

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  detail::check_same_tape(a, b, "add");
  check_same_shape(a.val(), b.val(), "add");
  Tape<T>& tp = *a.tape;
  Tensor<T> out(a.shape());
  const auto& av = a.val().data;
  const auto& bv = b.val().data;
  for (size_t i = 0; i < av.size(); ++i) out.data[i] = av[i] + bv[i];
  const bool ra = a.requires_grad(), rb = b.requires_grad();
  Var<T> y = tp.make_node(std::move(out), ra || rb);
  if (ra || rb) {
    tp.set_backprop(y.id, [aid = a.id, bid = b.id, yid = y.id, ra, rb](Tape<T>& t) {
      const Tensor<T>& g = t.grad(yid);
      if (ra) detail::accumulate(t, aid, g);
      if (rb) detail::accumulate(t, bid, g);
    });
  }
  return y;
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  detail::check_same_tape(a, b, "sub");
  check_same_shape(a.val(), b.val(), "sub");
  Tape<T>& tp = *a.tape;
  Tensor<T> out(a.shape());
  const auto& av = a.val().data;
  const auto& bv = b.val().data;
  for (size_t i = 0; i < av.size(); ++i) out.data[i] = av[i] - bv[i];
  const bool ra = a.requires_grad(), rb = b.requires_grad();
  Var<T> y = tp.make_node(std::move(out), ra || rb);
  if (ra || rb) {
    tp.set_backprop(y.id, [aid = a.id, bid = b.id, yid = y.id, ra, rb](Tape<T>& t) {
      const Tensor<T>& g = t.grad(yid);
      if (ra) detail::accumulate(t, aid, g);
      if (rb) {
        Tensor<T>& gb = t.grad_buf(bid);
        for (size_t i = 0; i < g.data.size(); ++i) gb.data[i] -= g.data[i];
      }
    });
  }
  return y;
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  detail::check_same_tape(a, b, "mul");
  check_same_shape(a.val(), b.val(), "mul");
  Tape<T>& tp = *a.tape;
  Tensor<T> out(a.shape());
  const auto& av = a.val().data;
  const auto& bv = b.val().data;
  for (size_t i = 0; i < av.size(); ++i) out.data[i] = av[i] * bv[i];
  const bool ra = a.requires_grad(), rb = b.requires_grad();
  Var<T> y = tp.make_node(std::move(out), ra || rb);
  if (ra || rb) {
    tp.set_backprop(y.id, [aid = a.id, bid = b.id, yid = y.id, ra, rb](Tape<T>& t) {
      const Tensor<T>& g = t.grad(yid);
      if (ra) {
        const auto& bvv = t.value(bid).data;
        Tensor<T>& ga = t.grad_buf(aid);
        for (size_t i = 0; i < g.data.size(); ++i) ga.data[i] += g.data[i] * bvv[i];
      }
      if (rb) {
        const auto& avv = t.value(aid).data;
        Tensor<T>& gb = t.grad_buf(bid);
        for (size_t i = 0; i < g.data.size(); ++i) gb.data[i] += g.data[i] * avv[i];
      }
    });
  }
  return y;
}

template <typename T>
Var<T> scale(Var<T> a, T k) {
  Tape<T>& tp = *a.tape;
  Tensor<T> out(a.shape());
  const auto& av = a.val().data;
  for (size_t i = 0; i < av.size(); ++i) out.data[i] = av[i] * k;
  const bool ra = a.requires_grad();
  Var<T> y = tp.make_node(std::move(out), ra);
  if (ra) {
    tp.set_backprop(y.id, [aid = a.id, yid = y.id, k](Tape<T>& t) {
      const Tensor<T>& g = t.grad(yid);
      Tensor<T>& ga = t.grad_buf(aid);
      for (size_t i = 0; i < g.data.size(); ++i) ga.data[i] += g.data[i] * k;
    });
  }
  return y;
}

template <typename T>
Var<T> add_const(Var<T> a, T k) {
  Tape<T>& tp = *a.tape;
  Tensor<T> out(a.shape());
  const auto& av = a.val().data;
  for (size_t i = 0; i < av.size(); ++i) out.data[i] = av[i] + k;
  const bool ra = a.requires_grad();
  Var<T> y = tp.make_node(std::move(out), ra);
  if (ra) {
    tp.set_backprop(y.id, [aid = a.id, yid = y.id](Tape<T>& t) {
      detail::accumulate(t, aid, t.grad(yid));
    });
  }
  return y;
}

template <typename T>
Var<T> neg(Var<T> a) {
  return scale(a, T(-1));
}

// ---------------------------------------------------------------- activations

template <typename T>
Var<T> relu(Var<T> a) {
  Tape<T>& tp = *a.tape;
  Tensor<T> out(a.shape());
  const auto& av = a.val().data;
  for (size_t i = 0; i < av.size(); ++i) out.data[i] = av[i] > T(0) ? av[i] : T(0);
  const bool ra = a.requires_grad();
  Var<T> y = tp.make_node(std::move(out), ra);
  if (ra) {
    tp.set_backprop(y.id, [aid = a.id, yid = y.id](Tape<T>& t) {
      const Tensor<T>& g = t.grad(yid);
      const auto& x = t.value(aid).data;
      Tensor<T>& ga = t.grad_buf(aid);
      for (size_t i = 0; i < g.data.size(); ++i)
        if (x[i] > T(0)) ga.data[i] += g.data[i];
    });
  }
  return y;
}

template <typename T>
Var<T> leaky_relu(Var<T> a, T slope) {
  Tape<T>& tp = *a.tape;
  Tensor<T> out(a.shape());
  const auto& av = a.val().data;
  for (size_t i = 0; i < av.size(); ++i) out.data[i] = av[i] > T(0) ? av[i] : slope * av[i];
  const bool ra = a.requires_grad();
  Var<T> y = tp.make_node(std::move(out), ra);
  if (ra) {
    tp.set_backprop(y.id, [aid = a.id, yid = y.id, slope](Tape<T>& t) {
      const Tensor<T>& g = t.grad(yid);
      const auto& x = t.value(aid).data;
      Tensor<T>& ga = t.grad_buf(aid);
      for (size_t i = 0; i < g.data.size(); ++i)
        ga.data[i] += x[i] > T(0) ? g.data[i] : slope * g.data[i];
    });
  }
  return y;
}

template <typename T>
Var<T> silu(Var<T> a) {
  Tape<T>& tp = *a.tape;
  Tensor<T> out(a.shape());
  const auto& av = a.val().data;
  for (size_t i = 0; i < av.size(); ++i) {
    const T s = T(1) / (T(1) + std::exp(-av[i]));
    out.data[i] = av[i] * s;
  }
  const bool ra = a.requires_grad();
  Var<T> y = tp.make_node(std::move(out), ra);
  if (ra) {
    tp.set_backprop(y.id, [aid = a.id, yid = y.id](Tape<T>& t) {
      const Tensor<T>& g = t.grad(yid);
      const auto& x = t.value(aid).data;
      Tensor<T>& ga = t.grad_buf(aid);
      for (size_t i = 0; i < g.data.size(); ++i) {
        const T s = T(1) / (T(1) + std::exp(-x[i]));
        ga.data[i] += g.data[i] * s * (T(1) + x[i] * (T(1) - s));
      }
    });
  }
  return y;
}

template <typename T>
Var<T> sigmoid_op(Var<T> a) {
  Tape<T>& tp = *a.tape;
  Tensor<T> out(a.shape());
  const auto& av = a.val().data;
  for (size_t i = 0; i < av.size(); ++i) out.data[i] = T(1) / (T(1) + std::exp(-av[i]));
  const bool ra = a.requires_grad();
  Var<T> y = tp.make_node(std::move(out), ra);
  if (ra) {
    tp.set_backprop(y.id, [aid = a.id, yid = y.id](Tape<T>& t) {
      const Tensor<T>& g = t.grad(yid);
      const auto& yv = t.value(yid).data;
      Tensor<T>& ga = t.grad_buf(aid);
      for (size_t i = 0; i < g.data.size(); ++i)
        ga.data[i] += g.data[i] * yv[i] * (T(1) - yv[i]);
    });
  }
  return y;
}

template <typename T>
Var<T> log_op(Var<T> a) {
  Tape<T>& tp = *a.tape;
  Tensor<T> out(a.shape());
  const auto& av = a.val().data;
  for (size_t i = 0; i < av.size(); ++i) out.data[i] = std::log(av[i]);
  const bool ra = a.requires_grad();
  Var<T> y = tp.make_node(std::move(out), ra);
  if (ra) {
    tp.set_backprop(y.id, [aid = a.id, yid = y.id](Tape<T>& t) {
      const Tensor<T>& g = t.grad(yid);
      const auto& x = t.value(aid).data;
      Tensor<T>& ga = t.grad_buf(aid);
      for (size_t i = 0; i < g.data.size(); ++i) ga.data[i] += g.data[i] / x[i];
    });
  }
  return y;
}

template <typename T>
Var<T> sqrt_op(Var<T> a) {
  Tape<T>& tp = *a.tape;
  Tensor<T> out(a.shape());
  const auto& av = a.val().data;
  for (size_t i = 0; i < av.size(); ++i) out.data[i] = std::sqrt(av[i]);
  const bool ra = a.requires_grad();
  Var<T> y = tp.make_node(std::move(out), ra);
  if (ra) {
    tp.set_backprop(y.id, [aid = a.id, yid = y.id](Tape<T>& t) {
      const Tensor<T>& g = t.grad(yid);
      const auto& yv = t.value(yid).data;
      Tensor<T>& ga = t.grad_buf(aid);
      for (size_t i = 0; i < g.data.size(); ++i)
        ga.data[i] += g.data[i] * T(0.5) / yv[i];
    });
  }
  return y;
}

// Gradient passes only through the strict interior of [lo, hi].
template <typename T>
Var<T> clamp_op(Var<T> a, T lo, T hi) {
  Tape<T>& tp = *a.tape;
  Tensor<T> out(a.shape());
  const auto& av = a.val().data;
  for (size_t i = 0; i < av.size(); ++i) out.data[i] = std::min(std::max(av[i], lo), hi);
  const bool ra = a.requires_grad();
  Var<T> y = tp.make_node(std::move(out), ra);
  if (ra) {
    tp.set_backprop(y.id, [aid = a.id, yid = y.id, lo, hi](Tape<T>& t) {
      const Tensor<T>& g = t.grad(yid);
      const auto& x = t.value(aid).data;
      Tensor<T>& ga = t.grad_buf(aid);
      for (size_t i = 0; i < g.data.size(); ++i)
        if (x[i] > lo && x[i] < hi) ga.data[i] += g.data[i];
    });
  }
  return y;
}

// ------------------------------------------------------------ shape plumbing

template <typename T>
Var<T> reshape(Var<T> a, Shape s) {
  if (s.numel() != a.val().numel())
    fail_validation("reshape: numel mismatch ", a.shape().str(), " -> ", s.str());
  Tape<T>& tp = *a.tape;
  Tensor<T> out = a.val();
  out.shape = s;
  const bool ra = a.requires_grad();
  Var<T> y = tp.make_node(std::move(out), ra);
  if (ra) {
    tp.set_backprop(y.id, [aid = a.id, yid = y.id](Tape<T>& t) {
      const Tensor<T>& g = t.grad(yid);
      Tensor<T>& ga = t.grad_buf(aid);
      for (size_t i = 0; i < g.data.size(); ++i) ga.data[i] += g.data[i];
    });
  }
  return y;
}

template <typename T>
Var<T> concat_ch(Var<T> a, Var<T> b) {
  detail::check_same_tape(a, b, "concat_ch");
  const Shape sa = a.shape();
  const Shape sb = b.shape();
  if (sa.n != sb.n || sa.h != sb.h || sa.w != sb.w)
    fail_validation("concat_ch: incompatible shapes ", sa.str(), " vs ", sb.str());
  Tape<T>& tp = *a.tape;
  Tensor<T> out(Shape{sa.n, sa.c + sb.c, sa.h, sa.w});
  const int64_t hw = sa.h * sa.w;
  for (int64_t n = 0; n < sa.n; ++n) {
    std::copy_n(a.val().data.data() + n * sa.c * hw, sa.c * hw,
                out.data.data() + n * (sa.c + sb.c) * hw);
    std::copy_n(b.val().data.data() + n * sb.c * hw, sb.c * hw,
                out.data.data() + (n * (sa.c + sb.c) + sa.c) * hw);
  }
  const bool ra = a.requires_grad(), rb = b.requires_grad();
  Var<T> y = tp.make_node(std::move(out), ra || rb);
  if (ra || rb) {
    tp.set_backprop(y.id, [aid = a.id, bid = b.id, yid = y.id, sa, sb, ra, rb](Tape<T>& t) {
      const Tensor<T>& g = t.grad(yid);
      const int64_t hw = sa.h * sa.w;
      if (ra) {
        Tensor<T>& ga = t.grad_buf(aid);
        for (int64_t n = 0; n < sa.n; ++n)
          for (int64_t i = 0; i < sa.c * hw; ++i)
            ga.data[n * sa.c * hw + i] += g.data[n * (sa.c + sb.c) * hw + i];
      }
      if (rb) {
        Tensor<T>& gb = t.grad_buf(bid);
        for (int64_t n = 0; n < sa.n; ++n)
          for (int64_t i = 0; i < sb.c * hw; ++i)
            gb.data[n * sb.c * hw + i] += g.data[(n * (sa.c + sb.c) + sa.c) * hw + i];
      }
    });
  }
  return y;
}

template <typename T>
Var<T> slice_ch(Var<T> a, int64_t c0, int64_t cn) {
  const Shape sa = a.shape();
  if (c0 < 0 || c0 + cn > sa.c) fail_validation("slice_ch: range out of bounds");
  Tape<T>& tp = *a.tape;
  Tensor<T> out(Shape{sa.n, cn, sa.h, sa.w});
  const int64_t hw = sa.h * sa.w;
  for (int64_t n = 0; n < sa.n; ++n)
    std::copy_n(a.val().data.data() + (n * sa.c + c0) * hw, cn * hw,
                out.data.data() + n * cn * hw);
  const bool ra = a.requires_grad();
  Var<T> y = tp.make_node(std::move(out), ra);
  if (ra) {
    tp.set_backprop(y.id, [aid = a.id, yid = y.id, sa, c0, cn](Tape<T>& t) {
      const Tensor<T>& g = t.grad(yid);
      Tensor<T>& ga = t.grad_buf(aid);
      const int64_t hw = sa.h * sa.w;
      for (int64_t n = 0; n < sa.n; ++n)
        for (int64_t i = 0; i < cn * hw; ++i)
          ga.data[(n * sa.c + c0) * hw + i] += g.data[n * cn * hw + i];
    });
  }
  return y;
}

template <typename T>
Var<T> upsample_nearest2x(Var<T> a) {
  const Shape s = a.shape();
  Tape<T>& tp = *a.tape;
  Tensor<T> out(Shape{s.n, s.c, s.h * 2, s.w * 2});
  for (int64_t n = 0; n < s.n; ++n)
    for (int64_t c = 0; c < s.c; ++c)
      for (int64_t y0 = 0; y0 < s.h * 2; ++y0)
        for (int64_t x0 = 0; x0 < s.w * 2; ++x0)
          out.at(n, c, y0, x0) = a.val().at(n, c, y0 / 2, x0 / 2);
  const bool ra = a.requires_grad();
  Var<T> y = tp.make_node(std::move(out), ra);
  if (ra) {
    tp.set_backprop(y.id, [aid = a.id, yid = y.id, s](Tape<T>& t) {
      const Tensor<T>& g = t.grad(yid);
      Tensor<T>& ga = t.grad_buf(aid);
      for (int64_t n = 0; n < s.n; ++n)
        for (int64_t c = 0; c < s.c; ++c)
          for (int64_t y0 = 0; y0 < s.h * 2; ++y0)
            for (int64_t x0 = 0; x0 < s.w * 2; ++x0)
              ga.at(n, c, y0 / 2, x0 / 2) += g.at(n, c, y0, x0);
    });
  }
  return y;
}

// Per-channel broadcast: s has shape (S, C, 1, 1) with S == 1 or S == N.
template <typename T>
Var<T> mul_channel(Var<T> x, Var<T> s) {
  detail::check_same_tape(x, s, "mul_channel");
  const Shape sx = x.shape();
  const Shape ss = s.shape();
  if (ss.c != sx.c || ss.h != 1 || ss.w != 1 || (ss.n != 1 && ss.n != sx.n))
    fail_validation("mul_channel: bad scale shape ", ss.str(), " for ", sx.str());
  Tape<T>& tp = *x.tape;
  Tensor<T> out(sx);
  const int64_t hw = sx.h * sx.w;
  for (int64_t n = 0; n < sx.n; ++n) {
    const int64_t sn = ss.n == 1 ? 0 : n;
    for (int64_t c = 0; c < sx.c; ++c) {
      const T k = s.val().data[sn * ss.c + c];
      const T* xp = x.val().data.data() + (n * sx.c + c) * hw;
      T* op = out.data.data() + (n * sx.c + c) * hw;
      for (int64_t i = 0; i < hw; ++i) op[i] = xp[i] * k;
    }
  }
  const bool rx = x.requires_grad(), rs = s.requires_grad();
  Var<T> y = tp.make_node(std::move(out), rx || rs);
  if (rx || rs) {
    tp.set_backprop(y.id, [xid = x.id, sid = s.id, yid = y.id, sx, ss, rx, rs](Tape<T>& t) {
      const Tensor<T>& g = t.grad(yid);
      const int64_t hw = sx.h * sx.w;
      if (rx) {
        Tensor<T>& gx = t.grad_buf(xid);
        const auto& sv = t.value(sid).data;
        for (int64_t n = 0; n < sx.n; ++n) {
          const int64_t sn = ss.n == 1 ? 0 : n;
          for (int64_t c = 0; c < sx.c; ++c) {
            const T k = sv[sn * ss.c + c];
            for (int64_t i = 0; i < hw; ++i)
              gx.data[(n * sx.c + c) * hw + i] += g.data[(n * sx.c + c) * hw + i] * k;
          }
        }
      }
      if (rs) {
        Tensor<T>& gs = t.grad_buf(sid);
        const auto& xv = t.value(xid).data;
        for (int64_t n = 0; n < sx.n; ++n) {
          const int64_t sn = ss.n == 1 ? 0 : n;
          for (int64_t c = 0; c < sx.c; ++c) {
            T acc = 0;
            for (int64_t i = 0; i < hw; ++i)
              acc += g.data[(n * sx.c + c) * hw + i] * xv[(n * sx.c + c) * hw + i];
            gs.data[sn * ss.c + c] += acc;
          }
        }
      }
    });
  }
  return y;
}

template <typename T>
Var<T> add_channel(Var<T> x, Var<T> s) {
  detail::check_same_tape(x, s, "add_channel");
  const Shape sx = x.shape();
  const Shape ss = s.shape();
  if (ss.c != sx.c || ss.h != 1 || ss.w != 1 || (ss.n != 1 && ss.n != sx.n))
    fail_validation("add_channel: bad shift shape ", ss.str(), " for ", sx.str());
  Tape<T>& tp = *x.tape;
  Tensor<T> out(sx);
  const int64_t hw = sx.h * sx.w;
  for (int64_t n = 0; n < sx.n; ++n) {
    const int64_t sn = ss.n == 1 ? 0 : n;
    for (int64_t c = 0; c < sx.c; ++c) {
      const T k = s.val().data[sn * ss.c + c];
      const T* xp = x.val().data.data() + (n * sx.c + c) * hw;
      T* op = out.data.data() + (n * sx.c + c) * hw;
      for (int64_t i = 0; i < hw; ++i) op[i] = xp[i] + k;
    }
  }
  const bool rx = x.requires_grad(), rs = s.requires_grad();
  Var<T> y = tp.make_node(std::move(out), rx || rs);
  if (rx || rs) {
    tp.set_backprop(y.id, [xid = x.id, sid = s.id, yid = y.id, sx, ss, rx, rs](Tape<T>& t) {
      const Tensor<T>& g = t.grad(yid);
      const int64_t hw = sx.h * sx.w;
      if (rx) detail::accumulate(t, xid, g);
      if (rs) {
        Tensor<T>& gs = t.grad_buf(sid);
        for (int64_t n = 0; n < sx.n; ++n) {
          const int64_t sn = ss.n == 1 ? 0 : n;
          for (int64_t c = 0; c < sx.c; ++c) {
            T acc = 0;
            for (int64_t i = 0; i < hw; ++i) acc += g.data[(n * sx.c + c) * hw + i];
            gs.data[sn * ss.c + c] += acc;
          }
        }
      }
    });
  }
  return y;
}

// ------------------------------------------------------------ linear algebra

// x: (N, F, 1, 1), w: (O, F, 1, 1), b: (O, 1, 1, 1) -> (N, O, 1, 1)
template <typename T>
Var<T> linear(Var<T> x, Var<T> w, Var<T> b) {
  detail::check_same_tape(x, w, "linear");
  detail::check_same_tape(x, b, "linear");
  const Shape sx = x.shape();
  const Shape sw = w.shape();
  if (sx.h != 1 || sx.w != 1) fail_validation("linear: input must be (N,F,1,1), got ", sx.str());
  if (sw.c != sx.c) fail_validation("linear: weight in_features ", sw.c, " != input ", sx.c);
  if (b.shape().n != sw.n) fail_validation("linear: bias size mismatch");
  const int64_t n = sx.n, f = sx.c, o = sw.n;
  Tape<T>& tp = *x.tape;
  Tensor<T> out(Shape{n, o, 1, 1});
  {
    detail::CMapRM<T> xm(x.val().data.data(), n, f);
    detail::CMapRM<T> wm(w.val().data.data(), o, f);
    detail::MapRM<T> ym(out.data.data(), n, o);
    ym.noalias() = xm * wm.transpose();
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = 0; j < o; ++j) out.data[i * o + j] += b.val().data[j];
  }
  const bool rx = x.requires_grad(), rw = w.requires_grad(), rb = b.requires_grad();
  Var<T> y = tp.make_node(std::move(out), rx || rw || rb);
  if (rx || rw || rb) {
    tp.set_backprop(y.id, [xid = x.id, wid = w.id, bid = b.id, yid = y.id, n, f, o, rx, rw,
                           rb](Tape<T>& t) {
      detail::CMapRM<T> gm(t.grad(yid).data.data(), n, o);
      if (rx) {
        detail::CMapRM<T> wm(t.value(wid).data.data(), o, f);
        detail::MapRM<T> gx(t.grad_buf(xid).data.data(), n, f);
        gx.noalias() += gm * wm;
      }
      if (rw) {
        detail::CMapRM<T> xm(t.value(xid).data.data(), n, f);
        detail::MapRM<T> gw(t.grad_buf(wid).data.data(), o, f);
        gw.noalias() += gm.transpose() * xm;
      }
      if (rb) {
        Tensor<T>& gb = t.grad_buf(bid);
        for (int64_t i = 0; i < n; ++i)
          for (int64_t j = 0; j < o; ++j) gb.data[j] += t.grad(yid).data[i * o + j];
      }
    });
  }
  return y;
}

// x: (N, IC, H, W), w: (OC, IC, KH, KW), b: (OC, 1, 1, 1)
template <typename T>
Var<T> conv2d(Var<T> x, Var<T> w, Var<T> b, int64_t stride, int64_t pad) {
  detail::check_same_tape(x, w, "conv2d");
  detail::check_same_tape(x, b, "conv2d");
  const Shape sx = x.shape();
  const Shape sw = w.shape();
  if (sw.c != sx.c)
    fail_validation("conv2d: in_channels ", sw.c, " != input channels ", sx.c);
  if (b.shape().n != sw.n) fail_validation("conv2d: bias size mismatch");
  const int64_t kh = sw.h, kw = sw.w, oc = sw.n;
  const int64_t oh = detail::conv_out_dim(sx.h, kh, stride, pad);
  const int64_t ow = detail::conv_out_dim(sx.w, kw, stride, pad);
  if (oh <= 0 || ow <= 0) fail_validation("conv2d: output collapses for input ", sx.str());
  const int64_t k = sx.c * kh * kw, p = oh * ow;
  Tape<T>& tp = *x.tape;
  Tensor<T> out(Shape{sx.n, oc, oh, ow});
  {
    std::vector<T> col;
    detail::CMapRM<T> wm(w.val().data.data(), oc, k);
    for (int64_t n = 0; n < sx.n; ++n) {
      detail::im2col(x.val(), n, kh, kw, stride, pad, col);
      detail::CMapRM<T> cm(col.data(), p, k);
      detail::MapRM<T> ym(out.data.data() + n * oc * p, oc, p);
      ym.noalias() = wm * cm.transpose();
      const T* bp = b.val().data.data();
      for (int64_t c = 0; c < oc; ++c) {
        T* yp = out.data.data() + (n * oc + c) * p;
        for (int64_t i = 0; i < p; ++i) yp[i] += bp[c];
      }
    }
  }
  const bool rx = x.requires_grad(), rw = w.requires_grad(), rb = b.requires_grad();
  Var<T> y = tp.make_node(std::move(out), rx || rw || rb);
  if (rx || rw || rb) {
    tp.set_backprop(y.id, [xid = x.id, wid = w.id, bid = b.id, yid = y.id, sx, kh, kw, oc, k, p,
                           oh, ow, stride, pad, rx, rw, rb](Tape<T>& t) {
      (void)oh;
      (void)ow;
      std::vector<T> col, dcol;
      const Tensor<T>& gy = t.grad(yid);
      detail::CMapRM<T> wm(t.value(wid).data.data(), oc, k);
      for (int64_t n = 0; n < sx.n; ++n) {
        detail::CMapRM<T> gm(gy.data.data() + n * oc * p, oc, p);
        if (rw) {
          // im2col recomputed here instead of being cached in the node
          detail::im2col(t.value(xid), n, kh, kw, stride, pad, col);
          detail::CMapRM<T> cm(col.data(), p, k);
          detail::MapRM<T> gw(t.grad_buf(wid).data.data(), oc, k);
          gw.noalias() += gm * cm;
        }
        if (rb) {
          Tensor<T>& gb = t.grad_buf(bid);
          for (int64_t c = 0; c < oc; ++c) {
            T acc = 0;
            const T* gp = gy.data.data() + (n * oc + c) * p;
            for (int64_t i = 0; i < p; ++i) acc += gp[i];
            gb.data[c] += acc;
          }
        }
        if (rx) {
          dcol.assign(static_cast<size_t>(p * k), T(0));
          detail::MapRM<T> dcm(dcol.data(), p, k);
          dcm.noalias() = gm.transpose() * wm;
          detail::col2im_add(dcol, n, sx.c, sx.h, sx.w, kh, kw, stride, pad, t.grad_buf(xid));
        }
      }
    });
  }
  return y;
}

// ------------------------------------------------------------------ groupnorm

// gamma, beta: (C, 1, 1, 1). groups must divide C.
template <typename T>
Var<T> group_norm(Var<T> x, Var<T> gamma, Var<T> beta, int64_t groups, T eps = T(1e-5)) {
  detail::check_same_tape(x, gamma, "group_norm");
  const Shape s = x.shape();
  if (groups <= 0 || s.c % groups != 0)
    fail_validation("group_norm: groups ", groups, " must divide channels ", s.c);
  if (gamma.shape().n != s.c || beta.shape().n != s.c)
    fail_validation("group_norm: affine parameter size mismatch");
  const int64_t cg = s.c / groups;
  const int64_t hw = s.h * s.w;
  const int64_t m = cg * hw;
  Tape<T>& tp = *x.tape;
  Tensor<T> out(s);
  auto xhat = std::make_shared<Tensor<T>>(s);
  auto inv = std::make_shared<std::vector<T>>(static_cast<size_t>(s.n * groups));
  for (int64_t n = 0; n < s.n; ++n) {
    for (int64_t g = 0; g < groups; ++g) {
      const T* xp = x.val().data.data() + (n * s.c + g * cg) * hw;
      double mean = 0;
      for (int64_t i = 0; i < m; ++i) mean += xp[i];
      mean /= double(m);
      double var = 0;
      for (int64_t i = 0; i < m; ++i) {
        const double d = double(xp[i]) - mean;
        var += d * d;
      }
      var /= double(m);
      const T iv = T(1.0 / std::sqrt(var + double(eps)));
      (*inv)[static_cast<size_t>(n * groups + g)] = iv;
      T* hp = xhat->data.data() + (n * s.c + g * cg) * hw;
      T* op = out.data.data() + (n * s.c + g * cg) * hw;
      for (int64_t c = 0; c < cg; ++c) {
        const T ga = gamma.val().data[g * cg + c];
        const T be = beta.val().data[g * cg + c];
        for (int64_t i = 0; i < hw; ++i) {
          const T h = (xp[c * hw + i] - T(mean)) * iv;
          hp[c * hw + i] = h;
          op[c * hw + i] = ga * h + be;
        }
      }
    }
  }
  const bool rx = x.requires_grad(), rg = gamma.requires_grad(), rb = beta.requires_grad();
  Var<T> y = tp.make_node(std::move(out), rx || rg || rb);
  if (rx || rg || rb) {
    tp.set_backprop(y.id, [xid = x.id, gid = gamma.id, bid = beta.id, yid = y.id, s, groups, cg,
                           hw, m, xhat, inv, rx, rg, rb](Tape<T>& t) {
      const Tensor<T>& g = t.grad(yid);
      const auto& gam = t.value(gid).data;
      if (rg) {
        Tensor<T>& gg = t.grad_buf(gid);
        for (int64_t n = 0; n < s.n; ++n)
          for (int64_t c = 0; c < s.c; ++c) {
            T acc = 0;
            const T* gp = g.data.data() + (n * s.c + c) * hw;
            const T* hp = xhat->data.data() + (n * s.c + c) * hw;
            for (int64_t i = 0; i < hw; ++i) acc += gp[i] * hp[i];
            gg.data[c] += acc;
          }
      }
      if (rb) {
        Tensor<T>& gb = t.grad_buf(bid);
        for (int64_t n = 0; n < s.n; ++n)
          for (int64_t c = 0; c < s.c; ++c) {
            T acc = 0;
            const T* gp = g.data.data() + (n * s.c + c) * hw;
            for (int64_t i = 0; i < hw; ++i) acc += gp[i];
            gb.data[c] += acc;
          }
      }
      if (rx) {
        Tensor<T>& gx = t.grad_buf(xid);
        for (int64_t n = 0; n < s.n; ++n) {
          for (int64_t gr = 0; gr < groups; ++gr) {
            const T iv = (*inv)[static_cast<size_t>(n * groups + gr)];
            const T* gp = g.data.data() + (n * s.c + gr * cg) * hw;
            const T* hp = xhat->data.data() + (n * s.c + gr * cg) * hw;
            double sum_dh = 0, sum_dh_h = 0;
            for (int64_t c = 0; c < cg; ++c) {
              const T ga = gam[gr * cg + c];
              for (int64_t i = 0; i < hw; ++i) {
                const T dh = gp[c * hw + i] * ga;
                sum_dh += dh;
                sum_dh_h += double(dh) * double(hp[c * hw + i]);
              }
            }
            const T mean_dh = T(sum_dh / double(m));
            const T mean_dh_h = T(sum_dh_h / double(m));
            T* gxp = gx.data.data() + (n * s.c + gr * cg) * hw;
            for (int64_t c = 0; c < cg; ++c) {
              const T ga = gam[gr * cg + c];
              for (int64_t i = 0; i < hw; ++i) {
                const T dh = gp[c * hw + i] * ga;
                gxp[c * hw + i] += iv * (dh - mean_dh - hp[c * hw + i] * mean_dh_h);
              }
            }
          }
        }
      }
    });
  }
  return y;
}

// ------------------------------------------------------------------ reductions

template <typename T>
Var<T> mean_all(Var<T> a) {
  Tape<T>& tp = *a.tape;
  const auto& av = a.val().data;
  double s = 0;
  for (T v : av) s += double(v);
  Tensor<T> out = Tensor<T>::scalar(T(s / double(av.size())));
  const bool ra = a.requires_grad();
  Var<T> y = tp.make_node(std::move(out), ra);
  if (ra) {
    const T inv_n = T(1) / T(av.size());
    tp.set_backprop(y.id, [aid = a.id, yid = y.id, inv_n](Tape<T>& t) {
      const T g = t.grad(yid).data[0] * inv_n;
      Tensor<T>& ga = t.grad_buf(aid);
      for (auto& v : ga.data) v += g;
    });
  }
  return y;
}

template <typename T>
Var<T> sum_all(Var<T> a) {
  Tape<T>& tp = *a.tape;
  const auto& av = a.val().data;
  double s = 0;
  for (T v : av) s += double(v);
  Tensor<T> out = Tensor<T>::scalar(T(s));
  const bool ra = a.requires_grad();
  Var<T> y = tp.make_node(std::move(out), ra);
  if (ra) {
    tp.set_backprop(y.id, [aid = a.id, yid = y.id](Tape<T>& t) {
      const T g = t.grad(yid).data[0];
      Tensor<T>& ga = t.grad_buf(aid);
      for (auto& v : ga.data) v += g;
    });
  }
  return y;
}

// mean over spatial dims: (N,C,H,W) -> (N,C,1,1)
template <typename T>
Var<T> mean_hw(Var<T> a) {
  const Shape s = a.shape();
  Tape<T>& tp = *a.tape;
  Tensor<T> out(Shape{s.n, s.c, 1, 1});
  const int64_t hw = s.h * s.w;
  for (int64_t n = 0; n < s.n; ++n)
    for (int64_t c = 0; c < s.c; ++c) {
      double acc = 0;
      const T* p = a.val().data.data() + (n * s.c + c) * hw;
      for (int64_t i = 0; i < hw; ++i) acc += p[i];
      out.data[n * s.c + c] = T(acc / double(hw));
    }
  const bool ra = a.requires_grad();
  Var<T> y = tp.make_node(std::move(out), ra);
  if (ra) {
    tp.set_backprop(y.id, [aid = a.id, yid = y.id, s](Tape<T>& t) {
      const Tensor<T>& g = t.grad(yid);
      Tensor<T>& ga = t.grad_buf(aid);
      const int64_t hw = s.h * s.w;
      const T inv = T(1) / T(hw);
      for (int64_t n = 0; n < s.n; ++n)
        for (int64_t c = 0; c < s.c; ++c) {
          const T gv = g.data[n * s.c + c] * inv;
          T* p = ga.data.data() + (n * s.c + c) * hw;
          for (int64_t i = 0; i < hw; ++i) p[i] += gv;
        }
    });
  }
  return y;
}

template <typename T>
Var<T> l1_loss(Var<T> a, Var<T> b) {
  detail::check_same_tape(a, b, "l1_loss");
  check_same_shape(a.val(), b.val(), "l1_loss");
  Tape<T>& tp = *a.tape;
  const auto& av = a.val().data;
  const auto& bv = b.val().data;
  double s = 0;
  for (size_t i = 0; i < av.size(); ++i) s += std::abs(double(av[i]) - double(bv[i]));
  Tensor<T> out = Tensor<T>::scalar(T(s / double(av.size())));
  const bool ra = a.requires_grad(), rb = b.requires_grad();
  Var<T> y = tp.make_node(std::move(out), ra || rb);
  if (ra || rb) {
    tp.set_backprop(y.id, [aid = a.id, bid = b.id, yid = y.id, ra, rb](Tape<T>& t) {
      const T g = t.grad(yid).data[0];
      const auto& avv = t.value(aid).data;
      const auto& bvv = t.value(bid).data;
      const T inv_n = T(1) / T(avv.size());
      for (size_t i = 0; i < avv.size(); ++i) {
        const T d = avv[i] - bvv[i];
        const T sg = d > T(0) ? T(1) : (d < T(0) ? T(-1) : T(0));
        if (ra) t.grad_buf(aid).data[i] += g * sg * inv_n;
        if (rb) t.grad_buf(bid).data[i] -= g * sg * inv_n;
      }
    });
  }
  return y;
}

template <typename T>
Var<T> mse_loss(Var<T> a, Var<T> b) {
  detail::check_same_tape(a, b, "mse_loss");
  check_same_shape(a.val(), b.val(), "mse_loss");
  Tape<T>& tp = *a.tape;
  const auto& av = a.val().data;
  const auto& bv = b.val().data;
  double s = 0;
  for (size_t i = 0; i < av.size(); ++i) {
    const double d = double(av[i]) - double(bv[i]);
    s += d * d;
  }
  Tensor<T> out = Tensor<T>::scalar(T(s / double(av.size())));
  const bool ra = a.requires_grad(), rb = b.requires_grad();
  Var<T> y = tp.make_node(std::move(out), ra || rb);
  if (ra || rb) {
    tp.set_backprop(y.id, [aid = a.id, bid = b.id, yid = y.id, ra, rb](Tape<T>& t) {
      const T g = t.grad(yid).data[0];
      const auto& avv = t.value(aid).data;
      const auto& bvv = t.value(bid).data;
      const T k = T(2) / T(avv.size());
      for (size_t i = 0; i < avv.size(); ++i) {
        const T d = (avv[i] - bvv[i]) * k * g;
        if (ra) t.grad_buf(aid).data[i] += d;
        if (rb) t.grad_buf(bid).data[i] -= d;
      }
    });
  }
  return y;
}

// Re-enter a value as a constant leaf (cuts the gradient path).
template <typename T>
Var<T> detach(Var<T> a) {
  return a.tape->leaf(a.val(), false);
}

}  // namespace osdd

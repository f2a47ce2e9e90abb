#include "dhicm/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace dhicm {

namespace {

std::vector<real>& grad_of(TensorData* n) {
  if (n->grad.empty()) n->grad.assign(n->value.size(), 0.0);
  return n->grad;
}

std::vector<int> broadcast_shape(const std::vector<int>& a, const std::vector<int>& b,
                                 const char* op) {
  const std::size_t n = std::max(a.size(), b.size());
  std::vector<int> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    int da = i < n - a.size() ? 1 : a[i - (n - a.size())];
    int db = i < n - b.size() ? 1 : b[i - (n - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw std::invalid_argument(std::string(op) + ": shapes " + shape_str(a) + " and " +
                                  shape_str(b) + " are not broadcastable");
    }
    out[i] = std::max(da, db);
  }
  return out;
}

// Strides of `shape` inside broadcast space `out_shape` (0 on broadcast dims).
std::vector<std::size_t> broadcast_strides(const std::vector<int>& shape,
                                           const std::vector<int>& out_shape) {
  const std::size_t n = out_shape.size();
  const std::size_t pad = n - shape.size();
  std::vector<std::size_t> strides(n, 0);
  std::size_t s = 1;
  for (std::size_t i = shape.size(); i-- > 0;) {
    strides[pad + i] = (shape[i] == 1 && out_shape[pad + i] != 1) ? 0 : s;
    s *= static_cast<std::size_t>(shape[i]);
  }
  return strides;
}

// Calls f(out_index, a_offset, b_offset) for every element of the broadcast
// result, with offsets advanced incrementally (odometer walk).
template <class F>
void for_each_broadcast(const std::vector<int>& out_shape, const std::vector<std::size_t>& sa,
                        const std::vector<std::size_t>& sb, F&& f) {
  const std::size_t nd = out_shape.size();
  std::size_t total = 1;
  for (int d : out_shape) total *= static_cast<std::size_t>(d);
  if (total == 0) return;
  std::vector<int> coord(nd, 0);
  std::size_t ao = 0, bo = 0;
  for (std::size_t i = 0;; ++i) {
    f(i, ao, bo);
    if (i + 1 == total) break;
    for (std::size_t d = nd; d-- > 0;) {
      ++coord[d];
      ao += sa[d];
      bo += sb[d];
      if (coord[d] < out_shape[d]) break;
      ao -= sa[d] * static_cast<std::size_t>(out_shape[d]);
      bo -= sb[d] * static_cast<std::size_t>(out_shape[d]);
      coord[d] = 0;
    }
  }
}

enum class BinKind { Add, Sub, Mul };

Tensor binary_op(const Tensor& a, const Tensor& b, BinKind kind, const char* name) {
  Tensor out;
  const bool same = a.shape() == b.shape();
  const bool rg = track_grad(a) || track_grad(b);
  if (same) {
    out = Tensor::zeros(a.shape(), rg);
    const real* pa = a.value().data();
    const real* pb = b.value().data();
    real* po = out.value().data();
    const std::size_t n = out.numel();
    switch (kind) {
      case BinKind::Add: for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i]; break;
      case BinKind::Sub: for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] - pb[i]; break;
      case BinKind::Mul: for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i]; break;
    }
  } else {
    auto out_shape = broadcast_shape(a.shape(), b.shape(), name);
    out = Tensor::zeros(out_shape, rg);
    auto sa = broadcast_strides(a.shape(), out_shape);
    auto sb = broadcast_strides(b.shape(), out_shape);
    const real* pa = a.value().data();
    const real* pb = b.value().data();
    real* po = out.value().data();
    switch (kind) {
      case BinKind::Add:
        for_each_broadcast(out_shape, sa, sb,
                           [&](std::size_t i, std::size_t ao, std::size_t bo) { po[i] = pa[ao] + pb[bo]; });
        break;
      case BinKind::Sub:
        for_each_broadcast(out_shape, sa, sb,
                           [&](std::size_t i, std::size_t ao, std::size_t bo) { po[i] = pa[ao] - pb[bo]; });
        break;
      case BinKind::Mul:
        for_each_broadcast(out_shape, sa, sb,
                           [&](std::size_t i, std::size_t ao, std::size_t bo) { po[i] = pa[ao] * pb[bo]; });
        break;
    }
  }

  if (rg) {
    auto an = a.node(), bn = b.node(), on = out.node();
    auto out_shape = out.shape();
    Tape::active()->record(on, [an, bn, on, out_shape, kind]() {
      const real* g = on->grad.data();
      const bool same2 = an->shape == bn->shape;
      if (same2) {
        const std::size_t n = on->value.size();
        if (an->requires_grad) {
          real* ga = grad_of(an.get()).data();
          if (kind == BinKind::Mul) {
            const real* pb = bn->value.data();
            for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * pb[i];
          } else {
            for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
          }
        }
        if (bn->requires_grad) {
          real* gb = grad_of(bn.get()).data();
          if (kind == BinKind::Mul) {
            const real* pa = an->value.data();
            for (std::size_t i = 0; i < n; ++i) gb[i] += g[i] * pa[i];
          } else if (kind == BinKind::Sub) {
            for (std::size_t i = 0; i < n; ++i) gb[i] -= g[i];
          } else {
            for (std::size_t i = 0; i < n; ++i) gb[i] += g[i];
          }
        }
        return;
      }
      auto sa = broadcast_strides(an->shape, out_shape);
      auto sb = broadcast_strides(bn->shape, out_shape);
      real* ga = an->requires_grad ? grad_of(an.get()).data() : nullptr;
      real* gb = bn->requires_grad ? grad_of(bn.get()).data() : nullptr;
      const real* pa = an->value.data();
      const real* pb = bn->value.data();
      for_each_broadcast(out_shape, sa, sb, [&](std::size_t i, std::size_t ao, std::size_t bo) {
        switch (kind) {
          case BinKind::Add:
            if (ga) ga[ao] += g[i];
            if (gb) gb[bo] += g[i];
            break;
          case BinKind::Sub:
            if (ga) ga[ao] += g[i];
            if (gb) gb[bo] -= g[i];
            break;
          case BinKind::Mul:
            if (ga) ga[ao] += g[i] * pb[bo];
            if (gb) gb[bo] += g[i] * pa[ao];
            break;
        }
      });
    });
  }
  return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinKind::Add, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinKind::Sub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinKind::Mul, "mul"); }

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor scale(const Tensor& a, real c) {
  const bool rg = track_grad(a);
  Tensor out = Tensor::zeros(a.shape(), rg);
  const real* pa = a.value().data();
  real* po = out.value().data();
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] * c;
  if (rg) {
    auto an = a.node(), on = out.node();
    Tape::active()->record(on, [an, on, c]() {
      if (!an->requires_grad) return;
      real* ga = grad_of(an.get()).data();
      const real* g = on->grad.data();
      const std::size_t m = on->value.size();
      for (std::size_t i = 0; i < m; ++i) ga[i] += g[i] * c;
    });
  }
  return out;
}

Tensor log_op(const Tensor& a) {
  const bool rg = track_grad(a);
  Tensor out = Tensor::zeros(a.shape(), rg);
  const real* pa = a.value().data();
  real* po = out.value().data();
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) {
    if (pa[i] <= 0.0) throw std::domain_error("log: input must be strictly positive");
    po[i] = std::log(pa[i]);
  }
  if (rg) {
    auto an = a.node(), on = out.node();
    Tape::active()->record(on, [an, on]() {
      if (!an->requires_grad) return;
      real* ga = grad_of(an.get()).data();
      const real* g = on->grad.data();
      const real* x = an->value.data();
      const std::size_t m = on->value.size();
      for (std::size_t i = 0; i < m; ++i) ga[i] += g[i] / x[i];
    });
  }
  return out;
}

Tensor relu(const Tensor& a) {
  const bool rg = track_grad(a);
  Tensor out = Tensor::zeros(a.shape(), rg);
  const real* pa = a.value().data();
  real* po = out.value().data();
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] > 0.0 ? pa[i] : 0.0;
  if (rg) {
    auto an = a.node(), on = out.node();
    Tape::active()->record(on, [an, on]() {
      if (!an->requires_grad) return;
      real* ga = grad_of(an.get()).data();
      const real* g = on->grad.data();
      const real* x = an->value.data();
      const std::size_t m = on->value.size();
      for (std::size_t i = 0; i < m; ++i) ga[i] += x[i] > 0.0 ? g[i] : 0.0;
    });
  }
  return out;
}

namespace {

// C[M,N] += A[M,K] B[K,N]
void mm_nn(const real* A, const real* B, real* C, int M, int K, int N) {
  for (int i = 0; i < M; ++i) {
    const real* a = A + static_cast<std::size_t>(i) * K;
    real* c = C + static_cast<std::size_t>(i) * N;
    for (int k = 0; k < K; ++k) {
      const real av = a[k];
      const real* b = B + static_cast<std::size_t>(k) * N;
      for (int j = 0; j < N; ++j) c[j] += av * b[j];
    }
  }
}

// C[M,K] += A[M,N] B[K,N]^T  (rows of A dotted with rows of B)
void mm_nt(const real* A, const real* B, real* C, int M, int N, int K) {
  for (int i = 0; i < M; ++i) {
    const real* a = A + static_cast<std::size_t>(i) * N;
    real* c = C + static_cast<std::size_t>(i) * K;
    for (int k = 0; k < K; ++k) {
      const real* b = B + static_cast<std::size_t>(k) * N;
      real s = 0.0;
      for (int j = 0; j < N; ++j) s += a[j] * b[j];
      c[k] += s;
    }
  }
}

// C[K,N] += A[M,K]^T B[M,N]
void mm_tn(const real* A, const real* B, real* C, int M, int K, int N) {
  for (int i = 0; i < M; ++i) {
    const real* a = A + static_cast<std::size_t>(i) * K;
    const real* b = B + static_cast<std::size_t>(i) * N;
    for (int k = 0; k < K; ++k) {
      const real av = a[k];
      real* c = C + static_cast<std::size_t>(k) * N;
      for (int j = 0; j < N; ++j) c[j] += av * b[j];
    }
  }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0)) {
    throw std::invalid_argument("matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                                shape_str(b.shape()));
  }
  const int M = a.dim(0), K = a.dim(1), N = b.dim(1);
  const bool rg = track_grad(a) || track_grad(b);
  Tensor out = Tensor::zeros({M, N}, rg);
  mm_nn(a.value().data(), b.value().data(), out.value().data(), M, K, N);
  if (rg) {
    auto an = a.node(), bn = b.node(), on = out.node();
    Tape::active()->record(on, [an, bn, on, M, K, N]() {
      const real* g = on->grad.data();
      if (an->requires_grad) {
        mm_nt(g, bn->value.data(), grad_of(an.get()).data(), M, N, K);
      }
      if (bn->requires_grad) {
        mm_tn(an->value.data(), g, grad_of(bn.get()).data(), M, K, N);
      }
    });
  }
  return out;
}

Tensor transpose(const Tensor& a) {
  if (a.ndim() != 2) throw std::invalid_argument("transpose: expected 2-D, got " + shape_str(a.shape()));
  const int R = a.dim(0), C = a.dim(1);
  const bool rg = track_grad(a);
  Tensor out = Tensor::zeros({C, R}, rg);
  const real* pa = a.value().data();
  real* po = out.value().data();
  for (int i = 0; i < R; ++i)
    for (int j = 0; j < C; ++j)
      po[static_cast<std::size_t>(j) * R + i] = pa[static_cast<std::size_t>(i) * C + j];
  if (rg) {
    auto an = a.node(), on = out.node();
    Tape::active()->record(on, [an, on, R, C]() {
      if (!an->requires_grad) return;
      real* ga = grad_of(an.get()).data();
      const real* g = on->grad.data();
      for (int i = 0; i < R; ++i)
        for (int j = 0; j < C; ++j)
          ga[static_cast<std::size_t>(i) * C + j] += g[static_cast<std::size_t>(j) * R + i];
    });
  }
  return out;
}

namespace {

struct AxisLayout {
  std::size_t outer, n, inner;
};

AxisLayout axis_layout(const std::vector<int>& shape, int axis, const char* op) {
  if (axis < 0) axis += static_cast<int>(shape.size());
  if (axis < 0 || axis >= static_cast<int>(shape.size())) {
    throw std::invalid_argument(std::string(op) + ": axis out of range for shape " + shape_str(shape));
  }
  AxisLayout l{1, static_cast<std::size_t>(shape[axis]), 1};
  for (int i = 0; i < axis; ++i) l.outer *= static_cast<std::size_t>(shape[i]);
  for (std::size_t i = axis + 1; i < shape.size(); ++i) l.inner *= static_cast<std::size_t>(shape[i]);
  return l;
}

Tensor softmax_impl(const Tensor& x, int axis, const Tensor* mask) {
  const auto& shape = x.shape();
  AxisLayout l = axis_layout(shape, axis, "softmax");
  if (axis < 0) axis += x.ndim();

  // Strides of the (broadcast) mask in x space; empty when no mask.
  std::vector<std::size_t> ms;
  if (mask) {
    broadcast_shape(shape, mask->shape(), "softmax mask");  // validity check
    if (mask->ndim() > x.ndim()) {
      throw std::invalid_argument("softmax: mask rank exceeds input rank");
    }
    ms = broadcast_strides(mask->shape(), shape);
  }

  const bool rg = track_grad(x);
  Tensor out = Tensor::zeros(shape, rg);
  const real* px = x.value().data();
  const real* pm = mask ? mask->value().data() : nullptr;
  real* po = out.value().data();

  std::vector<std::size_t> dim_strides(shape.size());
  {
    std::size_t s = 1;
    for (std::size_t i = shape.size(); i-- > 0;) {
      dim_strides[i] = s;
      s *= static_cast<std::size_t>(shape[i]);
    }
  }

  for (std::size_t o = 0; o < l.outer; ++o) {
    for (std::size_t r = 0; r < l.inner; ++r) {
      const std::size_t base = o * l.n * l.inner + r;
      std::size_t mbase = 0, mstep = 0;
      if (pm) {
        // Decompose (o, r) into coordinates to place the mask.
        std::size_t rem = base;
        for (std::size_t d = 0; d < shape.size(); ++d) {
          std::size_t c = rem / dim_strides[d];
          rem %= dim_strides[d];
          mbase += c * ms[d];
        }
        mstep = ms[static_cast<std::size_t>(axis)];
      }
      real mx = -std::numeric_limits<real>::infinity();
      for (std::size_t i = 0; i < l.n; ++i) {
        if (pm && pm[mbase + i * mstep] == 0.0) continue;
        mx = std::max(mx, px[base + i * l.inner]);
      }
      if (mx == -std::numeric_limits<real>::infinity()) {
        for (std::size_t i = 0; i < l.n; ++i) po[base + i * l.inner] = 0.0;
        continue;
      }
      real sum = 0.0;
      for (std::size_t i = 0; i < l.n; ++i) {
        const std::size_t off = base + i * l.inner;
        if (pm && pm[mbase + i * mstep] == 0.0) {
          po[off] = 0.0;
        } else {
          po[off] = std::exp(px[off] - mx);
          sum += po[off];
        }
      }
      const real inv = 1.0 / sum;
      for (std::size_t i = 0; i < l.n; ++i) po[base + i * l.inner] *= inv;
    }
  }

  if (rg) {
    auto xn = x.node(), on = out.node();
    Tape::active()->record(on, [xn, on, l]() {
      if (!xn->requires_grad) return;
      real* gx = grad_of(xn.get()).data();
      const real* g = on->grad.data();
      const real* s = on->value.data();
      for (std::size_t o = 0; o < l.outer; ++o) {
        for (std::size_t r = 0; r < l.inner; ++r) {
          const std::size_t base = o * l.n * l.inner + r;
          real dot = 0.0;
          for (std::size_t i = 0; i < l.n; ++i) {
            const std::size_t off = base + i * l.inner;
            dot += g[off] * s[off];
          }
          for (std::size_t i = 0; i < l.n; ++i) {
            const std::size_t off = base + i * l.inner;
            gx[off] += s[off] * (g[off] - dot);
          }
        }
      }
    });
  }
  return out;
}

}  // namespace

Tensor softmax(const Tensor& x, int axis) { return softmax_impl(x, axis, nullptr); }
Tensor softmax(const Tensor& x, int axis, const Tensor& mask) { return softmax_impl(x, axis, &mask); }

Tensor log_softmax(const Tensor& x) {
  if (x.ndim() < 1) throw std::invalid_argument("log_softmax: rank-0 input");
  const std::size_t n = static_cast<std::size_t>(x.shape().back());
  const std::size_t rows = x.numel() / n;
  const bool rg = track_grad(x);
  Tensor out = Tensor::zeros(x.shape(), rg);
  const real* px = x.value().data();
  real* po = out.value().data();
  for (std::size_t rix = 0; rix < rows; ++rix) {
    const real* xr = px + rix * n;
    real* orr = po + rix * n;
    real mx = xr[0];
    for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, xr[i]);
    real sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) sum += std::exp(xr[i] - mx);
    const real lse = mx + std::log(sum);
    for (std::size_t i = 0; i < n; ++i) orr[i] = xr[i] - lse;
  }
  if (rg) {
    auto xn = x.node(), on = out.node();
    Tape::active()->record(on, [xn, on, rows, n]() {
      if (!xn->requires_grad) return;
      real* gx = grad_of(xn.get()).data();
      const real* g = on->grad.data();
      const real* lp = on->value.data();
      for (std::size_t rix = 0; rix < rows; ++rix) {
        const real* gr = g + rix * n;
        const real* lr = lp + rix * n;
        real* gxr = gx + rix * n;
        real gsum = 0.0;
        for (std::size_t i = 0; i < n; ++i) gsum += gr[i];
        for (std::size_t i = 0; i < n; ++i) gxr[i] += gr[i] - std::exp(lr[i]) * gsum;
      }
    });
  }
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, real eps) {
  if (x.ndim() < 1) throw std::invalid_argument("layer_norm: rank-0 input");
  const int width = x.shape().back();
  if (gain.numel() != static_cast<std::size_t>(width) || bias.numel() != static_cast<std::size_t>(width)) {
    throw std::invalid_argument("layer_norm: gain/bias must have " + std::to_string(width) + " elements");
  }
  const std::size_t n = static_cast<std::size_t>(width);
  const std::size_t rows = x.numel() / n;
  const bool rg = track_grad(x) || track_grad(gain) || track_grad(bias);
  Tensor out = Tensor::zeros(x.shape(), rg);

  auto xhat = std::make_shared<std::vector<real>>(x.numel());
  auto inv_std = std::make_shared<std::vector<real>>(rows);

  const real* px = x.value().data();
  const real* pg = gain.value().data();
  const real* pb = bias.value().data();
  real* po = out.value().data();
  for (std::size_t rix = 0; rix < rows; ++rix) {
    const real* xr = px + rix * n;
    real mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += xr[i];
    mean /= static_cast<real>(n);
    real var = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const real d = xr[i] - mean;
      var += d * d;
    }
    var /= static_cast<real>(n);
    const real inv = 1.0 / std::sqrt(var + eps);
    (*inv_std)[rix] = inv;
    real* hr = xhat->data() + rix * n;
    real* orr = po + rix * n;
    for (std::size_t i = 0; i < n; ++i) {
      hr[i] = (xr[i] - mean) * inv;
      orr[i] = pg[i] * hr[i] + pb[i];
    }
  }

  if (rg) {
    auto xn = x.node(), gn = gain.node(), bn = bias.node(), on = out.node();
    Tape::active()->record(on, [xn, gn, bn, on, xhat, inv_std, rows, n]() {
      const real* g = on->grad.data();
      const real* pg2 = gn->value.data();
      real* ggain = gn->requires_grad ? grad_of(gn.get()).data() : nullptr;
      real* gbias = bn->requires_grad ? grad_of(bn.get()).data() : nullptr;
      real* gx = xn->requires_grad ? grad_of(xn.get()).data() : nullptr;
      for (std::size_t rix = 0; rix < rows; ++rix) {
        const real* gr = g + rix * n;
        const real* hr = xhat->data() + rix * n;
        if (ggain || gbias) {
          for (std::size_t i = 0; i < n; ++i) {
            if (ggain) ggain[i] += gr[i] * hr[i];
            if (gbias) gbias[i] += gr[i];
          }
        }
        if (gx) {
          real t_mean = 0.0, th_mean = 0.0;
          for (std::size_t i = 0; i < n; ++i) {
            const real t = gr[i] * pg2[i];
            t_mean += t;
            th_mean += t * hr[i];
          }
          t_mean /= static_cast<real>(n);
          th_mean /= static_cast<real>(n);
          const real inv = (*inv_std)[rix];
          real* gxr = gx + rix * n;
          for (std::size_t i = 0; i < n; ++i) {
            const real t = gr[i] * pg2[i];
            gxr[i] += inv * (t - t_mean - hr[i] * th_mean);
          }
        }
      }
    });
  }
  return out;
}

Tensor dropout(const Tensor& x, real rate, bool training, Rng& rng) {
  if (rate < 0.0 || rate >= 1.0) {
    throw std::invalid_argument("dropout: rate must be in [0,1), got " + std::to_string(rate));
  }
  if (!training || rate == 0.0) return x;

  const std::uint64_t op_seed = rng.seed();  // recorded for reproducibility audits
  (void)op_seed;
  const real keep_scale = 1.0 / (1.0 - rate);
  auto mask = std::make_shared<std::vector<real>>(x.numel());
  for (std::size_t i = 0; i < x.numel(); ++i) {
    (*mask)[i] = rng.uniform() >= rate ? keep_scale : 0.0;
  }

  const bool rg = track_grad(x);
  Tensor out = Tensor::zeros(x.shape(), rg);
  const real* px = x.value().data();
  real* po = out.value().data();
  for (std::size_t i = 0; i < x.numel(); ++i) po[i] = px[i] * (*mask)[i];

  if (rg) {
    auto xn = x.node(), on = out.node();
    Tape::active()->record(on, [xn, on, mask]() {
      if (!xn->requires_grad) return;
      real* gx = grad_of(xn.get()).data();
      const real* g = on->grad.data();
      const std::size_t m = on->value.size();
      for (std::size_t i = 0; i < m; ++i) gx[i] += g[i] * (*mask)[i];
    });
  }
  return out;
}

Tensor embedding_lookup(const Tensor& table, const std::vector<int>& ids) {
  if (table.ndim() != 2) throw std::invalid_argument("embedding: table must be 2-D");
  const int V = table.dim(0), d = table.dim(1);
  for (int id : ids) {
    if (id < 0 || id >= V) {
      throw std::out_of_range("embedding: id " + std::to_string(id) + " outside vocab of " +
                              std::to_string(V));
    }
  }
  const bool rg = track_grad(table);
  Tensor out = Tensor::zeros({static_cast<int>(ids.size()), d}, rg);
  const real* pt = table.value().data();
  real* po = out.value().data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    std::copy_n(pt + static_cast<std::size_t>(ids[i]) * d, d, po + i * static_cast<std::size_t>(d));
  }
  if (rg) {
    auto tn = table.node(), on = out.node();
    auto ids_copy = std::make_shared<std::vector<int>>(ids);
    Tape::active()->record(on, [tn, on, ids_copy, d]() {
      if (!tn->requires_grad) return;
      real* gt = grad_of(tn.get()).data();
      const real* g = on->grad.data();
      for (std::size_t i = 0; i < ids_copy->size(); ++i) {
        real* row = gt + static_cast<std::size_t>((*ids_copy)[i]) * d;
        const real* gr = g + i * static_cast<std::size_t>(d);
        for (int j = 0; j < d; ++j) row[j] += gr[j];
      }
    });
  }
  return out;
}

Tensor reshape(const Tensor& x, std::vector<int> new_shape) {
  std::size_t n = 1;
  for (int d : new_shape) n *= static_cast<std::size_t>(d);
  if (n != x.numel()) {
    throw std::invalid_argument("reshape: cannot view " + shape_str(x.shape()) + " as " +
                                shape_str(new_shape));
  }
  const bool rg = track_grad(x);
  Tensor out(std::move(new_shape), x.value(), rg);
  if (rg) {
    auto xn = x.node(), on = out.node();
    Tape::active()->record(on, [xn, on]() {
      if (!xn->requires_grad) return;
      real* gx = grad_of(xn.get()).data();
      const real* g = on->grad.data();
      const std::size_t m = on->value.size();
      for (std::size_t i = 0; i < m; ++i) gx[i] += g[i];
    });
  }
  return out;
}

Tensor slice_rows(const Tensor& x, int start, int count) {
  if (x.ndim() < 1 || start < 0 || count <= 0 || start + count > x.dim(0)) {
    throw std::invalid_argument("slice_rows: invalid range [" + std::to_string(start) + "," +
                                std::to_string(start + count) + ") for shape " + shape_str(x.shape()));
  }
  const std::size_t slab = x.numel() / static_cast<std::size_t>(x.dim(0));
  std::vector<int> out_shape = x.shape();
  out_shape[0] = count;
  const bool rg = track_grad(x);
  Tensor out = Tensor::zeros(out_shape, rg);
  std::copy_n(x.value().data() + static_cast<std::size_t>(start) * slab,
              static_cast<std::size_t>(count) * slab, out.value().data());
  if (rg) {
    auto xn = x.node(), on = out.node();
    Tape::active()->record(on, [xn, on, start, slab]() {
      if (!xn->requires_grad) return;
      real* gx = grad_of(xn.get()).data() + static_cast<std::size_t>(start) * slab;
      const real* g = on->grad.data();
      const std::size_t m = on->value.size();
      for (std::size_t i = 0; i < m; ++i) gx[i] += g[i];
    });
  }
  return out;
}

Tensor slice_cols(const Tensor& x, int start, int count) {
  if (x.ndim() < 1) throw std::invalid_argument("slice_cols: rank-0 input");
  const int C = x.shape().back();
  if (start < 0 || count <= 0 || start + count > C) {
    throw std::invalid_argument("slice_cols: invalid range [" + std::to_string(start) + "," +
                                std::to_string(start + count) + ") for shape " + shape_str(x.shape()));
  }
  const std::size_t rows = x.numel() / static_cast<std::size_t>(C);
  std::vector<int> out_shape = x.shape();
  out_shape.back() = count;
  const bool rg = track_grad(x);
  Tensor out = Tensor::zeros(out_shape, rg);
  const real* px = x.value().data();
  real* po = out.value().data();
  for (std::size_t rix = 0; rix < rows; ++rix) {
    std::copy_n(px + rix * C + start, count, po + rix * count);
  }
  if (rg) {
    auto xn = x.node(), on = out.node();
    Tape::active()->record(on, [xn, on, start, count, C, rows]() {
      if (!xn->requires_grad) return;
      real* gx = grad_of(xn.get()).data();
      const real* g = on->grad.data();
      for (std::size_t rix = 0; rix < rows; ++rix) {
        real* xr = gx + rix * C + start;
        const real* gr = g + rix * count;
        for (int i = 0; i < count; ++i) xr[i] += gr[i];
      }
    });
  }
  return out;
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
  std::vector<int> out_shape = parts[0].shape();
  int total = 0;
  bool rg = false;
  for (const auto& p : parts) {
    if (p.ndim() != static_cast<int>(out_shape.size()) ||
        !std::equal(out_shape.begin() + 1, out_shape.end(), p.shape().begin() + 1)) {
      throw std::invalid_argument("concat_rows: mismatched shapes " + shape_str(out_shape) + " vs " +
                                  shape_str(p.shape()));
    }
    total += p.dim(0);
    rg = rg || track_grad(p);
  }
  out_shape[0] = total;
  Tensor out = Tensor::zeros(out_shape, rg);
  real* po = out.value().data();
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy_n(p.value().data(), p.numel(), po + off);
    off += p.numel();
  }
  if (rg) {
    std::vector<std::shared_ptr<TensorData>> nodes;
    nodes.reserve(parts.size());
    for (const auto& p : parts) nodes.push_back(p.node());
    auto on = out.node();
    Tape::active()->record(on, [nodes, on]() {
      const real* g = on->grad.data();
      std::size_t off2 = 0;
      for (const auto& nptr : nodes) {
        const std::size_t m = nptr->value.size();
        if (nptr->requires_grad) {
          real* gp = grad_of(nptr.get()).data();
          for (std::size_t i = 0; i < m; ++i) gp[i] += g[off2 + i];
        }
        off2 += m;
      }
    });
  }
  return out;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  std::vector<int> lead = parts[0].shape();
  lead.pop_back();
  int total = 0;
  bool rg = false;
  for (const auto& p : parts) {
    std::vector<int> pl = p.shape();
    pl.pop_back();
    if (pl != lead) {
      throw std::invalid_argument("concat_cols: mismatched leading dims " + shape_str(parts[0].shape()) +
                                  " vs " + shape_str(p.shape()));
    }
    total += p.shape().back();
    rg = rg || track_grad(p);
  }
  std::vector<int> out_shape = lead;
  out_shape.push_back(total);
  std::size_t rows = 1;
  for (int d : lead) rows *= static_cast<std::size_t>(d);
  Tensor out = Tensor::zeros(out_shape, rg);
  real* po = out.value().data();
  std::size_t col_off = 0;
  for (const auto& p : parts) {
    const int pc = p.shape().back();
    const real* pp = p.value().data();
    for (std::size_t rix = 0; rix < rows; ++rix) {
      std::copy_n(pp + rix * pc, pc, po + rix * total + col_off);
    }
    col_off += static_cast<std::size_t>(pc);
  }
  if (rg) {
    std::vector<std::shared_ptr<TensorData>> nodes;
    std::vector<int> widths;
    for (const auto& p : parts) {
      nodes.push_back(p.node());
      widths.push_back(p.shape().back());
    }
    auto on = out.node();
    Tape::active()->record(on, [nodes, widths, on, rows, total]() {
      const real* g = on->grad.data();
      std::size_t col_off2 = 0;
      for (std::size_t pi = 0; pi < nodes.size(); ++pi) {
        const int pc = widths[pi];
        if (nodes[pi]->requires_grad) {
          real* gp = grad_of(nodes[pi].get()).data();
          for (std::size_t rix = 0; rix < rows; ++rix) {
            const real* gr = g + rix * total + col_off2;
            real* pr = gp + rix * pc;
            for (int i = 0; i < pc; ++i) pr[i] += gr[i];
          }
        }
        col_off2 += static_cast<std::size_t>(pc);
      }
    });
  }
  return out;
}

Tensor sum_all(const Tensor& x) {
  const bool rg = track_grad(x);
  real s = 0.0;
  for (real v : x.value()) s += v;
  Tensor out({1}, std::vector<real>{s}, rg);
  if (rg) {
    auto xn = x.node(), on = out.node();
    Tape::active()->record(on, [xn, on]() {
      if (!xn->requires_grad) return;
      real* gx = grad_of(xn.get()).data();
      const real g = on->grad[0];
      const std::size_t m = xn->value.size();
      for (std::size_t i = 0; i < m; ++i) gx[i] += g;
    });
  }
  return out;
}

Tensor mean_all(const Tensor& x) {
  return scale(sum_all(x), 1.0 / static_cast<real>(x.numel()));
}

Tensor sum_last(const Tensor& x) {
  if (x.ndim() < 1) throw std::invalid_argument("sum_last: rank-0 input");
  const std::size_t n = static_cast<std::size_t>(x.shape().back());
  const std::size_t rows = x.numel() / n;
  std::vector<int> out_shape(x.shape().begin(), x.shape().end() - 1);
  if (out_shape.empty()) out_shape.push_back(1);
  const bool rg = track_grad(x);
  Tensor out = Tensor::zeros(out_shape, rg);
  const real* px = x.value().data();
  real* po = out.value().data();
  for (std::size_t rix = 0; rix < rows; ++rix) {
    real s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += px[rix * n + i];
    po[rix] = s;
  }
  if (rg) {
    auto xn = x.node(), on = out.node();
    Tape::active()->record(on, [xn, on, rows, n]() {
      if (!xn->requires_grad) return;
      real* gx = grad_of(xn.get()).data();
      const real* g = on->grad.data();
      for (std::size_t rix = 0; rix < rows; ++rix) {
        for (std::size_t i = 0; i < n; ++i) gx[rix * n + i] += g[rix];
      }
    });
  }
  return out;
}

}  // namespace dhicm

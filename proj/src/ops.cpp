#include "lamformer/ops.hpp"

#include <algorithm>
#include <cmath>
#include <initializer_list>

namespace lam {

namespace {

using i64 = std::int64_t;

bool recording(std::initializer_list<const Tensor*> inputs) {
  if (!Tape::current()) return false;
  for (const Tensor* t : inputs) {
    if (t->tracked()) return true;
  }
  return false;
}

// Reserves a tape node and tracks `out` before the backward closure is built,
// so Tensor copies captured by the closure share the output's grad slot.
struct OpRecorder {
  Tape* tape;
  int id;
  explicit OpRecorder(Tensor& out) : tape(Tape::current()), id(tape->reserve()) {
    tape->track_output(out, id);
  }
  void set(std::function<void()> fn) { tape->fill(id, std::move(fn)); }
};

void add_into(std::span<float> dst, const std::vector<double>& src) {
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] += static_cast<float>(src[i]);
}

// dst[M,P] = A[M,K] · B[K,P], double partial sums.
void gemm(const float* a, const float* b, float* dst, i64 m, i64 k, i64 p) {
  std::vector<double> row(static_cast<std::size_t>(p));
  for (i64 i = 0; i < m; ++i) {
    std::fill(row.begin(), row.end(), 0.0);
    const float* arow = a + i * k;
    for (i64 kk = 0; kk < k; ++kk) {
      const double av = arow[kk];
      const float* brow = b + kk * p;
      for (i64 j = 0; j < p; ++j) row[static_cast<std::size_t>(j)] += av * brow[j];
    }
    float* drow = dst + i * p;
    for (i64 j = 0; j < p; ++j) drow[j] = static_cast<float>(row[static_cast<std::size_t>(j)]);
  }
}

struct PadPair {
  i64 before = 0;
  i64 after = 0;
};

// Same-padding so the output size is ceil(size/stride); extra pad trails.
PadPair same_pad(i64 size, i64 kernel, i64 stride) {
  const i64 out = (size + stride - 1) / stride;
  const i64 total = std::max<i64>((out - 1) * stride + kernel - size, 0);
  return {total / 2, total - total / 2};
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul shape mismatch: " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  const i64 m = a.dim(0), k = a.dim(1), p = b.dim(1);
  Tensor out(Shape{m, p});
  gemm(a.data().data(), b.data().data(), out.mutable_data().data(), m, k, p);
  counters::add_macs(static_cast<std::uint64_t>(m) * static_cast<std::uint64_t>(k) *
                     static_cast<std::uint64_t>(p));
  if (recording({&a, &b})) {
    OpRecorder rec(out);
    Tensor ta = a, tb = b, to = out;
    rec.set([ta, tb, to, m, k, p]() mutable {
      if (!to.grad_filled()) return;
      const float* g = to.grad().data();
      if (ta.tracked()) {
        // dA[i,k] = sum_j g[i,j] * B[k,j]
        auto acc = ta.grad_accum();
        const float* bd = tb.data().data();
        for (i64 i = 0; i < m; ++i) {
          for (i64 kk = 0; kk < k; ++kk) {
            double s = 0.0;
            const float* grow = g + i * p;
            const float* brow = bd + kk * p;
            for (i64 j = 0; j < p; ++j) s += static_cast<double>(grow[j]) * brow[j];
            acc[static_cast<std::size_t>(i * k + kk)] += static_cast<float>(s);
          }
        }
      }
      if (tb.tracked()) {
        // dB[k,j] = sum_i A[i,k] * g[i,j]
        auto acc = tb.grad_accum();
        const float* ad = ta.data().data();
        std::vector<double> row(static_cast<std::size_t>(p));
        for (i64 kk = 0; kk < k; ++kk) {
          std::fill(row.begin(), row.end(), 0.0);
          for (i64 i = 0; i < m; ++i) {
            const double av = ad[i * k + kk];
            const float* grow = g + i * p;
            for (i64 j = 0; j < p; ++j) row[static_cast<std::size_t>(j)] += av * grow[j];
          }
          for (i64 j = 0; j < p; ++j)
            acc[static_cast<std::size_t>(kk * p + j)] += static_cast<float>(row[static_cast<std::size_t>(j)]);
        }
      }
    });
  }
  return out;
}

Tensor transpose2d(const Tensor& x) {
  if (x.rank() != 2) throw DimensionError("transpose2d requires rank 2, got " + shape_str(x.shape()));
  return permute(x, {1, 0});
}

Tensor conv2d(const Tensor& x, const Tensor& w, int stride, Padding pad) {
  if (x.rank() != 3 || w.rank() != 4 || w.dim(1) != x.dim(0)) {
    throw DimensionError("conv2d shape mismatch: input " + shape_str(x.shape()) + ", kernel " +
                         shape_str(w.shape()));
  }
  if (stride < 1) throw ConfigError("conv2d stride must be >= 1");
  if (w.dim(2) != w.dim(3)) throw ConfigError("conv2d kernel must be square, got " + shape_str(w.shape()));
  const i64 ci = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const i64 co = w.dim(0), k = w.dim(2);
  PadPair ph, pw;
  if (pad == Padding::same) {
    ph = same_pad(h, k, stride);
    pw = same_pad(wd, k, stride);
  }
  const i64 hp = h + ph.before + ph.after;
  const i64 wp = wd + pw.before + pw.after;
  if (k > hp || k > wp) {
    throw DimensionError("conv2d kernel " + shape_str(w.shape()) + " larger than padded input " +
                         shape_str(x.shape()));
  }
  const i64 ho = (hp - k) / stride + 1;
  const i64 wo = (wp - k) / stride + 1;

  Tensor out(Shape{co, ho, wo});
  {
    const float* xd = x.data().data();
    const float* wdp = w.data().data();
    float* od = out.mutable_data().data();
    for (i64 oc = 0; oc < co; ++oc) {
      for (i64 oy = 0; oy < ho; ++oy) {
        for (i64 ox = 0; ox < wo; ++ox) {
          double s = 0.0;
          for (i64 ic = 0; ic < ci; ++ic) {
            const float* xc = xd + ic * h * wd;
            const float* wc = wdp + ((oc * ci + ic) * k) * k;
            for (i64 ky = 0; ky < k; ++ky) {
              const i64 iy = oy * stride - ph.before + ky;
              if (iy < 0 || iy >= h) continue;
              for (i64 kx = 0; kx < k; ++kx) {
                const i64 ix = ox * stride - pw.before + kx;
                if (ix < 0 || ix >= wd) continue;
                s += static_cast<double>(xc[iy * wd + ix]) * wc[ky * k + kx];
              }
            }
          }
          od[(oc * ho + oy) * wo + ox] = static_cast<float>(s);
        }
      }
    }
  }
  counters::add_macs(static_cast<std::uint64_t>(co * ho * wo) * static_cast<std::uint64_t>(ci * k * k));

  if (recording({&x, &w})) {
    OpRecorder rec(out);
    Tensor tx = x, tw = w, to = out;
    const i64 phb = ph.before, pwb = pw.before;
    rec.set([tx, tw, to, stride, phb, pwb]() mutable {
      if (!to.grad_filled()) return;
      const i64 ci = tx.dim(0), h = tx.dim(1), wd = tx.dim(2);
      const i64 co = tw.dim(0), k = tw.dim(2);
      const i64 ho = to.dim(1), wo = to.dim(2);
      const float* g = to.grad().data();
      const float* xd = tx.data().data();
      const float* wdp = tw.data().data();
      std::vector<double> dx, dw;
      if (tx.tracked()) dx.assign(static_cast<std::size_t>(ci * h * wd), 0.0);
      if (tw.tracked()) dw.assign(static_cast<std::size_t>(co * ci * k * k), 0.0);
      for (i64 oc = 0; oc < co; ++oc) {
        for (i64 oy = 0; oy < ho; ++oy) {
          for (i64 ox = 0; ox < wo; ++ox) {
            const double gv = g[(oc * ho + oy) * wo + ox];
            if (gv == 0.0) continue;
            for (i64 ic = 0; ic < ci; ++ic) {
              for (i64 ky = 0; ky < k; ++ky) {
                const i64 iy = oy * stride - phb + ky;
                if (iy < 0 || iy >= h) continue;
                for (i64 kx = 0; kx < k; ++kx) {
                  const i64 ix = ox * stride - pwb + kx;
                  if (ix < 0 || ix >= wd) continue;
                  const i64 xi = (ic * h + iy) * wd + ix;
                  const i64 wi = ((oc * ci + ic) * k + ky) * k + kx;
                  if (!dx.empty()) dx[static_cast<std::size_t>(xi)] += gv * wdp[wi];
                  if (!dw.empty()) dw[static_cast<std::size_t>(wi)] += gv * xd[xi];
                }
              }
            }
          }
        }
      }
      if (!dx.empty()) add_into(tx.grad_accum(), dx);
      if (!dw.empty()) add_into(tw.grad_accum(), dw);
    });
  }
  return out;
}

Tensor depthwise_conv2d(const Tensor& x, const Tensor& w) {
  if (x.rank() != 3 || w.rank() != 3 || w.dim(0) != x.dim(0) || w.dim(1) != w.dim(2)) {
    throw DimensionError("depthwise_conv2d shape mismatch: input " + shape_str(x.shape()) +
                         ", kernel " + shape_str(w.shape()));
  }
  const i64 c = x.dim(0), h = x.dim(1), wd = x.dim(2), k = w.dim(1);
  if (k % 2 == 0) throw ConfigError("depthwise_conv2d kernel size must be odd, got " + std::to_string(k));
  const i64 r = k / 2;

  Tensor out(Shape{c, h, wd});
  {
    const float* xd = x.data().data();
    const float* wp = w.data().data();
    float* od = out.mutable_data().data();
    for (i64 ch = 0; ch < c; ++ch) {
      const float* xc = xd + ch * h * wd;
      const float* wc = wp + ch * k * k;
      for (i64 y = 0; y < h; ++y) {
        for (i64 xcol = 0; xcol < wd; ++xcol) {
          double s = 0.0;
          for (i64 ky = 0; ky < k; ++ky) {
            const i64 iy = y - r + ky;
            if (iy < 0 || iy >= h) continue;
            for (i64 kx = 0; kx < k; ++kx) {
              const i64 ix = xcol - r + kx;
              if (ix < 0 || ix >= wd) continue;
              s += static_cast<double>(xc[iy * wd + ix]) * wc[ky * k + kx];
            }
          }
          od[(ch * h + y) * wd + xcol] = static_cast<float>(s);
        }
      }
    }
  }
  counters::add_macs(static_cast<std::uint64_t>(c * h * wd) * static_cast<std::uint64_t>(k * k));

  if (recording({&x, &w})) {
    OpRecorder rec(out);
    Tensor tx = x, tw = w, to = out;
    rec.set([tx, tw, to]() mutable {
      if (!to.grad_filled()) return;
      const i64 c = tx.dim(0), h = tx.dim(1), wd = tx.dim(2), k = tw.dim(1);
      const i64 r = k / 2;
      const float* g = to.grad().data();
      const float* xd = tx.data().data();
      const float* wp = tw.data().data();
      std::vector<double> dx, dw;
      if (tx.tracked()) dx.assign(static_cast<std::size_t>(c * h * wd), 0.0);
      if (tw.tracked()) dw.assign(static_cast<std::size_t>(c * k * k), 0.0);
      for (i64 ch = 0; ch < c; ++ch) {
        const float* xc = xd + ch * h * wd;
        const float* wc = wp + ch * k * k;
        const float* gc = g + ch * h * wd;
        for (i64 y = 0; y < h; ++y) {
          for (i64 xcol = 0; xcol < wd; ++xcol) {
            const double gv = gc[y * wd + xcol];
            if (gv == 0.0) continue;
            for (i64 ky = 0; ky < k; ++ky) {
              const i64 iy = y - r + ky;
              if (iy < 0 || iy >= h) continue;
              for (i64 kx = 0; kx < k; ++kx) {
                const i64 ix = xcol - r + kx;
                if (ix < 0 || ix >= wd) continue;
                if (!dx.empty())
                  dx[static_cast<std::size_t>((ch * h + iy) * wd + ix)] += gv * wc[ky * k + kx];
                if (!dw.empty())
                  dw[static_cast<std::size_t>((ch * k + ky) * k + kx)] += gv * xc[iy * wd + ix];
              }
            }
          }
        }
      }
      if (!dx.empty()) add_into(tx.grad_accum(), dx);
      if (!dw.empty()) add_into(tw.grad_accum(), dw);
    });
  }
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps) {
  if (x.rank() != 2 || gamma.rank() != 1 || beta.rank() != 1 || gamma.dim(0) != x.dim(1) ||
      beta.dim(0) != x.dim(1)) {
    throw DimensionError("layer_norm shape mismatch: x " + shape_str(x.shape()) + ", gamma " +
                         shape_str(gamma.shape()) + ", beta " + shape_str(beta.shape()));
  }
  if (eps <= 0.0f) throw ConfigError("layer_norm eps must be positive");
  const i64 n = x.dim(0), c = x.dim(1);

  Tensor out(Shape{n, c});
  auto xhat = std::make_shared<std::vector<float>>(static_cast<std::size_t>(n * c));
  auto inv_std = std::make_shared<std::vector<double>>(static_cast<std::size_t>(n));
  {
    const float* xd = x.data().data();
    const float* gd = gamma.data().data();
    const float* bd = beta.data().data();
    float* od = out.mutable_data().data();
    for (i64 i = 0; i < n; ++i) {
      const float* row = xd + i * c;
      double mean = 0.0;
      for (i64 j = 0; j < c; ++j) mean += row[j];
      mean /= static_cast<double>(c);
      double var = 0.0;
      for (i64 j = 0; j < c; ++j) {
        const double d = row[j] - mean;
        var += d * d;
      }
      var /= static_cast<double>(c);
      const double istd = 1.0 / std::sqrt(var + static_cast<double>(eps));
      (*inv_std)[static_cast<std::size_t>(i)] = istd;
      for (i64 j = 0; j < c; ++j) {
        const float xh = static_cast<float>((row[j] - mean) * istd);
        (*xhat)[static_cast<std::size_t>(i * c + j)] = xh;
        od[i * c + j] = static_cast<float>(static_cast<double>(gd[j]) * xh + bd[j]);
      }
    }
  }

  if (recording({&x, &gamma, &beta})) {
    OpRecorder rec(out);
    Tensor tx = x, tg = gamma, tb = beta, to = out;
    rec.set([tx, tg, tb, to, xhat, inv_std, n, c]() mutable {
      if (!to.grad_filled()) return;
      const float* g = to.grad().data();
      const float* gd = tg.data().data();
      std::vector<double> dgamma, dbeta;
      if (tg.tracked()) dgamma.assign(static_cast<std::size_t>(c), 0.0);
      if (tb.tracked()) dbeta.assign(static_cast<std::size_t>(c), 0.0);
      const bool want_dx = tx.tracked();
      std::span<float> dx;
      if (want_dx) dx = tx.grad_accum();
      for (i64 i = 0; i < n; ++i) {
        const float* grow = g + i * c;
        const float* xh = xhat->data() + i * c;
        if (!dgamma.empty() || !dbeta.empty()) {
          for (i64 j = 0; j < c; ++j) {
            if (!dgamma.empty()) dgamma[static_cast<std::size_t>(j)] += static_cast<double>(grow[j]) * xh[j];
            if (!dbeta.empty()) dbeta[static_cast<std::size_t>(j)] += grow[j];
          }
        }
        if (want_dx) {
          // dx = istd * (dxhat - mean(dxhat) - xhat * mean(dxhat*xhat))
          double m1 = 0.0, m2 = 0.0;
          for (i64 j = 0; j < c; ++j) {
            const double dxh = static_cast<double>(grow[j]) * gd[j];
            m1 += dxh;
            m2 += dxh * xh[j];
          }
          m1 /= static_cast<double>(c);
          m2 /= static_cast<double>(c);
          const double istd = (*inv_std)[static_cast<std::size_t>(i)];
          for (i64 j = 0; j < c; ++j) {
            const double dxh = static_cast<double>(grow[j]) * gd[j];
            dx[static_cast<std::size_t>(i * c + j)] +=
                static_cast<float>(istd * (dxh - m1 - xh[j] * m2));
          }
        }
      }
      if (!dgamma.empty()) add_into(tg.grad_accum(), dgamma);
      if (!dbeta.empty()) add_into(tb.grad_accum(), dbeta);
    });
  }
  return out;
}

namespace {

// tanh-form gelu; 0.7978845608 = sqrt(2/pi)
constexpr double kGeluC = 0.7978845608;
constexpr double kGeluA = 0.044715;

double act_forward(double v, Act kind) {
  switch (kind) {
    case Act::silu:
      return v / (1.0 + std::exp(-v));
    case Act::gelu: {
      const double t = std::tanh(kGeluC * (v + kGeluA * v * v * v));
      return 0.5 * v * (1.0 + t);
    }
    case Act::sigmoid:
      return 1.0 / (1.0 + std::exp(-v));
    case Act::relu:
      return v > 0.0 ? v : 0.0;
    case Act::elu_plus_one:
      return v > 0.0 ? v + 1.0 : std::exp(v);
  }
  return 0.0;
}

double act_derivative(double v, Act kind) {
  switch (kind) {
    case Act::silu: {
      const double s = 1.0 / (1.0 + std::exp(-v));
      return s * (1.0 + v * (1.0 - s));
    }
    case Act::gelu: {
      const double u = kGeluC * (v + kGeluA * v * v * v);
      const double t = std::tanh(u);
      const double du = kGeluC * (1.0 + 3.0 * kGeluA * v * v);
      return 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
    }
    case Act::sigmoid: {
      const double s = 1.0 / (1.0 + std::exp(-v));
      return s * (1.0 - s);
    }
    case Act::relu:
      return v > 0.0 ? 1.0 : 0.0;
    case Act::elu_plus_one:
      return v > 0.0 ? 1.0 : std::exp(v);
  }
  return 0.0;
}

}  // namespace

Tensor activation(const Tensor& x, Act kind) {
  Tensor out(x.shape());
  const float* xd = x.data().data();
  float* od = out.mutable_data().data();
  const i64 n = x.numel();
  for (i64 i = 0; i < n; ++i) od[i] = static_cast<float>(act_forward(xd[i], kind));

  if (recording({&x})) {
    OpRecorder rec(out);
    Tensor tx = x, to = out;
    rec.set([tx, to, kind]() mutable {
      if (!to.grad_filled() || !tx.tracked()) return;
      const float* g = to.grad().data();
      const float* xd = tx.data().data();
      auto acc = tx.grad_accum();
      const i64 n = tx.numel();
      for (i64 i = 0; i < n; ++i)
        acc[static_cast<std::size_t>(i)] +=
            static_cast<float>(static_cast<double>(g[i]) * act_derivative(xd[i], kind));
    });
  }
  return out;
}

Tensor softmax(const Tensor& x) {
  if (x.rank() < 1) throw DimensionError("softmax requires rank >= 1");
  const i64 d = x.dim(x.rank() - 1);
  const i64 rows = x.numel() / d;

  Tensor out(x.shape());
  {
    const float* xd = x.data().data();
    float* od = out.mutable_data().data();
    for (i64 i = 0; i < rows; ++i) {
      const float* row = xd + i * d;
      float mx = row[0];
      for (i64 j = 1; j < d; ++j) mx = std::max(mx, row[j]);
      double denom = 0.0;
      for (i64 j = 0; j < d; ++j) denom += std::exp(static_cast<double>(row[j]) - mx);
      for (i64 j = 0; j < d; ++j)
        od[i * d + j] = static_cast<float>(std::exp(static_cast<double>(row[j]) - mx) / denom);
    }
  }

  if (recording({&x})) {
    OpRecorder rec(out);
    Tensor tx = x, to = out;
    rec.set([tx, to, rows, d]() mutable {
      if (!to.grad_filled() || !tx.tracked()) return;
      const float* g = to.grad().data();
      const float* p = to.data().data();
      auto acc = tx.grad_accum();
      for (i64 i = 0; i < rows; ++i) {
        const float* grow = g + i * d;
        const float* prow = p + i * d;
        double s = 0.0;
        for (i64 j = 0; j < d; ++j) s += static_cast<double>(grow[j]) * prow[j];
        for (i64 j = 0; j < d; ++j)
          acc[static_cast<std::size_t>(i * d + j)] +=
              static_cast<float>(prow[j] * (static_cast<double>(grow[j]) - s));
      }
    });
  }
  return out;
}

namespace {

Tensor global_pool(const Tensor& x, bool is_max) {
  if (x.rank() != 3) throw DimensionError("global pool requires [CxHxW], got " + shape_str(x.shape()));
  const i64 c = x.dim(0), hw = x.dim(1) * x.dim(2);
  Tensor out(Shape{c, 1, 1});
  auto argmax = std::make_shared<std::vector<i64>>();
  if (is_max) argmax->resize(static_cast<std::size_t>(c));
  {
    const float* xd = x.data().data();
    float* od = out.mutable_data().data();
    for (i64 ch = 0; ch < c; ++ch) {
      const float* xc = xd + ch * hw;
      if (is_max) {
        i64 best = 0;
        for (i64 i = 1; i < hw; ++i) {
          if (xc[i] > xc[best]) best = i;  // ties keep the first in row-major order
        }
        (*argmax)[static_cast<std::size_t>(ch)] = best;
        od[ch] = xc[best];
      } else {
        double s = 0.0;
        for (i64 i = 0; i < hw; ++i) s += xc[i];
        od[ch] = static_cast<float>(s / static_cast<double>(hw));
      }
    }
  }

  if (recording({&x})) {
    OpRecorder rec(out);
    Tensor tx = x, to = out;
    rec.set([tx, to, argmax, is_max, c, hw]() mutable {
      if (!to.grad_filled() || !tx.tracked()) return;
      const float* g = to.grad().data();
      auto acc = tx.grad_accum();
      for (i64 ch = 0; ch < c; ++ch) {
        if (is_max) {
          acc[static_cast<std::size_t>(ch * hw + (*argmax)[static_cast<std::size_t>(ch)])] += g[ch];
        } else {
          const float gv = static_cast<float>(static_cast<double>(g[ch]) / static_cast<double>(hw));
          for (i64 i = 0; i < hw; ++i) acc[static_cast<std::size_t>(ch * hw + i)] += gv;
        }
      }
    });
  }
  return out;
}

}  // namespace

Tensor global_max_pool(const Tensor& x) { return global_pool(x, true); }
Tensor global_avg_pool(const Tensor& x) { return global_pool(x, false); }

Tensor reshape(const Tensor& x, Shape s) {
  if (shape_numel(s) != x.numel()) {
    throw DimensionError("reshape element count mismatch: " + shape_str(x.shape()) + " -> " +
                         shape_str(s));
  }
  Tensor out(std::move(s));
  std::copy(x.data().begin(), x.data().end(), out.mutable_data().begin());
  if (recording({&x})) {
    OpRecorder rec(out);
    Tensor tx = x, to = out;
    rec.set([tx, to]() mutable {
      if (!to.grad_filled() || !tx.tracked()) return;
      const float* g = to.grad().data();
      auto acc = tx.grad_accum();
      const i64 n = tx.numel();
      for (i64 i = 0; i < n; ++i) acc[static_cast<std::size_t>(i)] += g[i];
    });
  }
  return out;
}

namespace {

std::vector<i64> strides_of(const Shape& s) {
  std::vector<i64> st(s.size());
  i64 acc = 1;
  for (int i = static_cast<int>(s.size()) - 1; i >= 0; --i) {
    st[static_cast<std::size_t>(i)] = acc;
    acc *= s[static_cast<std::size_t>(i)];
  }
  return st;
}

}  // namespace

Tensor permute(const Tensor& x, const std::vector<int>& perm) {
  const int r = x.rank();
  if (static_cast<int>(perm.size()) != r) {
    throw DimensionError("permute axes count " + std::to_string(perm.size()) +
                         " does not match rank " + std::to_string(r));
  }
  std::vector<bool> seen(static_cast<std::size_t>(r), false);
  Shape os(static_cast<std::size_t>(r));
  for (int i = 0; i < r; ++i) {
    const int p = perm[static_cast<std::size_t>(i)];
    if (p < 0 || p >= r || seen[static_cast<std::size_t>(p)]) {
      throw DimensionError("permute axes must be a permutation of 0.." + std::to_string(r - 1));
    }
    seen[static_cast<std::size_t>(p)] = true;
    os[static_cast<std::size_t>(i)] = x.dim(p);
  }
  const auto in_strides = strides_of(x.shape());
  Tensor out(os);
  {
    // out multi-index walks row-major; source index via permuted strides
    std::vector<i64> src_stride(static_cast<std::size_t>(r));
    for (int i = 0; i < r; ++i)
      src_stride[static_cast<std::size_t>(i)] = in_strides[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];
    const float* xd = x.data().data();
    float* od = out.mutable_data().data();
    std::vector<i64> idx(static_cast<std::size_t>(r), 0);
    const i64 n = out.numel();
    i64 src = 0;
    for (i64 flat = 0; flat < n; ++flat) {
      od[flat] = xd[src];
      for (int d = r - 1; d >= 0; --d) {
        idx[static_cast<std::size_t>(d)]++;
        src += src_stride[static_cast<std::size_t>(d)];
        if (idx[static_cast<std::size_t>(d)] < os[static_cast<std::size_t>(d)]) break;
        src -= src_stride[static_cast<std::size_t>(d)] * os[static_cast<std::size_t>(d)];
        idx[static_cast<std::size_t>(d)] = 0;
      }
    }
  }

  if (recording({&x})) {
    OpRecorder rec(out);
    Tensor tx = x, to = out;
    std::vector<int> p = perm;
    rec.set([tx, to, p]() mutable {
      if (!to.grad_filled() || !tx.tracked()) return;
      const int r = tx.rank();
      const auto in_strides = strides_of(tx.shape());
      const Shape& os = to.shape();
      std::vector<i64> src_stride(static_cast<std::size_t>(r));
      for (int i = 0; i < r; ++i)
        src_stride[static_cast<std::size_t>(i)] = in_strides[static_cast<std::size_t>(p[static_cast<std::size_t>(i)])];
      const float* g = to.grad().data();
      auto acc = tx.grad_accum();
      std::vector<i64> idx(static_cast<std::size_t>(r), 0);
      const i64 n = to.numel();
      i64 src = 0;
      for (i64 flat = 0; flat < n; ++flat) {
        acc[static_cast<std::size_t>(src)] += g[flat];
        for (int d = r - 1; d >= 0; --d) {
          idx[static_cast<std::size_t>(d)]++;
          src += src_stride[static_cast<std::size_t>(d)];
          if (idx[static_cast<std::size_t>(d)] < os[static_cast<std::size_t>(d)]) break;
          src -= src_stride[static_cast<std::size_t>(d)] * os[static_cast<std::size_t>(d)];
          idx[static_cast<std::size_t>(d)] = 0;
        }
      }
    });
  }
  return out;
}

Tensor concat(const std::vector<Tensor>& xs, int axis) {
  if (xs.empty()) throw DimensionError("concat requires at least one input");
  const int r = xs[0].rank();
  if (axis < 0 || axis >= r) throw DimensionError("concat axis out of range");
  i64 axis_total = 0;
  for (const auto& t : xs) {
    if (t.rank() != r) throw DimensionError("concat rank mismatch");
    for (int d = 0; d < r; ++d) {
      if (d != axis && t.dim(d) != xs[0].dim(d)) {
        throw DimensionError("concat shape mismatch: " + shape_str(xs[0].shape()) + " vs " +
                             shape_str(t.shape()));
      }
    }
    axis_total += t.dim(axis);
  }
  Shape os = xs[0].shape();
  os[static_cast<std::size_t>(axis)] = axis_total;

  i64 outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= os[static_cast<std::size_t>(d)];
  for (int d = axis + 1; d < r; ++d) inner *= os[static_cast<std::size_t>(d)];

  Tensor out(os);
  {
    float* od = out.mutable_data().data();
    const i64 out_block = axis_total * inner;
    i64 offset = 0;
    for (const auto& t : xs) {
      const i64 blk = t.dim(axis) * inner;
      const float* td = t.data().data();
      for (i64 o = 0; o < outer; ++o)
        std::copy(td + o * blk, td + (o + 1) * blk, od + o * out_block + offset);
      offset += blk;
    }
  }

  bool any = false;
  for (const auto& t : xs) any = any || t.tracked();
  if (Tape::current() && any) {
    OpRecorder rec(out);
    std::vector<Tensor> ts = xs;
    Tensor to = out;
    rec.set([ts, to, outer, inner, axis_total, axis]() mutable {
      if (!to.grad_filled()) return;
      const float* g = to.grad().data();
      const i64 out_block = axis_total * inner;
      i64 offset = 0;
      for (auto& t : ts) {
        const i64 blk = t.dim(axis) * inner;
        if (t.tracked()) {
          auto acc = t.grad_accum();
          for (i64 o = 0; o < outer; ++o) {
            const float* src = g + o * out_block + offset;
            float* dst = acc.data() + o * blk;
            for (i64 i = 0; i < blk; ++i) dst[i] += src[i];
          }
        }
        offset += blk;
      }
    });
  }
  return out;
}

std::vector<Tensor> split(const Tensor& x, const std::vector<std::int64_t>& sizes, int axis) {
  const int r = x.rank();
  if (axis < 0 || axis >= r) throw DimensionError("split axis out of range");
  i64 total = 0;
  for (auto s : sizes) total += s;
  if (total != x.dim(axis)) {
    throw DimensionError("split sizes sum " + std::to_string(total) + " != axis size " +
                         std::to_string(x.dim(axis)));
  }
  i64 outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= x.dim(d);
  for (int d = axis + 1; d < r; ++d) inner *= x.dim(d);
  const i64 in_block = x.dim(axis) * inner;

  std::vector<Tensor> outs;
  i64 offset = 0;
  for (auto sz : sizes) {
    Shape os = x.shape();
    os[static_cast<std::size_t>(axis)] = sz;
    Tensor out(os);
    const i64 blk = sz * inner;
    const float* xd = x.data().data();
    float* od = out.mutable_data().data();
    for (i64 o = 0; o < outer; ++o)
      std::copy(xd + o * in_block + offset, xd + o * in_block + offset + blk, od + o * blk);

    if (recording({&x})) {
      OpRecorder rec(out);
      Tensor tx = x, to = out;
      const i64 off = offset;
      rec.set([tx, to, off, outer, inner, in_block]() mutable {
        if (!to.grad_filled() || !tx.tracked()) return;
        const float* g = to.grad().data();
        auto acc = tx.grad_accum();
        const i64 blk = to.numel() / outer;
        for (i64 o = 0; o < outer; ++o) {
          float* dst = acc.data() + o * in_block + off;
          const float* src = g + o * blk;
          for (i64 i = 0; i < blk; ++i) dst[i] += src[i];
        }
      });
    }
    outs.push_back(std::move(out));
    offset += sz * inner;
  }
  return outs;
}

namespace {

enum class Elem { add, sub, mul, div };

Tensor elementwise(const Tensor& a, const Tensor& b, Elem op) {
  if (a.shape() != b.shape()) {
    throw DimensionError("elementwise shape mismatch: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
  Tensor out(a.shape());
  const float* ad = a.data().data();
  const float* bd = b.data().data();
  float* od = out.mutable_data().data();
  const i64 n = a.numel();
  switch (op) {
    case Elem::add:
      for (i64 i = 0; i < n; ++i) od[i] = ad[i] + bd[i];
      break;
    case Elem::sub:
      for (i64 i = 0; i < n; ++i) od[i] = ad[i] - bd[i];
      break;
    case Elem::mul:
      for (i64 i = 0; i < n; ++i) od[i] = ad[i] * bd[i];
      break;
    case Elem::div:
      for (i64 i = 0; i < n; ++i) od[i] = ad[i] / bd[i];
      break;
  }

  if (recording({&a, &b})) {
    OpRecorder rec(out);
    Tensor ta = a, tb = b, to = out;
    rec.set([ta, tb, to, op]() mutable {
      if (!to.grad_filled()) return;
      const float* g = to.grad().data();
      const float* ad = ta.data().data();
      const float* bd = tb.data().data();
      const i64 n = ta.numel();
      if (ta.tracked()) {
        auto acc = ta.grad_accum();
        for (i64 i = 0; i < n; ++i) {
          switch (op) {
            case Elem::add:
            case Elem::sub:
              acc[static_cast<std::size_t>(i)] += g[i];
              break;
            case Elem::mul:
              acc[static_cast<std::size_t>(i)] += g[i] * bd[i];
              break;
            case Elem::div:
              acc[static_cast<std::size_t>(i)] += g[i] / bd[i];
              break;
          }
        }
      }
      if (tb.tracked()) {
        auto acc = tb.grad_accum();
        for (i64 i = 0; i < n; ++i) {
          switch (op) {
            case Elem::add:
              acc[static_cast<std::size_t>(i)] += g[i];
              break;
            case Elem::sub:
              acc[static_cast<std::size_t>(i)] -= g[i];
              break;
            case Elem::mul:
              acc[static_cast<std::size_t>(i)] += g[i] * ad[i];
              break;
            case Elem::div:
              acc[static_cast<std::size_t>(i)] -=
                  static_cast<float>(static_cast<double>(g[i]) * ad[i] / (static_cast<double>(bd[i]) * bd[i]));
              break;
          }
        }
      }
    });
  }
  return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return elementwise(a, b, Elem::add); }
Tensor sub(const Tensor& a, const Tensor& b) { return elementwise(a, b, Elem::sub); }
Tensor mul(const Tensor& a, const Tensor& b) { return elementwise(a, b, Elem::mul); }
Tensor divide(const Tensor& a, const Tensor& b) { return elementwise(a, b, Elem::div); }

Tensor scale(const Tensor& x, float s) {
  Tensor out(x.shape());
  const float* xd = x.data().data();
  float* od = out.mutable_data().data();
  const i64 n = x.numel();
  for (i64 i = 0; i < n; ++i) od[i] = xd[i] * s;
  if (recording({&x})) {
    OpRecorder rec(out);
    Tensor tx = x, to = out;
    rec.set([tx, to, s]() mutable {
      if (!to.grad_filled() || !tx.tracked()) return;
      const float* g = to.grad().data();
      auto acc = tx.grad_accum();
      const i64 n = tx.numel();
      for (i64 i = 0; i < n; ++i) acc[static_cast<std::size_t>(i)] += g[i] * s;
    });
  }
  return out;
}

Tensor add_scalar(const Tensor& x, float c) {
  Tensor out(x.shape());
  const float* xd = x.data().data();
  float* od = out.mutable_data().data();
  const i64 n = x.numel();
  for (i64 i = 0; i < n; ++i) od[i] = xd[i] + c;
  if (recording({&x})) {
    OpRecorder rec(out);
    Tensor tx = x, to = out;
    rec.set([tx, to]() mutable {
      if (!to.grad_filled() || !tx.tracked()) return;
      const float* g = to.grad().data();
      auto acc = tx.grad_accum();
      const i64 n = tx.numel();
      for (i64 i = 0; i < n; ++i) acc[static_cast<std::size_t>(i)] += g[i];
    });
  }
  return out;
}

Tensor log_eps(const Tensor& x, float eps) {
  Tensor out(x.shape());
  const float* xd = x.data().data();
  float* od = out.mutable_data().data();
  const i64 n = x.numel();
  for (i64 i = 0; i < n; ++i) od[i] = static_cast<float>(std::log(static_cast<double>(xd[i]) + eps));
  if (recording({&x})) {
    OpRecorder rec(out);
    Tensor tx = x, to = out;
    rec.set([tx, to, eps]() mutable {
      if (!to.grad_filled() || !tx.tracked()) return;
      const float* g = to.grad().data();
      const float* xd = tx.data().data();
      auto acc = tx.grad_accum();
      const i64 n = tx.numel();
      for (i64 i = 0; i < n; ++i)
        acc[static_cast<std::size_t>(i)] +=
            static_cast<float>(static_cast<double>(g[i]) / (static_cast<double>(xd[i]) + eps));
    });
  }
  return out;
}

Tensor add_rowvec(const Tensor& x, const Tensor& b) {
  if (x.rank() != 2 || b.rank() != 1 || b.dim(0) != x.dim(1)) {
    throw DimensionError("add_rowvec shape mismatch: " + shape_str(x.shape()) + " + " +
                         shape_str(b.shape()));
  }
  const i64 n = x.dim(0), c = x.dim(1);
  Tensor out(x.shape());
  {
    const float* xd = x.data().data();
    const float* bd = b.data().data();
    float* od = out.mutable_data().data();
    for (i64 i = 0; i < n; ++i)
      for (i64 j = 0; j < c; ++j) od[i * c + j] = xd[i * c + j] + bd[j];
  }
  if (recording({&x, &b})) {
    OpRecorder rec(out);
    Tensor tx = x, tb = b, to = out;
    rec.set([tx, tb, to, n, c]() mutable {
      if (!to.grad_filled()) return;
      const float* g = to.grad().data();
      if (tx.tracked()) {
        auto acc = tx.grad_accum();
        const i64 total = n * c;
        for (i64 i = 0; i < total; ++i) acc[static_cast<std::size_t>(i)] += g[i];
      }
      if (tb.tracked()) {
        std::vector<double> db(static_cast<std::size_t>(c), 0.0);
        for (i64 i = 0; i < n; ++i)
          for (i64 j = 0; j < c; ++j) db[static_cast<std::size_t>(j)] += g[i * c + j];
        add_into(tb.grad_accum(), db);
      }
    });
  }
  return out;
}

namespace {

Tensor channel_broadcast(const Tensor& x, const Tensor& v, bool is_mul) {
  if (x.rank() != 3 || v.rank() != 1 || v.dim(0) != x.dim(0)) {
    throw DimensionError("channel broadcast shape mismatch: " + shape_str(x.shape()) + " with " +
                         shape_str(v.shape()));
  }
  const i64 c = x.dim(0), hw = x.dim(1) * x.dim(2);
  Tensor out(x.shape());
  {
    const float* xd = x.data().data();
    const float* vd = v.data().data();
    float* od = out.mutable_data().data();
    for (i64 ch = 0; ch < c; ++ch) {
      const float s = vd[ch];
      for (i64 i = 0; i < hw; ++i)
        od[ch * hw + i] = is_mul ? xd[ch * hw + i] * s : xd[ch * hw + i] + s;
    }
  }
  if (recording({&x, &v})) {
    OpRecorder rec(out);
    Tensor tx = x, tv = v, to = out;
    rec.set([tx, tv, to, c, hw, is_mul]() mutable {
      if (!to.grad_filled()) return;
      const float* g = to.grad().data();
      const float* xd = tx.data().data();
      const float* vd = tv.data().data();
      if (tx.tracked()) {
        auto acc = tx.grad_accum();
        for (i64 ch = 0; ch < c; ++ch) {
          const float s = vd[ch];
          for (i64 i = 0; i < hw; ++i)
            acc[static_cast<std::size_t>(ch * hw + i)] += is_mul ? g[ch * hw + i] * s : g[ch * hw + i];
        }
      }
      if (tv.tracked()) {
        std::vector<double> dv(static_cast<std::size_t>(c), 0.0);
        for (i64 ch = 0; ch < c; ++ch) {
          double s = 0.0;
          for (i64 i = 0; i < hw; ++i)
            s += is_mul ? static_cast<double>(g[ch * hw + i]) * xd[ch * hw + i] : g[ch * hw + i];
          dv[static_cast<std::size_t>(ch)] = s;
        }
        add_into(tv.grad_accum(), dv);
      }
    });
  }
  return out;
}

}  // namespace

Tensor mul_channel(const Tensor& x, const Tensor& s) { return channel_broadcast(x, s, true); }
Tensor add_channel(const Tensor& x, const Tensor& b) { return channel_broadcast(x, b, false); }

Tensor div_by_col(const Tensor& x, const Tensor& d, float eps) {
  if (x.rank() != 2 || d.rank() != 2 || d.dim(0) != x.dim(0) || d.dim(1) != 1) {
    throw DimensionError("div_by_col shape mismatch: " + shape_str(x.shape()) + " / " +
                         shape_str(d.shape()));
  }
  const i64 n = x.dim(0), c = x.dim(1);
  Tensor out(x.shape());
  {
    const float* xd = x.data().data();
    const float* dd = d.data().data();
    float* od = out.mutable_data().data();
    for (i64 i = 0; i < n; ++i) {
      const double denom = static_cast<double>(dd[i]) + eps;
      for (i64 j = 0; j < c; ++j)
        od[i * c + j] = static_cast<float>(xd[i * c + j] / denom);
    }
  }
  if (recording({&x, &d})) {
    OpRecorder rec(out);
    Tensor tx = x, td = d, to = out;
    rec.set([tx, td, to, n, c, eps]() mutable {
      if (!to.grad_filled()) return;
      const float* g = to.grad().data();
      const float* xd = tx.data().data();
      const float* dd = td.data().data();
      if (tx.tracked()) {
        auto acc = tx.grad_accum();
        for (i64 i = 0; i < n; ++i) {
          const double denom = static_cast<double>(dd[i]) + eps;
          for (i64 j = 0; j < c; ++j)
            acc[static_cast<std::size_t>(i * c + j)] += static_cast<float>(g[i * c + j] / denom);
        }
      }
      if (td.tracked()) {
        auto acc = td.grad_accum();
        for (i64 i = 0; i < n; ++i) {
          const double denom = static_cast<double>(dd[i]) + eps;
          double s = 0.0;
          for (i64 j = 0; j < c; ++j)
            s += static_cast<double>(g[i * c + j]) * xd[i * c + j];
          acc[static_cast<std::size_t>(i)] -= static_cast<float>(s / (denom * denom));
        }
      }
    });
  }
  return out;
}

Tensor sum_all(const Tensor& x) {
  Tensor out(Shape{1});
  const float* xd = x.data().data();
  double s = 0.0;
  const i64 n = x.numel();
  for (i64 i = 0; i < n; ++i) s += xd[i];
  out.mutable_data()[0] = static_cast<float>(s);
  if (recording({&x})) {
    OpRecorder rec(out);
    Tensor tx = x, to = out;
    rec.set([tx, to]() mutable {
      if (!to.grad_filled() || !tx.tracked()) return;
      const float g = to.grad()[0];
      auto acc = tx.grad_accum();
      const i64 n = tx.numel();
      for (i64 i = 0; i < n; ++i) acc[static_cast<std::size_t>(i)] += g;
    });
  }
  return out;
}

Tensor mean_all(const Tensor& x) {
  return scale(sum_all(x), 1.0f / static_cast<float>(x.numel()));
}

namespace {

// src index of each output element for the block rearrangements
void check_grid(const Tensor& x, int h, int w) {
  if (x.rank() != 2 || x.dim(0) != static_cast<i64>(h) * w) {
    throw DimensionError("token tensor " + shape_str(x.shape()) + " does not cover a " +
                         std::to_string(h) + "x" + std::to_string(w) + " grid");
  }
}

Tensor index_map_op(const Tensor& x, Shape out_shape, std::vector<i64> src_of_out) {
  Tensor out(std::move(out_shape));
  const float* xd = x.data().data();
  float* od = out.mutable_data().data();
  const i64 n = out.numel();
  for (i64 i = 0; i < n; ++i) od[i] = xd[src_of_out[static_cast<std::size_t>(i)]];
  if (recording({&x})) {
    OpRecorder rec(out);
    Tensor tx = x, to = out;
    auto map = std::make_shared<std::vector<i64>>(std::move(src_of_out));
    rec.set([tx, to, map]() mutable {
      if (!to.grad_filled() || !tx.tracked()) return;
      const float* g = to.grad().data();
      auto acc = tx.grad_accum();
      const i64 n = to.numel();
      for (i64 i = 0; i < n; ++i) acc[static_cast<std::size_t>((*map)[static_cast<std::size_t>(i)])] += g[i];
    });
  }
  return out;
}

}  // namespace

Tensor space_to_depth(const Tensor& x, int h, int w, int block) {
  check_grid(x, h, w);
  if (block < 1 || h % block != 0 || w % block != 0) {
    throw DimensionError("space_to_depth block " + std::to_string(block) + " must divide grid " +
                         std::to_string(h) + "x" + std::to_string(w));
  }
  const i64 c = x.dim(1), b = block;
  const i64 ho = h / b, wo = w / b;
  std::vector<i64> map(static_cast<std::size_t>(ho * wo * b * b * c));
  i64 out = 0;
  for (i64 ty = 0; ty < ho; ++ty)
    for (i64 tx = 0; tx < wo; ++tx)
      for (i64 dy = 0; dy < b; ++dy)
        for (i64 dx = 0; dx < b; ++dx) {
          const i64 token = (ty * b + dy) * w + (tx * b + dx);
          for (i64 ch = 0; ch < c; ++ch) map[static_cast<std::size_t>(out++)] = token * c + ch;
        }
  return index_map_op(x, Shape{ho * wo, b * b * c}, std::move(map));
}

Tensor depth_to_space(const Tensor& x, int h, int w, int block) {
  check_grid(x, h, w);
  const i64 c = x.dim(1), b = block;
  if (block < 1 || c % (b * b) != 0) {
    throw DimensionError("depth_to_space requires channels divisible by block^2, got " +
                         shape_str(x.shape()) + " block " + std::to_string(block));
  }
  const i64 co = c / (b * b);
  const i64 ho = static_cast<i64>(h) * b, wo = static_cast<i64>(w) * b;
  std::vector<i64> map(static_cast<std::size_t>(ho * wo * co));
  i64 out = 0;
  for (i64 y = 0; y < ho; ++y)
    for (i64 xcol = 0; xcol < wo; ++xcol) {
      const i64 sy = y / b, dy = y % b;
      const i64 sx = xcol / b, dx = xcol % b;
      const i64 token = sy * w + sx;
      const i64 group = dy * b + dx;
      for (i64 ch = 0; ch < co; ++ch)
        map[static_cast<std::size_t>(out++)] = token * c + group * co + ch;
    }
  return index_map_op(x, Shape{ho * wo, co}, std::move(map));
}

Tensor tokens_to_grid(const Tensor& x, int h, int w) {
  check_grid(x, h, w);
  return reshape(permute(x, {1, 0}), Shape{x.dim(1), h, w});
}

Tensor grid_to_tokens(const Tensor& x) {
  if (x.rank() != 3) throw DimensionError("grid_to_tokens requires [CxHxW], got " + shape_str(x.shape()));
  return permute(reshape(x, Shape{x.dim(0), x.dim(1) * x.dim(2)}), {1, 0});
}

IntTensor argmax_channel(const Tensor& logits) {
  if (logits.rank() != 3) {
    throw DimensionError("argmax_channel requires [IxHxW], got " + shape_str(logits.shape()));
  }
  const i64 cls = logits.dim(0), hw = logits.dim(1) * logits.dim(2);
  IntTensor out(Shape{logits.dim(1), logits.dim(2)});
  const float* ld = logits.data().data();
  for (i64 p = 0; p < hw; ++p) {
    i64 best = 0;
    float bv = ld[p];
    for (i64 i = 1; i < cls; ++i) {
      const float v = ld[i * hw + p];
      if (v > bv) {
        bv = v;
        best = i;
      }
    }
    out.data[static_cast<std::size_t>(p)] = static_cast<std::int32_t>(best);
  }
  return out;
}

Tensor one_hot(const IntTensor& labels, int num_classes) {
  const i64 n = labels.numel();
  Tensor out(Shape{n, num_classes});
  float* od = out.mutable_data().data();
  for (i64 i = 0; i < n; ++i) {
    const auto v = labels.data[static_cast<std::size_t>(i)];
    if (v < 0 || v >= num_classes) {
      throw DataError("label " + std::to_string(v) + " at index " + std::to_string(i) +
                      " outside [0, " + std::to_string(num_classes) + ")");
    }
    od[i * num_classes + v] = 1.0f;
  }
  return out;
}

}  // namespace lam

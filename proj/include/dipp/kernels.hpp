#pragma once

// Forward kernels shared by the differentiable ops and the benchmark.
// Each kernel has a serial reference in `serial::` and an OpenMP variant in
// `omp::`; both write results by output index so they agree bit for bit,
// except the grouped ragged attention which is checked against its serial
// reference to a tolerance.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "dipp/error.hpp"

namespace dipp::kernels {

// One attention row: `n_keys` keys/values with row stride `stride`, optional
// validity mask. Writes C outputs and heads*n_keys weights (masked weights are
// exactly 0). A row with no valid key yields zeros.
template <class T>
void attend_row(const T* q, const T* keys, const T* vals, std::size_t stride, std::size_t n_keys,
                const std::uint8_t* mask, std::size_t C, std::size_t heads, T* out, T* weights) {
  const std::size_t d = C / heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(d));
  std::fill(out, out + C, T(0));
  for (std::size_t h = 0; h < heads; ++h) {
    T* w = weights + h * n_keys;
    T max_logit = -std::numeric_limits<T>::infinity();
    bool any = false;
    for (std::size_t j = 0; j < n_keys; ++j) {
      if (mask && !mask[j]) {
        w[j] = T(0);
        continue;
      }
      const T* kr = keys + j * stride + h * d;
      const T* qr = q + h * d;
      T s = 0;
      for (std::size_t c = 0; c < d; ++c) s += qr[c] * kr[c];
      s *= scale;
      w[j] = s;
      max_logit = any ? std::max(max_logit, s) : s;
      any = true;
    }
    if (!any) continue;
    T total = 0;
    for (std::size_t j = 0; j < n_keys; ++j) {
      if (mask && !mask[j]) continue;
      w[j] = std::exp(w[j] - max_logit);
      total += w[j];
    }
    T* o = out + h * d;
    for (std::size_t j = 0; j < n_keys; ++j) {
      if (mask && !mask[j]) continue;
      w[j] /= total;
      const T* vr = vals + j * stride + h * d;
      for (std::size_t c = 0; c < d; ++c) o[c] += w[j] * vr[c];
    }
  }
}

// Dense batched attention: q [B,Lq,C], k/v [B,Lk,C], mask [B,Lq,Lk] or empty.
// out [B,Lq,C], weights [B,Lq,heads,Lk].
template <class T>
struct DenseAttentionArgs {
  std::span<const T> q, k, v;
  std::span<const std::uint8_t> mask;
  std::size_t batch, lq, lk, channels, heads;
};

namespace serial {

template <class T>
void dense_attention(const DenseAttentionArgs<T>& a, std::span<T> out, std::span<T> weights) {
  const std::size_t C = a.channels;
  for (std::size_t b = 0; b < a.batch; ++b) {
    for (std::size_t i = 0; i < a.lq; ++i) {
      const std::size_t row = b * a.lq + i;
      attend_row(a.q.data() + row * C, a.k.data() + b * a.lk * C, a.v.data() + b * a.lk * C, C,
                 a.lk, a.mask.empty() ? nullptr : a.mask.data() + row * a.lk, C, a.heads,
                 out.data() + row * C, weights.data() + row * a.heads * a.lk);
    }
  }
}

}  // namespace serial

namespace omp {

template <class T>
void dense_attention(const DenseAttentionArgs<T>& a, std::span<T> out, std::span<T> weights) {
  const std::size_t C = a.channels;
  const auto rows = static_cast<std::ptrdiff_t>(a.batch * a.lq);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t r = 0; r < rows; ++r) {
    const auto row = static_cast<std::size_t>(r);
    const std::size_t b = row / a.lq;
    attend_row(a.q.data() + row * C, a.k.data() + b * a.lk * C, a.v.data() + b * a.lk * C, C, a.lk,
               a.mask.empty() ? nullptr : a.mask.data() + row * a.lk, C, a.heads,
               out.data() + row * C, weights.data() + row * a.heads * a.lk);
  }
}

}  // namespace omp

// Ragged attention: query i attends keys [offsets[i], offsets[i+1]) of k/v.
// Weights use CSR layout: query i, head h, key j at offsets[i]*heads + h*n_i + j.
template <class T>
struct RaggedAttentionArgs {
  std::span<const T> q, k, v;
  std::span<const std::size_t> offsets;  // size lq+1
  std::size_t channels, heads;
  std::size_t lq() const { return offsets.size() - 1; }
};

struct GroupedStats {
  std::size_t padded_elements = 0;    // sum over groups of members * upper bound
  std::size_t naive_elements = 0;     // non-empty queries * largest bound
  std::size_t peak_buffer_bytes = 0;  // largest padded K+V+mask buffer alive at once
  std::size_t naive_buffer_bytes = 0;
};

// Index of the interval (N_i, N_{i+1}] holding `count`; count must be >= 1.
inline std::size_t interval_of(std::size_t count, std::span<const std::size_t> bounds) {
  for (std::size_t i = 0; i + 1 < bounds.size(); ++i) {
    if (count > bounds[i] && count <= bounds[i + 1]) return i;
  }
  throw Error(ErrorCategory::Argument,
              "neighbor count " + std::to_string(count) + " exceeds the largest interval bound");
}

inline void check_bounds(std::span<const std::size_t> bounds) {
  if (bounds.size() < 2 || bounds[0] != 0) {
    throw Error(ErrorCategory::Config, "interval boundaries must start at 0 and have >= 2 entries");
  }
  for (std::size_t i = 1; i < bounds.size(); ++i) {
    if (bounds[i] <= bounds[i - 1]) {
      throw Error(ErrorCategory::Config, "interval boundaries must be strictly increasing");
    }
  }
}

namespace serial {

// Unbatched reference: one query at a time over exactly its own keys.
template <class T>
void ragged_attention(const RaggedAttentionArgs<T>& a, std::span<T> out, std::span<T> weights) {
  const std::size_t C = a.channels;
  for (std::size_t i = 0; i < a.lq(); ++i) {
    const std::size_t o = a.offsets[i];
    const std::size_t n = a.offsets[i + 1] - o;
    if (n == 0) {
      std::fill_n(out.data() + i * C, C, T(0));
      continue;
    }
    attend_row(a.q.data() + i * C, a.k.data() + o * C, a.v.data() + o * C, C, n, nullptr, C,
               a.heads, out.data() + i * C, weights.data() + o * a.heads);
  }
}

}  // namespace serial

namespace omp {

// Grouped sparse attention: queries are bucketed by key count into intervals,
// each bucket padded to its upper bound and attended with the padding masked.
template <class T>
GroupedStats grouped_ragged_attention(const RaggedAttentionArgs<T>& a,
                                      std::span<const std::size_t> bounds, std::span<T> out,
                                      std::span<T> weights) {
  check_bounds(bounds);
  const std::size_t C = a.channels;
  const std::size_t heads = a.heads;
  const std::size_t n_groups = bounds.size() - 1;
  std::vector<std::vector<std::size_t>> members(n_groups);
  GroupedStats stats;
  std::size_t non_empty = 0;
  for (std::size_t i = 0; i < a.lq(); ++i) {
    const std::size_t n = a.offsets[i + 1] - a.offsets[i];
    if (n == 0) {
      std::fill_n(out.data() + i * C, C, T(0));
      continue;
    }
    members[interval_of(n, bounds)].push_back(i);
    ++non_empty;
  }
  const std::size_t per_slot = 2 * C * sizeof(T) + sizeof(std::uint8_t);
  stats.naive_elements = non_empty * bounds.back();
  stats.naive_buffer_bytes = stats.naive_elements * per_slot;

  std::vector<T> kbuf, vbuf, wbuf, obuf;
  std::vector<std::uint8_t> mbuf;
  for (std::size_t g = 0; g < n_groups; ++g) {
    const auto& idx = members[g];
    if (idx.empty()) continue;
    const std::size_t pad = bounds[g + 1];
    const std::size_t m = idx.size();
    stats.padded_elements += m * pad;
    stats.peak_buffer_bytes = std::max(stats.peak_buffer_bytes, m * pad * per_slot);
    kbuf.assign(m * pad * C, T(0));
    vbuf.assign(m * pad * C, T(0));
    mbuf.assign(m * pad, 0);
    wbuf.assign(m * heads * pad, T(0));
    obuf.assign(m * C, T(0));
    const auto mm = static_cast<std::ptrdiff_t>(m);
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t r = 0; r < mm; ++r) {
      const auto slot = static_cast<std::size_t>(r);
      const std::size_t qi = idx[slot];
      const std::size_t o = a.offsets[qi];
      const std::size_t n = a.offsets[qi + 1] - o;
      std::copy_n(a.k.data() + o * C, n * C, kbuf.data() + slot * pad * C);
      std::copy_n(a.v.data() + o * C, n * C, vbuf.data() + slot * pad * C);
      std::fill_n(mbuf.data() + slot * pad, n, std::uint8_t{1});
      attend_row(a.q.data() + qi * C, kbuf.data() + slot * pad * C, vbuf.data() + slot * pad * C,
                 C, pad, mbuf.data() + slot * pad, C, heads, obuf.data() + slot * C,
                 wbuf.data() + slot * heads * pad);
    }
    // Scatter back in query order.
    for (std::size_t slot = 0; slot < m; ++slot) {
      const std::size_t qi = idx[slot];
      const std::size_t o = a.offsets[qi];
      const std::size_t n = a.offsets[qi + 1] - o;
      std::copy_n(obuf.data() + slot * C, C, out.data() + qi * C);
      for (std::size_t h = 0; h < heads; ++h) {
        std::copy_n(wbuf.data() + (slot * heads + h) * pad, n, weights.data() + o * heads + h * n);
      }
    }
  }
  return stats;
}

}  // namespace omp

// Bilinear tap over an H x W grid; integer coordinates hit cells exactly and
// any point outside [0,H-1] x [0,W-1] is invalid (samples to zero).
struct BilinearTap {
  bool valid = false;
  std::size_t r0 = 0, r1 = 0, c0 = 0, c1 = 0;
  double fr = 0, fc = 0;  // fractional offsets from r0/c0

  double w00() const { return (1 - fr) * (1 - fc); }
  double w01() const { return (1 - fr) * fc; }
  double w10() const { return fr * (1 - fc); }
  double w11() const { return fr * fc; }
};

inline BilinearTap bilinear_tap(double u, double v, std::size_t H, std::size_t W) {
  BilinearTap t;
  if (!(u >= 0.0 && v >= 0.0 && u <= static_cast<double>(H - 1) &&
        v <= static_cast<double>(W - 1))) {
    return t;
  }
  t.valid = true;
  const double fu = std::floor(u);
  const double fv = std::floor(v);
  t.r0 = static_cast<std::size_t>(fu);
  t.c0 = static_cast<std::size_t>(fv);
  t.fr = u - fu;
  t.fc = v - fv;
  t.r1 = std::min(t.r0 + 1, H - 1);
  t.c1 = std::min(t.c0 + 1, W - 1);
  return t;
}

struct SamplePoint {
  std::size_t map = 0;  // index into the leading batch axis
  double u = 0;         // row coordinate
  double v = 0;         // column coordinate
};

// maps [B,H,W,C] -> out [P,C]
template <class T>
void bilinear_row(std::span<const T> maps, std::size_t H, std::size_t W, std::size_t C,
                  const SamplePoint& p, T* out) {
  const auto t = bilinear_tap(p.u, p.v, H, W);
  std::fill(out, out + C, T(0));
  if (!t.valid) return;
  const T* base = maps.data() + p.map * H * W * C;
  const T* a = base + (t.r0 * W + t.c0) * C;
  const T* b = base + (t.r0 * W + t.c1) * C;
  const T* c = base + (t.r1 * W + t.c0) * C;
  const T* d = base + (t.r1 * W + t.c1) * C;
  const T wa = static_cast<T>(t.w00()), wb = static_cast<T>(t.w01());
  const T wc = static_cast<T>(t.w10()), wd = static_cast<T>(t.w11());
  for (std::size_t ch = 0; ch < C; ++ch) out[ch] = wa * a[ch] + wb * b[ch] + wc * c[ch] + wd * d[ch];
}

namespace serial {

template <class T>
void bilinear_gather(std::span<const T> maps, std::size_t H, std::size_t W, std::size_t C,
                     std::span<const SamplePoint> pts, std::span<T> out) {
  for (std::size_t i = 0; i < pts.size(); ++i) bilinear_row(maps, H, W, C, pts[i], out.data() + i * C);
}

}  // namespace serial

namespace omp {

template <class T>
void bilinear_gather(std::span<const T> maps, std::size_t H, std::size_t W, std::size_t C,
                     std::span<const SamplePoint> pts, std::span<T> out) {
  const auto n = static_cast<std::ptrdiff_t>(pts.size());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    bilinear_row(maps, H, W, C, pts[static_cast<std::size_t>(i)],
                 out.data() + static_cast<std::size_t>(i) * C);
  }
}

}  // namespace omp

enum class PadMode { Zeros, Replicate };

// Square-kernel, stride-1, same-size convolution. x [B,H,W,Cin],
// w [K,K,Cin,Cout], bias [Cout] -> y [B,H,W,Cout].
struct ConvGeometry {
  std::size_t batch, height, width, cin, cout, ksize;
  PadMode pad;
};

// Source pixel for output (r,c) and tap (dr,dc), or -1 when it falls in
// zero padding.
inline std::ptrdiff_t conv_source(const ConvGeometry& g, std::size_t r, std::size_t c,
                                  std::size_t dr, std::size_t dc) {
  const auto half = static_cast<std::ptrdiff_t>(g.ksize / 2);
  auto rr = static_cast<std::ptrdiff_t>(r) + static_cast<std::ptrdiff_t>(dr) - half;
  auto cc = static_cast<std::ptrdiff_t>(c) + static_cast<std::ptrdiff_t>(dc) - half;
  const auto H = static_cast<std::ptrdiff_t>(g.height);
  const auto W = static_cast<std::ptrdiff_t>(g.width);
  if (g.pad == PadMode::Replicate) {
    rr = std::clamp<std::ptrdiff_t>(rr, 0, H - 1);
    cc = std::clamp<std::ptrdiff_t>(cc, 0, W - 1);
  } else if (rr < 0 || cc < 0 || rr >= H || cc >= W) {
    return -1;
  }
  return rr * W + cc;
}

template <class T>
void conv_row(const ConvGeometry& g, std::span<const T> x, std::span<const T> w,
              std::span<const T> bias, std::size_t b, std::size_t r, std::span<T> y) {
  const std::size_t plane = g.height * g.width;
  for (std::size_t c = 0; c < g.width; ++c) {
    T* yo = y.data() + ((b * plane) + r * g.width + c) * g.cout;
    for (std::size_t o = 0; o < g.cout; ++o) yo[o] = bias.empty() ? T(0) : bias[o];
    for (std::size_t dr = 0; dr < g.ksize; ++dr) {
      for (std::size_t dc = 0; dc < g.ksize; ++dc) {
        const auto src = conv_source(g, r, c, dr, dc);
        if (src < 0) continue;
        const T* xi = x.data() + (b * plane + static_cast<std::size_t>(src)) * g.cin;
        const T* wk = w.data() + (dr * g.ksize + dc) * g.cin * g.cout;
        for (std::size_t i = 0; i < g.cin; ++i) {
          const T xv = xi[i];
          if (xv == T(0)) continue;
          const T* wr = wk + i * g.cout;
          for (std::size_t o = 0; o < g.cout; ++o) yo[o] += xv * wr[o];
        }
      }
    }
  }
}

namespace serial {

template <class T>
void conv2d(const ConvGeometry& g, std::span<const T> x, std::span<const T> w,
            std::span<const T> bias, std::span<T> y) {
  for (std::size_t b = 0; b < g.batch; ++b)
    for (std::size_t r = 0; r < g.height; ++r) conv_row(g, x, w, bias, b, r, y);
}

}  // namespace serial

namespace omp {

template <class T>
void conv2d(const ConvGeometry& g, std::span<const T> x, std::span<const T> w,
            std::span<const T> bias, std::span<T> y) {
  const auto rows = static_cast<std::ptrdiff_t>(g.batch * g.height);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < rows; ++i) {
    const auto row = static_cast<std::size_t>(i);
    conv_row(g, x, w, bias, row / g.height, row % g.height, y);
  }
}

}  // namespace omp

}  // namespace dipp::kernels

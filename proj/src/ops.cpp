#include "dipp/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "dipp/parallel.hpp"

namespace dipp::ops {

using detail::Node;

namespace {

void require_same(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

Node& parent(Node& n, std::size_t i) { return *n.parents[i]; }

bool wants(Node& n, std::size_t i) { return n.parents[i]->requires_grad; }

std::size_t last_dim(const Tensor& t) { return t.shape().back(); }

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same(a, b, "add");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) + b.at(i);
  return make_result("add", a.shape(), std::move(out), {a, b}, [](Node& self) {
    for (std::size_t p = 0; p < 2; ++p) {
      if (!wants(self, p)) continue;
      auto& g = parent(self, p).grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same(a, b, "sub");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) - b.at(i);
  return make_result("sub", a.shape(), std::move(out), {a, b}, [](Node& self) {
    if (wants(self, 0)) {
      auto& g = parent(self, 0).grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (wants(self, 1)) {
      auto& g = parent(self, 1).grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same(a, b, "mul");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) * b.at(i);
  return make_result("mul", a.shape(), std::move(out), {a, b}, [](Node& self) {
    const auto& da = parent(self, 0).data;
    const auto& db = parent(self, 1).data;
    if (wants(self, 0)) {
      auto& g = parent(self, 0).grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * db[i];
    }
    if (wants(self, 1)) {
      auto& g = parent(self, 1).grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * da[i];
    }
  });
}

Tensor scale(const Tensor& a, double s) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) * s;
  return make_result("scale", a.shape(), std::move(out), {a}, [s](Node& self) {
    auto& g = parent(self, 0).grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * s;
  });
}

Tensor add_scalar(const Tensor& a, double s) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) + s;
  return make_result("add_scalar", a.shape(), std::move(out), {a}, [](Node& self) {
    auto& g = parent(self, 0).grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor add_const(const Tensor& a, std::span<const double> c) {
  if (c.size() != a.numel()) throw ShapeError("add_const: size mismatch");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) + c[i];
  return make_result("add_const", a.shape(), std::move(out), {a}, [](Node& self) {
    auto& g = parent(self, 0).grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor add_bias(const Tensor& x, const Tensor& b) {
  const std::size_t C = last_dim(x);
  if (b.numel() != C) throw ShapeError("add_bias: bias length mismatch");
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.at(i) + b.at(i % C);
  return make_result("add_bias", x.shape(), std::move(out), {x, b}, [C](Node& self) {
    if (wants(self, 0)) {
      auto& g = parent(self, 0).grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (wants(self, 1)) {
      auto& g = parent(self, 1).grad_buffer();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % C] += self.grad[i];
    }
  });
}

Tensor relu(const Tensor& x) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.at(i) > 0 ? x.at(i) : 0.0;
  return make_result("relu", x.shape(), std::move(out), {x}, [](Node& self) {
    auto& g = parent(self, 0).grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (self.data[i] > 0) g[i] += self.grad[i];
    }
  });
}

Tensor sigmoid(const Tensor& x) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-x.at(i)));
  return make_result("sigmoid", x.shape(), std::move(out), {x}, [](Node& self) {
    auto& g = parent(self, 0).grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double s = self.data[i];
      g[i] += self.grad[i] * s * (1 - s);
    }
  });
}

namespace {

Tensor linear_impl(const Tensor& x, const Tensor& w, const Tensor* b) {
  if (w.rank() != 2) throw ShapeError("linear: weight must be rank 2");
  const std::size_t K = w.dim(0), N = w.dim(1);
  if (last_dim(x) != K) {
    throw ShapeError("linear: input " + shape_str(x.shape()) + " vs weight " + shape_str(w.shape()));
  }
  if (b && b->numel() != N) throw ShapeError("linear: bias length mismatch");
  const std::size_t M = x.numel() / K;
  Shape shape = x.shape();
  shape.back() = N;
  std::vector<double> out(M * N, 0.0);
  const auto xd = x.data();
  const auto wd = w.data();
  for (std::size_t m = 0; m < M; ++m) {
    double* o = out.data() + m * N;
    if (b) std::copy_n(b->data().data(), N, o);
    for (std::size_t k = 0; k < K; ++k) {
      const double xv = xd[m * K + k];
      if (xv == 0.0) continue;
      const double* wr = wd.data() + k * N;
      for (std::size_t n = 0; n < N; ++n) o[n] += xv * wr[n];
    }
  }
  std::vector<Tensor> parents{x, w};
  if (b) parents.push_back(*b);
  return make_result("linear", std::move(shape), std::move(out), std::move(parents),
                     [M, K, N](Node& self) {
                       const auto& xd = parent(self, 0).data;
                       const auto& wd = parent(self, 1).data;
                       const auto& g = self.grad;
                       if (wants(self, 0)) {
                         auto& gx = parent(self, 0).grad_buffer();
                         for (std::size_t m = 0; m < M; ++m) {
                           const double* gr = g.data() + m * N;
                           for (std::size_t k = 0; k < K; ++k) {
                             const double* wr = wd.data() + k * N;
                             double s = 0;
                             for (std::size_t n = 0; n < N; ++n) s += gr[n] * wr[n];
                             gx[m * K + k] += s;
                           }
                         }
                       }
                       if (wants(self, 1)) {
                         auto& gw = parent(self, 1).grad_buffer();
                         for (std::size_t m = 0; m < M; ++m) {
                           const double* gr = g.data() + m * N;
                           for (std::size_t k = 0; k < K; ++k) {
                             const double xv = xd[m * K + k];
                             if (xv == 0.0) continue;
                             double* gwr = gw.data() + k * N;
                             for (std::size_t n = 0; n < N; ++n) gwr[n] += xv * gr[n];
                           }
                         }
                       }
                       if (self.parents.size() > 2 && wants(self, 2)) {
                         auto& gb = parent(self, 2).grad_buffer();
                         for (std::size_t m = 0; m < M; ++m)
                           for (std::size_t n = 0; n < N; ++n) gb[n] += g[m * N + n];
                       }
                     });
}

}  // namespace

Tensor linear(const Tensor& x, const Tensor& w) { return linear_impl(x, w, nullptr); }
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) { return linear_impl(x, w, &b); }

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2) throw ShapeError("matmul: rank-2 operands required");
  return linear_impl(a, b, nullptr);
}

Tensor bmm(const Tensor& a, const Tensor& b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1)) {
    throw ShapeError("bmm: incompatible shapes " + shape_str(a.shape()) + " " + shape_str(b.shape()));
  }
  const std::size_t B = a.dim(0), M = a.dim(1), K = a.dim(2), N = b.dim(2);
  std::vector<double> out(B * M * N, 0.0);
  const auto ad = a.data();
  const auto bd = b.data();
  for (std::size_t bi = 0; bi < B; ++bi) {
    for (std::size_t m = 0; m < M; ++m) {
      double* o = out.data() + (bi * M + m) * N;
      for (std::size_t k = 0; k < K; ++k) {
        const double av = ad[(bi * M + m) * K + k];
        if (av == 0.0) continue;
        const double* br = bd.data() + (bi * K + k) * N;
        for (std::size_t n = 0; n < N; ++n) o[n] += av * br[n];
      }
    }
  }
  return make_result("bmm", {B, M, N}, std::move(out), {a, b}, [B, M, K, N](Node& self) {
    const auto& ad = parent(self, 0).data;
    const auto& bd = parent(self, 1).data;
    const auto& g = self.grad;
    if (wants(self, 0)) {
      auto& ga = parent(self, 0).grad_buffer();
      for (std::size_t bi = 0; bi < B; ++bi)
        for (std::size_t m = 0; m < M; ++m)
          for (std::size_t k = 0; k < K; ++k) {
            double s = 0;
            const double* gr = g.data() + (bi * M + m) * N;
            const double* br = bd.data() + (bi * K + k) * N;
            for (std::size_t n = 0; n < N; ++n) s += gr[n] * br[n];
            ga[(bi * M + m) * K + k] += s;
          }
    }
    if (wants(self, 1)) {
      auto& gb = parent(self, 1).grad_buffer();
      for (std::size_t bi = 0; bi < B; ++bi)
        for (std::size_t m = 0; m < M; ++m) {
          const double* gr = g.data() + (bi * M + m) * N;
          for (std::size_t k = 0; k < K; ++k) {
            const double av = ad[(bi * M + m) * K + k];
            if (av == 0.0) continue;
            double* gbr = gb.data() + (bi * K + k) * N;
            for (std::size_t n = 0; n < N; ++n) gbr[n] += av * gr[n];
          }
        }
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const std::size_t C = last_dim(x);
  if (C == 0) throw ShapeError("layer_norm: zero-length axis");
  if (gamma.numel() != C || beta.numel() != C) throw ShapeError("layer_norm: affine length mismatch");
  if (!(eps >= 0)) throw ArgumentError("layer_norm: eps must be non-negative");
  const std::size_t M = x.numel() / C;
  std::vector<double> out(x.numel());
  std::vector<double> xhat(x.numel());
  std::vector<double> inv_std(M);
  const auto xd = x.data();
  for (std::size_t m = 0; m < M; ++m) {
    const double* xr = xd.data() + m * C;
    double mu = 0;
    for (std::size_t c = 0; c < C; ++c) mu += xr[c];
    mu /= static_cast<double>(C);
    double var = 0;
    for (std::size_t c = 0; c < C; ++c) var += (xr[c] - mu) * (xr[c] - mu);
    var /= static_cast<double>(C);
    // A zero-variance row normalizes to zeros even when eps == 0.
    const double denom = var + eps;
    inv_std[m] = denom > 0 ? 1.0 / std::sqrt(denom) : 0.0;
    for (std::size_t c = 0; c < C; ++c) {
      xhat[m * C + c] = (xr[c] - mu) * inv_std[m];
      out[m * C + c] = xhat[m * C + c] * gamma.at(c) + beta.at(c);
    }
  }
  return make_result(
      "layer_norm", x.shape(), std::move(out), {x, gamma, beta},
      [M, C, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
        const auto& gam = parent(self, 1).data;
        const auto& g = self.grad;
        if (wants(self, 0)) {
          auto& gx = parent(self, 0).grad_buffer();
          for (std::size_t m = 0; m < M; ++m) {
            double mean_g = 0, mean_gx = 0;
            for (std::size_t c = 0; c < C; ++c) {
              const double gh = g[m * C + c] * gam[c];
              mean_g += gh;
              mean_gx += gh * xhat[m * C + c];
            }
            mean_g /= static_cast<double>(C);
            mean_gx /= static_cast<double>(C);
            for (std::size_t c = 0; c < C; ++c) {
              const double gh = g[m * C + c] * gam[c];
              gx[m * C + c] += inv_std[m] * (gh - mean_g - xhat[m * C + c] * mean_gx);
            }
          }
        }
        if (wants(self, 1)) {
          auto& gg = parent(self, 1).grad_buffer();
          for (std::size_t i = 0; i < g.size(); ++i) gg[i % C] += g[i] * xhat[i];
        }
        if (wants(self, 2)) {
          auto& gb = parent(self, 2).grad_buffer();
          for (std::size_t i = 0; i < g.size(); ++i) gb[i % C] += g[i];
        }
      });
}

Tensor softmax_last(const Tensor& x) {
  const std::size_t C = last_dim(x);
  const std::size_t M = x.numel() / C;
  std::vector<double> out(x.numel());
  for (std::size_t m = 0; m < M; ++m) {
    const double* xr = x.data().data() + m * C;
    const double mx = *std::max_element(xr, xr + C);
    double total = 0;
    for (std::size_t c = 0; c < C; ++c) total += (out[m * C + c] = std::exp(xr[c] - mx));
    for (std::size_t c = 0; c < C; ++c) out[m * C + c] /= total;
  }
  return make_result("softmax", x.shape(), std::move(out), {x}, [M, C](Node& self) {
    auto& gx = parent(self, 0).grad_buffer();
    for (std::size_t m = 0; m < M; ++m) {
      double dotp = 0;
      for (std::size_t c = 0; c < C; ++c) dotp += self.grad[m * C + c] * self.data[m * C + c];
      for (std::size_t c = 0; c < C; ++c)
        gx[m * C + c] += self.data[m * C + c] * (self.grad[m * C + c] - dotp);
    }
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel_of(shape) != x.numel()) {
    throw ShapeError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  return make_result("reshape", std::move(shape), std::move(out), {x}, [](Node& self) {
    auto& g = parent(self, 0).grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor swap01(const Tensor& x) {
  if (x.rank() < 2) throw ShapeError("swap01: rank >= 2 required");
  const std::size_t A = x.dim(0), B = x.dim(1);
  const std::size_t R = x.numel() / (A * B);
  Shape shape = x.shape();
  std::swap(shape[0], shape[1]);
  std::vector<double> out(x.numel());
  for (std::size_t a = 0; a < A; ++a)
    for (std::size_t b = 0; b < B; ++b)
      std::copy_n(x.data().data() + (a * B + b) * R, R, out.data() + (b * A + a) * R);
  return make_result("swap01", std::move(shape), std::move(out), {x}, [A, B, R](Node& self) {
    auto& g = parent(self, 0).grad_buffer();
    for (std::size_t a = 0; a < A; ++a)
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t r = 0; r < R; ++r) g[(a * B + b) * R + r] += self.grad[(b * A + a) * R + r];
  });
}

Tensor concat0(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat0: no inputs");
  Shape shape = parts[0].shape();
  std::size_t rows = 0;
  std::vector<std::size_t> sizes;
  for (const auto& p : parts) {
    if (p.rank() != shape.size() || !std::equal(p.shape().begin() + 1, p.shape().end(), shape.begin() + 1)) {
      throw ShapeError("concat0: trailing dims differ");
    }
    rows += p.dim(0);
    sizes.push_back(p.numel());
  }
  shape[0] = rows;
  std::vector<double> out;
  out.reserve(numel_of(shape));
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  return make_result("concat0", std::move(shape), std::move(out), parts, [sizes](Node& self) {
    std::size_t off = 0;
    for (std::size_t i = 0; i < sizes.size(); ++i) {
      if (wants(self, i)) {
        auto& g = parent(self, i).grad_buffer();
        for (std::size_t j = 0; j < sizes[i]; ++j) g[j] += self.grad[off + j];
      }
      off += sizes[i];
    }
  });
}

Tensor slice0(const Tensor& x, std::size_t begin, std::size_t end) {
  if (begin >= end || end > x.dim(0)) throw ShapeError("slice0: bad range");
  const std::size_t R = x.numel() / x.dim(0);
  Shape shape = x.shape();
  shape[0] = end - begin;
  std::vector<double> out(x.data().begin() + static_cast<std::ptrdiff_t>(begin * R),
                          x.data().begin() + static_cast<std::ptrdiff_t>(end * R));
  return make_result("slice0", std::move(shape), std::move(out), {x}, [begin, R](Node& self) {
    auto& g = parent(self, 0).grad_buffer();
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[begin * R + i] += self.grad[i];
  });
}

Tensor slice_last(const Tensor& x, std::size_t begin, std::size_t end) {
  const std::size_t C = last_dim(x);
  if (begin >= end || end > C) throw ShapeError("slice_last: bad range");
  const std::size_t M = x.numel() / C, n = end - begin;
  Shape shape = x.shape();
  shape.back() = n;
  std::vector<double> out(M * n);
  for (std::size_t m = 0; m < M; ++m) std::copy_n(x.data().data() + m * C + begin, n, out.data() + m * n);
  return make_result("slice_last", std::move(shape), std::move(out), {x}, [M, C, n, begin](Node& self) {
    auto& g = parent(self, 0).grad_buffer();
    for (std::size_t m = 0; m < M; ++m)
      for (std::size_t j = 0; j < n; ++j) g[m * C + begin + j] += self.grad[m * n + j];
  });
}

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows) {
  if (rows.empty()) throw ShapeError("gather_rows: empty index list");
  const std::size_t N = x.dim(0);
  const std::size_t R = x.numel() / N;
  Shape shape = x.shape();
  shape[0] = rows.size();
  std::vector<double> out(rows.size() * R);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= N) throw ShapeError("gather_rows: index out of range");
    std::copy_n(x.data().data() + rows[i] * R, R, out.data() + i * R);
  }
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  return make_result("gather_rows", std::move(shape), std::move(out), {x},
                     [R, idx = std::move(idx)](Node& self) {
                       auto& g = parent(self, 0).grad_buffer();
                       for (std::size_t i = 0; i < idx.size(); ++i)
                         for (std::size_t r = 0; r < R; ++r) g[idx[i] * R + r] += self.grad[i * R + r];
                     });
}

Tensor scatter_rows(const Tensor& src, std::span<const std::size_t> rows, std::size_t n_rows) {
  if (src.dim(0) != rows.size()) throw ShapeError("scatter_rows: one target row per source row required");
  const std::size_t R = src.numel() / src.dim(0);
  Shape shape = src.shape();
  shape[0] = n_rows;
  std::vector<double> out(n_rows * R, 0.0);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= n_rows) throw ShapeError("scatter_rows: index out of range");
    for (std::size_t r = 0; r < R; ++r) out[rows[i] * R + r] += src.at(i * R + r);
  }
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  return make_result("scatter_rows", std::move(shape), std::move(out), {src},
                     [R, idx = std::move(idx)](Node& self) {
                       auto& g = parent(self, 0).grad_buffer();
                       for (std::size_t i = 0; i < idx.size(); ++i)
                         for (std::size_t r = 0; r < R; ++r) g[i * R + r] += self.grad[idx[i] * R + r];
                     });
}

Tensor scale_rows(const Tensor& x, std::span<const double> factor) {
  const std::size_t N = x.dim(0);
  if (factor.size() != N) throw ShapeError("scale_rows: factor length mismatch");
  const std::size_t R = x.numel() / N;
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t r = 0; r < R; ++r) out[i * R + r] = x.at(i * R + r) * factor[i];
  std::vector<double> f(factor.begin(), factor.end());
  return make_result("scale_rows", x.shape(), std::move(out), {x}, [R, f = std::move(f)](Node& self) {
    auto& g = parent(self, 0).grad_buffer();
    for (std::size_t i = 0; i < f.size(); ++i)
      for (std::size_t r = 0; r < R; ++r) g[i * R + r] += self.grad[i * R + r] * f[i];
  });
}

Tensor sum(const Tensor& x) {
  double s = 0;
  for (double v : x.data()) s += v;
  return make_result("sum", {1}, {s}, {x}, [](Node& self) {
    auto& g = parent(self, 0).grad_buffer();
    for (auto& v : g) v += self.grad[0];
  });
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor dot(const Tensor& a, const Tensor& b) {
  if (a.numel() != b.numel()) throw ShapeError("dot: length mismatch");
  double s = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) s += a.at(i) * b.at(i);
  return make_result("dot", {1}, {s}, {a, b}, [](Node& self) {
    const auto& ad = parent(self, 0).data;
    const auto& bd = parent(self, 1).data;
    if (wants(self, 0)) {
      auto& g = parent(self, 0).grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[0] * bd[i];
    }
    if (wants(self, 1)) {
      auto& g = parent(self, 1).grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[0] * ad[i];
    }
  });
}

Tensor sample_points(const Tensor& maps, std::span<const kernels::SamplePoint> points) {
  if (maps.rank() != 4) throw ShapeError("sample_points: maps must be [B,H,W,C]");
  if (points.empty()) throw ShapeError("sample_points: no points");
  const std::size_t B = maps.dim(0), H = maps.dim(1), W = maps.dim(2), C = maps.dim(3);
  for (const auto& p : points) {
    if (p.map >= B) throw ShapeError("sample_points: map index out of range");
  }
  std::vector<double> out(points.size() * C);
  if (parallel::serial_mode()) {
    kernels::serial::bilinear_gather<double>(maps.data(), H, W, C, points, out);
  } else {
    kernels::omp::bilinear_gather<double>(maps.data(), H, W, C, points, out);
  }
  std::vector<kernels::SamplePoint> pts(points.begin(), points.end());
  return make_result("sample_points", {points.size(), C}, std::move(out), {maps},
                     [H, W, C, pts = std::move(pts)](Node& self) {
                       auto& g = parent(self, 0).grad_buffer();
                       for (std::size_t i = 0; i < pts.size(); ++i) {
                         const auto t = kernels::bilinear_tap(pts[i].u, pts[i].v, H, W);
                         if (!t.valid) continue;
                         double* base = g.data() + pts[i].map * H * W * C;
                         const double* gi = self.grad.data() + i * C;
                         const std::pair<std::size_t, double> taps[4] = {
                             {t.r0 * W + t.c0, t.w00()}, {t.r0 * W + t.c1, t.w01()},
                             {t.r1 * W + t.c0, t.w10()}, {t.r1 * W + t.c1, t.w11()}};
                         for (const auto& [cell, w] : taps) {
                           if (w == 0.0) continue;
                           for (std::size_t c = 0; c < C; ++c) base[cell * C + c] += w * gi[c];
                         }
                       }
                     });
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, kernels::PadMode pad) {
  if (x.rank() != 4 || w.rank() != 4 || w.dim(0) != w.dim(1) || w.dim(0) % 2 == 0) {
    throw ShapeError("conv2d: expected x [B,H,W,Cin] and odd square w [K,K,Cin,Cout]");
  }
  if (w.dim(2) != x.dim(3) || b.numel() != w.dim(3)) throw ShapeError("conv2d: channel mismatch");
  const kernels::ConvGeometry geo{x.dim(0), x.dim(1), x.dim(2), w.dim(2), w.dim(3), w.dim(0), pad};
  std::vector<double> out(geo.batch * geo.height * geo.width * geo.cout);
  if (parallel::serial_mode()) {
    kernels::serial::conv2d<double>(geo, x.data(), w.data(), b.data(), out);
  } else {
    kernels::omp::conv2d<double>(geo, x.data(), w.data(), b.data(), out);
  }
  return make_result(
      "conv2d", {geo.batch, geo.height, geo.width, geo.cout}, std::move(out), {x, w, b},
      [geo](Node& self) {
        const auto& xd = parent(self, 0).data;
        const auto& wd = parent(self, 1).data;
        const auto& g = self.grad;
        const bool gx_on = wants(self, 0), gw_on = wants(self, 1), gb_on = wants(self, 2);
        std::vector<double>* gx = gx_on ? &parent(self, 0).grad_buffer() : nullptr;
        std::vector<double>* gw = gw_on ? &parent(self, 1).grad_buffer() : nullptr;
        std::vector<double>* gb = gb_on ? &parent(self, 2).grad_buffer() : nullptr;
        const std::size_t plane = geo.height * geo.width;
        for (std::size_t bi = 0; bi < geo.batch; ++bi)
          for (std::size_t r = 0; r < geo.height; ++r)
            for (std::size_t c = 0; c < geo.width; ++c) {
              const double* go = g.data() + (bi * plane + r * geo.width + c) * geo.cout;
              if (gb) {
                for (std::size_t o = 0; o < geo.cout; ++o) (*gb)[o] += go[o];
              }
              for (std::size_t dr = 0; dr < geo.ksize; ++dr)
                for (std::size_t dc = 0; dc < geo.ksize; ++dc) {
                  const auto src = kernels::conv_source(geo, r, c, dr, dc);
                  if (src < 0) continue;
                  const std::size_t xi = (bi * plane + static_cast<std::size_t>(src)) * geo.cin;
                  const std::size_t wk = (dr * geo.ksize + dc) * geo.cin * geo.cout;
                  for (std::size_t i = 0; i < geo.cin; ++i) {
                    const double* wr = wd.data() + wk + i * geo.cout;
                    if (gx) {
                      double s = 0;
                      for (std::size_t o = 0; o < geo.cout; ++o) s += go[o] * wr[o];
                      (*gx)[xi + i] += s;
                    }
                    if (gw) {
                      const double xv = xd[xi + i];
                      if (xv == 0.0) continue;
                      double* gwr = gw->data() + wk + i * geo.cout;
                      for (std::size_t o = 0; o < geo.cout; ++o) gwr[o] += xv * go[o];
                    }
                  }
                }
            }
      });
}

Tensor avg_pool2(const Tensor& x) {
  if (x.rank() != 4) throw ShapeError("avg_pool2: expected [B,H,W,C]");
  const std::size_t B = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3);
  const std::size_t Ho = (H + 1) / 2, Wo = (W + 1) / 2;
  std::vector<double> out(B * Ho * Wo * C, 0.0);
  auto window = [H, W](std::size_t r, std::size_t c) {
    const std::size_t rh = std::min<std::size_t>(2, H - 2 * r);
    const std::size_t cw = std::min<std::size_t>(2, W - 2 * c);
    return std::pair{rh, cw};
  };
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t r = 0; r < Ho; ++r)
      for (std::size_t c = 0; c < Wo; ++c) {
        const auto [rh, cw] = window(r, c);
        const double inv = 1.0 / static_cast<double>(rh * cw);
        double* o = out.data() + ((b * Ho + r) * Wo + c) * C;
        for (std::size_t i = 0; i < rh; ++i)
          for (std::size_t j = 0; j < cw; ++j) {
            const double* xi = x.data().data() + ((b * H + 2 * r + i) * W + 2 * c + j) * C;
            for (std::size_t ch = 0; ch < C; ++ch) o[ch] += xi[ch] * inv;
          }
      }
  return make_result("avg_pool2", {B, Ho, Wo, C}, std::move(out), {x},
                     [B, H, W, C, Ho, Wo, window](Node& self) {
                       auto& g = parent(self, 0).grad_buffer();
                       for (std::size_t b = 0; b < B; ++b)
                         for (std::size_t r = 0; r < Ho; ++r)
                           for (std::size_t c = 0; c < Wo; ++c) {
                             const auto [rh, cw] = window(r, c);
                             const double inv = 1.0 / static_cast<double>(rh * cw);
                             const double* go = self.grad.data() + ((b * Ho + r) * Wo + c) * C;
                             for (std::size_t i = 0; i < rh; ++i)
                               for (std::size_t j = 0; j < cw; ++j) {
                                 double* gi = g.data() + ((b * H + 2 * r + i) * W + 2 * c + j) * C;
                                 for (std::size_t ch = 0; ch < C; ++ch) gi[ch] += go[ch] * inv;
                               }
                           }
                     });
}

Tensor pillar_max(const Tensor& feats, std::span<const std::size_t> cell_of_point,
                  std::size_t n_cells) {
  if (feats.rank() != 2 || feats.dim(0) != cell_of_point.size()) {
    throw ShapeError("pillar_max: feats must be [N,C] with one cell per point");
  }
  const std::size_t C = feats.dim(1);
  std::vector<double> out(n_cells * C, 0.0);
  std::vector<std::ptrdiff_t> arg(n_cells * C, -1);
  const auto fd = feats.data();
  for (std::size_t p = 0; p < cell_of_point.size(); ++p) {
    const std::size_t cell = cell_of_point[p];
    if (cell >= n_cells) throw ShapeError("pillar_max: cell index out of range");
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t k = cell * C + c;
      const double v = fd[p * C + c];
      if (arg[k] < 0 || v > out[k]) {
        out[k] = v;
        arg[k] = static_cast<std::ptrdiff_t>(p);
      }
    }
  }
  return make_result("pillar_max", {n_cells, C}, std::move(out), {feats},
                     [C, arg = std::move(arg)](Node& self) {
                       auto& g = parent(self, 0).grad_buffer();
                       for (std::size_t k = 0; k < arg.size(); ++k) {
                         if (arg[k] < 0) continue;
                         g[static_cast<std::size_t>(arg[k]) * C + k % C] += self.grad[k];
                       }
                     });
}

namespace {

// log(sigmoid(x)) and log(1 - sigmoid(x)) without overflow.
double log_sigmoid(double x) { return x >= 0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x)); }
double log_one_minus_sigmoid(double x) { return log_sigmoid(-x); }
double sigm(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

Tensor sigmoid_focal_loss(const Tensor& logits, std::span<const double> targets, double alpha,
                          double gamma) {
  if (targets.size() != logits.numel()) throw ShapeError("sigmoid_focal_loss: target size mismatch");
  double total = 0;
  std::vector<double> dlogit(logits.numel());
  for (std::size_t i = 0; i < logits.numel(); ++i) {
    const double x = logits.at(i);
    const double p = sigm(x);
    const double t = targets[i];
    // positive term: -alpha (1-p)^gamma log p ; negative: -(1-alpha) p^gamma log(1-p)
    const double lp = log_sigmoid(x), lq = log_one_minus_sigmoid(x);
    const double pos = t > 0.5 ? 1.0 : 0.0;
    if (pos > 0) {
      const double m = std::pow(1 - p, gamma);
      total += -alpha * m * lp;
      // d/dx: alpha * [gamma (1-p)^(gamma-1) p (1-p) log p - (1-p)^gamma (1-p)]
      const double dm = gamma == 0 ? 0.0 : gamma * std::pow(1 - p, gamma - 1) * (-(p * (1 - p)));
      dlogit[i] = -alpha * (dm * lp + m * (1 - p));
    } else {
      const double m = std::pow(p, gamma);
      total += -(1 - alpha) * m * lq;
      const double dm = gamma == 0 ? 0.0 : gamma * std::pow(p, gamma - 1) * p * (1 - p);
      dlogit[i] = -(1 - alpha) * (dm * lq + m * (-p));
    }
  }
  return make_result("sigmoid_focal_loss", {1}, {total}, {logits},
                     [d = std::move(dlogit)](Node& self) {
                       auto& g = parent(self, 0).grad_buffer();
                       for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[0] * d[i];
                     });
}

Tensor gaussian_focal_loss(const Tensor& logits, std::span<const double> target, double alpha,
                           double beta) {
  if (target.size() != logits.numel()) throw ShapeError("gaussian_focal_loss: target size mismatch");
  double total = 0;
  std::vector<double> dlogit(logits.numel());
  for (std::size_t i = 0; i < logits.numel(); ++i) {
    const double x = logits.at(i);
    const double p = sigm(x);
    const double t = target[i];
    const double lp = log_sigmoid(x), lq = log_one_minus_sigmoid(x);
    if (t >= 1.0) {
      // -(1-p)^alpha log p
      const double m = std::pow(1 - p, alpha);
      total += -m * lp;
      const double dm = -alpha * std::pow(1 - p, alpha - 1) * p * (1 - p);
      dlogit[i] = -(dm * lp + m * (1 - p));
    } else {
      // -(1-t)^beta p^alpha log(1-p)
      const double wneg = std::pow(1 - t, beta);
      const double m = std::pow(p, alpha);
      total += -wneg * m * lq;
      const double dm = alpha * std::pow(p, alpha - 1) * p * (1 - p);
      dlogit[i] = -wneg * (dm * lq + m * (-p));
    }
  }
  return make_result("gaussian_focal_loss", {1}, {total}, {logits},
                     [d = std::move(dlogit)](Node& self) {
                       auto& g = parent(self, 0).grad_buffer();
                       for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[0] * d[i];
                     });
}

Tensor l1_loss(const Tensor& pred, std::span<const double> target, std::span<const double> weight) {
  if (target.size() != pred.numel()) throw ShapeError("l1_loss: target size mismatch");
  if (!weight.empty() && weight.size() != pred.numel()) throw ShapeError("l1_loss: weight size mismatch");
  double total = 0;
  std::vector<double> d(pred.numel());
  for (std::size_t i = 0; i < pred.numel(); ++i) {
    const double w = weight.empty() ? 1.0 : weight[i];
    const double diff = pred.at(i) - target[i];
    total += w * std::abs(diff);
    d[i] = diff > 0 ? w : (diff < 0 ? -w : 0.0);
  }
  return make_result("l1_loss", {1}, {total}, {pred}, [d = std::move(d)](Node& self) {
    auto& g = parent(self, 0).grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[0] * d[i];
  });
}

}  // namespace dipp::ops

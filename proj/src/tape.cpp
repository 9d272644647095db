#include "mfas/tape.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace mfas {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

bool Tensor::all_finite() const {
  for (double x : data)
    if (!std::isfinite(x)) return false;
  return true;
}

std::string Tensor::shape_str() const {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << "]";
  return os.str();
}

namespace {

int64_t last_dim(const Tensor& t) { return t.shape.back(); }

int64_t rows_of(const Tensor& t) { return t.numel() / t.shape.back(); }

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_shape(b))
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + a.shape_str() +
                                " vs " + b.shape_str());
}

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double log_add(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  double m = std::max(a, b);
  return m + std::log1p(std::exp(std::min(a, b) - m));
}

}  // namespace

Var Tape::make(Tensor value, bool needs_grad, std::function<void(Tape&)> back) {
  Node n;
  n.value = std::move(value);
  n.needs_grad = needs_grad;
  if (needs_grad) n.back = std::move(back);
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

Tensor& Tape::ensure_grad(int id) {
  Node& n = nodes_[static_cast<size_t>(id)];
  if (n.grad.data.empty()) n.grad = Tensor::zeros(n.value.shape);
  return n.grad;
}

Tensor& Tape::grad(Var v) { return ensure_grad(v.id); }

Var Tape::leaf(Tensor value) { return make(std::move(value), false, {}); }

Var Tape::param(Param& p) {
  Param* pp = &p;
  int id = static_cast<int>(nodes_.size());
  return make(p.value, true, [id, pp](Tape& t) {
    const Tensor& g = t.nodes_[static_cast<size_t>(id)].grad;
    for (int64_t i = 0; i < g.numel(); ++i) pp->grad[i] += g[i];
  });
}

void Tape::backward(Var loss) {
  if (val(loss).numel() != 1) throw std::invalid_argument("backward: loss must be scalar");
  ensure_grad(loss.id)[0] = 1.0;
  for (int id = static_cast<int>(nodes_.size()) - 1; id >= 0; --id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (n.needs_grad && !n.grad.data.empty() && n.back) n.back(*this);
  }
}

// ---------------------------------------------------------------- elementwise

Var Tape::add(Var a, Var b) {
  check_same_shape(val(a), val(b), "add");
  Tensor y = val(a);
  for (int64_t i = 0; i < y.numel(); ++i) y[i] += val(b)[i];
  bool ng = needs_grad(a) || needs_grad(b);
  int ai = a.id, bi = b.id;
  int out = static_cast<int>(nodes_.size());
  return make(std::move(y), ng, [out, ai, bi](Tape& t) {
    const Tensor& g = t.nodes_[static_cast<size_t>(out)].grad;
    if (t.needs_grad({ai})) {
      Tensor& ga = t.ensure_grad(ai);
      for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
    }
    if (t.needs_grad({bi})) {
      Tensor& gb = t.ensure_grad(bi);
      for (int64_t i = 0; i < g.numel(); ++i) gb[i] += g[i];
    }
  });
}

Var Tape::sub(Var a, Var b) {
  check_same_shape(val(a), val(b), "sub");
  Tensor y = val(a);
  for (int64_t i = 0; i < y.numel(); ++i) y[i] -= val(b)[i];
  bool ng = needs_grad(a) || needs_grad(b);
  int ai = a.id, bi = b.id;
  int out = static_cast<int>(nodes_.size());
  return make(std::move(y), ng, [out, ai, bi](Tape& t) {
    const Tensor& g = t.nodes_[static_cast<size_t>(out)].grad;
    if (t.needs_grad({ai})) {
      Tensor& ga = t.ensure_grad(ai);
      for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
    }
    if (t.needs_grad({bi})) {
      Tensor& gb = t.ensure_grad(bi);
      for (int64_t i = 0; i < g.numel(); ++i) gb[i] -= g[i];
    }
  });
}

Var Tape::mul(Var a, Var b) {
  check_same_shape(val(a), val(b), "mul");
  Tensor y = val(a);
  for (int64_t i = 0; i < y.numel(); ++i) y[i] *= val(b)[i];
  bool ng = needs_grad(a) || needs_grad(b);
  int ai = a.id, bi = b.id;
  int out = static_cast<int>(nodes_.size());
  return make(std::move(y), ng, [out, ai, bi](Tape& t) {
    const Tensor& g = t.nodes_[static_cast<size_t>(out)].grad;
    const Tensor& av = t.nodes_[static_cast<size_t>(ai)].value;
    const Tensor& bv = t.nodes_[static_cast<size_t>(bi)].value;
    if (t.needs_grad({ai})) {
      Tensor& ga = t.ensure_grad(ai);
      for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * bv[i];
    }
    if (t.needs_grad({bi})) {
      Tensor& gb = t.ensure_grad(bi);
      for (int64_t i = 0; i < g.numel(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

Var Tape::scale(Var a, double c) {
  Tensor y = val(a);
  for (double& x : y.data) x *= c;
  int ai = a.id;
  int out = static_cast<int>(nodes_.size());
  return make(std::move(y), needs_grad(a), [out, ai, c](Tape& t) {
    const Tensor& g = t.nodes_[static_cast<size_t>(out)].grad;
    Tensor& ga = t.ensure_grad(ai);
    for (int64_t i = 0; i < g.numel(); ++i) ga[i] += c * g[i];
  });
}

Var Tape::add_const(Var a, double c) {
  Tensor y = val(a);
  for (double& x : y.data) x += c;
  int ai = a.id;
  int out = static_cast<int>(nodes_.size());
  return make(std::move(y), needs_grad(a), [out, ai](Tape& t) {
    const Tensor& g = t.nodes_[static_cast<size_t>(out)].grad;
    Tensor& ga = t.ensure_grad(ai);
    for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
  });
}

Var Tape::add_bias(Var x, Var b) {
  const Tensor& xv = val(x);
  const Tensor& bv = val(b);
  int64_t d = last_dim(xv);
  if (bv.numel() != d) throw std::invalid_argument("add_bias: bias dim mismatch");
  Tensor y = xv;
  int64_t r = rows_of(xv);
  for (int64_t i = 0; i < r; ++i)
    for (int64_t j = 0; j < d; ++j) y[i * d + j] += bv[j];
  bool ng = needs_grad(x) || needs_grad(b);
  int xi = x.id, bi = b.id;
  int out = static_cast<int>(nodes_.size());
  return make(std::move(y), ng, [out, xi, bi, r, d](Tape& t) {
    const Tensor& g = t.nodes_[static_cast<size_t>(out)].grad;
    if (t.needs_grad({xi})) {
      Tensor& gx = t.ensure_grad(xi);
      for (int64_t i = 0; i < g.numel(); ++i) gx[i] += g[i];
    }
    if (t.needs_grad({bi})) {
      Tensor& gb = t.ensure_grad(bi);
      for (int64_t i = 0; i < r; ++i)
        for (int64_t j = 0; j < d; ++j) gb[j] += g[i * d + j];
    }
  });
}

namespace {
double gelu_fn(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }
double gelu_grad(double x) {
  double cdf = 0.5 * (1.0 + std::erf(x / std::sqrt(2.0)));
  double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
  return cdf + x * pdf;
}
}  // namespace

#define MFAS_UNARY_OP(NAME, FWD, BWD)                                              \
  Var Tape::NAME(Var x) {                                                          \
    Tensor y = val(x);                                                             \
    for (double& v : y.data) v = FWD(v);                                           \
    int xi = x.id;                                                                 \
    int out = static_cast<int>(nodes_.size());                                     \
    return make(std::move(y), needs_grad(x), [out, xi](Tape& t) {                  \
      const Tensor& g = t.nodes_[static_cast<size_t>(out)].grad;                   \
      const Tensor& xv = t.nodes_[static_cast<size_t>(xi)].value;                  \
      const Tensor& yv = t.nodes_[static_cast<size_t>(out)].value;                 \
      (void)xv; (void)yv;                                                          \
      Tensor& gx = t.ensure_grad(xi);                                              \
      for (int64_t i = 0; i < g.numel(); ++i) gx[i] += g[i] * (BWD);               \
    });                                                                            \
  }

MFAS_UNARY_OP(relu, [](double v) { return v > 0 ? v : 0.0; }, (xv[i] > 0 ? 1.0 : 0.0))
MFAS_UNARY_OP(gelu, gelu_fn, gelu_grad(xv[i]))
MFAS_UNARY_OP(tanh_, std::tanh, (1.0 - yv[i] * yv[i]))
MFAS_UNARY_OP(sigmoid_, [](double v) { return 1.0 / (1.0 + std::exp(-v)); },
              (yv[i] * (1.0 - yv[i])))
MFAS_UNARY_OP(log_, std::log, (1.0 / xv[i]))
MFAS_UNARY_OP(exp_, std::exp, yv[i])

#undef MFAS_UNARY_OP

Var Tape::dropout(Var x, double p, std::mt19937_64& rng) {
  if (p <= 0.0) return x;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Tensor y = val(x);
  std::vector<double> keep(static_cast<size_t>(y.numel()));
  double inv = 1.0 / (1.0 - p);
  for (int64_t i = 0; i < y.numel(); ++i) {
    keep[static_cast<size_t>(i)] = (u(rng) >= p) ? inv : 0.0;
    y[i] *= keep[static_cast<size_t>(i)];
  }
  int xi = x.id;
  int out = static_cast<int>(nodes_.size());
  return make(std::move(y), needs_grad(x), [out, xi, keep = std::move(keep)](Tape& t) {
    const Tensor& g = t.nodes_[static_cast<size_t>(out)].grad;
    Tensor& gx = t.ensure_grad(xi);
    for (int64_t i = 0; i < g.numel(); ++i) gx[i] += g[i] * keep[static_cast<size_t>(i)];
  });
}

// ------------------------------------------------------------- linear algebra

Var Tape::matmul(Var x, Var w) {
  const Tensor& xv = val(x);
  const Tensor& wv = val(w);
  if (wv.ndim() != 2 || last_dim(xv) != wv.shape[0])
    throw std::invalid_argument("matmul: inner dim mismatch");
  int64_t r = rows_of(xv), k = wv.shape[0], n = wv.shape[1];
  std::vector<int64_t> oshape(xv.shape.begin(), xv.shape.end() - 1);
  oshape.push_back(n);
  Tensor y(oshape);
  CMapMat X(xv.data.data(), r, k), W(wv.data.data(), k, n);
  MapMat(y.data.data(), r, n) = X * W;
  bool ng = needs_grad(x) || needs_grad(w);
  int xi = x.id, wi = w.id;
  int out = static_cast<int>(nodes_.size());
  return make(std::move(y), ng, [out, xi, wi, r, k, n](Tape& t) {
    CMapMat G(t.nodes_[static_cast<size_t>(out)].grad.data.data(), r, n);
    if (t.needs_grad({xi})) {
      CMapMat W(t.nodes_[static_cast<size_t>(wi)].value.data.data(), k, n);
      MapMat GX(t.ensure_grad(xi).data.data(), r, k);
      GX.noalias() += G * W.transpose();
    }
    if (t.needs_grad({wi})) {
      CMapMat X(t.nodes_[static_cast<size_t>(xi)].value.data.data(), r, k);
      MapMat GW(t.ensure_grad(wi).data.data(), k, n);
      GW.noalias() += X.transpose() * G;
    }
  });
}

Var Tape::bmm(Var a, Var b) {
  const Tensor& av = val(a);
  const Tensor& bv = val(b);
  if (av.ndim() != 3 || bv.ndim() != 3 || av.shape[0] != bv.shape[0] ||
      av.shape[2] != bv.shape[1])
    throw std::invalid_argument("bmm: shape mismatch " + av.shape_str() + " x " +
                                bv.shape_str());
  int64_t B = av.shape[0], M = av.shape[1], K = av.shape[2], N = bv.shape[2];
  Tensor y({B, M, N});
  for (int64_t i = 0; i < B; ++i) {
    CMapMat A(av.data.data() + i * M * K, M, K), Bm(bv.data.data() + i * K * N, K, N);
    MapMat(y.data.data() + i * M * N, M, N) = A * Bm;
  }
  bool ng = needs_grad(a) || needs_grad(b);
  int ai = a.id, bi = b.id;
  int out = static_cast<int>(nodes_.size());
  return make(std::move(y), ng, [out, ai, bi, B, M, K, N](Tape& t) {
    const Tensor& gv = t.nodes_[static_cast<size_t>(out)].grad;
    const Tensor& av = t.nodes_[static_cast<size_t>(ai)].value;
    const Tensor& bv = t.nodes_[static_cast<size_t>(bi)].value;
    for (int64_t i = 0; i < B; ++i) {
      CMapMat G(gv.data.data() + i * M * N, M, N);
      if (t.needs_grad({ai})) {
        CMapMat Bm(bv.data.data() + i * K * N, K, N);
        MapMat GA(t.ensure_grad(ai).data.data() + i * M * K, M, K);
        GA.noalias() += G * Bm.transpose();
      }
      if (t.needs_grad({bi})) {
        CMapMat A(av.data.data() + i * M * K, M, K);
        MapMat GB(t.ensure_grad(bi).data.data() + i * K * N, K, N);
        GB.noalias() += A.transpose() * G;
      }
    }
  });
}

Var Tape::transpose12(Var a) {
  const Tensor& av = val(a);
  if (av.ndim() != 3) throw std::invalid_argument("transpose12: need rank-3");
  int64_t B = av.shape[0], M = av.shape[1], N = av.shape[2];
  Tensor y({B, N, M});
  for (int64_t i = 0; i < B; ++i)
    for (int64_t m = 0; m < M; ++m)
      for (int64_t n = 0; n < N; ++n) y.at(i, n, m) = av.at(i, m, n);
  int ai = a.id;
  int out = static_cast<int>(nodes_.size());
  return make(std::move(y), needs_grad(a), [out, ai, B, M, N](Tape& t) {
    const Tensor& g = t.nodes_[static_cast<size_t>(out)].grad;
    Tensor& ga = t.ensure_grad(ai);
    for (int64_t i = 0; i < B; ++i)
      for (int64_t m = 0; m < M; ++m)
        for (int64_t n = 0; n < N; ++n) ga.at(i, m, n) += g.at(i, n, m);
  });
}

// ------------------------------------------------------ normalization / shape

Var Tape::softmax_last(Var x) {
  const Tensor& xv = val(x);
  int64_t d = last_dim(xv), r = rows_of(xv);
  Tensor y = xv;
  for (int64_t i = 0; i < r; ++i) {
    double* p = y.data.data() + i * d;
    double mx = *std::max_element(p, p + d);
    double s = 0;
    for (int64_t j = 0; j < d; ++j) s += (p[j] = std::exp(p[j] - mx));
    for (int64_t j = 0; j < d; ++j) p[j] /= s;
  }
  int xi = x.id;
  int out = static_cast<int>(nodes_.size());
  return make(std::move(y), needs_grad(x), [out, xi, r, d](Tape& t) {
    const Tensor& g = t.nodes_[static_cast<size_t>(out)].grad;
    const Tensor& yv = t.nodes_[static_cast<size_t>(out)].value;
    Tensor& gx = t.ensure_grad(xi);
    for (int64_t i = 0; i < r; ++i) {
      double dot = 0;
      for (int64_t j = 0; j < d; ++j) dot += g[i * d + j] * yv[i * d + j];
      for (int64_t j = 0; j < d; ++j)
        gx[i * d + j] += yv[i * d + j] * (g[i * d + j] - dot);
    }
  });
}

Var Tape::layer_norm_last(Var x, Var gain, Var bias, double eps) {
  const Tensor& xv = val(x);
  int64_t d = last_dim(xv), r = rows_of(xv);
  if (val(gain).numel() != d || val(bias).numel() != d)
    throw std::invalid_argument("layer_norm: gain/bias dim mismatch");
  Tensor y(xv.shape);
  std::vector<double> inv_std(static_cast<size_t>(r)), mean(static_cast<size_t>(r));
  for (int64_t i = 0; i < r; ++i) {
    const double* p = xv.data.data() + i * d;
    double m = 0;
    for (int64_t j = 0; j < d; ++j) m += p[j];
    m /= static_cast<double>(d);
    double v = 0;
    for (int64_t j = 0; j < d; ++j) v += (p[j] - m) * (p[j] - m);
    v /= static_cast<double>(d);
    double is = 1.0 / std::sqrt(v + eps);
    mean[static_cast<size_t>(i)] = m;
    inv_std[static_cast<size_t>(i)] = is;
    for (int64_t j = 0; j < d; ++j)
      y[i * d + j] = (p[j] - m) * is * val(gain)[j] + val(bias)[j];
  }
  bool ng = needs_grad(x) || needs_grad(gain) || needs_grad(bias);
  int xi = x.id, gi = gain.id, bi = bias.id;
  int out = static_cast<int>(nodes_.size());
  return make(std::move(y), ng,
              [out, xi, gi, bi, r, d, mean = std::move(mean),
               inv_std = std::move(inv_std)](Tape& t) {
    const Tensor& g = t.nodes_[static_cast<size_t>(out)].grad;
    const Tensor& xv = t.nodes_[static_cast<size_t>(xi)].value;
    const Tensor& gv = t.nodes_[static_cast<size_t>(gi)].value;
    for (int64_t i = 0; i < r; ++i) {
      double m = mean[static_cast<size_t>(i)], is = inv_std[static_cast<size_t>(i)];
      if (t.needs_grad({gi}) || t.needs_grad({bi})) {
        Tensor& gg = t.ensure_grad(gi);
        Tensor& gb = t.ensure_grad(bi);
        for (int64_t j = 0; j < d; ++j) {
          double xhat = (xv[i * d + j] - m) * is;
          gg[j] += g[i * d + j] * xhat;
          gb[j] += g[i * d + j];
        }
      }
      if (t.needs_grad({xi})) {
        Tensor& gx = t.ensure_grad(xi);
        // dL/dxhat_j = g_j * gain_j; standard layer-norm backward
        double sum_dh = 0, sum_dh_xhat = 0;
        for (int64_t j = 0; j < d; ++j) {
          double xhat = (xv[i * d + j] - m) * is;
          double dh = g[i * d + j] * gv[j];
          sum_dh += dh;
          sum_dh_xhat += dh * xhat;
        }
        double dn = static_cast<double>(d);
        for (int64_t j = 0; j < d; ++j) {
          double xhat = (xv[i * d + j] - m) * is;
          double dh = g[i * d + j] * gv[j];
          gx[i * d + j] += is * (dh - sum_dh / dn - xhat * sum_dh_xhat / dn);
        }
      }
    }
  });
}

Var Tape::reshape(Var x, std::vector<int64_t> shape) {
  const Tensor& xv = val(x);
  if (Tensor::numel_of(shape) != xv.numel())
    throw std::invalid_argument("reshape: numel mismatch");
  Tensor y(std::move(shape), xv.data);
  int xi = x.id;
  int out = static_cast<int>(nodes_.size());
  return make(std::move(y), needs_grad(x), [out, xi](Tape& t) {
    const Tensor& g = t.nodes_[static_cast<size_t>(out)].grad;
    Tensor& gx = t.ensure_grad(xi);
    for (int64_t i = 0; i < g.numel(); ++i) gx[i] += g[i];
  });
}

Var Tape::concat_last(Var a, Var b) {
  const Tensor& av = val(a);
  const Tensor& bv = val(b);
  std::vector<int64_t> ah(av.shape.begin(), av.shape.end() - 1);
  std::vector<int64_t> bh(bv.shape.begin(), bv.shape.end() - 1);
  if (ah != bh) throw std::invalid_argument("concat_last: leading shape mismatch");
  int64_t da = last_dim(av), db = last_dim(bv), r = rows_of(av);
  std::vector<int64_t> oshape = ah;
  oshape.push_back(da + db);
  Tensor y(oshape);
  for (int64_t i = 0; i < r; ++i) {
    std::copy(av.data.begin() + i * da, av.data.begin() + (i + 1) * da,
              y.data.begin() + i * (da + db));
    std::copy(bv.data.begin() + i * db, bv.data.begin() + (i + 1) * db,
              y.data.begin() + i * (da + db) + da);
  }
  bool ng = needs_grad(a) || needs_grad(b);
  int ai = a.id, bi = b.id;
  int out = static_cast<int>(nodes_.size());
  return make(std::move(y), ng, [out, ai, bi, r, da, db](Tape& t) {
    const Tensor& g = t.nodes_[static_cast<size_t>(out)].grad;
    if (t.needs_grad({ai})) {
      Tensor& ga = t.ensure_grad(ai);
      for (int64_t i = 0; i < r; ++i)
        for (int64_t j = 0; j < da; ++j) ga[i * da + j] += g[i * (da + db) + j];
    }
    if (t.needs_grad({bi})) {
      Tensor& gb = t.ensure_grad(bi);
      for (int64_t i = 0; i < r; ++i)
        for (int64_t j = 0; j < db; ++j) gb[i * db + j] += g[i * (da + db) + da + j];
    }
  });
}

Var Tape::slice_last(Var x, int64_t from, int64_t to) {
  const Tensor& xv = val(x);
  int64_t d = last_dim(xv), r = rows_of(xv);
  if (from < 0 || to > d || from >= to) throw std::invalid_argument("slice_last: bad range");
  int64_t w = to - from;
  std::vector<int64_t> oshape(xv.shape.begin(), xv.shape.end() - 1);
  oshape.push_back(w);
  Tensor y(oshape);
  for (int64_t i = 0; i < r; ++i)
    std::copy(xv.data.begin() + i * d + from, xv.data.begin() + i * d + to,
              y.data.begin() + i * w);
  int xi = x.id;
  int out = static_cast<int>(nodes_.size());
  return make(std::move(y), needs_grad(x), [out, xi, r, d, from, w](Tape& t) {
    const Tensor& g = t.nodes_[static_cast<size_t>(out)].grad;
    Tensor& gx = t.ensure_grad(xi);
    for (int64_t i = 0; i < r; ++i)
      for (int64_t j = 0; j < w; ++j) gx[i * d + from + j] += g[i * w + j];
  });
}

Var Tape::row(Var x, int64_t i) {
  const Tensor& xv = val(x);
  if (xv.ndim() < 2 || i < 0 || i >= xv.shape[0])
    throw std::invalid_argument("row: bad index");
  int64_t stride = xv.numel() / xv.shape[0];
  std::vector<int64_t> oshape(xv.shape.begin() + 1, xv.shape.end());
  Tensor y(oshape, std::vector<double>(xv.data.begin() + i * stride,
                                       xv.data.begin() + (i + 1) * stride));
  int xi = x.id;
  int out = static_cast<int>(nodes_.size());
  return make(std::move(y), needs_grad(x), [out, xi, i, stride](Tape& t) {
    const Tensor& g = t.nodes_[static_cast<size_t>(out)].grad;
    Tensor& gx = t.ensure_grad(xi);
    for (int64_t j = 0; j < stride; ++j) gx[i * stride + j] += g[j];
  });
}

Var Tape::slice_axis0(Var x, int64_t from, int64_t to) {
  const Tensor& xv = val(x);
  if (xv.ndim() < 1 || from < 0 || to > xv.shape[0] || from >= to)
    throw std::invalid_argument("slice_axis0: bad range");
  int64_t stride = xv.numel() / xv.shape[0];
  std::vector<int64_t> oshape = xv.shape;
  oshape[0] = to - from;
  Tensor y(oshape, std::vector<double>(xv.data.begin() + from * stride,
                                       xv.data.begin() + to * stride));
  int xi = x.id;
  int out = static_cast<int>(nodes_.size());
  return make(std::move(y), needs_grad(x), [out, xi, from, stride](Tape& t) {
    const Tensor& g = t.nodes_[static_cast<size_t>(out)].grad;
    Tensor& gx = t.ensure_grad(xi);
    for (int64_t i = 0; i < g.numel(); ++i) gx[from * stride + i] += g[i];
  });
}

Var Tape::add_broadcast0(Var x, Var p) {
  const Tensor& xv = val(x);
  const Tensor& pv = val(p);
  int64_t B = xv.shape[0], stride = xv.numel() / B;
  if (pv.numel() != stride)
    throw std::invalid_argument("add_broadcast0: shape mismatch");
  Tensor y = xv;
  for (int64_t i = 0; i < B; ++i)
    for (int64_t j = 0; j < stride; ++j) y[i * stride + j] += pv[j];
  bool ng = needs_grad(x) || needs_grad(p);
  int xi = x.id, pi = p.id;
  int out = static_cast<int>(nodes_.size());
  return make(std::move(y), ng, [out, xi, pi, B, stride](Tape& t) {
    const Tensor& g = t.nodes_[static_cast<size_t>(out)].grad;
    if (t.needs_grad({xi})) {
      Tensor& gx = t.ensure_grad(xi);
      for (int64_t i = 0; i < g.numel(); ++i) gx[i] += g[i];
    }
    if (t.needs_grad({pi})) {
      Tensor& gp = t.ensure_grad(pi);
      for (int64_t i = 0; i < B; ++i)
        for (int64_t j = 0; j < stride; ++j) gp[j] += g[i * stride + j];
    }
  });
}

Var Tape::index_scalar(Var x, int64_t i) {
  const Tensor& xv = val(x);
  if (i < 0 || i >= xv.numel()) throw std::invalid_argument("index_scalar: bad index");
  Tensor y = Tensor::scalar(xv[i]);
  int xi = x.id;
  int out = static_cast<int>(nodes_.size());
  return make(std::move(y), needs_grad(x), [out, xi, i](Tape& t) {
    t.ensure_grad(xi)[i] += t.nodes_[static_cast<size_t>(out)].grad[0];
  });
}

Var Tape::mul_scalar(Var x, Var s) {
  if (val(s).numel() != 1) throw std::invalid_argument("mul_scalar: s must be scalar");
  double sv = val(s)[0];
  Tensor y = val(x);
  for (double& v : y.data) v *= sv;
  bool ng = needs_grad(x) || needs_grad(s);
  int xi = x.id, si = s.id;
  int out = static_cast<int>(nodes_.size());
  return make(std::move(y), ng, [out, xi, si, sv](Tape& t) {
    const Tensor& g = t.nodes_[static_cast<size_t>(out)].grad;
    const Tensor& xv = t.nodes_[static_cast<size_t>(xi)].value;
    if (t.needs_grad({xi})) {
      Tensor& gx = t.ensure_grad(xi);
      for (int64_t i = 0; i < g.numel(); ++i) gx[i] += g[i] * sv;
    }
    if (t.needs_grad({si})) {
      double acc = 0;
      for (int64_t i = 0; i < g.numel(); ++i) acc += g[i] * xv[i];
      t.ensure_grad(si)[0] += acc;
    }
  });
}

Var Tape::detach(Var x) { return leaf(val(x)); }

// ------------------------------------------------------------------ reductions

Var Tape::sum_all(Var x) {
  double s = 0;
  for (double v : val(x).data) s += v;
  int xi = x.id;
  int out = static_cast<int>(nodes_.size());
  return make(Tensor::scalar(s), needs_grad(x), [out, xi](Tape& t) {
    double g = t.nodes_[static_cast<size_t>(out)].grad[0];
    Tensor& gx = t.ensure_grad(xi);
    for (int64_t i = 0; i < gx.numel(); ++i) gx[i] += g;
  });
}

Var Tape::mean_all(Var x) {
  return scale(sum_all(x), 1.0 / static_cast<double>(val(x).numel()));
}

Var Tape::mean_axis0(Var x) {
  const Tensor& xv = val(x);
  if (xv.ndim() < 2) throw std::invalid_argument("mean_axis0: need rank >= 2");
  int64_t m = xv.shape[0], stride = xv.numel() / m;
  std::vector<int64_t> oshape(xv.shape.begin() + 1, xv.shape.end());
  Tensor y(oshape);
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < stride; ++j) y[j] += xv[i * stride + j];
  for (double& v : y.data) v /= static_cast<double>(m);
  int xi = x.id;
  int out = static_cast<int>(nodes_.size());
  return make(std::move(y), needs_grad(x), [out, xi, m, stride](Tape& t) {
    const Tensor& g = t.nodes_[static_cast<size_t>(out)].grad;
    Tensor& gx = t.ensure_grad(xi);
    double inv = 1.0 / static_cast<double>(m);
    for (int64_t i = 0; i < m; ++i)
      for (int64_t j = 0; j < stride; ++j) gx[i * stride + j] += g[j] * inv;
  });
}

// ----------------------------------------------------------------- convolution

Var Tape::conv1d(Var x, Var w, Var b, int64_t kernel, int64_t stride) {
  const Tensor& xv = val(x);  // [B, L, Ci]
  const Tensor& wv = val(w);  // [kernel*Ci, Co]
  if (xv.ndim() != 3) throw std::invalid_argument("conv1d: x must be [B,L,Ci]");
  int64_t B = xv.shape[0], L = xv.shape[1], Ci = xv.shape[2];
  if (wv.shape[0] != kernel * Ci) throw std::invalid_argument("conv1d: weight dim mismatch");
  int64_t Co = wv.shape[1];
  if (L < kernel) throw std::invalid_argument("conv1d: input shorter than kernel");
  int64_t Lo = (L - kernel) / stride + 1;

  Tensor cols({B * Lo, kernel * Ci});
  for (int64_t bb = 0; bb < B; ++bb)
    for (int64_t t = 0; t < Lo; ++t)
      std::copy(xv.data.begin() + (bb * L + t * stride) * Ci,
                xv.data.begin() + (bb * L + t * stride + kernel) * Ci,
                cols.data.begin() + (bb * Lo + t) * kernel * Ci);
  Tensor y({B, Lo, Co});
  {
    CMapMat C(cols.data.data(), B * Lo, kernel * Ci), W(wv.data.data(), kernel * Ci, Co);
    MapMat Y(y.data.data(), B * Lo, Co);
    Y = C * W;
    for (int64_t i = 0; i < B * Lo; ++i)
      for (int64_t j = 0; j < Co; ++j) Y(i, j) += val(b)[j];
  }
  bool ng = needs_grad(x) || needs_grad(w) || needs_grad(b);
  int xi = x.id, wi = w.id, bi = b.id;
  int out = static_cast<int>(nodes_.size());
  return make(std::move(y), ng,
              [out, xi, wi, bi, B, L, Ci, Co, Lo, kernel, stride,
               cols = std::move(cols)](Tape& t) {
    CMapMat G(t.nodes_[static_cast<size_t>(out)].grad.data.data(), B * Lo, Co);
    if (t.needs_grad({wi})) {
      CMapMat C(cols.data.data(), B * Lo, kernel * Ci);
      MapMat GW(t.ensure_grad(wi).data.data(), kernel * Ci, Co);
      GW.noalias() += C.transpose() * G;
    }
    if (t.needs_grad({bi})) {
      Tensor& gb = t.ensure_grad(bi);
      for (int64_t i = 0; i < B * Lo; ++i)
        for (int64_t j = 0; j < Co; ++j) gb[j] += G(i, j);
    }
    if (t.needs_grad({xi})) {
      const Tensor& wv = t.nodes_[static_cast<size_t>(wi)].value;
      CMapMat W(wv.data.data(), kernel * Ci, Co);
      RowMat GC = G * W.transpose();  // [B*Lo, kernel*Ci]
      Tensor& gx = t.ensure_grad(xi);
      for (int64_t bb = 0; bb < B; ++bb)
        for (int64_t tt = 0; tt < Lo; ++tt)
          for (int64_t j = 0; j < kernel * Ci; ++j)
            gx[(bb * L + tt * stride) * Ci + j] += GC(bb * Lo + tt, j);
    }
  });
}

Var Tape::conv2d(Var x, Var w, Var b, int64_t kh, int64_t kw, int64_t stride) {
  const Tensor& xv = val(x);  // [B, H, W, Ci]
  const Tensor& wv = val(w);  // [kh*kw*Ci, Co]
  if (xv.ndim() != 4) throw std::invalid_argument("conv2d: x must be [B,H,W,Ci]");
  int64_t B = xv.shape[0], H = xv.shape[1], W = xv.shape[2], Ci = xv.shape[3];
  if (wv.shape[0] != kh * kw * Ci) throw std::invalid_argument("conv2d: weight dim mismatch");
  int64_t Co = wv.shape[1];
  if (H < kh || W < kw) throw std::invalid_argument("conv2d: input smaller than kernel");
  int64_t Ho = (H - kh) / stride + 1, Wo = (W - kw) / stride + 1;

  int64_t patch = kh * kw * Ci;
  Tensor cols({B * Ho * Wo, patch});
  for (int64_t bb = 0; bb < B; ++bb)
    for (int64_t oh = 0; oh < Ho; ++oh)
      for (int64_t ow = 0; ow < Wo; ++ow) {
        double* dst = cols.data.data() + ((bb * Ho + oh) * Wo + ow) * patch;
        for (int64_t r = 0; r < kh; ++r)
          std::copy(
              xv.data.data() + ((bb * H + oh * stride + r) * W + ow * stride) * Ci,
              xv.data.data() + ((bb * H + oh * stride + r) * W + ow * stride + kw) * Ci,
              dst + r * kw * Ci);
      }
  Tensor y({B, Ho, Wo, Co});
  {
    CMapMat C(cols.data.data(), B * Ho * Wo, patch), Wm(wv.data.data(), patch, Co);
    MapMat Y(y.data.data(), B * Ho * Wo, Co);
    Y = C * Wm;
    for (int64_t i = 0; i < B * Ho * Wo; ++i)
      for (int64_t j = 0; j < Co; ++j) Y(i, j) += val(b)[j];
  }
  bool ng = needs_grad(x) || needs_grad(w) || needs_grad(b);
  int xi = x.id, wi = w.id, bi = b.id;
  int out = static_cast<int>(nodes_.size());
  return make(std::move(y), ng,
              [out, xi, wi, bi, B, H, W, Ci, Co, Ho, Wo, kh, kw, stride, patch,
               cols = std::move(cols)](Tape& t) {
    CMapMat G(t.nodes_[static_cast<size_t>(out)].grad.data.data(), B * Ho * Wo, Co);
    if (t.needs_grad({wi})) {
      CMapMat C(cols.data.data(), B * Ho * Wo, patch);
      MapMat GW(t.ensure_grad(wi).data.data(), patch, Co);
      GW.noalias() += C.transpose() * G;
    }
    if (t.needs_grad({bi})) {
      Tensor& gb = t.ensure_grad(bi);
      for (int64_t i = 0; i < B * Ho * Wo; ++i)
        for (int64_t j = 0; j < Co; ++j) gb[j] += G(i, j);
    }
    if (t.needs_grad({xi})) {
      const Tensor& wv = t.nodes_[static_cast<size_t>(wi)].value;
      CMapMat Wm(wv.data.data(), patch, Co);
      RowMat GC = G * Wm.transpose();
      Tensor& gx = t.ensure_grad(xi);
      for (int64_t bb = 0; bb < B; ++bb)
        for (int64_t oh = 0; oh < Ho; ++oh)
          for (int64_t ow = 0; ow < Wo; ++ow) {
            const double* src = GC.data() + ((bb * Ho + oh) * Wo + ow) * patch;
            for (int64_t r = 0; r < kh; ++r)
              for (int64_t j = 0; j < kw * Ci; ++j)
                gx[((bb * H + oh * stride + r) * W + ow * stride) * Ci + j] +=
                    src[r * kw * Ci + j];
          }
    }
  });
}

// ------------------------------------------------------- masked-pretrain helpers

Var Tape::rows_select(Var x, const std::vector<FramePos>& pos) {
  const Tensor& xv = val(x);
  if (xv.ndim() != 3) throw std::invalid_argument("rows_select: x must be [B,T,D]");
  int64_t T = xv.shape[1], D = xv.shape[2];
  Tensor y({static_cast<int64_t>(pos.size()), D});
  for (size_t i = 0; i < pos.size(); ++i) {
    if (pos[i].batch < 0 || pos[i].batch >= xv.shape[0] || pos[i].t < 0 || pos[i].t >= T)
      throw std::invalid_argument("rows_select: position out of range");
    std::copy(xv.data.begin() + (pos[i].batch * T + pos[i].t) * D,
              xv.data.begin() + (pos[i].batch * T + pos[i].t + 1) * D,
              y.data.begin() + static_cast<int64_t>(i) * D);
  }
  int xi = x.id;
  int out = static_cast<int>(nodes_.size());
  return make(std::move(y), needs_grad(x), [out, xi, pos, T, D](Tape& t) {
    const Tensor& g = t.nodes_[static_cast<size_t>(out)].grad;
    Tensor& gx = t.ensure_grad(xi);
    for (size_t i = 0; i < pos.size(); ++i)
      for (int64_t j = 0; j < D; ++j)
        gx[(pos[i].batch * T + pos[i].t) * D + j] += g[static_cast<int64_t>(i) * D + j];
  });
}

Var Tape::mask_replace(Var x, const std::vector<FramePos>& pos, Var token) {
  const Tensor& xv = val(x);
  if (xv.ndim() != 3) throw std::invalid_argument("mask_replace: x must be [B,T,D]");
  int64_t T = xv.shape[1], D = xv.shape[2];
  if (val(token).numel() != D) throw std::invalid_argument("mask_replace: token dim mismatch");
  Tensor y = xv;
  for (const FramePos& p : pos) {
    if (p.batch < 0 || p.batch >= xv.shape[0] || p.t < 0 || p.t >= T)
      throw std::invalid_argument("mask_replace: index out of range");
    std::copy(val(token).data.begin(), val(token).data.end(),
              y.data.begin() + (p.batch * T + p.t) * D);
  }
  bool ng = needs_grad(x) || needs_grad(token);
  int xi = x.id, ti = token.id;
  int out = static_cast<int>(nodes_.size());
  return make(std::move(y), ng, [out, xi, ti, pos, T, D](Tape& t) {
    const Tensor& g = t.nodes_[static_cast<size_t>(out)].grad;
    std::vector<bool> masked(static_cast<size_t>(g.numel() / D), false);
    for (const FramePos& p : pos) masked[static_cast<size_t>(p.batch * T + p.t)] = true;
    if (t.needs_grad({xi})) {
      Tensor& gx = t.ensure_grad(xi);
      for (int64_t r = 0; r < g.numel() / D; ++r)
        if (!masked[static_cast<size_t>(r)])
          for (int64_t j = 0; j < D; ++j) gx[r * D + j] += g[r * D + j];
    }
    if (t.needs_grad({ti})) {
      Tensor& gt = t.ensure_grad(ti);
      for (const FramePos& p : pos)
        for (int64_t j = 0; j < D; ++j) gt[j] += g[(p.batch * T + p.t) * D + j];
    }
  });
}

Var Tape::gather_rows(Var x, std::vector<int64_t> idx) {
  const Tensor& xv = val(x);
  if (xv.ndim() != 2) throw std::invalid_argument("gather_rows: x must be [M,D]");
  int64_t D = xv.shape[1];
  Tensor y({static_cast<int64_t>(idx.size()), D});
  for (size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= xv.shape[0])
      throw std::invalid_argument("gather_rows: index out of range");
    std::copy(xv.data.begin() + idx[i] * D, xv.data.begin() + (idx[i] + 1) * D,
              y.data.begin() + static_cast<int64_t>(i) * D);
  }
  int xi = x.id;
  int out = static_cast<int>(nodes_.size());
  return make(std::move(y), needs_grad(x), [out, xi, idx = std::move(idx), D](Tape& t) {
    const Tensor& g = t.nodes_[static_cast<size_t>(out)].grad;
    Tensor& gx = t.ensure_grad(xi);
    for (size_t i = 0; i < idx.size(); ++i)
      for (int64_t j = 0; j < D; ++j)
        gx[idx[i] * D + j] += g[static_cast<int64_t>(i) * D + j];
  });
}

Var Tape::one_hot_st(Var soft) {
  const Tensor& sv = val(soft);
  int64_t d = last_dim(sv), r = rows_of(sv);
  Tensor y = Tensor::zeros(sv.shape);
  for (int64_t i = 0; i < r; ++i) {
    const double* p = sv.data.data() + i * d;
    int64_t best = static_cast<int64_t>(std::max_element(p, p + d) - p);
    y[i * d + best] = 1.0;
  }
  int si = soft.id;
  int out = static_cast<int>(nodes_.size());
  // straight-through: gradient passes unchanged to the soft distribution
  return make(std::move(y), needs_grad(soft), [out, si](Tape& t) {
    const Tensor& g = t.nodes_[static_cast<size_t>(out)].grad;
    Tensor& gs = t.ensure_grad(si);
    for (int64_t i = 0; i < g.numel(); ++i) gs[i] += g[i];
  });
}

Var Tape::cosine_rows(Var x, Var c) {
  const Tensor& xv = val(x);  // [M, D]
  const Tensor& cv = val(c);  // [M, C, D]
  if (xv.ndim() != 2 || cv.ndim() != 3 || xv.shape[0] != cv.shape[0] ||
      xv.shape[1] != cv.shape[2])
    throw std::invalid_argument("cosine_rows: shape mismatch");
  int64_t M = xv.shape[0], C = cv.shape[1], D = xv.shape[1];
  const double eps = 1e-12;
  Tensor y({M, C});
  for (int64_t m = 0; m < M; ++m) {
    const double* xm = xv.data.data() + m * D;
    double nx = 0;
    for (int64_t j = 0; j < D; ++j) nx += xm[j] * xm[j];
    nx = std::sqrt(nx) + eps;
    for (int64_t k = 0; k < C; ++k) {
      const double* ck = cv.data.data() + (m * C + k) * D;
      double nc = 0, dot = 0;
      for (int64_t j = 0; j < D; ++j) {
        nc += ck[j] * ck[j];
        dot += xm[j] * ck[j];
      }
      nc = std::sqrt(nc) + eps;
      y.at(m, k) = dot / (nx * nc);
    }
  }
  bool ng = needs_grad(x) || needs_grad(c);
  int xi = x.id, ci = c.id;
  int out = static_cast<int>(nodes_.size());
  return make(std::move(y), ng, [out, xi, ci, M, C, D, eps](Tape& t) {
    const Tensor& g = t.nodes_[static_cast<size_t>(out)].grad;
    const Tensor& xv = t.nodes_[static_cast<size_t>(xi)].value;
    const Tensor& cv = t.nodes_[static_cast<size_t>(ci)].value;
    const Tensor& yv = t.nodes_[static_cast<size_t>(out)].value;
    for (int64_t m = 0; m < M; ++m) {
      const double* xm = xv.data.data() + m * D;
      double nx = 0;
      for (int64_t j = 0; j < D; ++j) nx += xm[j] * xm[j];
      nx = std::sqrt(nx) + eps;
      for (int64_t k = 0; k < C; ++k) {
        double gk = g.at(m, k);
        if (gk == 0) continue;
        const double* ck = cv.data.data() + (m * C + k) * D;
        double nc = 0;
        for (int64_t j = 0; j < D; ++j) nc += ck[j] * ck[j];
        nc = std::sqrt(nc) + eps;
        double s = yv.at(m, k);
        if (t.needs_grad({xi})) {
          Tensor& gx = t.ensure_grad(xi);
          for (int64_t j = 0; j < D; ++j)
            gx[m * D + j] += gk * (ck[j] / (nx * nc) - s * xm[j] / (nx * nx));
        }
        if (t.needs_grad({ci})) {
          Tensor& gc = t.ensure_grad(ci);
          for (int64_t j = 0; j < D; ++j)
            gc[(m * C + k) * D + j] += gk * (xm[j] / (nx * nc) - s * ck[j] / (nc * nc));
        }
      }
    }
  });
}

// ----------------------------------------------------------------------- losses

Var Tape::bce_with_logits_mean(Var logits, const Tensor& labels) {
  const Tensor& lv = val(logits);
  check_same_shape(lv, labels, "bce_with_logits");
  int64_t n = lv.numel();
  double loss = 0;
  for (int64_t i = 0; i < n; ++i) {
    double l = lv[i], y = labels[i];
    loss += std::max(l, 0.0) - l * y + std::log1p(std::exp(-std::abs(l)));
  }
  loss /= static_cast<double>(n);
  int li = logits.id;
  int out = static_cast<int>(nodes_.size());
  return make(Tensor::scalar(loss), needs_grad(logits), [out, li, labels, n](Tape& t) {
    double g = t.nodes_[static_cast<size_t>(out)].grad[0] / static_cast<double>(n);
    const Tensor& lv = t.nodes_[static_cast<size_t>(li)].value;
    Tensor& gl = t.ensure_grad(li);
    for (int64_t i = 0; i < n; ++i)
      gl[i] += g * (1.0 / (1.0 + std::exp(-lv[i])) - labels[i]);
  });
}

Var Tape::cross_entropy_mean(Var logits, const std::vector<int>& labels) {
  const Tensor& lv = val(logits);
  if (lv.ndim() != 2 || lv.shape[0] != static_cast<int64_t>(labels.size()))
    throw std::invalid_argument("cross_entropy: shape mismatch");
  int64_t B = lv.shape[0], C = lv.shape[1];
  double loss = 0;
  Tensor probs(lv.shape);
  for (int64_t i = 0; i < B; ++i) {
    const double* p = lv.data.data() + i * C;
    double mx = *std::max_element(p, p + C), s = 0;
    for (int64_t j = 0; j < C; ++j) s += std::exp(p[j] - mx);
    double lse = mx + std::log(s);
    for (int64_t j = 0; j < C; ++j) probs[i * C + j] = std::exp(p[j] - lse);
    loss -= p[labels[static_cast<size_t>(i)]] - lse;
  }
  loss /= static_cast<double>(B);
  int li = logits.id;
  int out = static_cast<int>(nodes_.size());
  return make(Tensor::scalar(loss), needs_grad(logits),
              [out, li, labels, B, C, probs = std::move(probs)](Tape& t) {
    double g = t.nodes_[static_cast<size_t>(out)].grad[0] / static_cast<double>(B);
    Tensor& gl = t.ensure_grad(li);
    for (int64_t i = 0; i < B; ++i)
      for (int64_t j = 0; j < C; ++j)
        gl[i * C + j] +=
            g * (probs[i * C + j] - (j == labels[static_cast<size_t>(i)] ? 1.0 : 0.0));
  });
}

Var Tape::ctc_loss(Var logits, const std::vector<int>& targets, int blank) {
  const Tensor& lv = val(logits);  // [T, V]
  if (lv.ndim() != 2) throw std::invalid_argument("ctc_loss: logits must be [T,V]");
  int64_t T = lv.shape[0], V = lv.shape[1];
  int64_t L = static_cast<int64_t>(targets.size());
  for (int tok : targets)
    if (tok == blank || tok < 0 || tok >= V)
      throw std::invalid_argument("ctc_loss: invalid target token");
  // extended sequence with interleaved blanks
  int64_t S = 2 * L + 1;
  std::vector<int> ext(static_cast<size_t>(S), blank);
  for (int64_t i = 0; i < L; ++i) ext[static_cast<size_t>(2 * i + 1)] = targets[static_cast<size_t>(i)];
  // minimum frames: every label plus a blank between repeated labels
  int64_t min_T = L;
  for (int64_t i = 1; i < L; ++i)
    if (targets[static_cast<size_t>(i)] == targets[static_cast<size_t>(i - 1)]) ++min_T;
  if (T < min_T) throw std::invalid_argument("ctc_loss: target longer than input allows");

  // log-softmax
  Tensor logp({T, V});
  for (int64_t t = 0; t < T; ++t) {
    const double* p = lv.data.data() + t * V;
    double mx = *std::max_element(p, p + V), s = 0;
    for (int64_t j = 0; j < V; ++j) s += std::exp(p[j] - mx);
    double lse = mx + std::log(s);
    for (int64_t j = 0; j < V; ++j) logp.at(t, j) = p[j] - lse;
  }

  auto allow_skip = [&](int64_t s) {
    return s >= 2 && ext[static_cast<size_t>(s)] != blank &&
           ext[static_cast<size_t>(s)] != ext[static_cast<size_t>(s - 2)];
  };

  std::vector<double> alpha(static_cast<size_t>(T * S), kNegInf);
  alpha[0] = logp.at(0, blank);
  if (S > 1) alpha[1] = logp.at(0, ext[1]);
  for (int64_t t = 1; t < T; ++t)
    for (int64_t s = 0; s < S; ++s) {
      double a = alpha[static_cast<size_t>((t - 1) * S + s)];
      if (s >= 1) a = log_add(a, alpha[static_cast<size_t>((t - 1) * S + s - 1)]);
      if (allow_skip(s)) a = log_add(a, alpha[static_cast<size_t>((t - 1) * S + s - 2)]);
      alpha[static_cast<size_t>(t * S + s)] = a + logp.at(t, ext[static_cast<size_t>(s)]);
    }
  double log_p_total = alpha[static_cast<size_t>((T - 1) * S + S - 1)];
  if (S > 1) log_p_total = log_add(log_p_total, alpha[static_cast<size_t>((T - 1) * S + S - 2)]);

  std::vector<double> beta(static_cast<size_t>(T * S), kNegInf);
  beta[static_cast<size_t>((T - 1) * S + S - 1)] = logp.at(T - 1, blank);
  if (S > 1) beta[static_cast<size_t>((T - 1) * S + S - 2)] = logp.at(T - 1, ext[static_cast<size_t>(S - 2)]);
  for (int64_t t = T - 2; t >= 0; --t)
    for (int64_t s = S - 1; s >= 0; --s) {
      double b = beta[static_cast<size_t>((t + 1) * S + s)];
      if (s + 1 < S) b = log_add(b, beta[static_cast<size_t>((t + 1) * S + s + 1)]);
      if (s + 2 < S && allow_skip(s + 2))
        b = log_add(b, beta[static_cast<size_t>((t + 1) * S + s + 2)]);
      beta[static_cast<size_t>(t * S + s)] = b + logp.at(t, ext[static_cast<size_t>(s)]);
    }

  // grad wrt raw logits: softmax(t,v) - gamma(t,v)
  Tensor glogits({T, V});
  for (int64_t t = 0; t < T; ++t) {
    std::vector<double> lab(static_cast<size_t>(V), kNegInf);
    for (int64_t s = 0; s < S; ++s) {
      // alpha and beta both include logp(t, ext[s]); divide one copy out
      double ab = alpha[static_cast<size_t>(t * S + s)] + beta[static_cast<size_t>(t * S + s)] -
                  logp.at(t, ext[static_cast<size_t>(s)]);
      lab[static_cast<size_t>(ext[static_cast<size_t>(s)])] =
          log_add(lab[static_cast<size_t>(ext[static_cast<size_t>(s)])], ab);
    }
    for (int64_t v = 0; v < V; ++v) {
      double gamma = (lab[static_cast<size_t>(v)] == kNegInf)
                         ? 0.0
                         : std::exp(lab[static_cast<size_t>(v)] - log_p_total);
      glogits.at(t, v) = std::exp(logp.at(t, v)) - gamma;
    }
  }

  int li = logits.id;
  int out = static_cast<int>(nodes_.size());
  return make(Tensor::scalar(-log_p_total), needs_grad(logits),
              [out, li, glogits = std::move(glogits)](Tape& t) {
    double g = t.nodes_[static_cast<size_t>(out)].grad[0];
    Tensor& gl = t.ensure_grad(li);
    for (int64_t i = 0; i < glogits.numel(); ++i) gl[i] += g * glogits[i];
  });
}

}  // namespace mfas

#include "ranlab/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "ranlab/errors.hpp"

namespace ranlab::ops {
namespace {

// Gradient accumulator of `v`, or nullptr when v takes no gradient.
Array* gbuf(Tape& t, Var v) { return t.requires_grad(v) ? &t.grad_buffer(v) : nullptr; }

void require_same_shape(Var a, Var b, const char* op) {
  RANLAB_REQUIRE(a.tape == b.tape, std::string(op) + ": operands on different tapes");
  RANLAB_REQUIRE(a.shape() == b.shape(), std::string(op) + ": shape mismatch " +
                                             shape_string(a.shape()) + " vs " +
                                             shape_string(b.shape()));
}

void require_matrix(Var a, const char* op) {
  RANLAB_REQUIRE(a.value().rank() == 2, std::string(op) + ": expected a matrix, got " +
                                            shape_string(a.shape()));
}

template <typename F, typename D>
Var unary(const char* op, Var a, F f, D df) {
  const Array& x = a.value();
  Array y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  return a.tape->record(op, std::move(y), {a}, [a, df](Tape& t, const Array& g, const Array& y) {
    if (Array* ga = gbuf(t, a)) {
      const Array& x = t.value(a);
      for (std::size_t i = 0; i < x.size(); ++i) (*ga)[i] += g[i] * df(x[i], y[i]);
    }
  });
}

}  // namespace

Var add(Var a, Var b) {
  require_same_shape(a, b, "add");
  Array y = a.value();
  const Array& bv = b.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += bv[i];
  return a.tape->record("add", std::move(y), {a, b}, [a, b](Tape& t, const Array& g, const Array&) {
    if (Array* ga = gbuf(t, a))
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
    if (Array* gb = gbuf(t, b))
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i];
  });
}

Var sub(Var a, Var b) {
  require_same_shape(a, b, "sub");
  Array y = a.value();
  const Array& bv = b.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] -= bv[i];
  return a.tape->record("sub", std::move(y), {a, b}, [a, b](Tape& t, const Array& g, const Array&) {
    if (Array* ga = gbuf(t, a))
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
    if (Array* gb = gbuf(t, b))
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] -= g[i];
  });
}

Var mul(Var a, Var b) {
  require_same_shape(a, b, "mul");
  Array y = a.value();
  const Array& bv = b.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= bv[i];
  return a.tape->record("mul", std::move(y), {a, b}, [a, b](Tape& t, const Array& g, const Array&) {
    const Array& av = t.value(a);
    const Array& bv = t.value(b);
    if (Array* ga = gbuf(t, a))
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * bv[i];
    if (Array* gb = gbuf(t, b))
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * av[i];
  });
}

Var neg(Var a) { return scale(a, -1.0); }

Var scale(Var a, double s) {
  Array y = a.value();
  for (double& v : y.data()) v *= s;
  return a.tape->record("scale", std::move(y), {a}, [a, s](Tape& t, const Array& g, const Array&) {
    if (Array* ga = gbuf(t, a))
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * s;
  });
}

Var add_scalar(Var a, double s) {
  Array y = a.value();
  for (double& v : y.data()) v += s;
  return a.tape->record("add_scalar", std::move(y), {a}, [a](Tape& t, const Array& g, const Array&) {
    if (Array* ga = gbuf(t, a))
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
  });
}

Var scale_by(Var a, Var s) {
  RANLAB_REQUIRE(s.value().size() == 1, "scale_by: factor must be a scalar");
  const double sv = s.value()[0];
  Array y = a.value();
  for (double& v : y.data()) v *= sv;
  return a.tape->record("scale_by", std::move(y), {a, s}, [a, s](Tape& t, const Array& g, const Array&) {
    const double sv = t.value(s)[0];
    if (Array* ga = gbuf(t, a))
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * sv;
    if (Array* gs = gbuf(t, s)) {
      const Array& av = t.value(a);
      double acc = 0.0;
      for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * av[i];
      (*gs)[0] += acc;
    }
  });
}

Var matmul(Var a, Var b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const Array& av = a.value();
  const Array& bv = b.value();
  const std::size_t n = av.rows(), k = av.cols(), m = bv.cols();
  RANLAB_REQUIRE(bv.rows() == k, "matmul: inner dimensions differ " + shape_string(av.shape()) +
                                     " x " + shape_string(bv.shape()));
  Array y(Shape{n, m});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av[i * k + p];
      for (std::size_t j = 0; j < m; ++j) y[i * m + j] += aip * bv[p * m + j];
    }
  return a.tape->record("matmul", std::move(y), {a, b}, [a, b, n, k, m](Tape& t, const Array& g, const Array&) {
    const Array& av = t.value(a);
    const Array& bv = t.value(b);
    if (Array* ga = gbuf(t, a))
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double acc = 0.0;
          for (std::size_t j = 0; j < m; ++j) acc += g[i * m + j] * bv[p * m + j];
          (*ga)[i * k + p] += acc;
        }
    if (Array* gb = gbuf(t, b))
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = av[i * k + p];
          for (std::size_t j = 0; j < m; ++j) (*gb)[p * m + j] += aip * g[i * m + j];
        }
  });
}

Var matmul_nt(Var a, Var b) {
  require_matrix(a, "matmul_nt");
  require_matrix(b, "matmul_nt");
  const Array& av = a.value();
  const Array& bv = b.value();
  const std::size_t n = av.rows(), k = av.cols(), m = bv.rows();
  RANLAB_REQUIRE(bv.cols() == k, "matmul_nt: inner dimensions differ " +
                                     shape_string(av.shape()) + " x " + shape_string(bv.shape()) + "^T");
  Array y(Shape{n, m});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += av[i * k + p] * bv[j * k + p];
      y[i * m + j] = acc;
    }
  return a.tape->record("matmul_nt", std::move(y), {a, b}, [a, b, n, k, m](Tape& t, const Array& g, const Array&) {
    const Array& av = t.value(a);
    const Array& bv = t.value(b);
    if (Array* ga = gbuf(t, a))
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) {
          const double gij = g[i * m + j];
          for (std::size_t p = 0; p < k; ++p) (*ga)[i * k + p] += gij * bv[j * k + p];
        }
    if (Array* gb = gbuf(t, b))
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) {
          const double gij = g[i * m + j];
          for (std::size_t p = 0; p < k; ++p) (*gb)[j * k + p] += gij * av[i * k + p];
        }
  });
}

Var transpose(Var a) {
  require_matrix(a, "transpose");
  const Array& av = a.value();
  const std::size_t n = av.rows(), m = av.cols();
  Array y(Shape{m, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) y[j * n + i] = av[i * m + j];
  return a.tape->record("transpose", std::move(y), {a}, [a, n, m](Tape& t, const Array& g, const Array&) {
    if (Array* ga = gbuf(t, a))
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) (*ga)[i * m + j] += g[j * n + i];
  });
}

Var reshape(Var a, Shape shape) {
  Array y = a.value().reshaped(std::move(shape));
  return a.tape->record("reshape", std::move(y), {a}, [a](Tape& t, const Array& g, const Array&) {
    if (Array* ga = gbuf(t, a))
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
  });
}

Var add_row(Var a, Var b) {
  require_matrix(a, "add_row");
  const std::size_t n = a.value().rows(), m = a.value().cols();
  RANLAB_REQUIRE(b.value().rank() == 1 && b.value().size() == m,
                 "add_row: bias shape " + shape_string(b.shape()) + " vs matrix " +
                     shape_string(a.shape()));
  Array y = a.value();
  const Array& bv = b.value();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) y[i * m + j] += bv[j];
  return a.tape->record("add_row", std::move(y), {a, b}, [a, b, n, m](Tape& t, const Array& g, const Array&) {
    if (Array* ga = gbuf(t, a))
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
    if (Array* gb = gbuf(t, b))
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) (*gb)[j] += g[i * m + j];
  });
}

Var sub_row(Var a, Var b) { return add_row(a, neg(b)); }

Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return a.tape->record("sum", Array::scalar(s), {a}, [a](Tape& t, const Array& g, const Array&) {
    if (Array* ga = gbuf(t, a))
      for (double& v : ga->data()) v += g[0];
  });
}

Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

Var sum_rows(Var a) {
  require_matrix(a, "sum_rows");
  const std::size_t n = a.value().rows(), m = a.value().cols();
  const Array& av = a.value();
  Array y(Shape{m});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) y[j] += av[i * m + j];
  return a.tape->record("sum_rows", std::move(y), {a}, [a, n, m](Tape& t, const Array& g, const Array&) {
    if (Array* ga = gbuf(t, a))
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) (*ga)[i * m + j] += g[j];
  });
}

Var mean_rows(Var a) {
  require_matrix(a, "mean_rows");
  return scale(sum_rows(a), 1.0 / static_cast<double>(a.value().rows()));
}

Var sum_cols(Var a) {
  require_matrix(a, "sum_cols");
  const std::size_t n = a.value().rows(), m = a.value().cols();
  const Array& av = a.value();
  Array y(Shape{n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) y[i] += av[i * m + j];
  return a.tape->record("sum_cols", std::move(y), {a}, [a, n, m](Tape& t, const Array& g, const Array&) {
    if (Array* ga = gbuf(t, a))
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) (*ga)[i * m + j] += g[i];
  });
}

Var row_dot(Var a, Var b) { return sum_cols(mul(a, b)); }

Var exp(Var a) {
  return unary("exp", a, [](double x) { return std::exp(x); },
               [](double, double y) { return y; });
}

Var log(Var a) {
  for (double v : a.value().data())
    if (!(v > 0.0)) throw NumericError("log of non-positive value");
  return unary("log", a, [](double x) { return std::log(x); },
               [](double x, double) { return 1.0 / x; });
}

Var sqrt(Var a) {
  return unary("sqrt", a, [](double x) { return std::sqrt(x); },
               [](double, double y) { return 0.5 / y; });
}

Var square(Var a) {
  return unary("square", a, [](double x) { return x * x; },
               [](double x, double) { return 2.0 * x; });
}

Var tanh(Var a) {
  return unary("tanh", a, [](double x) { return std::tanh(x); },
               [](double, double y) { return 1.0 - y * y; });
}

Var smooth_relu(Var a) {
  return unary(
      "smooth_relu", a,
      [](double x) {
        const double sp = x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
        return sp - std::numbers::ln2;
      },
      [](double x, double) {
        return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
      });
}

Var acos_clamped(Var a, double lo, double hi) {
  RANLAB_REQUIRE(-1.0 < lo && lo < hi && hi < 1.0, "acos_clamped: need -1 < lo < hi < 1");
  return unary(
      "acos_clamped", a, [](double x) { return std::acos(std::clamp(x, -1.0, 1.0)); },
      [lo, hi](double x, double) {
        const double c = std::clamp(x, lo, hi);
        return -1.0 / std::sqrt(1.0 - c * c);
      });
}

Var normalize_rows(Var a) {
  const Array& av = a.value();
  RANLAB_REQUIRE(av.rank() == 1 || av.rank() == 2, "normalize_rows: expected vector or matrix");
  const std::size_t n = av.rank() == 2 ? av.rows() : 1;
  const std::size_t d = av.rank() == 2 ? av.cols() : av.size();
  std::vector<double> norms(n);
  Array y = av;
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += av[i * d + j] * av[i * d + j];
    const double r = std::sqrt(s);
    if (!(r > 0.0))
      throw DegenerateEmbedding("cannot normalize zero-norm row " + std::to_string(i));
    norms[i] = r;
    for (std::size_t j = 0; j < d; ++j) y[i * d + j] /= r;
  }
  return a.tape->record("normalize_rows", std::move(y), {a},
                        [a, n, d, norms = std::move(norms)](Tape& t, const Array& g, const Array& y) {
                          Array* ga = gbuf(t, a);
                          if (!ga) return;
                          for (std::size_t i = 0; i < n; ++i) {
                            double yg = 0.0;
                            for (std::size_t j = 0; j < d; ++j) yg += y[i * d + j] * g[i * d + j];
                            for (std::size_t j = 0; j < d; ++j)
                              (*ga)[i * d + j] += (g[i * d + j] - y[i * d + j] * yg) / norms[i];
                          }
                        });
}

Var softmax_rows(Var a) {
  require_matrix(a, "softmax_rows");
  const Array& av = a.value();
  const std::size_t n = av.rows(), m = av.cols();
  Array y(av.shape());
  for (std::size_t i = 0; i < n; ++i) {
    double mx = av[i * m];
    for (std::size_t j = 1; j < m; ++j) mx = std::max(mx, av[i * m + j]);
    double z = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      y[i * m + j] = std::exp(av[i * m + j] - mx);
      z += y[i * m + j];
    }
    for (std::size_t j = 0; j < m; ++j) y[i * m + j] /= z;
  }
  return a.tape->record("softmax_rows", std::move(y), {a}, [a, n, m](Tape& t, const Array& g, const Array& y) {
    Array* ga = gbuf(t, a);
    if (!ga) return;
    for (std::size_t i = 0; i < n; ++i) {
      double yg = 0.0;
      for (std::size_t j = 0; j < m; ++j) yg += y[i * m + j] * g[i * m + j];
      for (std::size_t j = 0; j < m; ++j) (*ga)[i * m + j] += y[i * m + j] * (g[i * m + j] - yg);
    }
  });
}

Var log_softmax_rows(Var a) {
  require_matrix(a, "log_softmax_rows");
  const Array& av = a.value();
  const std::size_t n = av.rows(), m = av.cols();
  Array y(av.shape());
  for (std::size_t i = 0; i < n; ++i) {
    double mx = av[i * m];
    for (std::size_t j = 1; j < m; ++j) mx = std::max(mx, av[i * m + j]);
    double z = 0.0;
    for (std::size_t j = 0; j < m; ++j) z += std::exp(av[i * m + j] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < m; ++j) y[i * m + j] = av[i * m + j] - lse;
  }
  return a.tape->record("log_softmax_rows", std::move(y), {a}, [a, n, m](Tape& t, const Array& g, const Array& y) {
    Array* ga = gbuf(t, a);
    if (!ga) return;
    for (std::size_t i = 0; i < n; ++i) {
      double gs = 0.0;
      for (std::size_t j = 0; j < m; ++j) gs += g[i * m + j];
      for (std::size_t j = 0; j < m; ++j)
        (*ga)[i * m + j] += g[i * m + j] - std::exp(y[i * m + j]) * gs;
    }
  });
}

Var pick(Var a, std::span<const std::size_t> index) {
  require_matrix(a, "pick");
  const Array& av = a.value();
  const std::size_t n = av.rows(), m = av.cols();
  RANLAB_REQUIRE(index.size() == n, "pick: one index per row required");
  std::vector<std::size_t> idx(index.begin(), index.end());
  Array y(Shape{n});
  for (std::size_t i = 0; i < n; ++i) {
    RANLAB_REQUIRE(idx[i] < m, "pick: column index out of range");
    y[i] = av[i * m + idx[i]];
  }
  return a.tape->record("pick", std::move(y), {a}, [a, m, idx = std::move(idx)](Tape& t, const Array& g, const Array&) {
    if (Array* ga = gbuf(t, a))
      for (std::size_t i = 0; i < idx.size(); ++i) (*ga)[i * m + idx[i]] += g[i];
  });
}

Var cross_entropy(Var logits, std::span<const int> labels) {
  require_matrix(logits, "cross_entropy");
  const std::size_t n = logits.value().rows(), k = logits.value().cols();
  RANLAB_REQUIRE(labels.size() == n, "cross_entropy: one label per row required");
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) {
    RANLAB_REQUIRE(labels[i] >= 0 && static_cast<std::size_t>(labels[i]) < k,
                   "cross_entropy: label " + std::to_string(labels[i]) + " outside [0," +
                       std::to_string(k) + ")");
    idx[i] = static_cast<std::size_t>(labels[i]);
  }
  return neg(mean(pick(log_softmax_rows(logits), idx)));
}

Var binary_cross_entropy(Var logits, const Array& targets) {
  RANLAB_REQUIRE(logits.shape() == targets.shape(), "binary_cross_entropy: shape mismatch");
  const Array& x = logits.value();
  double total = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double z = x[i], yv = targets[i];
    // log(1 + e^{-|z|}) + max(z, 0) - z*y
    total += std::max(z, 0.0) - z * yv + std::log1p(std::exp(-std::abs(z)));
  }
  const double count = static_cast<double>(x.size());
  return logits.tape->record(
      "binary_cross_entropy", Array::scalar(total / count), {logits},
      [logits, targets, count](Tape& t, const Array& g, const Array&) {
        Array* ga = gbuf(t, logits);
        if (!ga) return;
        const Array& x = t.value(logits);
        for (std::size_t i = 0; i < x.size(); ++i) {
          const double s = x[i] >= 0.0 ? 1.0 / (1.0 + std::exp(-x[i]))
                                       : std::exp(x[i]) / (1.0 + std::exp(x[i]));
          (*ga)[i] += g[0] * (s - targets[i]) / count;
        }
      });
}

Var gather_rows(Var a, std::span<const std::size_t> index) {
  require_matrix(a, "gather_rows");
  const Array& av = a.value();
  const std::size_t rows = av.rows(), d = av.cols();
  RANLAB_REQUIRE(!index.empty(), "gather_rows: empty index");
  std::vector<std::size_t> idx(index.begin(), index.end());
  Array y(Shape{idx.size(), d});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    RANLAB_REQUIRE(idx[i] < rows, "gather_rows: row index " + std::to_string(idx[i]) +
                                      " out of range " + std::to_string(rows));
    std::copy_n(av.data().begin() + static_cast<std::ptrdiff_t>(idx[i] * d), d,
                y.data().begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  return a.tape->record("gather_rows", std::move(y), {a}, [a, d, idx = std::move(idx)](Tape& t, const Array& g, const Array&) {
    if (Array* ga = gbuf(t, a))
      for (std::size_t i = 0; i < idx.size(); ++i)
        for (std::size_t j = 0; j < d; ++j) (*ga)[idx[i] * d + j] += g[i * d + j];
  });
}

Var slice_rows(Var a, std::size_t begin, std::size_t count) {
  require_matrix(a, "slice_rows");
  const std::size_t d = a.value().cols();
  RANLAB_REQUIRE(count > 0 && begin + count <= a.value().rows(), "slice_rows: range out of bounds");
  const auto first = a.value().data().begin() + static_cast<std::ptrdiff_t>(begin * d);
  Array y(Shape{count, d}, std::vector<double>(first, first + static_cast<std::ptrdiff_t>(count * d)));
  return a.tape->record("slice_rows", std::move(y), {a}, [a, begin, d](Tape& t, const Array& g, const Array&) {
    if (Array* ga = gbuf(t, a))
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[begin * d + i] += g[i];
  });
}

Var segment_mean(Var a, std::span<const std::size_t> lengths) {
  require_matrix(a, "segment_mean");
  const Array& av = a.value();
  const std::size_t d = av.cols();
  std::vector<std::size_t> lens(lengths.begin(), lengths.end());
  std::size_t total = 0;
  for (auto l : lens) {
    RANLAB_REQUIRE(l > 0, "segment_mean: empty segment");
    total += l;
  }
  RANLAB_REQUIRE(total == av.rows(), "segment_mean: lengths do not cover all rows");
  Array y(Shape{lens.size(), d});
  std::size_t r = 0;
  for (std::size_t s = 0; s < lens.size(); ++s) {
    for (std::size_t q = 0; q < lens[s]; ++q, ++r)
      for (std::size_t j = 0; j < d; ++j) y[s * d + j] += av[r * d + j];
    for (std::size_t j = 0; j < d; ++j) y[s * d + j] /= static_cast<double>(lens[s]);
  }
  return a.tape->record("segment_mean", std::move(y), {a}, [a, d, lens = std::move(lens)](Tape& t, const Array& g, const Array&) {
    Array* ga = gbuf(t, a);
    if (!ga) return;
    std::size_t r = 0;
    for (std::size_t s = 0; s < lens.size(); ++s) {
      const double w = 1.0 / static_cast<double>(lens[s]);
      for (std::size_t q = 0; q < lens[s]; ++q, ++r)
        for (std::size_t j = 0; j < d; ++j) (*ga)[r * d + j] += g[s * d + j] * w;
    }
  });
}

Var concat_cols(Var a, Var b) {
  require_matrix(a, "concat_cols");
  require_matrix(b, "concat_cols");
  const std::size_t n = a.value().rows(), p = a.value().cols(), q = b.value().cols();
  RANLAB_REQUIRE(b.value().rows() == n, "concat_cols: row counts differ");
  Array y(Shape{n, p + q});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < p; ++j) y[i * (p + q) + j] = a.value()[i * p + j];
    for (std::size_t j = 0; j < q; ++j) y[i * (p + q) + p + j] = b.value()[i * q + j];
  }
  return a.tape->record("concat_cols", std::move(y), {a, b}, [a, b, n, p, q](Tape& t, const Array& g, const Array&) {
    if (Array* ga = gbuf(t, a))
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < p; ++j) (*ga)[i * p + j] += g[i * (p + q) + j];
    if (Array* gb = gbuf(t, b))
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < q; ++j) (*gb)[i * q + j] += g[i * (p + q) + p + j];
  });
}

Var concat(Var a, Var b) {
  RANLAB_REQUIRE(a.value().rank() == 1 && b.value().rank() == 1, "concat: expected vectors");
  const std::size_t p = a.value().size(), q = b.value().size();
  std::vector<double> v(a.value().values());
  v.insert(v.end(), b.value().values().begin(), b.value().values().end());
  return a.tape->record("concat", Array::vector(std::move(v)), {a, b}, [a, b, p, q](Tape& t, const Array& g, const Array&) {
    if (Array* ga = gbuf(t, a))
      for (std::size_t j = 0; j < p; ++j) (*ga)[j] += g[j];
    if (Array* gb = gbuf(t, b))
      for (std::size_t j = 0; j < q; ++j) (*gb)[j] += g[p + j];
  });
}

Var stack_rows(std::span<const Var> rows) {
  RANLAB_REQUIRE(!rows.empty(), "stack_rows: need at least one row");
  const std::size_t d = rows.front().value().size();
  Array y(Shape{rows.size(), d});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const Array& r = rows[i].value();
    RANLAB_REQUIRE(r.size() == d && (r.rank() == 1 || (r.rank() == 2 && r.rows() == 1)),
                   "stack_rows: rows must be vectors of equal length");
    std::copy(r.data().begin(), r.data().end(), y.row(i).begin());
  }
  const std::vector<Var> inputs(rows.begin(), rows.end());
  return rows.front().tape->record("stack_rows", std::move(y), inputs, [inputs, d](Tape& t, const Array& g, const Array&) {
    for (std::size_t i = 0; i < inputs.size(); ++i)
      if (Array* gi = gbuf(t, inputs[i]))
        for (std::size_t j = 0; j < d; ++j) (*gi)[j] += g[i * d + j];
  });
}

Var row_distances(Var f, Var c) {
  require_matrix(f, "row_distances");
  require_matrix(c, "row_distances");
  const Array& fv = f.value();
  const Array& cv = c.value();
  const std::size_t n = fv.rows(), k = cv.rows(), d = fv.cols();
  RANLAB_REQUIRE(cv.cols() == d, "row_distances: feature dimensions differ");
  Array y(Shape{n, k});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < k; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < d; ++p) {
        const double diff = fv[i * d + p] - cv[j * d + p];
        s += diff * diff;
      }
      y[i * k + j] = std::sqrt(s);
    }
  return f.tape->record("row_distances", std::move(y), {f, c}, [f, c, n, k, d](Tape& t, const Array& g, const Array& y) {
    const Array& fv = t.value(f);
    const Array& cv = t.value(c);
    Array* gf = gbuf(t, f);
    Array* gc = gbuf(t, c);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < k; ++j) {
        const double dist = y[i * k + j];
        if (dist == 0.0) continue;
        const double w = g[i * k + j] / dist;
        for (std::size_t p = 0; p < d; ++p) {
          const double diff = fv[i * d + p] - cv[j * d + p];
          if (gf) (*gf)[i * d + p] += w * diff;
          if (gc) (*gc)[j * d + p] -= w * diff;
        }
      }
  });
}

Var patchify(Var images, std::size_t height, std::size_t width, std::size_t channels,
             std::size_t patch) {
  require_matrix(images, "patchify");
  const Array& x = images.value();
  RANLAB_REQUIRE(patch > 0 && height % patch == 0 && width % patch == 0,
                 "patchify: image size not divisible by patch size");
  RANLAB_REQUIRE(x.cols() == height * width * channels,
                 "patchify: row length " + std::to_string(x.cols()) + " != H*W*C");
  const std::size_t n = x.rows();
  const std::size_t ph = height / patch, pw = width / patch;
  const std::size_t feat = patch * patch * channels;
  // Precomputed source index for every output element; backward reuses it.
  std::vector<std::size_t> src(n * ph * pw * feat);
  std::size_t o = 0;
  for (std::size_t img = 0; img < n; ++img)
    for (std::size_t py = 0; py < ph; ++py)
      for (std::size_t px = 0; px < pw; ++px)
        for (std::size_t dy = 0; dy < patch; ++dy)
          for (std::size_t dx = 0; dx < patch; ++dx)
            for (std::size_t ch = 0; ch < channels; ++ch) {
              const std::size_t h = py * patch + dy, w = px * patch + dx;
              src[o++] = img * x.cols() + (h * width + w) * channels + ch;
            }
  Array y(Shape{n * ph * pw, feat});
  for (std::size_t i = 0; i < src.size(); ++i) y[i] = x[src[i]];
  return images.tape->record("patchify", std::move(y), {images}, [images, src = std::move(src)](Tape& t, const Array& g, const Array&) {
    if (Array* gx = gbuf(t, images))
      for (std::size_t i = 0; i < src.size(); ++i) (*gx)[src[i]] += g[i];
  });
}

}  // namespace ranlab::ops

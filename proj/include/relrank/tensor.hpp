#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace relrank {

class Tensor;
using TensorPtr = std::shared_ptr<Tensor>;

inline std::string shape_str(const std::vector<std::size_t>& s) {
  std::ostringstream os;
  os << "(";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << "x";
    os << s[i];
  }
  os << ")";
  return os.str();
}

// Dense row-major tensor of doubles with reverse-mode autodiff.
//
// Nodes form a DAG through `parents`; `backward_fn`, when set, reads this
// node's grad and accumulates into the parents' grads. Leaves (no
// backward_fn) keep their accumulated gradients across backward passes;
// interior grads are scratch that ComputeGraph::backward resets.
// Only ranks 1 and 2 are used by the library.
class Tensor : public std::enable_shared_from_this<Tensor> {
 public:
  std::vector<std::size_t> shape;
  std::vector<double> values;
  std::vector<double> grad;  // sized lazily; empty until first needed
  bool requires_grad = false;

  std::vector<TensorPtr> parents;
  std::function<void()> backward_fn;

  static TensorPtr make(std::vector<std::size_t> shape, bool requires_grad = false) {
    auto t = std::make_shared<Tensor>();
    t->shape = std::move(shape);
    t->values.assign(t->count(), 0.0);
    t->requires_grad = requires_grad;
    return t;
  }

  static TensorPtr make(std::vector<std::size_t> shape, std::vector<double> vals,
                        bool requires_grad = false) {
    auto t = std::make_shared<Tensor>();
    t->shape = std::move(shape);
    if (vals.size() != t->count()) {
      throw std::invalid_argument("tensor: " + std::to_string(vals.size()) +
                                  " values for shape " + shape_str(t->shape));
    }
    t->values = std::move(vals);
    t->requires_grad = requires_grad;
    return t;
  }

  static TensorPtr scalar(double v, bool requires_grad = false) {
    return make({1}, {v}, requires_grad);
  }

  static TensorPtr vec(std::vector<double> vals, bool requires_grad = false) {
    std::size_t n = vals.size();
    return make({n}, std::move(vals), requires_grad);
  }

  static TensorPtr matrix(std::size_t r, std::size_t c, std::vector<double> vals,
                          bool requires_grad = false) {
    return make({r, c}, std::move(vals), requires_grad);
  }

  std::size_t size() const { return values.size(); }

  std::size_t rank() const { return shape.size(); }

  std::size_t rows() const {
    if (rank() != 2) throw std::logic_error("rows(): tensor is not 2-D, shape " + shape_str(shape));
    return shape[0];
  }

  std::size_t cols() const {
    if (rank() != 2) throw std::logic_error("cols(): tensor is not 2-D, shape " + shape_str(shape));
    return shape[1];
  }

  double& at(std::size_t i) { return values[i]; }
  double at(std::size_t i) const { return values[i]; }
  double& at(std::size_t r, std::size_t c) { return values[r * shape[1] + c]; }
  double at(std::size_t r, std::size_t c) const { return values[r * shape[1] + c]; }

  bool is_leaf() const { return !backward_fn; }

  void ensure_grad() {
    if (grad.size() != values.size()) grad.assign(values.size(), 0.0);
  }

  void zero_grad() {
    if (!grad.empty()) std::fill(grad.begin(), grad.end(), 0.0);
  }

 private:
  std::size_t count() const {
    std::size_t n = 1;
    for (std::size_t d : shape) {
      if (d == 0) throw std::invalid_argument("tensor: zero extent in shape " + shape_str(shape));
      n *= d;
    }
    return n;
  }
};

namespace detail {

inline bool any_requires_grad(const std::vector<TensorPtr>& ts) {
  for (const auto& t : ts)
    if (t->requires_grad) return true;
  return false;
}

// Builds a non-leaf node. The backward closure must capture the raw
// `Tensor*` of the output (never its shared_ptr, which would leak a cycle).
template <class MakeBackward>
inline TensorPtr node(std::vector<std::size_t> shape, std::vector<double> vals,
                      std::vector<TensorPtr> parents, MakeBackward&& make_backward) {
  auto out = Tensor::make(std::move(shape), std::move(vals));
  out->requires_grad = any_requires_grad(parents);
  out->parents = std::move(parents);
  out->backward_fn = make_backward(out.get());
  return out;
}

inline void check_same_shape(const TensorPtr& a, const TensorPtr& b, const char* op) {
  if (a->shape != b->shape) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a->shape) +
                                " vs " + shape_str(b->shape));
  }
}

inline void accumulate(const TensorPtr& t, std::size_t i, double v) {
  if (!t->requires_grad) return;
  t->ensure_grad();
  t->grad[i] += v;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic
// ---------------------------------------------------------------------------

inline TensorPtr add(const TensorPtr& a, const TensorPtr& b) {
  detail::check_same_shape(a, b, "add");
  std::vector<double> out(a->size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->values[i] + b->values[i];
  return detail::node(a->shape, std::move(out), {a, b}, [a, b](Tensor* self) {
    return [a, b, self] {
      for (std::size_t i = 0; i < self->grad.size(); ++i) {
        detail::accumulate(a, i, self->grad[i]);
        detail::accumulate(b, i, self->grad[i]);
      }
    };
  });
}

inline TensorPtr sub(const TensorPtr& a, const TensorPtr& b) {
  detail::check_same_shape(a, b, "sub");
  std::vector<double> out(a->size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->values[i] - b->values[i];
  return detail::node(a->shape, std::move(out), {a, b}, [a, b](Tensor* self) {
    return [a, b, self] {
      for (std::size_t i = 0; i < self->grad.size(); ++i) {
        detail::accumulate(a, i, self->grad[i]);
        detail::accumulate(b, i, -self->grad[i]);
      }
    };
  });
}

inline TensorPtr mul(const TensorPtr& a, const TensorPtr& b) {
  detail::check_same_shape(a, b, "mul");
  std::vector<double> out(a->size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->values[i] * b->values[i];
  return detail::node(a->shape, std::move(out), {a, b}, [a, b](Tensor* self) {
    return [a, b, self] {
      for (std::size_t i = 0; i < self->grad.size(); ++i) {
        detail::accumulate(a, i, self->grad[i] * b->values[i]);
        detail::accumulate(b, i, self->grad[i] * a->values[i]);
      }
    };
  });
}

// k*t + c, elementwise. Covers negation, scaling and constant shifts.
inline TensorPtr affine(const TensorPtr& t, double k, double c) {
  std::vector<double> out(t->size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = k * t->values[i] + c;
  return detail::node(t->shape, std::move(out), {t}, [t, k](Tensor* self) {
    return [t, k, self] {
      for (std::size_t i = 0; i < self->grad.size(); ++i)
        detail::accumulate(t, i, k * self->grad[i]);
    };
  });
}

// ---------------------------------------------------------------------------
// Matrix operations
// ---------------------------------------------------------------------------

inline TensorPtr matmul(const TensorPtr& a, const TensorPtr& b) {
  if (a->rank() != 2 || b->rank() != 2 || a->cols() != b->rows()) {
    throw std::invalid_argument("matmul: incompatible shapes " + shape_str(a->shape) + " and " +
                                shape_str(b->shape));
  }
  const std::size_t m = a->rows(), k = a->cols(), n = b->cols();
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a->values[i * k + p];
      if (av == 0.0) continue;
      const double* brow = &b->values[p * n];
      double* orow = &out[i * n];
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  return detail::node({m, n}, std::move(out), {a, b}, [a, b, m, k, n](Tensor* self) {
    return [a, b, m, k, n, self] {
      // dA = dC * B^T, dB = A^T * dC
      if (a->requires_grad) {
        a->ensure_grad();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            double s = 0.0;
            const double* grow = &self->grad[i * n];
            const double* brow = &b->values[p * n];
            for (std::size_t j = 0; j < n; ++j) s += grow[j] * brow[j];
            a->grad[i * k + p] += s;
          }
      }
      if (b->requires_grad) {
        b->ensure_grad();
        for (std::size_t p = 0; p < k; ++p)
          for (std::size_t i = 0; i < m; ++i) {
            const double av = a->values[i * k + p];
            if (av == 0.0) continue;
            const double* grow = &self->grad[i * n];
            double* brow = &b->grad[p * n];
            for (std::size_t j = 0; j < n; ++j) brow[j] += av * grow[j];
          }
      }
    };
  });
}

// Adds a length-c bias vector to every row of an r-by-c matrix.
inline TensorPtr add_rowwise(const TensorPtr& m, const TensorPtr& v) {
  if (m->rank() != 2 || v->rank() != 1 || v->size() != m->cols()) {
    throw std::invalid_argument("add_rowwise: shapes " + shape_str(m->shape) + " and " +
                                shape_str(v->shape));
  }
  const std::size_t r = m->rows(), c = m->cols();
  std::vector<double> out(m->values);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] += v->values[j];
  return detail::node(m->shape, std::move(out), {m, v}, [m, v, r, c](Tensor* self) {
    return [m, v, r, c, self] {
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) {
          detail::accumulate(m, i * c + j, self->grad[i * c + j]);
          detail::accumulate(v, j, self->grad[i * c + j]);
        }
    };
  });
}

// Multiplies every row of an r-by-c matrix elementwise by a length-c vector.
inline TensorPtr mul_rowwise(const TensorPtr& m, const TensorPtr& v) {
  if (m->rank() != 2 || v->rank() != 1 || v->size() != m->cols()) {
    throw std::invalid_argument("mul_rowwise: shapes " + shape_str(m->shape) + " and " +
                                shape_str(v->shape));
  }
  const std::size_t r = m->rows(), c = m->cols();
  std::vector<double> out(m->size());
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = m->values[i * c + j] * v->values[j];
  return detail::node(m->shape, std::move(out), {m, v}, [m, v, r, c](Tensor* self) {
    return [m, v, r, c, self] {
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) {
          detail::accumulate(m, i * c + j, self->grad[i * c + j] * v->values[j]);
          detail::accumulate(v, j, self->grad[i * c + j] * m->values[i * c + j]);
        }
    };
  });
}

// Multiplies row i of the matrix by the fixed weight w[i]. The weights are
// plain constants (no gradient); used to zero out masked conv windows.
inline TensorPtr scale_rows(const TensorPtr& m, const std::vector<double>& w) {
  if (m->rank() != 2 || w.size() != m->rows()) {
    throw std::invalid_argument("scale_rows: " + std::to_string(w.size()) + " weights for shape " +
                                shape_str(m->shape));
  }
  const std::size_t r = m->rows(), c = m->cols();
  std::vector<double> out(m->size());
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = m->values[i * c + j] * w[i];
  return detail::node(m->shape, std::move(out), {m}, [m, w, r, c](Tensor* self) {
    return [m, w, r, c, self] {
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j)
          detail::accumulate(m, i * c + j, self->grad[i * c + j] * w[i]);
    };
  });
}

// ---------------------------------------------------------------------------
// Nonlinearities and pointwise maps
// ---------------------------------------------------------------------------

inline TensorPtr relu(const TensorPtr& t) {
  std::vector<double> out(t->size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = t->values[i] > 0.0 ? t->values[i] : 0.0;
  return detail::node(t->shape, std::move(out), {t}, [t](Tensor* self) {
    return [t, self] {
      // subgradient at exactly 0 is 0
      for (std::size_t i = 0; i < self->grad.size(); ++i)
        detail::accumulate(t, i, t->values[i] > 0.0 ? self->grad[i] : 0.0);
    };
  });
}

inline TensorPtr tanh(const TensorPtr& t) {
  std::vector<double> out(t->size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(t->values[i]);
  return detail::node(t->shape, std::move(out), {t}, [t](Tensor* self) {
    return [t, self] {
      for (std::size_t i = 0; i < self->grad.size(); ++i)
        detail::accumulate(t, i, self->grad[i] * (1.0 - self->values[i] * self->values[i]));
    };
  });
}

inline TensorPtr sigmoid(const TensorPtr& t) {
  std::vector<double> out(t->size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x = t->values[i];
    // branch keeps exp() argument negative for stability on both tails
    out[i] = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
  }
  return detail::node(t->shape, std::move(out), {t}, [t](Tensor* self) {
    return [t, self] {
      for (std::size_t i = 0; i < self->grad.size(); ++i) {
        const double y = self->values[i];
        detail::accumulate(t, i, self->grad[i] * y * (1.0 - y));
      }
    };
  });
}

enum class Unary { relu, tanh, sigmoid };

inline TensorPtr apply_unary(const TensorPtr& t, Unary fn) {
  switch (fn) {
    case Unary::relu: return relu(t);
    case Unary::tanh: return tanh(t);
    case Unary::sigmoid: return sigmoid(t);
  }
  throw std::logic_error("apply_unary: unknown function");
}

inline TensorPtr log(const TensorPtr& t) {
  std::vector<double> out(t->size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(t->values[i]);
  return detail::node(t->shape, std::move(out), {t}, [t](Tensor* self) {
    return [t, self] {
      for (std::size_t i = 0; i < self->grad.size(); ++i)
        detail::accumulate(t, i, self->grad[i] / t->values[i]);
    };
  });
}

inline TensorPtr exp(const TensorPtr& t) {
  std::vector<double> out(t->size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(t->values[i]);
  return detail::node(t->shape, std::move(out), {t}, [t](Tensor* self) {
    return [t, self] {
      for (std::size_t i = 0; i < self->grad.size(); ++i)
        detail::accumulate(t, i, self->grad[i] * self->values[i]);
    };
  });
}

// t^p with constant exponent; p=0.5 is sqrt, p=-0.5 the BN inverse stddev.
inline TensorPtr pow_const(const TensorPtr& t, double p) {
  std::vector<double> out(t->size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::pow(t->values[i], p);
  return detail::node(t->shape, std::move(out), {t}, [t, p](Tensor* self) {
    return [t, p, self] {
      for (std::size_t i = 0; i < self->grad.size(); ++i)
        detail::accumulate(t, i, self->grad[i] * p * std::pow(t->values[i], p - 1.0));
    };
  });
}

inline TensorPtr clamp(const TensorPtr& t, double lo, double hi) {
  std::vector<double> out(t->size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::min(std::max(t->values[i], lo), hi);
  return detail::node(t->shape, std::move(out), {t}, [t, lo, hi](Tensor* self) {
    return [t, lo, hi, self] {
      for (std::size_t i = 0; i < self->grad.size(); ++i) {
        const double x = t->values[i];
        if (x >= lo && x <= hi) detail::accumulate(t, i, self->grad[i]);
      }
    };
  });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

inline TensorPtr sum(const TensorPtr& t) {
  double s = std::accumulate(t->values.begin(), t->values.end(), 0.0);
  return detail::node({1}, {s}, {t}, [t](Tensor* self) {
    return [t, self] {
      for (std::size_t i = 0; i < t->size(); ++i) detail::accumulate(t, i, self->grad[0]);
    };
  });
}

inline TensorPtr mean(const TensorPtr& t) {
  double s = std::accumulate(t->values.begin(), t->values.end(), 0.0);
  const double n = static_cast<double>(t->size());
  return detail::node({1}, {s / n}, {t}, [t, n](Tensor* self) {
    return [t, n, self] {
      for (std::size_t i = 0; i < t->size(); ++i) detail::accumulate(t, i, self->grad[0] / n);
    };
  });
}

// Column means of an r-by-c matrix -> length-c vector.
inline TensorPtr mean_rows(const TensorPtr& m) {
  if (m->rank() != 2) throw std::invalid_argument("mean_rows: need a matrix, got " + shape_str(m->shape));
  const std::size_t r = m->rows(), c = m->cols();
  std::vector<double> out(c, 0.0);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j] += m->values[i * c + j];
  for (std::size_t j = 0; j < c; ++j) out[j] /= static_cast<double>(r);
  return detail::node({c}, std::move(out), {m}, [m, r, c](Tensor* self) {
    return [m, r, c, self] {
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j)
          detail::accumulate(m, i * c + j, self->grad[j] / static_cast<double>(r));
    };
  });
}

// Numerically stable softmax over a vector (max subtraction before exp).
inline TensorPtr softmax_norm(const TensorPtr& v) {
  if (v->rank() != 1) throw std::invalid_argument("softmax_norm: need a vector, got " + shape_str(v->shape));
  if (v->size() == 0) throw std::invalid_argument("softmax_norm: empty input");
  const double mx = *std::max_element(v->values.begin(), v->values.end());
  std::vector<double> out(v->size());
  double z = 0.0;
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = std::exp(v->values[i] - mx);
    z += out[i];
  }
  for (double& x : out) x /= z;
  return detail::node(v->shape, std::move(out), {v}, [v](Tensor* self) {
    return [v, self] {
      double dot = 0.0;
      for (std::size_t k = 0; k < self->grad.size(); ++k) dot += self->grad[k] * self->values[k];
      for (std::size_t i = 0; i < self->grad.size(); ++i)
        detail::accumulate(v, i, self->values[i] * (self->grad[i] - dot));
    };
  });
}

// ---------------------------------------------------------------------------
// Shape plumbing: concatenation, slicing, reshapes
// ---------------------------------------------------------------------------

inline TensorPtr concat_vec(const std::vector<TensorPtr>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_vec: no parts");
  std::size_t n = 0;
  for (const auto& p : parts) {
    if (p->rank() != 1) throw std::invalid_argument("concat_vec: non-vector part " + shape_str(p->shape));
    n += p->size();
  }
  std::vector<double> out;
  out.reserve(n);
  for (const auto& p : parts) out.insert(out.end(), p->values.begin(), p->values.end());
  return detail::node({n}, std::move(out), parts, [parts](Tensor* self) {
    return [parts, self] {
      std::size_t off = 0;
      for (const auto& p : parts) {
        for (std::size_t i = 0; i < p->size(); ++i) detail::accumulate(p, i, self->grad[off + i]);
        off += p->size();
      }
    };
  });
}

// Stacks matrices with equal column counts on top of each other.
inline TensorPtr concat_rows(const std::vector<TensorPtr>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no parts");
  const std::size_t c = parts[0]->cols();
  std::size_t r = 0;
  for (const auto& p : parts) {
    if (p->rank() != 2 || p->cols() != c)
      throw std::invalid_argument("concat_rows: incompatible part " + shape_str(p->shape));
    r += p->rows();
  }
  std::vector<double> out;
  out.reserve(r * c);
  for (const auto& p : parts) out.insert(out.end(), p->values.begin(), p->values.end());
  return detail::node({r, c}, std::move(out), parts, [parts](Tensor* self) {
    return [parts, self] {
      std::size_t off = 0;
      for (const auto& p : parts) {
        for (std::size_t i = 0; i < p->size(); ++i) detail::accumulate(p, i, self->grad[off + i]);
        off += p->size();
      }
    };
  });
}

// Joins matrices with equal row counts side by side.
inline TensorPtr concat_cols(const std::vector<TensorPtr>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no parts");
  const std::size_t r = parts[0]->rows();
  std::size_t c = 0;
  for (const auto& p : parts) {
    if (p->rank() != 2 || p->rows() != r)
      throw std::invalid_argument("concat_cols: incompatible part " + shape_str(p->shape));
    c += p->cols();
  }
  std::vector<double> out(r * c);
  std::size_t coff = 0;
  for (const auto& p : parts) {
    const std::size_t pc = p->cols();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < pc; ++j) out[i * c + coff + j] = p->values[i * pc + j];
    coff += pc;
  }
  return detail::node({r, c}, std::move(out), parts, [parts, r, c](Tensor* self) {
    return [parts, r, c, self] {
      std::size_t coff = 0;
      for (const auto& p : parts) {
        const std::size_t pc = p->cols();
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < pc; ++j)
            detail::accumulate(p, i * pc + j, self->grad[i * c + coff + j]);
        coff += pc;
      }
    };
  });
}

// Stacks length-c vectors into an L-by-c matrix.
inline TensorPtr stack_rows(const std::vector<TensorPtr>& parts) {
  if (parts.empty()) throw std::invalid_argument("stack_rows: no parts");
  const std::size_t c = parts[0]->size();
  for (const auto& p : parts)
    if (p->rank() != 1 || p->size() != c)
      throw std::invalid_argument("stack_rows: incompatible part " + shape_str(p->shape));
  std::vector<double> out;
  out.reserve(parts.size() * c);
  for (const auto& p : parts) out.insert(out.end(), p->values.begin(), p->values.end());
  return detail::node({parts.size(), c}, std::move(out), parts, [parts, c](Tensor* self) {
    return [parts, c, self] {
      for (std::size_t i = 0; i < parts.size(); ++i)
        for (std::size_t j = 0; j < c; ++j) detail::accumulate(parts[i], j, self->grad[i * c + j]);
    };
  });
}

inline TensorPtr slice_cols(const TensorPtr& m, std::size_t start, std::size_t count) {
  if (m->rank() != 2 || start + count > m->cols()) {
    throw std::invalid_argument("slice_cols: [" + std::to_string(start) + ", " +
                                std::to_string(start + count) + ") out of " + shape_str(m->shape));
  }
  const std::size_t r = m->rows(), c = m->cols();
  std::vector<double> out(r * count);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < count; ++j) out[i * count + j] = m->values[i * c + start + j];
  return detail::node({r, count}, std::move(out), {m}, [m, start, r, c, count](Tensor* self) {
    return [m, start, r, c, count, self] {
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < count; ++j)
          detail::accumulate(m, i * c + start + j, self->grad[i * count + j]);
    };
  });
}

inline TensorPtr slice_rows(const TensorPtr& m, std::size_t start, std::size_t count) {
  if (m->rank() != 2 || start + count > m->rows()) {
    throw std::invalid_argument("slice_rows: [" + std::to_string(start) + ", " +
                                std::to_string(start + count) + ") out of " + shape_str(m->shape));
  }
  const std::size_t c = m->cols();
  std::vector<double> out(m->values.begin() + start * c, m->values.begin() + (start + count) * c);
  return detail::node({count, c}, std::move(out), {m}, [m, start, c](Tensor* self) {
    return [m, start, c, self] {
      for (std::size_t i = 0; i < self->grad.size(); ++i)
        detail::accumulate(m, start * c + i, self->grad[i]);
    };
  });
}

// Extracts row i as a vector; gradients scatter-add back (embedding lookup).
inline TensorPtr row(const TensorPtr& m, std::size_t i) {
  if (m->rank() != 2 || i >= m->rows())
    throw std::invalid_argument("row: index " + std::to_string(i) + " out of " + shape_str(m->shape));
  const std::size_t c = m->cols();
  std::vector<double> out(m->values.begin() + i * c, m->values.begin() + (i + 1) * c);
  return detail::node({c}, std::move(out), {m}, [m, i, c](Tensor* self) {
    return [m, i, c, self] {
      for (std::size_t j = 0; j < c; ++j) detail::accumulate(m, i * c + j, self->grad[j]);
    };
  });
}

namespace detail {
inline TensorPtr reshape(const TensorPtr& t, std::vector<std::size_t> shape) {
  auto out = detail::node(std::move(shape), t->values, {t}, [t](Tensor* self) {
    return [t, self] {
      for (std::size_t i = 0; i < self->grad.size(); ++i) detail::accumulate(t, i, self->grad[i]);
    };
  });
  if (out->size() != t->size())
    throw std::invalid_argument("reshape: element count changed, " + shape_str(t->shape) + " -> " +
                                shape_str(out->shape));
  return out;
}
}  // namespace detail

inline TensorPtr flatten(const TensorPtr& t) { return detail::reshape(t, {t->size()}); }

inline TensorPtr as_row(const TensorPtr& v) {
  if (v->rank() != 1) throw std::invalid_argument("as_row: need a vector, got " + shape_str(v->shape));
  return detail::reshape(v, {1, v->size()});
}

inline TensorPtr as_col(const TensorPtr& v) {
  if (v->rank() != 1) throw std::invalid_argument("as_col: need a vector, got " + shape_str(v->shape));
  return detail::reshape(v, {v->size(), 1});
}

// im2row: row i of the result is rows [i, i+k) of x flattened, the window
// the width-k convolution kernel sees at position i.
inline TensorPtr windows(const TensorPtr& x, std::size_t k) {
  if (x->rank() != 2) throw std::invalid_argument("windows: need a matrix, got " + shape_str(x->shape));
  const std::size_t s = x->rows(), d = x->cols();
  if (k < 1 || k > s)
    throw std::invalid_argument("windows: width " + std::to_string(k) + " on " + std::to_string(s) +
                                " rows");
  const std::size_t n = s - k + 1, w = k * d;
  std::vector<double> out(n * w);
  for (std::size_t i = 0; i < n; ++i)
    std::copy(x->values.begin() + i * d, x->values.begin() + (i + k) * d, out.begin() + i * w);
  return detail::node({n, w}, std::move(out), {x}, [x, n, w, d](Tensor* self) {
    return [x, n, w, d, self] {
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < w; ++j) detail::accumulate(x, i * d + j, self->grad[i * w + j]);
    };
  });
}

// ---------------------------------------------------------------------------
// ComputeGraph: topological view of the DAG reaching an output node
// ---------------------------------------------------------------------------

class ComputeGraph {
 public:
  // Collects every node contributing to `output`, inputs before users.
  static ComputeGraph trace(TensorPtr output) {
    ComputeGraph g;
    g.root_ = std::move(output);
    std::unordered_set<const Tensor*> seen;
    // iterative post-order DFS; graphs get deep (LSTM over long batches)
    std::vector<std::pair<TensorPtr, std::size_t>> stack;
    stack.emplace_back(g.root_, 0);
    seen.insert(g.root_.get());
    while (!stack.empty()) {
      auto& [t, next] = stack.back();
      if (next < t->parents.size()) {
        TensorPtr p = t->parents[next++];
        if (seen.insert(p.get()).second) stack.emplace_back(std::move(p), 0);
      } else {
        g.order_.push_back(t);
        stack.pop_back();
      }
    }
    return g;
  }

  const std::vector<TensorPtr>& nodes() const { return order_; }
  const TensorPtr& output() const { return root_; }

  void zero_grads() {
    for (auto& t : order_) t->zero_grad();
  }

  // Seeds the output gradient and propagates to all requires_grad leaves.
  // Leaf gradients accumulate across calls; interior gradients are scratch
  // and reset on every call.
  void backward(const TensorPtr& seed) {
    if (seed->shape != root_->shape) {
      throw std::invalid_argument("backward: seed shape " + shape_str(seed->shape) +
                                  " does not match output " + shape_str(root_->shape));
    }
    for (auto& t : order_) {
      if (!t->is_leaf()) {
        t->ensure_grad();
        t->zero_grad();
      }
    }
    root_->ensure_grad();
    for (std::size_t i = 0; i < seed->size(); ++i) root_->grad[i] += seed->values[i];
    for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
      if ((*it)->backward_fn && (*it)->requires_grad) (*it)->backward_fn();
    }
  }

  // Convenience for scalar losses: seed with 1.
  void backward() {
    if (root_->size() != 1)
      throw std::invalid_argument("backward(): output is not scalar, shape " + shape_str(root_->shape));
    backward(Tensor::scalar(1.0));
  }

 private:
  TensorPtr root_;
  std::vector<TensorPtr> order_;
};

// ---------------------------------------------------------------------------
// Finite-difference oracle
// ---------------------------------------------------------------------------

// Compares the reverse-mode gradient of the scalar function f at x against
// central differences; returns max |a-n| / max(|a|, |n|, 1e-8).
// f must be deterministic: it is re-evaluated under perturbation.
inline double finite_diff_check(const std::function<TensorPtr(const TensorPtr&)>& f,
                                const TensorPtr& x, double eps = 1e-6) {
  if (eps <= 0.0) throw std::invalid_argument("finite_diff_check: eps must be positive");
  if (!x->requires_grad) throw std::invalid_argument("finite_diff_check: x must require grad");
  TensorPtr y = f(x);
  if (y->size() != 1)
    throw std::invalid_argument("finite_diff_check: f output is not scalar, shape " +
                                shape_str(y->shape));
  auto graph = ComputeGraph::trace(y);
  graph.zero_grads();
  x->ensure_grad();
  x->zero_grad();  // x may not appear in the graph (constant f)
  graph.backward();
  std::vector<double> analytic = x->grad;

  double worst = 0.0;
  for (std::size_t i = 0; i < x->size(); ++i) {
    const double orig = x->values[i];
    x->values[i] = orig + eps;
    const double up = f(x)->values[0];
    x->values[i] = orig - eps;
    const double dn = f(x)->values[0];
    x->values[i] = orig;
    const double numeric = (up - dn) / (2.0 * eps);
    const double err = std::abs(analytic[i] - numeric) /
                       std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
    worst = std::max(worst, err);
  }
  return worst;
}

// Same check against a list of parameter tensors; `loss` must rebuild the
// graph from the parameters' current values on every call. When
// `coords_per_tensor` is nonzero, only that many coordinates of each tensor
// are probed numerically (chosen by `pick`, without replacement); the
// analytic gradient always covers every coordinate.
// `floor` is the denominator floor of the relative error: gradients below
// it are compared in absolute terms. Whole-network losses carry ~1e-11 of
// float64 evaluation noise, which a 1e-8 floor would misreport as relative
// error on near-zero gradients; 1e-7 suits them.
inline double finite_diff_check_params(const std::function<TensorPtr()>& loss,
                                       const std::vector<TensorPtr>& params, double eps = 1e-6,
                                       std::size_t coords_per_tensor = 0,
                                       std::function<std::size_t(std::size_t)> pick = {},
                                       double floor = 1e-8) {
  if (eps <= 0.0) throw std::invalid_argument("finite_diff_check_params: eps must be positive");
  TensorPtr y = loss();
  if (y->size() != 1)
    throw std::invalid_argument("finite_diff_check_params: loss is not scalar, shape " +
                                shape_str(y->shape));
  auto graph = ComputeGraph::trace(y);
  graph.zero_grads();
  for (const auto& p : params) {
    p->ensure_grad();
    p->zero_grad();
  }
  graph.backward();
  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (const auto& p : params) analytic.push_back(p->grad);

  const double mid = loss()->values[0];
  auto rel_err = [floor](double a, double n) {
    return std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
  };

  double worst = 0.0;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto& p = params[pi];
    std::vector<std::size_t> coords;
    if (coords_per_tensor == 0 || p->size() <= coords_per_tensor) {
      coords.resize(p->size());
      for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
    } else {
      std::vector<std::size_t> all(p->size());
      for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
      for (std::size_t i = 0; i < coords_per_tensor; ++i)
        std::swap(all[i], all[i + pick(all.size() - i)]);
      coords.assign(all.begin(), all.begin() + coords_per_tensor);
    }
    auto probe = [&](std::size_t i, double step) {
      const double orig = p->values[i];
      p->values[i] = orig + step;
      const double up = loss()->values[0];
      p->values[i] = orig - step;
      const double dn = loss()->values[0];
      p->values[i] = orig;
      const double numeric = (up - dn) / (2.0 * step);
      double err = rel_err(analytic[pi][i], numeric);
      const double fwd = (up - mid) / step, bwd = (mid - dn) / step;
      if (std::abs(fwd - bwd) > std::max(1e-4, 0.05 * std::max(std::abs(fwd), std::abs(bwd)))) {
        // The probe straddles a kink (relu/clamp): the central difference
        // blends two regimes and is meaningless there. Any subgradient
        // between the one-sided slopes is consistent; a wrong gradient lies
        // outside that interval and still fails.
        const double a = analytic[pi][i];
        const double lo = std::min(fwd, bwd), hi = std::max(fwd, bwd);
        const double band = 0.05 * std::max(std::abs(fwd), std::abs(bwd)) + 1e-8;
        if (a >= lo - band && a <= hi + band)
          err = 0.0;
        else
          err = std::min({err, rel_err(a, fwd), rel_err(a, bwd)});
      }
      return err;
    };
    for (std::size_t i : coords) {
      double err = probe(i, eps);
      // near-zero gradients sit at the floating-point noise floor of the
      // step size; a coarser re-probe separates that noise from a real
      // mismatch, which stays large at every step
      if (err > 5e-4) err = std::min(err, probe(i, 4.0 * eps));
      worst = std::max(worst, err);
    }
  }
  return worst;
}

}  // namespace relrank

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "vpt/errors.hpp"
#include "vpt/rng.hpp"

namespace vptlab {

using Shape = std::vector<int>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

// Dense row-major tensor. data/grad are shared so that backward closures
// recorded on the tape see the same buffers as the caller.
template <typename Real>
struct TensorT {
  Shape shape;
  std::shared_ptr<std::vector<Real>> data;
  std::shared_ptr<std::vector<Real>> grad;
  bool requires_grad = false;

  TensorT() = default;

  static TensorT zeros(const Shape& shape, bool requires_grad = false) {
    TensorT t;
    t.shape = shape;
    t.data = std::make_shared<std::vector<Real>>(shape_numel(shape), Real(0));
    if (requires_grad) t.enable_grad();
    return t;
  }

  static TensorT full(const Shape& shape, Real v, bool requires_grad = false) {
    TensorT t = zeros(shape, requires_grad);
    std::fill(t.data->begin(), t.data->end(), v);
    return t;
  }

  static TensorT scalar(Real v) {
    TensorT t = zeros({1});
    (*t.data)[0] = v;
    return t;
  }

  static TensorT from_vector(const Shape& shape, std::vector<Real> values,
                             bool requires_grad = false) {
    if (static_cast<int64_t>(values.size()) != shape_numel(shape)) {
      throw shape_error("from_vector: " + shape_str(shape) + " needs " +
                        std::to_string(shape_numel(shape)) + " values, got " +
                        std::to_string(values.size()));
    }
    TensorT t;
    t.shape = shape;
    t.data = std::make_shared<std::vector<Real>>(std::move(values));
    if (requires_grad) t.enable_grad();
    return t;
  }

  void enable_grad() {
    requires_grad = true;
    if (!grad || grad->size() != data->size()) {
      grad = std::make_shared<std::vector<Real>>(data->size(), Real(0));
    }
  }

  void zero_grad() {
    if (grad) std::fill(grad->begin(), grad->end(), Real(0));
  }

  int64_t numel() const { return data ? static_cast<int64_t>(data->size()) : 0; }
  int ndim() const { return static_cast<int>(shape.size()); }

  int rows() const { return shape.size() == 2 ? shape[0] : (shape.empty() ? 0 : shape[0]); }
  int cols() const { return shape.size() == 2 ? shape[1] : 1; }

  Real& at(int r, int c) { return (*data)[static_cast<size_t>(r) * cols() + c]; }
  Real at(int r, int c) const { return (*data)[static_cast<size_t>(r) * cols() + c]; }

  Real value() const {
    if (numel() != 1) throw shape_error("value(): tensor is not scalar, shape " + shape_str(shape));
    return (*data)[0];
  }

  bool all_finite() const {
    for (Real v : *data) {
      if (!std::isfinite(static_cast<double>(v))) return false;
    }
    return true;
  }
};

template <typename Real>
inline void check_finite(const TensorT<Real>& t, const std::string& what) {
  if (!t.all_finite()) throw numeric_error(what + ": non-finite value");
}

// Reverse-mode tape: a Wengert list of backward closures recorded in forward
// order and replayed in reverse. One tape per training step, cleared after
// backward.
template <typename Real>
class TapeT {
 public:
  void record(std::function<void()> fn) { nodes_.push_back(std::move(fn)); }

  size_t size() const { return nodes_.size(); }

  void backward(TensorT<Real>& loss) {
    if (loss.numel() != 1) throw usage_error("backward: loss must be scalar");
    if (!loss.requires_grad || nodes_.empty()) {
      throw usage_error("backward: tensor has no recorded operations");
    }
    (*loss.grad)[0] = Real(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
    nodes_.clear();
  }

  void clear() { nodes_.clear(); }

 private:
  std::vector<std::function<void()>> nodes_;
};

// Named trainable tensor; models expose their parameters as a flat list in a
// fixed order so the optimizer and the checkpoint writer agree on it.
template <typename Real>
struct ParamT {
  std::string name;
  TensorT<Real>* tensor;
};

template <typename Real>
using ParamListT = std::vector<ParamT<Real>>;

namespace detail {

template <typename Real>
inline bool track(const TapeT<Real>* tape, const TensorT<Real>& t) {
  return tape != nullptr && t.requires_grad;
}

template <typename Real>
inline TensorT<Real> make_out(const Shape& shape, bool tracked) {
  return TensorT<Real>::zeros(shape, tracked);
}

inline void require_2d(const Shape& s, const char* op) {
  if (s.size() != 2) throw shape_error(std::string(op) + ": expected 2-d tensor, got " + shape_str(s));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and linear algebra primitives
// ---------------------------------------------------------------------------

template <typename Real>
TensorT<Real> matmul(TapeT<Real>* tape, const TensorT<Real>& a, const TensorT<Real>& b) {
  detail::require_2d(a.shape, "matmul");
  detail::require_2d(b.shape, "matmul");
  const int m = a.shape[0], k = a.shape[1], k2 = b.shape[0], n = b.shape[1];
  if (k != k2) {
    throw shape_error("matmul: inner dimensions disagree, " + shape_str(a.shape) + " x " +
                      shape_str(b.shape));
  }
  const bool tracked = detail::track(tape, a) || detail::track(tape, b);
  TensorT<Real> out = detail::make_out<Real>({m, n}, tracked);
  const Real* pa = a.data->data();
  const Real* pb = b.data->data();
  Real* pc = out.data->data();
  for (int i = 0; i < m; ++i) {
    Real* ci = pc + static_cast<size_t>(i) * n;
    const Real* ai = pa + static_cast<size_t>(i) * k;
    for (int p = 0; p < k; ++p) {
      const Real av = ai[p];
      if (av == Real(0)) continue;
      const Real* bp = pb + static_cast<size_t>(p) * n;
      for (int j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
  if (tracked) {
    tape->record([a, b, out, m, k, n]() {
      const Real* dc = out.grad->data();
      if (a.requires_grad) {
        Real* da = a.grad->data();
        const Real* pb2 = b.data->data();
        for (int i = 0; i < m; ++i) {
          const Real* dci = dc + static_cast<size_t>(i) * n;
          Real* dai = da + static_cast<size_t>(i) * k;
          for (int p = 0; p < k; ++p) {
            const Real* bp = pb2 + static_cast<size_t>(p) * n;
            Real s = 0;
            for (int j = 0; j < n; ++j) s += dci[j] * bp[j];
            dai[p] += s;
          }
        }
      }
      if (b.requires_grad) {
        Real* db = b.grad->data();
        const Real* pa2 = a.data->data();
        for (int i = 0; i < m; ++i) {
          const Real* dci = dc + static_cast<size_t>(i) * n;
          const Real* ai = pa2 + static_cast<size_t>(i) * k;
          for (int p = 0; p < k; ++p) {
            const Real av = ai[p];
            if (av == Real(0)) continue;
            Real* dbp = db + static_cast<size_t>(p) * n;
            for (int j = 0; j < n; ++j) dbp[j] += av * dci[j];
          }
        }
      }
    });
  }
  return out;
}

// a [m x k] times b^T where b is [n x k]; both operands walk contiguous rows.
template <typename Real>
TensorT<Real> matmul_nt(TapeT<Real>* tape, const TensorT<Real>& a, const TensorT<Real>& b) {
  detail::require_2d(a.shape, "matmul_nt");
  detail::require_2d(b.shape, "matmul_nt");
  const int m = a.shape[0], k = a.shape[1], n = b.shape[0];
  if (k != b.shape[1]) {
    throw shape_error("matmul_nt: inner dimensions disagree, " + shape_str(a.shape) + " x " +
                      shape_str(b.shape) + "^T");
  }
  const bool tracked = detail::track(tape, a) || detail::track(tape, b);
  TensorT<Real> out = detail::make_out<Real>({m, n}, tracked);
  const Real* pa = a.data->data();
  const Real* pb = b.data->data();
  Real* pc = out.data->data();
  for (int i = 0; i < m; ++i) {
    const Real* ai = pa + static_cast<size_t>(i) * k;
    Real* ci = pc + static_cast<size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const Real* bj = pb + static_cast<size_t>(j) * k;
      Real s = 0;
      for (int p = 0; p < k; ++p) s += ai[p] * bj[p];
      ci[j] = s;
    }
  }
  if (tracked) {
    tape->record([a, b, out, m, k, n]() {
      const Real* dc = out.grad->data();
      if (a.requires_grad) {
        Real* da = a.grad->data();
        const Real* pb2 = b.data->data();
        for (int i = 0; i < m; ++i) {
          const Real* dci = dc + static_cast<size_t>(i) * n;
          Real* dai = da + static_cast<size_t>(i) * k;
          for (int j = 0; j < n; ++j) {
            const Real g = dci[j];
            if (g == Real(0)) continue;
            const Real* bj = pb2 + static_cast<size_t>(j) * k;
            for (int p = 0; p < k; ++p) dai[p] += g * bj[p];
          }
        }
      }
      if (b.requires_grad) {
        Real* db = b.grad->data();
        const Real* pa2 = a.data->data();
        for (int i = 0; i < m; ++i) {
          const Real* dci = dc + static_cast<size_t>(i) * n;
          const Real* ai = pa2 + static_cast<size_t>(i) * k;
          for (int j = 0; j < n; ++j) {
            const Real g = dci[j];
            if (g == Real(0)) continue;
            Real* dbj = db + static_cast<size_t>(j) * k;
            for (int p = 0; p < k; ++p) dbj[p] += g * ai[p];
          }
        }
      }
    });
  }
  return out;
}

template <typename Real>
TensorT<Real> add(TapeT<Real>* tape, const TensorT<Real>& a, const TensorT<Real>& b) {
  if (a.shape != b.shape) {
    throw shape_error("add: shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
  }
  const bool tracked = detail::track(tape, a) || detail::track(tape, b);
  TensorT<Real> out = detail::make_out<Real>(a.shape, tracked);
  const size_t n = a.data->size();
  for (size_t i = 0; i < n; ++i) (*out.data)[i] = (*a.data)[i] + (*b.data)[i];
  if (tracked) {
    tape->record([a, b, out, n]() {
      if (a.requires_grad) {
        for (size_t i = 0; i < n; ++i) (*a.grad)[i] += (*out.grad)[i];
      }
      if (b.requires_grad) {
        for (size_t i = 0; i < n; ++i) (*b.grad)[i] += (*out.grad)[i];
      }
    });
  }
  return out;
}

// a [m x n] plus a row vector bias [1 x n] broadcast over rows.
template <typename Real>
TensorT<Real> add_bias(TapeT<Real>* tape, const TensorT<Real>& a, const TensorT<Real>& bias) {
  detail::require_2d(a.shape, "add_bias");
  const int m = a.shape[0], n = a.shape[1];
  if (bias.numel() != n) {
    throw shape_error("add_bias: bias length " + std::to_string(bias.numel()) +
                      " does not match columns " + std::to_string(n));
  }
  const bool tracked = detail::track(tape, a) || detail::track(tape, bias);
  TensorT<Real> out = detail::make_out<Real>(a.shape, tracked);
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) {
      (*out.data)[static_cast<size_t>(i) * n + j] =
          (*a.data)[static_cast<size_t>(i) * n + j] + (*bias.data)[j];
    }
  }
  if (tracked) {
    tape->record([a, bias, out, m, n]() {
      if (a.requires_grad) {
        for (size_t i = 0; i < a.data->size(); ++i) (*a.grad)[i] += (*out.grad)[i];
      }
      if (bias.requires_grad) {
        for (int i = 0; i < m; ++i) {
          for (int j = 0; j < n; ++j) {
            (*bias.grad)[j] += (*out.grad)[static_cast<size_t>(i) * n + j];
          }
        }
      }
    });
  }
  return out;
}

template <typename Real>
TensorT<Real> mul(TapeT<Real>* tape, const TensorT<Real>& a, const TensorT<Real>& b) {
  if (a.shape != b.shape) {
    throw shape_error("mul: shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
  }
  const bool tracked = detail::track(tape, a) || detail::track(tape, b);
  TensorT<Real> out = detail::make_out<Real>(a.shape, tracked);
  const size_t n = a.data->size();
  for (size_t i = 0; i < n; ++i) (*out.data)[i] = (*a.data)[i] * (*b.data)[i];
  if (tracked) {
    tape->record([a, b, out, n]() {
      if (a.requires_grad) {
        for (size_t i = 0; i < n; ++i) (*a.grad)[i] += (*out.grad)[i] * (*b.data)[i];
      }
      if (b.requires_grad) {
        for (size_t i = 0; i < n; ++i) (*b.grad)[i] += (*out.grad)[i] * (*a.data)[i];
      }
    });
  }
  return out;
}

template <typename Real>
TensorT<Real> scale(TapeT<Real>* tape, const TensorT<Real>& a, Real c) {
  const bool tracked = detail::track(tape, a);
  TensorT<Real> out = detail::make_out<Real>(a.shape, tracked);
  const size_t n = a.data->size();
  for (size_t i = 0; i < n; ++i) (*out.data)[i] = (*a.data)[i] * c;
  if (tracked) {
    tape->record([a, out, c, n]() {
      for (size_t i = 0; i < n; ++i) (*a.grad)[i] += (*out.grad)[i] * c;
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Shape surgery
// ---------------------------------------------------------------------------

template <typename Real>
TensorT<Real> concat_rows(TapeT<Real>* tape, const TensorT<Real>& a, const TensorT<Real>& b) {
  detail::require_2d(a.shape, "concat_rows");
  detail::require_2d(b.shape, "concat_rows");
  if (a.shape[1] != b.shape[1]) {
    throw shape_error("concat_rows: column mismatch " + shape_str(a.shape) + " vs " +
                      shape_str(b.shape));
  }
  const int n = a.shape[1];
  const bool tracked = detail::track(tape, a) || detail::track(tape, b);
  TensorT<Real> out = detail::make_out<Real>({a.shape[0] + b.shape[0], n}, tracked);
  std::copy(a.data->begin(), a.data->end(), out.data->begin());
  std::copy(b.data->begin(), b.data->end(), out.data->begin() + a.data->size());
  if (tracked) {
    tape->record([a, b, out]() {
      const size_t na = a.data->size();
      if (a.requires_grad) {
        for (size_t i = 0; i < na; ++i) (*a.grad)[i] += (*out.grad)[i];
      }
      if (b.requires_grad) {
        for (size_t i = 0; i < b.data->size(); ++i) (*b.grad)[i] += (*out.grad)[na + i];
      }
    });
  }
  return out;
}

template <typename Real>
TensorT<Real> concat_cols(TapeT<Real>* tape, const TensorT<Real>& a, const TensorT<Real>& b) {
  detail::require_2d(a.shape, "concat_cols");
  detail::require_2d(b.shape, "concat_cols");
  if (a.shape[0] != b.shape[0]) {
    throw shape_error("concat_cols: row mismatch " + shape_str(a.shape) + " vs " +
                      shape_str(b.shape));
  }
  const int m = a.shape[0], na = a.shape[1], nb = b.shape[1];
  const bool tracked = detail::track(tape, a) || detail::track(tape, b);
  TensorT<Real> out = detail::make_out<Real>({m, na + nb}, tracked);
  for (int i = 0; i < m; ++i) {
    std::copy(a.data->begin() + static_cast<size_t>(i) * na,
              a.data->begin() + static_cast<size_t>(i + 1) * na,
              out.data->begin() + static_cast<size_t>(i) * (na + nb));
    std::copy(b.data->begin() + static_cast<size_t>(i) * nb,
              b.data->begin() + static_cast<size_t>(i + 1) * nb,
              out.data->begin() + static_cast<size_t>(i) * (na + nb) + na);
  }
  if (tracked) {
    tape->record([a, b, out, m, na, nb]() {
      for (int i = 0; i < m; ++i) {
        if (a.requires_grad) {
          for (int j = 0; j < na; ++j) {
            (*a.grad)[static_cast<size_t>(i) * na + j] +=
                (*out.grad)[static_cast<size_t>(i) * (na + nb) + j];
          }
        }
        if (b.requires_grad) {
          for (int j = 0; j < nb; ++j) {
            (*b.grad)[static_cast<size_t>(i) * nb + j] +=
                (*out.grad)[static_cast<size_t>(i) * (na + nb) + na + j];
          }
        }
      }
    });
  }
  return out;
}

template <typename Real>
TensorT<Real> slice_rows(TapeT<Real>* tape, const TensorT<Real>& a, int start, int len) {
  detail::require_2d(a.shape, "slice_rows");
  if (start < 0 || len < 0 || start + len > a.shape[0]) {
    throw shape_error("slice_rows: range [" + std::to_string(start) + ", " +
                      std::to_string(start + len) + ") out of " + shape_str(a.shape));
  }
  const int n = a.shape[1];
  const bool tracked = detail::track(tape, a);
  TensorT<Real> out = detail::make_out<Real>({len, n}, tracked);
  std::copy(a.data->begin() + static_cast<size_t>(start) * n,
            a.data->begin() + static_cast<size_t>(start + len) * n, out.data->begin());
  if (tracked) {
    tape->record([a, out, start, n]() {
      for (size_t i = 0; i < out.data->size(); ++i) {
        (*a.grad)[static_cast<size_t>(start) * n + i] += (*out.grad)[i];
      }
    });
  }
  return out;
}

template <typename Real>
TensorT<Real> slice_cols(TapeT<Real>* tape, const TensorT<Real>& a, int start, int len) {
  detail::require_2d(a.shape, "slice_cols");
  const int m = a.shape[0], n = a.shape[1];
  if (start < 0 || len < 0 || start + len > n) {
    throw shape_error("slice_cols: range [" + std::to_string(start) + ", " +
                      std::to_string(start + len) + ") out of " + shape_str(a.shape));
  }
  const bool tracked = detail::track(tape, a);
  TensorT<Real> out = detail::make_out<Real>({m, len}, tracked);
  for (int i = 0; i < m; ++i) {
    std::copy(a.data->begin() + static_cast<size_t>(i) * n + start,
              a.data->begin() + static_cast<size_t>(i) * n + start + len,
              out.data->begin() + static_cast<size_t>(i) * len);
  }
  if (tracked) {
    tape->record([a, out, start, m, n, len]() {
      for (int i = 0; i < m; ++i) {
        for (int j = 0; j < len; ++j) {
          (*a.grad)[static_cast<size_t>(i) * n + start + j] +=
              (*out.grad)[static_cast<size_t>(i) * len + j];
        }
      }
    });
  }
  return out;
}

template <typename Real>
TensorT<Real> reshape(TapeT<Real>* tape, const TensorT<Real>& a, const Shape& shape) {
  if (shape_numel(shape) != a.numel()) {
    throw shape_error("reshape: " + shape_str(a.shape) + " to " + shape_str(shape));
  }
  const bool tracked = detail::track(tape, a);
  TensorT<Real> out = detail::make_out<Real>(shape, tracked);
  std::copy(a.data->begin(), a.data->end(), out.data->begin());
  if (tracked) {
    tape->record([a, out]() {
      for (size_t i = 0; i < a.data->size(); ++i) (*a.grad)[i] += (*out.grad)[i];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Lookup
// ---------------------------------------------------------------------------

template <typename Real>
TensorT<Real> embedding_rows(TapeT<Real>* tape, const TensorT<Real>& table,
                             const std::vector<int>& ids) {
  detail::require_2d(table.shape, "embedding_rows");
  const int v = table.shape[0], d = table.shape[1];
  for (int id : ids) {
    if (id < 0 || id >= v) {
      throw std::out_of_range("embedding_rows: id " + std::to_string(id) + " outside vocab " +
                              std::to_string(v));
    }
  }
  const bool tracked = detail::track(tape, table);
  TensorT<Real> out = detail::make_out<Real>({static_cast<int>(ids.size()), d}, tracked);
  for (size_t i = 0; i < ids.size(); ++i) {
    std::copy(table.data->begin() + static_cast<size_t>(ids[i]) * d,
              table.data->begin() + static_cast<size_t>(ids[i] + 1) * d,
              out.data->begin() + i * d);
  }
  if (tracked) {
    tape->record([table, out, ids, d]() {
      for (size_t i = 0; i < ids.size(); ++i) {
        for (int j = 0; j < d; ++j) {
          (*table.grad)[static_cast<size_t>(ids[i]) * d + j] += (*out.grad)[i * d + j];
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Nonlinearities
// ---------------------------------------------------------------------------

template <typename Real>
TensorT<Real> gelu(TapeT<Real>* tape, const TensorT<Real>& a) {
  const bool tracked = detail::track(tape, a);
  TensorT<Real> out = detail::make_out<Real>(a.shape, tracked);
  const size_t n = a.data->size();
  for (size_t i = 0; i < n; ++i) {
    const double x = static_cast<double>((*a.data)[i]);
    (*out.data)[i] = static_cast<Real>(0.5 * x * (1.0 + std::erf(x * 0.7071067811865475)));
  }
  if (tracked) {
    tape->record([a, out, n]() {
      for (size_t i = 0; i < n; ++i) {
        const double x = static_cast<double>((*a.data)[i]);
        const double cdf = 0.5 * (1.0 + std::erf(x * 0.7071067811865475));
        const double pdf = std::exp(-0.5 * x * x) * 0.3989422804014327;
        (*a.grad)[i] += (*out.grad)[i] * static_cast<Real>(cdf + x * pdf);
      }
    });
  }
  return out;
}

template <typename Real>
TensorT<Real> softplus(TapeT<Real>* tape, const TensorT<Real>& a) {
  const bool tracked = detail::track(tape, a);
  TensorT<Real> out = detail::make_out<Real>(a.shape, tracked);
  const size_t n = a.data->size();
  for (size_t i = 0; i < n; ++i) {
    const double x = static_cast<double>((*a.data)[i]);
    const double y = x > 20.0 ? x : (x < -20.0 ? std::exp(x) : std::log1p(std::exp(x)));
    (*out.data)[i] = static_cast<Real>(y);
  }
  if (tracked) {
    tape->record([a, out, n]() {
      for (size_t i = 0; i < n; ++i) {
        const double x = static_cast<double>((*a.data)[i]);
        const double sig = 1.0 / (1.0 + std::exp(-x));
        (*a.grad)[i] += (*out.grad)[i] * static_cast<Real>(sig);
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Normalization and regularization
// ---------------------------------------------------------------------------

// Softmax along axis of a 2-d tensor (1 = within each row, 0 = within each
// column), stabilized by max subtraction.
template <typename Real>
TensorT<Real> softmax(TapeT<Real>* tape, const TensorT<Real>& a, int axis = 1) {
  detail::require_2d(a.shape, "softmax");
  if (axis != 0 && axis != 1) throw shape_error("softmax: axis must be 0 or 1");
  const int m = a.shape[0], n = a.shape[1];
  if (m == 0 || n == 0) throw shape_error("softmax: empty axis");
  const bool tracked = detail::track(tape, a);
  TensorT<Real> out = detail::make_out<Real>(a.shape, tracked);
  const int outer = axis == 1 ? m : n;
  const int inner = axis == 1 ? n : m;
  auto idx = [axis, n](int o, int i) {
    return axis == 1 ? static_cast<size_t>(o) * n + i : static_cast<size_t>(i) * n + o;
  };
  for (int o = 0; o < outer; ++o) {
    Real mx = (*a.data)[idx(o, 0)];
    for (int i = 1; i < inner; ++i) mx = std::max(mx, (*a.data)[idx(o, i)]);
    double denom = 0;
    for (int i = 0; i < inner; ++i) {
      const double e = std::exp(static_cast<double>((*a.data)[idx(o, i)] - mx));
      (*out.data)[idx(o, i)] = static_cast<Real>(e);
      denom += e;
    }
    const double inv = 1.0 / denom;
    for (int i = 0; i < inner; ++i) {
      (*out.data)[idx(o, i)] = static_cast<Real>(static_cast<double>((*out.data)[idx(o, i)]) * inv);
    }
  }
  if (tracked) {
    tape->record([a, out, outer, inner, idx]() {
      for (int o = 0; o < outer; ++o) {
        double dot = 0;
        for (int i = 0; i < inner; ++i) {
          dot += static_cast<double>((*out.grad)[idx(o, i)]) *
                 static_cast<double>((*out.data)[idx(o, i)]);
        }
        for (int i = 0; i < inner; ++i) {
          const double s = static_cast<double>((*out.data)[idx(o, i)]);
          (*a.grad)[idx(o, i)] +=
              static_cast<Real>(s * (static_cast<double>((*out.grad)[idx(o, i)]) - dot));
        }
      }
    });
  }
  return out;
}

template <typename Real>
TensorT<Real> layer_norm(TapeT<Real>* tape, const TensorT<Real>& x, const TensorT<Real>& gamma,
                         const TensorT<Real>& beta, Real eps = Real(1e-5)) {
  detail::require_2d(x.shape, "layer_norm");
  const int m = x.shape[0], n = x.shape[1];
  if (gamma.numel() != n || beta.numel() != n) {
    throw shape_error("layer_norm: gamma/beta length must equal feature count");
  }
  const bool tracked =
      detail::track(tape, x) || detail::track(tape, gamma) || detail::track(tape, beta);
  TensorT<Real> out = detail::make_out<Real>(x.shape, tracked);
  auto xhat = std::make_shared<std::vector<Real>>(x.data->size());
  auto inv_std = std::make_shared<std::vector<Real>>(m);
  for (int i = 0; i < m; ++i) {
    const Real* xi = x.data->data() + static_cast<size_t>(i) * n;
    double mean = 0;
    for (int j = 0; j < n; ++j) mean += xi[j];
    mean /= n;
    double var = 0;
    for (int j = 0; j < n; ++j) {
      const double d = xi[j] - mean;
      var += d * d;
    }
    var /= n;
    const double istd = 1.0 / std::sqrt(var + static_cast<double>(eps));
    (*inv_std)[i] = static_cast<Real>(istd);
    for (int j = 0; j < n; ++j) {
      const Real h = static_cast<Real>((xi[j] - mean) * istd);
      (*xhat)[static_cast<size_t>(i) * n + j] = h;
      (*out.data)[static_cast<size_t>(i) * n + j] = h * (*gamma.data)[j] + (*beta.data)[j];
    }
  }
  if (tracked) {
    tape->record([x, gamma, beta, out, xhat, inv_std, m, n]() {
      for (int i = 0; i < m; ++i) {
        const size_t off = static_cast<size_t>(i) * n;
        if (gamma.requires_grad) {
          for (int j = 0; j < n; ++j) {
            (*gamma.grad)[j] += (*out.grad)[off + j] * (*xhat)[off + j];
          }
        }
        if (beta.requires_grad) {
          for (int j = 0; j < n; ++j) (*beta.grad)[j] += (*out.grad)[off + j];
        }
        if (x.requires_grad) {
          double sum_dy = 0, sum_dy_xhat = 0;
          for (int j = 0; j < n; ++j) {
            const double dy = static_cast<double>((*out.grad)[off + j]) * (*gamma.data)[j];
            sum_dy += dy;
            sum_dy_xhat += dy * (*xhat)[off + j];
          }
          const double istd = (*inv_std)[i];
          for (int j = 0; j < n; ++j) {
            const double dy = static_cast<double>((*out.grad)[off + j]) * (*gamma.data)[j];
            (*x.grad)[off + j] += static_cast<Real>(
                istd * (dy - sum_dy / n - (*xhat)[off + j] * sum_dy_xhat / n));
          }
        }
      }
    });
  }
  return out;
}

// Running statistics for batch norm; held by the module, updated only in
// training mode and excluded from the autodiff graph.
template <typename Real>
struct BatchNormStateT {
  std::vector<Real> running_mean;
  std::vector<Real> running_var;
  Real momentum = Real(0.9);
  int64_t updates = 0;

  explicit BatchNormStateT(int features = 0)
      : running_mean(features, Real(0)), running_var(features, Real(1)) {}
};

// Normalizes each column over the batch (rows). Training mode uses batch
// statistics and refreshes the running averages; eval mode uses the running
// statistics so a row's output is independent of its batch peers.
template <typename Real>
TensorT<Real> batch_norm(TapeT<Real>* tape, const TensorT<Real>& x, const TensorT<Real>& gamma,
                         const TensorT<Real>& beta, BatchNormStateT<Real>& state, bool training,
                         Real eps = Real(1e-5)) {
  detail::require_2d(x.shape, "batch_norm");
  const int m = x.shape[0], n = x.shape[1];
  if (gamma.numel() != n || beta.numel() != n) {
    throw shape_error("batch_norm: gamma/beta length must equal feature count");
  }
  if (static_cast<int>(state.running_mean.size()) != n) {
    throw shape_error("batch_norm: state feature count mismatch");
  }
  const bool tracked =
      detail::track(tape, x) || detail::track(tape, gamma) || detail::track(tape, beta);
  TensorT<Real> out = detail::make_out<Real>(x.shape, tracked);
  auto xhat = std::make_shared<std::vector<Real>>(x.data->size());
  auto inv_std = std::make_shared<std::vector<Real>>(n);

  if (training) {
    if (m < 2) throw usage_error("batch_norm: training mode needs a batch of at least 2");
    for (int j = 0; j < n; ++j) {
      double mean = 0;
      for (int i = 0; i < m; ++i) mean += x.at(i, j);
      mean /= m;
      double var = 0;
      for (int i = 0; i < m; ++i) {
        const double d = x.at(i, j) - mean;
        var += d * d;
      }
      var /= m;
      const double istd = 1.0 / std::sqrt(var + static_cast<double>(eps));
      (*inv_std)[j] = static_cast<Real>(istd);
      for (int i = 0; i < m; ++i) {
        (*xhat)[static_cast<size_t>(i) * n + j] = static_cast<Real>((x.at(i, j) - mean) * istd);
      }
      const Real mom = state.updates == 0 ? Real(0) : state.momentum;
      state.running_mean[j] = mom * state.running_mean[j] + (Real(1) - mom) * static_cast<Real>(mean);
      state.running_var[j] = mom * state.running_var[j] + (Real(1) - mom) * static_cast<Real>(var);
    }
    state.updates++;
  } else {
    for (int j = 0; j < n; ++j) {
      const double istd = 1.0 / std::sqrt(static_cast<double>(state.running_var[j]) +
                                          static_cast<double>(eps));
      (*inv_std)[j] = static_cast<Real>(istd);
      for (int i = 0; i < m; ++i) {
        (*xhat)[static_cast<size_t>(i) * n + j] =
            static_cast<Real>((x.at(i, j) - state.running_mean[j]) * istd);
      }
    }
  }
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) {
      out.at(i, j) = (*xhat)[static_cast<size_t>(i) * n + j] * (*gamma.data)[j] + (*beta.data)[j];
    }
  }
  if (tracked) {
    tape->record([x, gamma, beta, out, xhat, inv_std, m, n, training]() {
      for (int j = 0; j < n; ++j) {
        double sum_dy = 0, sum_dy_xhat = 0;
        for (int i = 0; i < m; ++i) {
          const size_t off = static_cast<size_t>(i) * n + j;
          const double dy = (*out.grad)[off];
          sum_dy += dy;
          sum_dy_xhat += dy * (*xhat)[off];
        }
        if (gamma.requires_grad) (*gamma.grad)[j] += static_cast<Real>(sum_dy_xhat);
        if (beta.requires_grad) (*beta.grad)[j] += static_cast<Real>(sum_dy);
        if (x.requires_grad) {
          const double g = (*gamma.data)[j];
          const double istd = (*inv_std)[j];
          for (int i = 0; i < m; ++i) {
            const size_t off = static_cast<size_t>(i) * n + j;
            const double dy = static_cast<double>((*out.grad)[off]) * g;
            if (training) {
              (*x.grad)[off] += static_cast<Real>(
                  istd * (dy - g * sum_dy / m - (*xhat)[off] * g * sum_dy_xhat / m));
            } else {
              (*x.grad)[off] += static_cast<Real>(istd * dy);
            }
          }
        }
      }
    });
  }
  return out;
}

// Inverted dropout: surviving activations are scaled by 1/(1-rate) at train
// time so eval needs no rescale. Eval mode is the identity.
template <typename Real>
TensorT<Real> dropout(TapeT<Real>* tape, const TensorT<Real>& x, Real rate, Rng& rng,
                      bool training) {
  if (rate < Real(0) || rate >= Real(1)) throw usage_error("dropout: rate must be in [0, 1)");
  if (!training || rate == Real(0)) return x;
  const bool tracked = detail::track(tape, x);
  TensorT<Real> out = detail::make_out<Real>(x.shape, tracked);
  auto mask = std::make_shared<std::vector<Real>>(x.data->size());
  const Real keep_scale = Real(1) / (Real(1) - rate);
  for (size_t i = 0; i < x.data->size(); ++i) {
    (*mask)[i] = rng.uniform() < static_cast<double>(rate) ? Real(0) : keep_scale;
    (*out.data)[i] = (*x.data)[i] * (*mask)[i];
  }
  if (tracked) {
    tape->record([x, out, mask]() {
      for (size_t i = 0; i < x.data->size(); ++i) (*x.grad)[i] += (*out.grad)[i] * (*mask)[i];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Losses and reductions
// ---------------------------------------------------------------------------

template <typename Real>
TensorT<Real> sum_all(TapeT<Real>* tape, const TensorT<Real>& a) {
  const bool tracked = detail::track(tape, a);
  TensorT<Real> out = detail::make_out<Real>({1}, tracked);
  double s = 0;
  for (Real v : *a.data) s += v;
  (*out.data)[0] = static_cast<Real>(s);
  if (tracked) {
    tape->record([a, out]() {
      const Real g = (*out.grad)[0];
      for (size_t i = 0; i < a.data->size(); ++i) (*a.grad)[i] += g;
    });
  }
  return out;
}

template <typename Real>
TensorT<Real> mean_all(TapeT<Real>* tape, const TensorT<Real>& a) {
  TensorT<Real> s = sum_all(tape, a);
  return scale(tape, s, Real(1) / static_cast<Real>(a.numel()));
}

// Mean negative log-softmax probability of the target ids over non-pad
// positions. Fused with softmax for the usual (p - onehot) backward.
template <typename Real>
TensorT<Real> cross_entropy(TapeT<Real>* tape, const TensorT<Real>& logits,
                            const std::vector<int>& targets, int pad_id) {
  detail::require_2d(logits.shape, "cross_entropy");
  const int steps = logits.shape[0], vocab = logits.shape[1];
  if (static_cast<int>(targets.size()) != steps) {
    throw shape_error("cross_entropy: got " + std::to_string(targets.size()) + " targets for " +
                      std::to_string(steps) + " rows");
  }
  for (int t : targets) {
    if (t < 0 || t >= vocab) {
      throw std::out_of_range("cross_entropy: target id " + std::to_string(t) +
                              " outside vocab " + std::to_string(vocab));
    }
  }
  int n_valid = 0;
  for (int t : targets) {
    if (t != pad_id) n_valid++;
  }
  if (n_valid == 0) throw usage_error("cross_entropy: all positions are padding");

  const bool tracked = detail::track(tape, logits);
  TensorT<Real> out = detail::make_out<Real>({1}, tracked);
  auto probs = std::make_shared<std::vector<Real>>(logits.data->size());
  double loss = 0;
  for (int i = 0; i < steps; ++i) {
    const Real* row = logits.data->data() + static_cast<size_t>(i) * vocab;
    Real mx = row[0];
    for (int j = 1; j < vocab; ++j) mx = std::max(mx, row[j]);
    double denom = 0;
    for (int j = 0; j < vocab; ++j) {
      const double e = std::exp(static_cast<double>(row[j] - mx));
      (*probs)[static_cast<size_t>(i) * vocab + j] = static_cast<Real>(e);
      denom += e;
    }
    for (int j = 0; j < vocab; ++j) {
      (*probs)[static_cast<size_t>(i) * vocab + j] =
          static_cast<Real>(static_cast<double>((*probs)[static_cast<size_t>(i) * vocab + j]) / denom);
    }
    if (targets[i] != pad_id) {
      const double p = (*probs)[static_cast<size_t>(i) * vocab + targets[i]];
      loss -= std::log(std::max(p, 1e-300));
    }
  }
  (*out.data)[0] = static_cast<Real>(loss / n_valid);
  if (tracked) {
    tape->record([logits, out, probs, targets, pad_id, steps, vocab, n_valid]() {
      const Real g = (*out.grad)[0] / static_cast<Real>(n_valid);
      for (int i = 0; i < steps; ++i) {
        if (targets[i] == pad_id) continue;
        for (int j = 0; j < vocab; ++j) {
          const size_t off = static_cast<size_t>(i) * vocab + j;
          Real delta = (*probs)[off];
          if (j == targets[i]) delta -= Real(1);
          (*logits.grad)[off] += g * delta;
        }
      }
    });
  }
  return out;
}

// Closed-form KL( N(mu_q, diag sigma_q^2) || N(mu_p, I) ), summed over all
// latent dimensions and averaged over n_batch examples.
template <typename Real>
TensorT<Real> kl_gaussian(TapeT<Real>* tape, const TensorT<Real>& mu_q,
                          const TensorT<Real>& sigma_q, const TensorT<Real>& mu_p, int n_batch) {
  if (mu_q.shape != sigma_q.shape || mu_q.shape != mu_p.shape) {
    throw shape_error("kl_gaussian: shape mismatch");
  }
  if (n_batch < 1) throw usage_error("kl_gaussian: n_batch must be positive");
  for (Real s : *sigma_q.data) {
    if (!(s > Real(0))) throw numeric_error("kl_gaussian: sigma must be strictly positive");
  }
  const bool tracked =
      detail::track(tape, mu_q) || detail::track(tape, sigma_q) || detail::track(tape, mu_p);
  TensorT<Real> out = detail::make_out<Real>({1}, tracked);
  double total = 0;
  for (size_t i = 0; i < mu_q.data->size(); ++i) {
    const double s = (*sigma_q.data)[i];
    const double d = static_cast<double>((*mu_q.data)[i]) - static_cast<double>((*mu_p.data)[i]);
    total += 0.5 * (s * s + d * d - 1.0 - 2.0 * std::log(s));
  }
  (*out.data)[0] = static_cast<Real>(total / n_batch);
  if (tracked) {
    tape->record([mu_q, sigma_q, mu_p, out, n_batch]() {
      const Real g = (*out.grad)[0] / static_cast<Real>(n_batch);
      for (size_t i = 0; i < mu_q.data->size(); ++i) {
        const Real diff = (*mu_q.data)[i] - (*mu_p.data)[i];
        if (mu_q.requires_grad) (*mu_q.grad)[i] += g * diff;
        if (mu_p.requires_grad) (*mu_p.grad)[i] -= g * diff;
        if (sigma_q.requires_grad) {
          const Real s = (*sigma_q.data)[i];
          (*sigma_q.grad)[i] += g * (s - Real(1) / s);
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

template <typename Real>
void init_glorot(TensorT<Real>& t, Rng& rng) {
  detail::require_2d(t.shape, "init_glorot");
  const double limit = std::sqrt(6.0 / (t.shape[0] + t.shape[1]));
  for (Real& v : *t.data) v = static_cast<Real>(rng.uniform(-limit, limit));
}

template <typename Real>
void init_normal(TensorT<Real>& t, Rng& rng, double stddev) {
  for (Real& v : *t.data) v = static_cast<Real>(rng.normal() * stddev);
}

using Tensor = TensorT<float>;
using Tape = TapeT<float>;
using Param = ParamT<float>;
using ParamList = ParamListT<float>;
using BatchNormState = BatchNormStateT<float>;

}  // namespace vptlab

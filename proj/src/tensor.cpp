#include "eave/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <ostream>
#include <sstream>
#include <unordered_set>

#include "eave/errors.hpp"
#include "eave/rng.hpp"

namespace eave {

namespace {

thread_local bool g_grad_enabled = true;
thread_local std::uint64_t g_next_topo_index = 1;

template <typename T>
using NodePtr = std::shared_ptr<TensorNode<T>>;

template <typename T>
NodePtr<T> new_node(Shape shape, std::vector<T> data) {
  auto node = std::make_shared<TensorNode<T>>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->topo_index = g_next_topo_index++;
  return node;
}

// Wraps an op result. The closure is kept only when some input needs a
// gradient and recording is enabled.
template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> data, std::vector<NodePtr<T>> inputs,
                      std::function<void(TensorNode<T>&)> backward_fn) {
  auto node = new_node<T>(std::move(shape), std::move(data));
  if (g_grad_enabled) {
    const bool any = std::any_of(inputs.begin(), inputs.end(),
                                 [](const NodePtr<T>& n) { return n && n->requires_grad; });
    if (any) {
      node->requires_grad = true;
      node->inputs = std::move(inputs);
      node->backward = std::move(backward_fn);
    }
  }
  return Tensor<T>(std::move(node));
}

template <typename T>
T* grad_buffer(TensorNode<T>& n) {
  if (n.grad.empty()) n.grad.assign(n.data.size(), T(0));
  return n.grad.data();
}

template <typename T>
void require_rank2(const Tensor<T>& t, const char* op) {
  if (t.rank() != 2) {
    throw ShapeError(std::string(op) + ": expected a 2-D tensor, got " +
                     shape_to_string(t.shape()));
  }
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_to_string(a.shape()) +
                     " vs " + shape_to_string(b.shape()));
  }
}

// out = softmax(in) over entries with mask != 0; false when nothing is valid.
template <typename T>
bool softmax_row(const T* in, const std::uint8_t* mask, T* out, std::size_t n) {
  T max_v = -std::numeric_limits<T>::infinity();
  bool any = false;
  for (std::size_t j = 0; j < n; ++j) {
    if (mask && !mask[j]) continue;
    any = true;
    max_v = std::max(max_v, in[j]);
  }
  if (!any) return false;
  T total = 0;
  for (std::size_t j = 0; j < n; ++j) {
    if (mask && !mask[j]) {
      out[j] = 0;
      continue;
    }
    out[j] = std::exp(in[j] - max_v);
    total += out[j];
  }
  const T inv = T(1) / total;
  for (std::size_t j = 0; j < n; ++j) out[j] *= inv;
  return true;
}

}  // namespace

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_mode_enabled() { return g_grad_enabled; }

// ---------------------------------------------------------------- Tensor

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
  const auto n = shape_numel(shape);
  auto node = new_node<T>(std::move(shape), std::vector<T>(n, value));
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

template <typename T>
Tensor<T> Tensor<T>::from(Shape shape, std::vector<T> data, bool requires_grad) {
  if (shape_numel(shape) != data.size()) {
    throw ShapeError("tensor: shape " + shape_to_string(shape) + " needs " +
                     std::to_string(shape_numel(shape)) + " values, got " +
                     std::to_string(data.size()));
  }
  auto node = new_node<T>(std::move(shape), std::move(data));
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return from({1}, {value}, requires_grad);
}

template <typename T>
std::size_t Tensor<T>::rows() const {
  const auto& s = node_->shape;
  if (s.empty()) return 1;
  return s.size() == 1 ? 1 : numel() / s.back();
}

template <typename T>
std::size_t Tensor<T>::cols() const {
  const auto& s = node_->shape;
  return s.empty() ? 1 : s.back();
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) {
    throw ShapeError("item: tensor of shape " + shape_to_string(shape()) + " is not a scalar");
  }
  return node_->data[0];
}

template <typename T>
std::vector<T> Tensor<T>::grad() const {
  if (node_->grad.empty()) return std::vector<T>(node_->data.size(), T(0));
  return node_->grad;
}

template <typename T>
std::span<T> Tensor<T>::mutable_grad() {
  return {grad_buffer(*node_), node_->data.size()};
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return from(node_->shape, node_->data, false);
}

// ---------------------------------------------------------------- ops

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul: inner dimensions differ: " + shape_to_string(a.shape()) + " x " +
                     shape_to_string(b.shape()));
  }
  std::vector<T> out(m * n, T(0));
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    T* row = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = pa[i * k + p];
      const T* brow = pb + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
    }
  }
  return make_result<T>({m, n}, std::move(out), {a.node_ptr(), b.node_ptr()},
                        [m, k, n](TensorNode<T>& self) {
                          const T* g = self.grad.data();
                          auto& na = *self.inputs[0];
                          auto& nb = *self.inputs[1];
                          if (na.requires_grad) {
                            // dA = dC * B^T
                            T* ga = grad_buffer(na);
                            const T* pb = nb.data.data();
                            for (std::size_t i = 0; i < m; ++i) {
                              for (std::size_t p = 0; p < k; ++p) {
                                T acc = 0;
                                const T* grow = g + i * n;
                                const T* brow = pb + p * n;
                                for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
                                ga[i * k + p] += acc;
                              }
                            }
                          }
                          if (nb.requires_grad) {
                            // dB = A^T * dC
                            T* gb = grad_buffer(nb);
                            const T* pa = na.data.data();
                            for (std::size_t i = 0; i < m; ++i) {
                              const T* grow = g + i * n;
                              for (std::size_t p = 0; p < k; ++p) {
                                const T av = pa[i * k + p];
                                T* gbrow = gb + p * n;
                                for (std::size_t j = 0; j < n; ++j) gbrow[j] += av * grow[j];
                              }
                            }
                          }
                        });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "add");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return make_result<T>(a.shape(), std::move(out), {a.node_ptr(), b.node_ptr()},
                        [](TensorNode<T>& self) {
                          for (auto& in : self.inputs) {
                            if (!in->requires_grad) continue;
                            T* g = grad_buffer(*in);
                            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
                          }
                        });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "sub");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  return make_result<T>(a.shape(), std::move(out), {a.node_ptr(), b.node_ptr()},
                        [](TensorNode<T>& self) {
                          const T sign[2] = {T(1), T(-1)};
                          for (std::size_t s = 0; s < 2; ++s) {
                            auto& in = *self.inputs[s];
                            if (!in.requires_grad) continue;
                            T* g = grad_buffer(in);
                            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                              g[i] += sign[s] * self.grad[i];
                            }
                          }
                        });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "mul");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return make_result<T>(a.shape(), std::move(out), {a.node_ptr(), b.node_ptr()},
                        [](TensorNode<T>& self) {
                          auto& na = *self.inputs[0];
                          auto& nb = *self.inputs[1];
                          if (na.requires_grad) {
                            T* g = grad_buffer(na);
                            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                              g[i] += self.grad[i] * nb.data[i];
                            }
                          }
                          if (nb.requires_grad) {
                            T* g = grad_buffer(nb);
                            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                              g[i] += self.grad[i] * na.data[i];
                            }
                          }
                        });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] * factor;
  return make_result<T>(x.shape(), std::move(out), {x.node_ptr()},
                        [factor](TensorNode<T>& self) {
                          T* g = grad_buffer(*self.inputs[0]);
                          for (std::size_t i = 0; i < self.grad.size(); ++i) {
                            g[i] += self.grad[i] * factor;
                          }
                        });
}

template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  const std::size_t n = x.cols();
  if (bias.numel() != n) {
    throw ShapeError("add_bias: bias " + shape_to_string(bias.shape()) + " does not match " +
                     shape_to_string(x.shape()));
  }
  const std::size_t m = x.rows();
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x.data()[i * n + j] + bias.data()[j];
  }
  return make_result<T>(x.shape(), std::move(out), {x.node_ptr(), bias.node_ptr()},
                        [m, n](TensorNode<T>& self) {
                          auto& nx = *self.inputs[0];
                          auto& nb = *self.inputs[1];
                          if (nx.requires_grad) {
                            T* g = grad_buffer(nx);
                            for (std::size_t i = 0; i < m * n; ++i) g[i] += self.grad[i];
                          }
                          if (nb.requires_grad) {
                            T* g = grad_buffer(nb);
                            for (std::size_t i = 0; i < m; ++i) {
                              for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[i * n + j];
                            }
                          }
                        });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr T kC = T(0.7978845608028654);  // sqrt(2/pi)
  constexpr T kA = T(0.044715);
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T v = x.data()[i];
    out[i] = T(0.5) * v * (T(1) + std::tanh(kC * (v + kA * v * v * v)));
  }
  return make_result<T>(x.shape(), std::move(out), {x.node_ptr()}, [](TensorNode<T>& self) {
    auto& in = *self.inputs[0];
    T* g = grad_buffer(in);
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const T v = in.data[i];
      const T t = std::tanh(kC * (v + kA * v * v * v));
      const T d = T(0.5) * (T(1) + t) +
                  T(0.5) * v * (T(1) - t * t) * kC * (T(1) + T(3) * kA * v * v);
      g[i] += self.grad[i] * d;
    }
  });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& x) {
  require_rank2(x, "transpose");
  const std::size_t m = x.dim(0), n = x.dim(1);
  std::vector<T> out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = x.data()[i * n + j];
  }
  return make_result<T>({n, m}, std::move(out), {x.node_ptr()}, [m, n](TensorNode<T>& self) {
    T* g = grad_buffer(*self.inputs[0]);
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[j * m + i];
    }
  });
}

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x, std::span<const std::uint8_t> mask) {
  require_rank2(x, "softmax_rows");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (!mask.empty() && mask.size() != m * n) {
    throw ShapeError("softmax_rows: mask has " + std::to_string(mask.size()) +
                     " entries for input " + shape_to_string(x.shape()));
  }
  std::vector<T> out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    const std::uint8_t* mrow = mask.empty() ? nullptr : mask.data() + i * n;
    if (!softmax_row(x.data().data() + i * n, mrow, out.data() + i * n, n)) {
      throw std::invalid_argument("softmax_rows: row " + std::to_string(i) + " is fully masked");
    }
  }
  return make_result<T>(x.shape(), out, {x.node_ptr()}, [m, n, out](TensorNode<T>& self) {
    T* g = grad_buffer(*self.inputs[0]);
    for (std::size_t i = 0; i < m; ++i) {
      const T* y = out.data() + i * n;
      const T* dy = self.grad.data() + i * n;
      T dot = 0;
      for (std::size_t j = 0; j < n; ++j) dot += dy[j] * y[j];
      for (std::size_t j = 0; j < n; ++j) g[i * n + j] += y[j] * (dy[j] - dot);
    }
  });
}

template <typename T>
Tensor<T> rms_norm(const Tensor<T>& x, const Tensor<T>& gain, double eps) {
  const std::size_t d = x.cols();
  if (d == 0) throw ShapeError("rms_norm: last dimension is zero");
  if (gain.numel() != d) {
    throw ShapeError("rms_norm: gain " + shape_to_string(gain.shape()) + " does not match " +
                     shape_to_string(x.shape()));
  }
  const std::size_t m = x.rows();
  std::vector<T> out(x.numel());
  std::vector<T> inv_rms(m);
  for (std::size_t i = 0; i < m; ++i) {
    const T* row = x.data().data() + i * d;
    T ss = 0;
    for (std::size_t j = 0; j < d; ++j) ss += row[j] * row[j];
    inv_rms[i] = T(1) / std::sqrt(ss / T(d) + T(eps));
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] = row[j] * inv_rms[i] * gain.data()[j];
  }
  return make_result<T>(
      x.shape(), std::move(out), {x.node_ptr(), gain.node_ptr()},
      [m, d, inv_rms = std::move(inv_rms)](TensorNode<T>& self) {
        auto& nx = *self.inputs[0];
        auto& ng = *self.inputs[1];
        const T* gy = self.grad.data();
        if (nx.requires_grad) {
          T* gx = grad_buffer(nx);
          for (std::size_t i = 0; i < m; ++i) {
            const T* row = nx.data.data() + i * d;
            const T r = inv_rms[i];
            T dot = 0;
            for (std::size_t j = 0; j < d; ++j) dot += gy[i * d + j] * ng.data[j] * row[j];
            const T coef = r * r * r * dot / T(d);
            for (std::size_t j = 0; j < d; ++j) {
              gx[i * d + j] += r * ng.data[j] * gy[i * d + j] - row[j] * coef;
            }
          }
        }
        if (ng.requires_grad) {
          T* gg = grad_buffer(ng);
          for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < d; ++j) {
              gg[j] += gy[i * d + j] * nx.data[i * d + j] * inv_rms[i];
            }
          }
        }
      });
}

template <typename T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                    std::span<const std::uint8_t> key_mask, std::size_t heads) {
  require_rank2(q, "attention");
  require_rank2(k, "attention");
  require_rank2(v, "attention");
  const std::size_t sq = q.dim(0), sk = k.dim(0), d = q.dim(1);
  if (k.dim(1) != d || v.dim(1) != d || v.dim(0) != sk) {
    throw ShapeError("attention: incompatible q/k/v shapes " + shape_to_string(q.shape()) + " " +
                     shape_to_string(k.shape()) + " " + shape_to_string(v.shape()));
  }
  if (heads == 0 || d % heads != 0) {
    throw ShapeError("attention: width " + std::to_string(d) + " not divisible by " +
                     std::to_string(heads) + " heads");
  }
  if (!key_mask.empty() && key_mask.size() != sk) {
    throw ShapeError("attention: key mask has " + std::to_string(key_mask.size()) +
                     " entries for " + std::to_string(sk) + " keys");
  }
  if (!key_mask.empty() && std::none_of(key_mask.begin(), key_mask.end(),
                                        [](std::uint8_t m) { return m != 0; })) {
    throw std::invalid_argument("attention: key mask has no valid position");
  }
  const std::size_t hd = d / heads;
  const T scale_f = T(1) / std::sqrt(T(hd));
  const std::uint8_t* mask = key_mask.empty() ? nullptr : key_mask.data();

  std::vector<T> probs(heads * sq * sk);
  std::vector<T> scores(sk);
  std::vector<T> out(sq * d, T(0));
  const T* pq = q.data().data();
  const T* pk = k.data().data();
  const T* pv = v.data().data();
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t off = h * hd;
    for (std::size_t i = 0; i < sq; ++i) {
      for (std::size_t j = 0; j < sk; ++j) {
        T acc = 0;
        for (std::size_t t = 0; t < hd; ++t) acc += pq[i * d + off + t] * pk[j * d + off + t];
        scores[j] = acc * scale_f;
      }
      T* p = probs.data() + (h * sq + i) * sk;
      softmax_row(scores.data(), mask, p, sk);
      T* orow = out.data() + i * d + off;
      for (std::size_t j = 0; j < sk; ++j) {
        const T w = p[j];
        if (w == T(0)) continue;
        for (std::size_t t = 0; t < hd; ++t) orow[t] += w * pv[j * d + off + t];
      }
    }
  }
  return make_result<T>(
      {sq, d}, std::move(out), {q.node_ptr(), k.node_ptr(), v.node_ptr()},
      [sq, sk, d, hd, heads, scale_f, probs = std::move(probs)](TensorNode<T>& self) {
        auto& nq = *self.inputs[0];
        auto& nk = *self.inputs[1];
        auto& nv = *self.inputs[2];
        const T* g = self.grad.data();
        T* gq = nq.requires_grad ? grad_buffer(nq) : nullptr;
        T* gk = nk.requires_grad ? grad_buffer(nk) : nullptr;
        T* gv = nv.requires_grad ? grad_buffer(nv) : nullptr;
        std::vector<T> dp(sk);
        for (std::size_t h = 0; h < heads; ++h) {
          const std::size_t off = h * hd;
          for (std::size_t i = 0; i < sq; ++i) {
            const T* p = probs.data() + (h * sq + i) * sk;
            const T* grow = g + i * d + off;
            T dot = 0;
            for (std::size_t j = 0; j < sk; ++j) {
              T acc = 0;
              for (std::size_t t = 0; t < hd; ++t) acc += grow[t] * nv.data[j * d + off + t];
              dp[j] = acc;
              dot += acc * p[j];
              if (gv && p[j] != T(0)) {
                for (std::size_t t = 0; t < hd; ++t) gv[j * d + off + t] += p[j] * grow[t];
              }
            }
            for (std::size_t j = 0; j < sk; ++j) {
              const T ds = p[j] * (dp[j] - dot) * scale_f;
              if (ds == T(0)) continue;
              if (gq) {
                for (std::size_t t = 0; t < hd; ++t) gq[i * d + off + t] += ds * nk.data[j * d + off + t];
              }
              if (gk) {
                for (std::size_t t = 0; t < hd; ++t) gk[j * d + off + t] += ds * nq.data[i * d + off + t];
              }
            }
          }
        }
      });
}

template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const int> ids) {
  require_rank2(table, "embedding");
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  std::vector<T> out(ids.size() * d);
  std::vector<int> rows(ids.begin(), ids.end());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw ShapeError("embedding: id " + std::to_string(ids[i]) + " outside table of " +
                       std::to_string(vocab) + " rows");
    }
    std::copy_n(table.data().data() + static_cast<std::size_t>(ids[i]) * d, d, out.data() + i * d);
  }
  return make_result<T>({ids.size(), d}, std::move(out), {table.node_ptr()},
                        [d, rows = std::move(rows)](TensorNode<T>& self) {
                          T* g = grad_buffer(*self.inputs[0]);
                          for (std::size_t i = 0; i < rows.size(); ++i) {
                            T* dst = g + static_cast<std::size_t>(rows[i]) * d;
                            for (std::size_t j = 0; j < d; ++j) dst[j] += self.grad[i * d + j];
                          }
                        });
}

template <typename T>
Tensor<T> take_rows(const Tensor<T>& table, std::size_t count) {
  require_rank2(table, "take_rows");
  if (count > table.dim(0)) {
    throw ShapeError("take_rows: " + std::to_string(count) + " rows requested from " +
                     shape_to_string(table.shape()));
  }
  return slice_rows(table, 0, count);
}

template <typename T>
Tensor<T> concat_rows(const Tensor<T>& top, const Tensor<T>& bottom) {
  require_rank2(top, "concat_rows");
  require_rank2(bottom, "concat_rows");
  if (top.dim(1) != bottom.dim(1)) {
    throw ShapeError("concat_rows: column mismatch " + shape_to_string(top.shape()) + " vs " +
                     shape_to_string(bottom.shape()));
  }
  const std::size_t na = top.numel();
  std::vector<T> out(na + bottom.numel());
  std::copy(top.data().begin(), top.data().end(), out.begin());
  std::copy(bottom.data().begin(), bottom.data().end(), out.begin() + static_cast<std::ptrdiff_t>(na));
  return make_result<T>({top.dim(0) + bottom.dim(0), top.dim(1)}, std::move(out),
                        {top.node_ptr(), bottom.node_ptr()}, [na](TensorNode<T>& self) {
                          auto& a = *self.inputs[0];
                          auto& b = *self.inputs[1];
                          if (a.requires_grad) {
                            T* g = grad_buffer(a);
                            for (std::size_t i = 0; i < na; ++i) g[i] += self.grad[i];
                          }
                          if (b.requires_grad) {
                            T* g = grad_buffer(b);
                            for (std::size_t i = 0; i < b.data.size(); ++i) g[i] += self.grad[na + i];
                          }
                        });
}

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& x, std::size_t begin, std::size_t end) {
  require_rank2(x, "slice_rows");
  if (begin > end || end > x.dim(0)) {
    throw ShapeError("slice_rows: range [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") outside " + shape_to_string(x.shape()));
  }
  const std::size_t n = x.dim(1);
  std::vector<T> out(x.data().begin() + static_cast<std::ptrdiff_t>(begin * n),
                     x.data().begin() + static_cast<std::ptrdiff_t>(end * n));
  return make_result<T>({end - begin, n}, std::move(out), {x.node_ptr()},
                        [begin, n](TensorNode<T>& self) {
                          T* g = grad_buffer(*self.inputs[0]) + begin * n;
                          for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
                        });
}

template <typename T>
Tensor<T> mask_rows(const Tensor<T>& x, std::span<const std::uint8_t> row_mask) {
  const std::size_t m = x.rows(), n = x.cols();
  if (row_mask.size() != m) {
    throw ShapeError("mask_rows: mask has " + std::to_string(row_mask.size()) + " entries for " +
                     shape_to_string(x.shape()));
  }
  std::vector<T> out(x.data().begin(), x.data().end());
  for (std::size_t i = 0; i < m; ++i) {
    if (!row_mask[i]) std::fill_n(out.begin() + static_cast<std::ptrdiff_t>(i * n), n, T(0));
  }
  Mask keep(row_mask.begin(), row_mask.end());
  return make_result<T>(x.shape(), std::move(out), {x.node_ptr()},
                        [n, keep = std::move(keep)](TensorNode<T>& self) {
                          T* g = grad_buffer(*self.inputs[0]);
                          for (std::size_t i = 0; i < keep.size(); ++i) {
                            if (!keep[i]) continue;
                            for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[i * n + j];
                          }
                        });
}

template <typename T>
Tensor<T> lerp(const Tensor<T>& a, const Tensor<T>& b, const Tensor<T>& alpha) {
  require_same_shape(a, b, "lerp");
  if (alpha.numel() != 1) {
    throw ShapeError("lerp: alpha must have one element, got " + shape_to_string(alpha.shape()));
  }
  const T w = alpha.data()[0];
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = (T(1) - w) * a.data()[i] + w * b.data()[i];
  }
  return make_result<T>(a.shape(), std::move(out), {a.node_ptr(), b.node_ptr(), alpha.node_ptr()},
                        [w](TensorNode<T>& self) {
                          auto& na = *self.inputs[0];
                          auto& nb = *self.inputs[1];
                          auto& nw = *self.inputs[2];
                          const T* g = self.grad.data();
                          const std::size_t n = self.grad.size();
                          if (na.requires_grad) {
                            T* ga = grad_buffer(na);
                            for (std::size_t i = 0; i < n; ++i) ga[i] += (T(1) - w) * g[i];
                          }
                          if (nb.requires_grad) {
                            T* gb = grad_buffer(nb);
                            for (std::size_t i = 0; i < n; ++i) gb[i] += w * g[i];
                          }
                          if (nw.requires_grad) {
                            T acc = 0;
                            for (std::size_t i = 0; i < n; ++i) acc += g[i] * (nb.data[i] - na.data[i]);
                            grad_buffer(nw)[0] += acc;
                          }
                        });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T total = 0;
  for (T v : x.data()) total += v;
  return make_result<T>({1}, {total}, {x.node_ptr()}, [](TensorNode<T>& self) {
    auto& in = *self.inputs[0];
    T* g = grad_buffer(in);
    for (std::size_t i = 0; i < in.data.size(); ++i) g[i] += self.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  if (x.numel() == 0) throw ShapeError("mean: empty tensor");
  return scale(sum(x), T(1) / T(x.numel()));
}

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> targets,
                        std::span<const std::uint8_t> row_mask) {
  require_rank2(logits, "cross_entropy");
  const std::size_t m = logits.dim(0), c = logits.dim(1);
  if (targets.size() != m || row_mask.size() != m) {
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets and " +
                     std::to_string(row_mask.size()) + " mask entries for logits " +
                     shape_to_string(logits.shape()));
  }
  std::size_t valid = 0;
  for (auto v : row_mask) valid += v ? 1 : 0;
  if (valid == 0) throw std::invalid_argument("cross_entropy: every row is padding");

  std::vector<T> probs(m * c, T(0));
  T total = 0;
  for (std::size_t i = 0; i < m; ++i) {
    if (!row_mask[i]) continue;
    const auto t = static_cast<std::size_t>(targets[i]);
    if (targets[i] < 0 || t >= c) {
      throw ShapeError("cross_entropy: target " + std::to_string(targets[i]) + " out of range");
    }
    const T* row = logits.data().data() + i * c;
    softmax_row(row, static_cast<const std::uint8_t*>(nullptr), probs.data() + i * c, c);
    T max_v = *std::max_element(row, row + c);
    T se = 0;
    for (std::size_t j = 0; j < c; ++j) se += std::exp(row[j] - max_v);
    total += std::log(se) + max_v - row[t];
  }
  const T inv = T(1) / T(valid);
  std::vector<int> tgt(targets.begin(), targets.end());
  Mask keep(row_mask.begin(), row_mask.end());
  return make_result<T>({1}, {total * inv}, {logits.node_ptr()},
                        [m, c, inv, probs = std::move(probs), tgt = std::move(tgt),
                         keep = std::move(keep)](TensorNode<T>& self) {
                          T* g = grad_buffer(*self.inputs[0]);
                          const T up = self.grad[0] * inv;
                          for (std::size_t i = 0; i < m; ++i) {
                            if (!keep[i]) continue;
                            for (std::size_t j = 0; j < c; ++j) {
                              const T onehot = static_cast<std::size_t>(tgt[i]) == j ? T(1) : T(0);
                              g[i * c + j] += up * (probs[i * c + j] - onehot);
                            }
                          }
                        });
}

template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double p, Rng& rng) {
  if (p <= 0.0) return x;
  if (p >= 1.0) throw std::invalid_argument("dropout: rate must be below 1");
  const T keep_scale = T(1.0 / (1.0 - p));
  std::vector<T> factor(x.numel());
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    factor[i] = rng.uniform() < p ? T(0) : keep_scale;
    out[i] = x.data()[i] * factor[i];
  }
  return make_result<T>(x.shape(), std::move(out), {x.node_ptr()},
                        [factor = std::move(factor)](TensorNode<T>& self) {
                          T* g = grad_buffer(*self.inputs[0]);
                          for (std::size_t i = 0; i < factor.size(); ++i) g[i] += self.grad[i] * factor[i];
                        });
}

template <typename T>
void backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ShapeError("backward: loss must be a scalar, got " +
                     (loss.defined() ? shape_to_string(loss.shape()) : std::string("undefined")));
  }
  auto* root = loss.node();
  if (root->consumed) throw std::logic_error("backward: graph was already consumed");
  if (!root->requires_grad) return;

  std::vector<TensorNode<T>*> order;
  std::unordered_set<TensorNode<T>*> seen;
  std::vector<TensorNode<T>*> stack{root};
  seen.insert(root);
  while (!stack.empty()) {
    auto* n = stack.back();
    stack.pop_back();
    if (n->consumed) throw std::logic_error("backward: graph was already consumed");
    order.push_back(n);
    for (auto& in : n->inputs) {
      if (in->requires_grad && seen.insert(in.get()).second) stack.push_back(in.get());
    }
  }
  std::sort(order.begin(), order.end(),
            [](const TensorNode<T>* a, const TensorNode<T>* b) { return a->topo_index > b->topo_index; });

  grad_buffer(*root)[0] += T(1);
  for (auto* n : order) {
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
  // Released only after the loop: clearing one node's inputs can drop the
  // last reference to a node still listed in `order`.
  std::vector<std::shared_ptr<TensorNode<T>>> released;
  for (auto* n : order) {
    if (!n->backward) continue;  // leaves keep accumulating across passes
    n->backward = nullptr;
    for (auto& in : n->inputs) released.push_back(std::move(in));
    n->inputs.clear();
    n->consumed = true;
  }
}

template <typename T>
void dump_tensor(std::ostream& os, const Tensor<T>& t) {
  for (std::size_t i = 0; i < t.rank(); ++i) os << (i ? " " : "") << t.dim(i);
  os << '\n';
  const std::size_t n = t.cols();
  const auto flags = os.flags();
  const auto prec = os.precision(std::numeric_limits<T>::max_digits10);
  for (std::size_t i = 0; i < t.numel(); ++i) {
    os << t.data()[i] << ((i + 1) % n == 0 ? '\n' : ' ');
  }
  os.precision(prec);
  os.flags(flags);
}

#define EAVE_INSTANTIATE(T)                                                                     \
  template class Tensor<T>;                                                                     \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> scale(const Tensor<T>&, T);                                                \
  template Tensor<T> add_bias(const Tensor<T>&, const Tensor<T>&);                              \
  template Tensor<T> gelu(const Tensor<T>&);                                                    \
  template Tensor<T> transpose(const Tensor<T>&);                                               \
  template Tensor<T> softmax_rows(const Tensor<T>&, std::span<const std::uint8_t>);             \
  template Tensor<T> rms_norm(const Tensor<T>&, const Tensor<T>&, double);                      \
  template Tensor<T> attention(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,            \
                               std::span<const std::uint8_t>, std::size_t);                     \
  template Tensor<T> embedding(const Tensor<T>&, std::span<const int>);                         \
  template Tensor<T> take_rows(const Tensor<T>&, std::size_t);                                  \
  template Tensor<T> concat_rows(const Tensor<T>&, const Tensor<T>&);                           \
  template Tensor<T> slice_rows(const Tensor<T>&, std::size_t, std::size_t);                    \
  template Tensor<T> mask_rows(const Tensor<T>&, std::span<const std::uint8_t>);                \
  template Tensor<T> lerp(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                \
  template Tensor<T> sum(const Tensor<T>&);                                                     \
  template Tensor<T> mean(const Tensor<T>&);                                                    \
  template Tensor<T> cross_entropy(const Tensor<T>&, std::span<const int>,                      \
                                   std::span<const std::uint8_t>);                              \
  template Tensor<T> dropout(const Tensor<T>&, double, Rng&);                                   \
  template void backward(const Tensor<T>&);                                                     \
  template void dump_tensor(std::ostream&, const Tensor<T>&);

EAVE_INSTANTIATE(float)
EAVE_INSTANTIATE(double)

#undef EAVE_INSTANTIATE

}  // namespace eave

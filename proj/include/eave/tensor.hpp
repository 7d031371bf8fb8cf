#pragma once

// Dense row-major tensors with tape-free reverse-mode differentiation.
//
// Every op result remembers its inputs and a closure that pushes its gradient
// back into them. Nodes carry a monotonically increasing creation index, which
// is a valid topological order: backward() walks the reachable subgraph in
// strictly decreasing index order, so accumulation order is fixed.
//
// Instantiated for float (main path) and double (gradient-check shadow mode).

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace eave {

class Rng;

using Shape = std::vector<std::size_t>;

std::string shape_to_string(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until first accumulation
  bool requires_grad = false;
  bool consumed = false;
  std::uint64_t topo_index = 0;
  std::vector<std::shared_ptr<TensorNode>> inputs;
  std::function<void(TensorNode&)> backward;
};

template <typename T>
class Tensor {
 public:
  using Node = TensorNode<T>;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<T> data, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->data.size(); }
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const T> data() const { return node_->data; }
  // Writes through this span bypass the graph; use only on leaves.
  std::span<T> mutable_data() { return node_->data; }
  T item() const;
  T at(std::size_t r, std::size_t c) const { return node_->data[r * cols() + c]; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool v) { node_->requires_grad = v; }
  // Gradient buffer; all zeros when nothing has been accumulated.
  std::vector<T> grad() const;
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<T> mutable_grad();
  void zero_grad() { node_->grad.clear(); }

  // Fresh leaf with copied values and no history.
  Tensor detach() const;

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(node_->data.begin(), node_->data.end());
    return Tensor<U>::from(node_->shape, std::move(out), node_->requires_grad);
  }

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

// Disables graph recording on the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_mode_enabled();

// Row-major boolean mask; 1 = valid.
using Mask = std::vector<std::uint8_t>;

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor);
// x[m,n] + bias[n] broadcast over rows.
template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias);
template <typename T>
Tensor<T> gelu(const Tensor<T>& x);
template <typename T>
Tensor<T> transpose(const Tensor<T>& x);

// Row-wise softmax. Masked entries (mask == 0) are exactly zero in the output.
// Throws when a row has no valid entry.
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x, std::span<const std::uint8_t> mask = {});

inline constexpr double kRmsNormEps = 1e-6;
// x / sqrt(mean(x^2) + eps) * gain over the last dimension.
template <typename T>
Tensor<T> rms_norm(const Tensor<T>& x, const Tensor<T>& gain, double eps = kRmsNormEps);

// Multi-head scaled dot-product attention over already-projected q/k/v.
// key_mask has one entry per key row; masked keys get zero weight.
template <typename T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                    std::span<const std::uint8_t> key_mask, std::size_t heads);

// Gathers rows of table[vocab, d] for each id.
template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const int> ids);
// First `count` rows of table.
template <typename T>
Tensor<T> take_rows(const Tensor<T>& table, std::size_t count);

template <typename T>
Tensor<T> concat_rows(const Tensor<T>& top, const Tensor<T>& bottom);
template <typename T>
Tensor<T> slice_rows(const Tensor<T>& x, std::size_t begin, std::size_t end);
// Zeroes every row whose mask entry is 0.
template <typename T>
Tensor<T> mask_rows(const Tensor<T>& x, std::span<const std::uint8_t> row_mask);

// (1 - alpha) * a + alpha * b with alpha a one-element tensor.
template <typename T>
Tensor<T> lerp(const Tensor<T>& a, const Tensor<T>& b, const Tensor<T>& alpha);

template <typename T>
Tensor<T> sum(const Tensor<T>& x);
template <typename T>
Tensor<T> mean(const Tensor<T>& x);

// Mean cross-entropy of logits[n, c] against integer targets over rows with
// row_mask != 0. Throws when no row is valid.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> targets,
                        std::span<const std::uint8_t> row_mask);

// Inverted dropout; identity when p == 0.
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double p, Rng& rng);

// Reverse-mode pass from a scalar loss. Each graph may be consumed once.
template <typename T>
void backward(const Tensor<T>& loss);

// Debug dump: shape line, then row-major values.
template <typename T>
void dump_tensor(std::ostream& os, const Tensor<T>& t);

}  // namespace eave

#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "magic/tensor.hpp"

namespace magic {

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // empty until something flows into it
  bool requires_grad = false;

  bool has_grad() const { return !grad.empty() || value.numel() == 0; }

  T* grad_buffer() {
    if (grad.empty()) grad = Tensor<T>(value.shape());
    return grad.ptr();
  }
};

/// Handle to a value that may participate in reverse-mode differentiation.
/// Copies share the underlying node.
template <typename T>
class Var {
 public:
  Var() = default;

  static Var leaf(Tensor<T> value, bool requires_grad = false) {
    Var v;
    v.node_ = std::make_shared<Node<T>>();
    v.node_->value = std::move(value);
    v.node_->requires_grad = requires_grad;
    return v;
  }

  bool defined() const { return node_ != nullptr; }
  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  bool has_grad() const { return !node_->grad.empty(); }
  /// Gradient buffer; zero-filled if nothing has flowed in yet.
  const Tensor<T>& grad() const {
    node_->grad_buffer();
    return node_->grad;
  }
  void zero_grad() { node_->grad = Tensor<T>(); }

  const std::shared_ptr<Node<T>>& node() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Ordered record of differentiable operations executed while the tape is
/// active on the current thread. Dropping or clearing the tape frees every
/// intermediate node it kept alive.
template <typename T>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  ~Tape() {
    if (active_ == this) active_ = nullptr;
  }

  class Scope {
   public:
    explicit Scope(Tape* tape) : prev_(active_) { active_ = tape; }
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;
    ~Scope() { active_ = prev_; }

   private:
    Tape* prev_;
  };

  [[nodiscard]] Scope activate() { return Scope(this); }
  static Tape* active() { return active_; }

  void record(std::shared_ptr<Node<T>> output, std::function<void()> backward_fn) {
    entries_.push_back(Entry{std::move(output), std::move(backward_fn)});
  }

  /// Replays the tape in reverse from a scalar loss. Intermediate gradients
  /// are reset first; leaf gradients accumulate across calls.
  void backward(const Var<T>& loss) {
    if (loss.value().numel() != 1) {
      throw ShapeError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
    }
    for (auto& e : entries_) e.output->grad = Tensor<T>();
    if (!loss.requires_grad()) return;
    loss.node()->grad_buffer()[0] += T(1);
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) it->backward_fn();
  }

  void clear() { entries_.clear(); }
  std::size_t size() const { return entries_.size(); }

 private:
  struct Entry {
    std::shared_ptr<Node<T>> output;
    std::function<void()> backward_fn;
  };

  std::vector<Entry> entries_;
  static thread_local Tape* active_;
};

template <typename T>
thread_local Tape<T>* Tape<T>::active_ = nullptr;

enum class ElementwiseOp { add, sub, mul, scale, silu, relu, square };
enum class ResampleDirection { down, up };

// All operations record onto the thread's active tape when at least one
// input requires a gradient; otherwise they are plain value computations.

template <typename T> Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> sub(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> mul(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> scale(const Var<T>& a, T factor);
template <typename T> Var<T> silu(const Var<T>& a);
template <typename T> Var<T> relu(const Var<T>& a);
template <typename T> Var<T> square(const Var<T>& a);

/// Dispatches on `op`. `b` is required for add/sub/mul, ignored for the unary
/// ops; `factor` is used by scale only.
template <typename T>
Var<T> elementwise(ElementwiseOp op, const Var<T>& a, const Var<T>* b = nullptr, T factor = T(1));

template <typename T> Var<T> sum(const Var<T>& a);
template <typename T> Var<T> mean(const Var<T>& a);

/// Cross-correlation; `bias` may be undefined.
template <typename T>
Var<T> conv2d(const Var<T>& input, const Var<T>& kernel, const Var<T>& bias, int stride, int padding);

template <typename T>
Var<T> linear(const Var<T>& input, const Var<T>& weight, const Var<T>& bias);

/// Group normalisation over (group channels x spatial) per sample, then a
/// per-channel affine.
template <typename T>
Var<T> normalize_channels(const Var<T>& input, const Var<T>& gain, const Var<T>& bias, int groups,
                          T eps = T(1e-5));

template <typename T> Var<T> resample(const Var<T>& input, ResampleDirection direction);
template <typename T> Var<T> concat_channels(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> spatial_mean(const Var<T>& input);
/// Rows of `table` selected by `ids`; id -1 yields a zero row.
template <typename T> Var<T> embedding(const Var<T>& table, const std::vector<int>& ids);

/// Mean softmax cross-entropy of logits [B,K] against integer labels.
template <typename T> Var<T> cross_entropy(const Var<T>& logits, const std::vector<int>& labels);

/// Mean squared error against a constant target.
template <typename T> Var<T> mse(const Var<T>& pred, const Tensor<T>& target);

/// Sum of squared differences against a constant target.
template <typename T> Var<T> squared_distance(const Var<T>& a, const Tensor<T>& target);

template <typename T> Var<T> detach(const Var<T>& a);

/// Group count rule used by every normalisation layer.
inline int default_groups(int channels) { return channels < 8 ? channels : 8; }

}  // namespace magic

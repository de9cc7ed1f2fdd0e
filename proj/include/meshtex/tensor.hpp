#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "meshtex/common.hpp"
#include "meshtex/rng.hpp"

namespace meshtex::ad {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);
Shape broadcast_shape(const Shape& a, const Shape& b);

template <typename T>
struct TensorData {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;  // empty until first accumulation
    bool requires_grad = false;

    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    }
};

// Shared handle to a dense array participating in the active Tape's graph.
template <typename T>
class Tensor {
  public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, T fill, bool requires_grad = false);
    static Tensor scalar(T v, bool requires_grad = false);
    static Tensor from(Shape shape, std::vector<T> data, bool requires_grad = false);
    static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0,
                        bool requires_grad = false);

    bool defined() const { return static_cast<bool>(d_); }
    const Shape& shape() const { return d_->shape; }
    std::size_t ndim() const { return d_->shape.size(); }
    std::int64_t numel() const { return static_cast<std::int64_t>(d_->value.size()); }
    std::int64_t dim(std::size_t i) const { return d_->shape[i]; }

    std::span<T> value() { return {d_->value.data(), d_->value.size()}; }
    std::span<const T> value() const { return {d_->value.data(), d_->value.size()}; }
    std::span<T> grad() {
        d_->ensure_grad();
        return {d_->grad.data(), d_->grad.size()};
    }
    bool has_grad() const { return !d_->grad.empty(); }
    void zero_grad() {
        if (!d_->grad.empty()) std::fill(d_->grad.begin(), d_->grad.end(), T(0));
    }

    bool requires_grad() const { return d_ && d_->requires_grad; }
    Tensor& set_requires_grad(bool rg) {
        d_->requires_grad = rg;
        return *this;
    }

    T item() const {
        MESHTEX_CHECK(numel() == 1, ShapeError, "item() on non-scalar tensor of shape ",
                      shape_str(shape()));
        return d_->value[0];
    }

    // Detached copy: same values, fresh storage, no graph history.
    Tensor detach() const { return Tensor::from(d_->shape, d_->value, false); }

    std::shared_ptr<TensorData<T>> ptr() const { return d_; }

  private:
    explicit Tensor(std::shared_ptr<TensorData<T>> d) : d_(std::move(d)) {}
    std::shared_ptr<TensorData<T>> d_;
};

// Ordered record of executed operations. Reverse replay is a valid topological
// order because operands always precede their results.
template <typename T>
class Tape {
  public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // Registers one recorded operation. `outputs` are the tensors this op
    // produced; their gradients are pass-local and reset at the start of every
    // backward() so that repeated backward calls accumulate only into leaves.
    void push(std::vector<std::shared_ptr<TensorData<T>>> outputs,
              std::function<void()> backward_fn) {
        nodes_.push_back({std::move(outputs), std::move(backward_fn)});
    }

    void backward(const Tensor<T>& loss);
    void clear() { nodes_.clear(); }
    std::size_t size() const { return nodes_.size(); }

    static Tape* current();

    // RAII activation; nests.
    class Scope {
      public:
        explicit Scope(Tape& t);
        ~Scope();
        Scope(const Scope&) = delete;
        Scope& operator=(const Scope&) = delete;

      private:
        Tape* prev_;
    };

  private:
    struct Node {
        std::vector<std::shared_ptr<TensorData<T>>> outputs;
        std::function<void()> fn;
    };
    std::vector<Node> nodes_;
};

template <typename T>
bool recording(std::initializer_list<const Tensor<T>*> inputs) {
    if (Tape<T>::current() == nullptr) return false;
    for (const auto* t : inputs)
        if (t->requires_grad()) return true;
    return false;
}

// --- elementwise ---
enum class EwOp { Add, Sub, Mul, Div, Pow };

template <typename T>
Tensor<T> elementwise(EwOp op, const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> elementwise(EwOp op, const Tensor<T>& a, T b);

template <typename T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) {
    return elementwise(EwOp::Add, a, b);
}
template <typename T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) {
    return elementwise(EwOp::Sub, a, b);
}
template <typename T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) {
    return elementwise(EwOp::Mul, a, b);
}
template <typename T>
Tensor<T> operator/(const Tensor<T>& a, const Tensor<T>& b) {
    return elementwise(EwOp::Div, a, b);
}
template <typename T>
Tensor<T> operator+(const Tensor<T>& a, T b) {
    return elementwise(EwOp::Add, a, b);
}
template <typename T>
Tensor<T> operator-(const Tensor<T>& a, T b) {
    return elementwise(EwOp::Sub, a, b);
}
template <typename T>
Tensor<T> operator*(const Tensor<T>& a, T b) {
    return elementwise(EwOp::Mul, a, b);
}
template <typename T>
Tensor<T> operator/(const Tensor<T>& a, T b) {
    return elementwise(EwOp::Div, a, b);
}
template <typename T>
Tensor<T> pow(const Tensor<T>& a, T exponent) {
    return elementwise(EwOp::Pow, a, exponent);
}
template <typename T>
Tensor<T> pow(const Tensor<T>& a, const Tensor<T>& b) {
    return elementwise(EwOp::Pow, a, b);
}
template <typename T>
Tensor<T> neg(const Tensor<T>& a) {
    return elementwise(EwOp::Mul, a, T(-1));
}
template <typename T>
Tensor<T> sqrt(const Tensor<T>& a) {
    return elementwise(EwOp::Pow, a, T(0.5));
}
template <typename T>
Tensor<T> exp(const Tensor<T>& a) {
    return elementwise(EwOp::Pow, Tensor<T>::scalar(static_cast<T>(2.718281828459045235)), a);
}

// --- linear algebra ---
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool trans_a = false,
                 bool trans_b = false);

// --- neural-net kernels ---
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 int stride, int padding);

template <typename T>
Tensor<T> relu(const Tensor<T>& x);
template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& x, T slope);
template <typename T>
Tensor<T> tanh_act(const Tensor<T>& x);
template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x);
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis);

template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     std::vector<T>& running_mean, std::vector<T>& running_var,
                     bool training, T momentum = T(0.1), T eps = T(1e-5));

template <typename T>
Tensor<T> upsample_nearest(const Tensor<T>& x, int factor);

// --- shape ops ---
template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape);
template <typename T>
Tensor<T> narrow(const Tensor<T>& x, int axis, std::int64_t start, std::int64_t len);
template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis);
template <typename T>
Tensor<T> flip(const Tensor<T>& x, int axis);
template <typename T>
Tensor<T> tile_batch(const Tensor<T>& x, std::int64_t batch);

// --- reductions ---
template <typename T>
Tensor<T> sum(const Tensor<T>& x);
template <typename T>
Tensor<T> mean(const Tensor<T>& x);

// --- sampling ---
// map [C,H,W], coords [N,2] as (u,v) in [0,1]^2; align-corners bilinear with
// clamped addressing. Returns [N,C].
template <typename T>
Tensor<T> bilinear_sample(const Tensor<T>& map, const Tensor<T>& coords);

template <typename T>
void backward(Tape<T>& tape, const Tensor<T>& loss);

// --- optimizer ---
template <typename T>
struct AdamState {
    std::vector<T> m, v;
    std::int64_t t = 0;
};

template <typename T>
void adam_step(Tensor<T>& param, AdamState<T>& state, T lr, T beta1 = T(0.9),
               T beta2 = T(0.999), T eps = T(1e-8));

template <typename T>
class Adam {
  public:
    explicit Adam(T lr, T beta1 = T(0.9), T beta2 = T(0.999), T eps = T(1e-8))
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

    void add(Tensor<T> param) { slots_.push_back({std::move(param), {}}); }
    void step() {
        for (auto& s : slots_) adam_step(s.param, s.state, lr_, beta1_, beta2_, eps_);
    }
    void zero_grad() {
        for (auto& s : slots_) s.param.zero_grad();
    }
    T lr() const { return lr_; }
    void set_lr(T lr) { lr_ = lr; }

  private:
    struct Slot {
        Tensor<T> param;
        AdamState<T> state;
    };
    std::vector<Slot> slots_;
    T lr_, beta1_, beta2_, eps_;
};

// --- checkpoints: flat binary blob + JSON index (name -> offset/shape/dtype) ---
template <typename T>
void save_checkpoint(const std::string& path_prefix,
                     const std::map<std::string, Tensor<T>>& params);
template <typename T>
std::map<std::string, Tensor<T>> load_checkpoint(const std::string& path_prefix);

}  // namespace meshtex::ad

#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "mralign/rng.hpp"

namespace mralign {

class Tensor;
struct TensorImpl;

// Reverse-mode graph node. Backward fns accumulate into the inputs' grads and
// receive the finished output impl (its grad is already populated).
struct Node {
    std::vector<Tensor> inputs;
    std::function<void(const TensorImpl& out, const std::vector<Tensor>& inputs)> backward;
};

struct TensorImpl {
    std::vector<int> shape;
    std::vector<float> data;
    std::vector<float> grad; // empty until backward touches this tensor
    std::shared_ptr<Node> node;
    bool requires_grad = false;
};

// Handle with shared ownership, copies alias the same storage.
class Tensor {
public:
    Tensor() : impl_(nullptr) {}

    static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
    static Tensor full(std::vector<int> shape, float value, bool requires_grad = false);
    static Tensor from_vec(std::vector<int> shape, std::vector<float> data, bool requires_grad = false);
    static Tensor scalar(float v, bool requires_grad = false);
    static Tensor randn(std::vector<int> shape, Rng& rng, float stddev, bool requires_grad = false);

    bool defined() const { return impl_ != nullptr; }
    const std::vector<int>& shape() const { return impl_->shape; }
    int ndim() const { return static_cast<int>(impl_->shape.size()); }
    int dim(int i) const { return impl_->shape[static_cast<size_t>(i)]; }
    int64_t numel() const { return static_cast<int64_t>(impl_->data.size()); }

    std::span<const float> data() const { return impl_->data; }
    // In-place edits are only sound on leaves (graphs are rebuilt per step).
    std::span<float> mutable_data() { return impl_->data; }

    float item() const;      // requires numel == 1
    float at(int i) const { return impl_->data[static_cast<size_t>(i)]; }
    float at(int r, int c) const;

    bool requires_grad() const { return impl_->requires_grad; }
    bool has_grad() const { return !impl_->grad.empty(); }
    std::span<const float> grad() const { return impl_->grad; }
    void zero_grad() { impl_->grad.assign(impl_->data.size(), 0.0f); }
    void drop_grad() { impl_->grad.clear(); }

    // Leaf copy of the current values, cut loose from the graph.
    Tensor detached() const;

    TensorImpl* impl() const { return impl_.get(); }

private:
    explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}
    std::shared_ptr<TensorImpl> impl_;
    friend Tensor make_result(std::vector<int> shape, std::vector<float> data,
                              std::vector<Tensor> inputs,
                              std::function<void(const TensorImpl&, const std::vector<Tensor>&)> bw);
};

// Graph recording switch, off during finite-difference probes and evaluation.
struct GradMode {
    static bool enabled();
    static void set(bool on);
};
struct NoGradGuard {
    NoGradGuard() : prev_(GradMode::enabled()) { GradMode::set(false); }
    ~NoGradGuard() { GradMode::set(prev_); }
private:
    bool prev_;
};

std::string shape_str(const std::vector<int>& shape);

// elementwise; operands must share a shape or one side must be a 1-element tensor
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b); // zero divisor is a hard failure

Tensor matmul(const Tensor& a, const Tensor& b); // 2-D only

Tensor exp(const Tensor& t);
Tensor log(const Tensor& t); // non-positive input is a hard failure
Tensor tanh(const Tensor& t);

Tensor sum(const Tensor& t);  // full reduction to scalar
Tensor mean(const Tensor& t); // full reduction to scalar
Tensor max(const Tensor& t);  // full reduction, grad routed to first argmax

Tensor scale(const Tensor& t, float c);
Tensor transpose(const Tensor& t); // 2-D only
Tensor reshape(const Tensor& t, std::vector<int> shape);
Tensor concat(const std::vector<Tensor>& parts, int axis); // 1-D or 2-D
Tensor slice(const Tensor& t, int axis, int start, int len);
Tensor take_rows(const Tensor& table, const std::vector<int>& rows); // 2-D gather

// rows along `axis` sum to one; max-subtracted exponentials for stability
Tensor softmax(const Tensor& t, int axis, float temperature = 1.0f);
Tensor logsumexp(const Tensor& t, int axis); // 2-D -> 1-D, 1-D -> scalar

// last-axis normalization; rows with norm < eps become zero vectors
Tensor l2_normalize(const Tensor& t, float eps = 1e-12f);
// 1-D inputs; returns 0 when either norm < eps
Tensor cosine_similarity(const Tensor& a, const Tensor& b, float eps = 1e-12f);

Tensor stop_gradient(const Tensor& t);

// Sum every term of `loss` (a scalar) backward through the recorded graph.
// Deterministic: nodes run in reverse construction-topological order and
// accumulate grads in fixed index order. Accumulates into existing grads.
void backward(const Tensor& loss);

// x @ w + bias, bias has shape {1, n} and is added to every row
Tensor affine_rows(const Tensor& x, const Tensor& w, const Tensor& bias);

} // namespace mralign

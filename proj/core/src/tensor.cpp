#include "mralign/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>
#include <unordered_set>

namespace mralign {

namespace {

thread_local bool g_grad_enabled = true;

int64_t numel_of(const std::vector<int>& shape) {
    int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
}

void check_shape(const std::vector<int>& shape, const char* op) {
    if (shape.empty()) throw std::invalid_argument(std::string(op) + ": empty shape");
    for (int d : shape) {
        if (d <= 0) throw std::invalid_argument(std::string(op) + ": bad dim in " + shape_str(shape));
    }
}

bool want_grad(const Tensor& t) { return g_grad_enabled && t.requires_grad(); }

float* grad_buf(const Tensor& t) {
    TensorImpl* im = t.impl();
    if (im->grad.empty()) im->grad.assign(im->data.size(), 0.0f);
    return im->grad.data();
}

} // namespace

bool GradMode::enabled() { return g_grad_enabled; }
void GradMode::set(bool on) { g_grad_enabled = on; }

std::string shape_str(const std::vector<int>& shape) {
    std::string s = "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

Tensor make_result(std::vector<int> shape, std::vector<float> data,
                   std::vector<Tensor> inputs,
                   std::function<void(const TensorImpl&, const std::vector<Tensor>&)> bw) {
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    bool rg = false;
    if (g_grad_enabled) {
        for (const Tensor& t : inputs) rg = rg || t.requires_grad();
    }
    impl->requires_grad = rg;
    if (rg) {
        impl->node = std::make_shared<Node>();
        impl->node->inputs = std::move(inputs);
        impl->node->backward = std::move(bw);
    }
    return Tensor(std::move(impl));
}

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
    check_shape(shape, "zeros");
    auto impl = std::make_shared<TensorImpl>();
    impl->data.assign(static_cast<size_t>(numel_of(shape)), 0.0f);
    impl->shape = std::move(shape);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
}

Tensor Tensor::full(std::vector<int> shape, float value, bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    std::fill(t.impl()->data.begin(), t.impl()->data.end(), value);
    return t;
}

Tensor Tensor::from_vec(std::vector<int> shape, std::vector<float> data, bool requires_grad) {
    check_shape(shape, "from_vec");
    if (numel_of(shape) != static_cast<int64_t>(data.size()))
        throw std::invalid_argument("from_vec: " + shape_str(shape) + " does not hold " +
                                    std::to_string(data.size()) + " values");
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
}

Tensor Tensor::scalar(float v, bool requires_grad) {
    return from_vec({1}, {v}, requires_grad);
}

Tensor Tensor::randn(std::vector<int> shape, Rng& rng, float stddev, bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (float& x : t.impl()->data) x = static_cast<float>(rng.next_normal()) * stddev;
    return t;
}

float Tensor::item() const {
    if (numel() != 1)
        throw std::invalid_argument("item: tensor " + shape_str(shape()) + " is not a scalar");
    return impl_->data[0];
}

float Tensor::at(int r, int c) const {
    return impl_->data[static_cast<size_t>(r) * impl_->shape[1] + c];
}

Tensor Tensor::detached() const {
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = impl_->shape;
    impl->data = impl_->data;
    impl->requires_grad = false;
    return Tensor(std::move(impl));
}

// ---------------------------------------------------------------- elementwise

namespace {

enum class EwOp { add, sub, mul, divide };

const char* ew_name(EwOp op) {
    switch (op) {
        case EwOp::add: return "add";
        case EwOp::sub: return "sub";
        case EwOp::mul: return "mul";
        default: return "div";
    }
}

// shapes equal, or one side is a 1-element tensor broadcast across the other
Tensor elementwise(EwOp op, const Tensor& a, const Tensor& b) {
    bool a_scalar = a.numel() == 1;
    bool b_scalar = b.numel() == 1;
    if (!a_scalar && !b_scalar && a.shape() != b.shape())
        throw std::invalid_argument(std::string(ew_name(op)) + ": shape mismatch " +
                                    shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const std::vector<int>& out_shape = a_scalar && !b_scalar ? b.shape() : a.shape();
    size_t n = static_cast<size_t>(a_scalar && !b_scalar ? b.numel() : a.numel());

    auto av = a.data();
    auto bv = b.data();
    std::vector<float> out(n);
    for (size_t i = 0; i < n; ++i) {
        float x = av[a_scalar ? 0 : i];
        float y = bv[b_scalar ? 0 : i];
        switch (op) {
            case EwOp::add: out[i] = x + y; break;
            case EwOp::sub: out[i] = x - y; break;
            case EwOp::mul: out[i] = x * y; break;
            case EwOp::divide:
                if (y == 0.0f)
                    throw std::domain_error("div: zero divisor at flat index " + std::to_string(i) +
                                            ", shapes " + shape_str(a.shape()) + " / " + shape_str(b.shape()));
                out[i] = x / y;
                break;
        }
    }

    return make_result(out_shape, std::move(out), {a, b},
        [op, a_scalar, b_scalar, n](const TensorImpl& o, const std::vector<Tensor>& in) {
            const float* g = o.grad.data();
            auto av2 = in[0].data();
            auto bv2 = in[1].data();
            if (want_grad(in[0])) {
                float* ga = grad_buf(in[0]);
                if (a_scalar && n > 1) {
                    double acc = 0.0;
                    for (size_t i = 0; i < n; ++i) {
                        float y = bv2[b_scalar ? 0 : i];
                        switch (op) {
                            case EwOp::add: case EwOp::sub: acc += g[i]; break;
                            case EwOp::mul: acc += static_cast<double>(g[i]) * y; break;
                            case EwOp::divide: acc += static_cast<double>(g[i]) / y; break;
                        }
                    }
                    ga[0] += static_cast<float>(acc);
                } else {
                    for (size_t i = 0; i < n; ++i) {
                        float y = bv2[b_scalar ? 0 : i];
                        switch (op) {
                            case EwOp::add: case EwOp::sub: ga[i] += g[i]; break;
                            case EwOp::mul: ga[i] += g[i] * y; break;
                            case EwOp::divide: ga[i] += g[i] / y; break;
                        }
                    }
                }
            }
            if (want_grad(in[1])) {
                float* gb = grad_buf(in[1]);
                if (b_scalar && n > 1) {
                    double acc = 0.0;
                    for (size_t i = 0; i < n; ++i) {
                        float x = av2[a_scalar ? 0 : i];
                        float y = bv2[0];
                        switch (op) {
                            case EwOp::add: acc += g[i]; break;
                            case EwOp::sub: acc -= g[i]; break;
                            case EwOp::mul: acc += static_cast<double>(g[i]) * x; break;
                            case EwOp::divide: acc -= static_cast<double>(g[i]) * x / (static_cast<double>(y) * y); break;
                        }
                    }
                    gb[0] += static_cast<float>(acc);
                } else {
                    for (size_t i = 0; i < n; ++i) {
                        float x = av2[a_scalar ? 0 : i];
                        float y = bv2[i];
                        switch (op) {
                            case EwOp::add: gb[i] += g[i]; break;
                            case EwOp::sub: gb[i] -= g[i]; break;
                            case EwOp::mul: gb[i] += g[i] * x; break;
                            case EwOp::divide: gb[i] -= g[i] * x / (y * y); break;
                        }
                    }
                }
            }
        });
}

} // namespace

Tensor add(const Tensor& a, const Tensor& b) { return elementwise(EwOp::add, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return elementwise(EwOp::sub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return elementwise(EwOp::mul, a, b); }
Tensor div(const Tensor& a, const Tensor& b) { return elementwise(EwOp::divide, a, b); }

// ------------------------------------------------------------------- matmul

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 2 || b.ndim() != 2)
        throw std::invalid_argument("matmul: needs 2-D operands, got " + shape_str(a.shape()) +
                                    " and " + shape_str(b.shape()));
    int m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
    if (k != k2)
        throw std::invalid_argument("matmul: inner dimensions mismatch " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));

    auto av = a.data();
    auto bv = b.data();
    std::vector<float> out(static_cast<size_t>(m) * n);
    // accumulate rows in double so finite-difference probes stay clean
    std::vector<double> acc(static_cast<size_t>(n));
    for (int i = 0; i < m; ++i) {
        std::fill(acc.begin(), acc.end(), 0.0);
        const float* arow = av.data() + static_cast<size_t>(i) * k;
        for (int p = 0; p < k; ++p) {
            double x = arow[p];
            const float* brow = bv.data() + static_cast<size_t>(p) * n;
            for (int j = 0; j < n; ++j) acc[j] += x * brow[j];
        }
        float* orow = out.data() + static_cast<size_t>(i) * n;
        for (int j = 0; j < n; ++j) orow[j] = static_cast<float>(acc[j]);
    }

    return make_result({m, n}, std::move(out), {a, b},
        [m, k, n](const TensorImpl& o, const std::vector<Tensor>& in) {
            const float* g = o.grad.data();
            auto av2 = in[0].data();
            auto bv2 = in[1].data();
            if (want_grad(in[0])) { // dA = G * B^T
                float* ga = grad_buf(in[0]);
                for (int i = 0; i < m; ++i) {
                    const float* grow = g + static_cast<size_t>(i) * n;
                    float* garow = ga + static_cast<size_t>(i) * k;
                    for (int p = 0; p < k; ++p) {
                        const float* brow = bv2.data() + static_cast<size_t>(p) * n;
                        double acc = 0.0;
                        for (int j = 0; j < n; ++j) acc += static_cast<double>(grow[j]) * brow[j];
                        garow[p] += static_cast<float>(acc);
                    }
                }
            }
            if (want_grad(in[1])) { // dB = A^T * G
                float* gb = grad_buf(in[1]);
                std::vector<double> acc(static_cast<size_t>(n));
                for (int p = 0; p < k; ++p) {
                    std::fill(acc.begin(), acc.end(), 0.0);
                    for (int i = 0; i < m; ++i) {
                        double x = av2[static_cast<size_t>(i) * k + p];
                        const float* grow = g + static_cast<size_t>(i) * n;
                        for (int j = 0; j < n; ++j) acc[j] += x * grow[j];
                    }
                    float* gbrow = gb + static_cast<size_t>(p) * n;
                    for (int j = 0; j < n; ++j) gbrow[j] += static_cast<float>(acc[j]);
                }
            }
        });
}

// ---------------------------------------------------------------- pointwise

Tensor exp(const Tensor& t) {
    auto v = t.data();
    std::vector<float> out(v.size());
    for (size_t i = 0; i < v.size(); ++i) out[i] = std::exp(v[i]);
    return make_result(t.shape(), std::move(out), {t},
        [](const TensorImpl& o, const std::vector<Tensor>& in) {
            if (!want_grad(in[0])) return;
            float* g = grad_buf(in[0]);
            for (size_t i = 0; i < o.data.size(); ++i) g[i] += o.grad[i] * o.data[i];
        });
}

Tensor log(const Tensor& t) {
    auto v = t.data();
    std::vector<float> out(v.size());
    for (size_t i = 0; i < v.size(); ++i) {
        if (v[i] <= 0.0f)
            throw std::domain_error("log: non-positive input " + std::to_string(v[i]) +
                                    " at flat index " + std::to_string(i) + ", shape " +
                                    shape_str(t.shape()));
        out[i] = std::log(v[i]);
    }
    return make_result(t.shape(), std::move(out), {t},
        [](const TensorImpl& o, const std::vector<Tensor>& in) {
            if (!want_grad(in[0])) return;
            float* g = grad_buf(in[0]);
            auto x = in[0].data();
            for (size_t i = 0; i < o.data.size(); ++i) g[i] += o.grad[i] / x[i];
        });
}

Tensor tanh(const Tensor& t) {
    auto v = t.data();
    std::vector<float> out(v.size());
    for (size_t i = 0; i < v.size(); ++i) out[i] = std::tanh(v[i]);
    return make_result(t.shape(), std::move(out), {t},
        [](const TensorImpl& o, const std::vector<Tensor>& in) {
            if (!want_grad(in[0])) return;
            float* g = grad_buf(in[0]);
            for (size_t i = 0; i < o.data.size(); ++i)
                g[i] += o.grad[i] * (1.0f - o.data[i] * o.data[i]);
        });
}

// --------------------------------------------------------------- reductions

Tensor sum(const Tensor& t) {
    double acc = 0.0;
    for (float x : t.data()) acc += x;
    return make_result({1}, {static_cast<float>(acc)}, {t},
        [](const TensorImpl& o, const std::vector<Tensor>& in) {
            if (!want_grad(in[0])) return;
            float* g = grad_buf(in[0]);
            float go = o.grad[0];
            for (size_t i = 0; i < in[0].data().size(); ++i) g[i] += go;
        });
}

Tensor mean(const Tensor& t) {
    double acc = 0.0;
    for (float x : t.data()) acc += x;
    double n = static_cast<double>(t.numel());
    return make_result({1}, {static_cast<float>(acc / n)}, {t},
        [n](const TensorImpl& o, const std::vector<Tensor>& in) {
            if (!want_grad(in[0])) return;
            float* g = grad_buf(in[0]);
            float go = static_cast<float>(o.grad[0] / n);
            for (size_t i = 0; i < in[0].data().size(); ++i) g[i] += go;
        });
}

Tensor max(const Tensor& t) {
    auto v = t.data();
    size_t arg = 0;
    for (size_t i = 1; i < v.size(); ++i)
        if (v[i] > v[arg]) arg = i; // strict >, ties keep the first
    return make_result({1}, {v[arg]}, {t},
        [arg](const TensorImpl& o, const std::vector<Tensor>& in) {
            if (!want_grad(in[0])) return;
            grad_buf(in[0])[arg] += o.grad[0];
        });
}

// ------------------------------------------------------------ shape movers

Tensor scale(const Tensor& t, float c) {
    auto v = t.data();
    std::vector<float> out(v.size());
    for (size_t i = 0; i < v.size(); ++i) out[i] = v[i] * c;
    return make_result(t.shape(), std::move(out), {t},
        [c](const TensorImpl& o, const std::vector<Tensor>& in) {
            if (!want_grad(in[0])) return;
            float* g = grad_buf(in[0]);
            for (size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i] * c;
        });
}

Tensor transpose(const Tensor& t) {
    if (t.ndim() != 2)
        throw std::invalid_argument("transpose: needs a 2-D tensor, got " + shape_str(t.shape()));
    int m = t.dim(0), n = t.dim(1);
    auto v = t.data();
    std::vector<float> out(v.size());
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
            out[static_cast<size_t>(j) * m + i] = v[static_cast<size_t>(i) * n + j];
    return make_result({n, m}, std::move(out), {t},
        [m, n](const TensorImpl& o, const std::vector<Tensor>& in) {
            if (!want_grad(in[0])) return;
            float* g = grad_buf(in[0]);
            for (int j = 0; j < n; ++j)
                for (int i = 0; i < m; ++i)
                    g[static_cast<size_t>(i) * n + j] += o.grad[static_cast<size_t>(j) * m + i];
        });
}

Tensor reshape(const Tensor& t, std::vector<int> shape) {
    check_shape(shape, "reshape");
    if (numel_of(shape) != t.numel())
        throw std::invalid_argument("reshape: " + shape_str(t.shape()) + " to " + shape_str(shape) +
                                    " changes element count");
    std::vector<float> out(t.data().begin(), t.data().end());
    return make_result(std::move(shape), std::move(out), {t},
        [](const TensorImpl& o, const std::vector<Tensor>& in) {
            if (!want_grad(in[0])) return;
            float* g = grad_buf(in[0]);
            for (size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
        });
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
    if (parts.empty()) throw std::invalid_argument("concat: no inputs");
    int nd = parts[0].ndim();
    if (nd != 1 && nd != 2)
        throw std::invalid_argument("concat: supports 1-D and 2-D, got " + shape_str(parts[0].shape()));
    if (axis < 0 || axis >= nd) throw std::invalid_argument("concat: bad axis " + std::to_string(axis));
    for (const Tensor& p : parts) {
        if (p.ndim() != nd)
            throw std::invalid_argument("concat: rank mismatch " + shape_str(parts[0].shape()) +
                                        " vs " + shape_str(p.shape()));
        for (int d = 0; d < nd; ++d)
            if (d != axis && p.dim(d) != parts[0].dim(d))
                throw std::invalid_argument("concat: shape mismatch " + shape_str(parts[0].shape()) +
                                            " vs " + shape_str(p.shape()));
    }

    std::vector<int> out_shape = parts[0].shape();
    int total = 0;
    for (const Tensor& p : parts) total += p.dim(axis);
    out_shape[static_cast<size_t>(axis)] = total;

    std::vector<float> out(static_cast<size_t>(numel_of(out_shape)));
    // flat element offset for the axis-0/1-D case, column offset for axis 1
    std::vector<size_t> offsets(parts.size());
    if (nd == 1 || axis == 0) {
        size_t pos = 0;
        for (size_t pi = 0; pi < parts.size(); ++pi) {
            offsets[pi] = pos;
            auto v = parts[pi].data();
            std::copy(v.begin(), v.end(), out.begin() + static_cast<long>(pos));
            pos += v.size();
        }
    } else { // 2-D, axis 1
        int rows = parts[0].dim(0);
        size_t col = 0;
        for (size_t pi = 0; pi < parts.size(); ++pi) {
            offsets[pi] = col;
            auto v = parts[pi].data();
            int w = parts[pi].dim(1);
            for (int r = 0; r < rows; ++r)
                std::copy(v.begin() + static_cast<long>(r) * w, v.begin() + static_cast<long>(r + 1) * w,
                          out.begin() + static_cast<long>(r) * total + static_cast<long>(col));
            col += static_cast<size_t>(w);
        }
    }

    return make_result(out_shape, std::move(out), parts,
        [axis, nd, total, offsets](const TensorImpl& o, const std::vector<Tensor>& in) {
            for (size_t pi = 0; pi < in.size(); ++pi) {
                if (!want_grad(in[pi])) continue;
                float* g = grad_buf(in[pi]);
                if (nd == 1 || axis == 0) {
                    size_t n = in[pi].data().size();
                    const float* src = o.grad.data() + offsets[pi];
                    for (size_t i = 0; i < n; ++i) g[i] += src[i];
                } else {
                    int rows = in[pi].dim(0), w = in[pi].dim(1);
                    for (int r = 0; r < rows; ++r)
                        for (int c = 0; c < w; ++c)
                            g[static_cast<size_t>(r) * w + c] +=
                                o.grad[static_cast<size_t>(r) * total + offsets[pi] + c];
                }
            }
        });
}

Tensor slice(const Tensor& t, int axis, int start, int len) {
    int nd = t.ndim();
    if (nd != 1 && nd != 2)
        throw std::invalid_argument("slice: supports 1-D and 2-D, got " + shape_str(t.shape()));
    if (axis < 0 || axis >= nd) throw std::invalid_argument("slice: bad axis " + std::to_string(axis));
    if (start < 0 || len <= 0 || start + len > t.dim(axis))
        throw std::invalid_argument("slice: range [" + std::to_string(start) + "," +
                                    std::to_string(start + len) + ") out of bounds for " +
                                    shape_str(t.shape()) + " axis " + std::to_string(axis));

    std::vector<int> out_shape = t.shape();
    out_shape[static_cast<size_t>(axis)] = len;
    std::vector<float> out(static_cast<size_t>(numel_of(out_shape)));
    auto v = t.data();
    if (nd == 1) {
        std::copy(v.begin() + start, v.begin() + start + len, out.begin());
    } else if (axis == 0) {
        int w = t.dim(1);
        std::copy(v.begin() + static_cast<long>(start) * w,
                  v.begin() + static_cast<long>(start + len) * w, out.begin());
    } else {
        int rows = t.dim(0), w = t.dim(1);
        for (int r = 0; r < rows; ++r)
            std::copy(v.begin() + static_cast<long>(r) * w + start,
                      v.begin() + static_cast<long>(r) * w + start + len,
                      out.begin() + static_cast<long>(r) * len);
    }

    return make_result(out_shape, std::move(out), {t},
        [axis, start, len, nd](const TensorImpl& o, const std::vector<Tensor>& in) {
            if (!want_grad(in[0])) return;
            float* g = grad_buf(in[0]);
            if (nd == 1) {
                for (int i = 0; i < len; ++i) g[start + i] += o.grad[static_cast<size_t>(i)];
            } else if (axis == 0) {
                int w = in[0].dim(1);
                for (size_t i = 0; i < o.grad.size(); ++i)
                    g[static_cast<size_t>(start) * w + i] += o.grad[i];
            } else {
                int rows = in[0].dim(0), w = in[0].dim(1);
                for (int r = 0; r < rows; ++r)
                    for (int c = 0; c < len; ++c)
                        g[static_cast<size_t>(r) * w + start + c] +=
                            o.grad[static_cast<size_t>(r) * len + c];
            }
        });
}

Tensor take_rows(const Tensor& table, const std::vector<int>& rows) {
    if (table.ndim() != 2)
        throw std::invalid_argument("take_rows: needs a 2-D table, got " + shape_str(table.shape()));
    int n = table.dim(0), d = table.dim(1);
    for (int r : rows)
        if (r < 0 || r >= n)
            throw std::invalid_argument("take_rows: row " + std::to_string(r) + " out of bounds for " +
                                        shape_str(table.shape()));
    std::vector<float> out(rows.size() * static_cast<size_t>(d));
    auto v = table.data();
    for (size_t i = 0; i < rows.size(); ++i)
        std::copy(v.begin() + static_cast<long>(rows[i]) * d,
                  v.begin() + static_cast<long>(rows[i] + 1) * d,
                  out.begin() + static_cast<long>(i) * d);
    return make_result({static_cast<int>(rows.size()), d}, std::move(out), {table},
        [rows, d](const TensorImpl& o, const std::vector<Tensor>& in) {
            if (!want_grad(in[0])) return;
            float* g = grad_buf(in[0]);
            for (size_t i = 0; i < rows.size(); ++i)
                for (int c = 0; c < d; ++c)
                    g[static_cast<size_t>(rows[i]) * d + c] += o.grad[i * static_cast<size_t>(d) + c];
        });
}

// ------------------------------------------------------- softmax and friends

namespace {

// view any 1-D/2-D tensor as rows along `axis`
struct RowView {
    int nrows, rowlen;
    size_t stride, step; // flat = r * stride + i * step
};

RowView rows_along(const Tensor& t, int axis, const char* op) {
    int nd = t.ndim();
    if (nd != 1 && nd != 2)
        throw std::invalid_argument(std::string(op) + ": supports 1-D and 2-D, got " + shape_str(t.shape()));
    if (axis < 0 || axis >= nd)
        throw std::invalid_argument(std::string(op) + ": bad axis " + std::to_string(axis) +
                                    " for " + shape_str(t.shape()));
    if (nd == 1) return {1, t.dim(0), 0, 1};
    if (axis == 1) return {t.dim(0), t.dim(1), static_cast<size_t>(t.dim(1)), 1};
    return {t.dim(1), t.dim(0), 1, static_cast<size_t>(t.dim(1))};
}

} // namespace

Tensor softmax(const Tensor& t, int axis, float temperature) {
    if (!(temperature > 0.0f))
        throw std::domain_error("softmax: temperature must be positive, got " + std::to_string(temperature));
    RowView rv = rows_along(t, axis, "softmax");
    auto v = t.data();
    std::vector<float> out(v.size());
    for (int r = 0; r < rv.nrows; ++r) {
        size_t base = static_cast<size_t>(r) * rv.stride;
        float m = v[base];
        for (int i = 1; i < rv.rowlen; ++i) m = std::max(m, v[base + static_cast<size_t>(i) * rv.step]);
        double denom = 0.0;
        for (int i = 0; i < rv.rowlen; ++i) {
            double e = std::exp((static_cast<double>(v[base + static_cast<size_t>(i) * rv.step]) - m) / temperature);
            out[base + static_cast<size_t>(i) * rv.step] = static_cast<float>(e);
            denom += e;
        }
        for (int i = 0; i < rv.rowlen; ++i) {
            size_t k = base + static_cast<size_t>(i) * rv.step;
            out[k] = static_cast<float>(out[k] / denom);
        }
    }
    return make_result(t.shape(), std::move(out), {t},
        [rv, temperature](const TensorImpl& o, const std::vector<Tensor>& in) {
            if (!want_grad(in[0])) return;
            float* g = grad_buf(in[0]);
            for (int r = 0; r < rv.nrows; ++r) {
                size_t base = static_cast<size_t>(r) * rv.stride;
                double dot = 0.0;
                for (int i = 0; i < rv.rowlen; ++i) {
                    size_t k = base + static_cast<size_t>(i) * rv.step;
                    dot += static_cast<double>(o.grad[k]) * o.data[k];
                }
                for (int i = 0; i < rv.rowlen; ++i) {
                    size_t k = base + static_cast<size_t>(i) * rv.step;
                    g[k] += static_cast<float>((o.grad[k] - dot) * o.data[k] / temperature);
                }
            }
        });
}

Tensor logsumexp(const Tensor& t, int axis) {
    RowView rv = rows_along(t, axis, "logsumexp");
    auto v = t.data();
    std::vector<float> out(static_cast<size_t>(rv.nrows));
    for (int r = 0; r < rv.nrows; ++r) {
        size_t base = static_cast<size_t>(r) * rv.stride;
        float m = v[base];
        for (int i = 1; i < rv.rowlen; ++i) m = std::max(m, v[base + static_cast<size_t>(i) * rv.step]);
        double acc = 0.0;
        for (int i = 0; i < rv.rowlen; ++i)
            acc += std::exp(static_cast<double>(v[base + static_cast<size_t>(i) * rv.step]) - m);
        out[static_cast<size_t>(r)] = static_cast<float>(m + std::log(acc));
    }
    std::vector<int> out_shape = t.ndim() == 1 ? std::vector<int>{1} : std::vector<int>{rv.nrows};
    return make_result(std::move(out_shape), std::move(out), {t},
        [rv](const TensorImpl& o, const std::vector<Tensor>& in) {
            if (!want_grad(in[0])) return;
            float* g = grad_buf(in[0]);
            auto v2 = in[0].data();
            for (int r = 0; r < rv.nrows; ++r) {
                size_t base = static_cast<size_t>(r) * rv.stride;
                float lse = o.data[static_cast<size_t>(r)];
                float go = o.grad[static_cast<size_t>(r)];
                for (int i = 0; i < rv.rowlen; ++i) {
                    size_t k = base + static_cast<size_t>(i) * rv.step;
                    g[k] += go * std::exp(v2[k] - lse);
                }
            }
        });
}

Tensor l2_normalize(const Tensor& t, float eps) {
    int nd = t.ndim();
    if (nd != 1 && nd != 2)
        throw std::invalid_argument("l2_normalize: supports 1-D and 2-D, got " + shape_str(t.shape()));
    int rows = nd == 1 ? 1 : t.dim(0);
    int d = nd == 1 ? t.dim(0) : t.dim(1);
    auto v = t.data();
    std::vector<float> out(v.size());
    std::vector<float> norms(static_cast<size_t>(rows));
    for (int r = 0; r < rows; ++r) {
        const float* x = v.data() + static_cast<size_t>(r) * d;
        double ss = 0.0;
        for (int i = 0; i < d; ++i) ss += static_cast<double>(x[i]) * x[i];
        float n = static_cast<float>(std::sqrt(ss));
        norms[static_cast<size_t>(r)] = n;
        float* y = out.data() + static_cast<size_t>(r) * d;
        if (n < eps) {
            std::fill(y, y + d, 0.0f); // degenerate row maps to the zero vector
        } else {
            for (int i = 0; i < d; ++i) y[i] = x[i] / n;
        }
    }
    return make_result(t.shape(), std::move(out), {t},
        [rows, d, eps, norms](const TensorImpl& o, const std::vector<Tensor>& in) {
            if (!want_grad(in[0])) return;
            float* g = grad_buf(in[0]);
            for (int r = 0; r < rows; ++r) {
                float n = norms[static_cast<size_t>(r)];
                if (n < eps) continue; // zero output, zero gradient
                const float* y = o.data.data() + static_cast<size_t>(r) * d;
                const float* go = o.grad.data() + static_cast<size_t>(r) * d;
                double dot = 0.0;
                for (int i = 0; i < d; ++i) dot += static_cast<double>(go[i]) * y[i];
                float* gr = g + static_cast<size_t>(r) * d;
                for (int i = 0; i < d; ++i)
                    gr[i] += static_cast<float>((go[i] - dot * y[i]) / n);
            }
        });
}

Tensor cosine_similarity(const Tensor& a, const Tensor& b, float eps) {
    if (a.ndim() != 1 || b.ndim() != 1 || a.shape() != b.shape())
        throw std::invalid_argument("cosine_similarity: needs equal-length 1-D inputs, got " +
                                    shape_str(a.shape()) + " and " + shape_str(b.shape()));
    int d = a.dim(0);
    auto av = a.data();
    auto bv = b.data();
    double dot = 0.0, na2 = 0.0, nb2 = 0.0;
    for (int i = 0; i < d; ++i) {
        dot += static_cast<double>(av[i]) * bv[i];
        na2 += static_cast<double>(av[i]) * av[i];
        nb2 += static_cast<double>(bv[i]) * bv[i];
    }
    double na = std::sqrt(na2), nb = std::sqrt(nb2);
    bool degenerate = na < eps || nb < eps;
    float c = degenerate ? 0.0f : static_cast<float>(dot / (na * nb));
    return make_result({1}, {c}, {a, b},
        [d, na, nb, dot, degenerate](const TensorImpl& o, const std::vector<Tensor>& in) {
            if (degenerate) return; // constant zero, nothing flows
            float go = o.grad[0];
            auto av2 = in[0].data();
            auto bv2 = in[1].data();
            double c2 = dot / (na * nb);
            if (want_grad(in[0])) {
                float* g = grad_buf(in[0]);
                for (int i = 0; i < d; ++i)
                    g[i] += static_cast<float>(go * (bv2[i] / (na * nb) - c2 * av2[i] / (na * na)));
            }
            if (want_grad(in[1])) {
                float* g = grad_buf(in[1]);
                for (int i = 0; i < d; ++i)
                    g[i] += static_cast<float>(go * (av2[i] / (na * nb) - c2 * bv2[i] / (nb * nb)));
            }
        });
}

Tensor stop_gradient(const Tensor& t) { return t.detached(); }

// ---------------------------------------------------------------- backward

void backward(const Tensor& loss) {
    if (loss.numel() != 1)
        throw std::invalid_argument("backward: loss must be scalar, got " + shape_str(loss.shape()));
    if (!loss.requires_grad()) return; // constant, nothing to do

    // iterative post-order DFS; child visit order = node input order, so the
    // schedule is identical run to run
    std::vector<TensorImpl*> order;
    std::unordered_set<TensorImpl*> seen;
    std::vector<std::pair<TensorImpl*, size_t>> stack;
    stack.emplace_back(loss.impl(), 0);
    seen.insert(loss.impl());
    while (!stack.empty()) {
        auto& [im, idx] = stack.back();
        if (!im->node || idx >= im->node->inputs.size()) {
            order.push_back(im);
            stack.pop_back();
            continue;
        }
        TensorImpl* next = im->node->inputs[idx].impl();
        ++idx;
        if (next->requires_grad && !seen.count(next)) {
            seen.insert(next);
            stack.emplace_back(next, 0);
        }
    }

    if (loss.impl()->grad.empty()) loss.impl()->grad.assign(1, 0.0f);
    loss.impl()->grad[0] += 1.0f;

    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorImpl* im = *it;
        if (!im->node) continue;
        if (im->grad.empty()) im->grad.assign(im->data.size(), 0.0f);
        im->node->backward(*im, im->node->inputs);
    }
}

Tensor affine_rows(const Tensor& x, const Tensor& w, const Tensor& bias) {
    if (bias.ndim() != 2 || bias.dim(0) != 1)
        throw std::invalid_argument("affine_rows: bias must be {1,n}, got " + shape_str(bias.shape()));
    Tensor y = matmul(x, w);
    Tensor ones = Tensor::full({y.dim(0), 1}, 1.0f);
    return add(y, matmul(ones, bias));
}

} // namespace mralign

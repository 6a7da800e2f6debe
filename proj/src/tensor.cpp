#include "cmgen/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

#include "cmgen/errors.hpp"
#include "cmgen/rng.hpp"

namespace cmgen {

using detail::TensorNode;
using NodePtr = std::shared_ptr<TensorNode>;

namespace {

thread_local int g_no_grad_depth = 0;

size_t numel(const Shape& s) {
    size_t n = 1;
    for (size_t d : s) n *= d;
    return n;
}

NodePtr new_node(Shape shape, std::vector<double> values) {
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->values = std::move(values);
    return n;
}

// Wires up the tape edge if gradients are live for any parent.
Tensor make_op(Shape shape, std::vector<double> values,
               std::vector<Tensor> parents,
               std::function<void(TensorNode&)> backward_fn) {
    auto n = new_node(std::move(shape), std::move(values));
    if (grad_enabled()) {
        bool any = false;
        for (const auto& p : parents)
            if (p.node() && p.node()->requires_grad) { any = true; break; }
        if (any) {
            n->requires_grad = true;
            n->parents.reserve(parents.size());
            for (const auto& p : parents) n->parents.push_back(p.node());
            n->backward_fn = std::move(backward_fn);
        }
    }
    return Tensor::wrap(std::move(n));
}

void check_defined(const Tensor& t, const char* op) {
    if (!t.defined())
        throw ContractError(std::string(op) + ": undefined tensor");
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw DimensionError(std::string(op) + ": shape mismatch " +
                             shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

void check_rank2(const Tensor& t, const char* op) {
    if (t.rank() != 2)
        throw DimensionError(std::string(op) + ": expected rank-2 tensor, got " +
                             shape_str(t.shape()));
}

// Row-major m x k times k x n.
void mm(const double* a, const double* b, double* c, size_t m, size_t k, size_t n) {
    std::fill(c, c + m * n, 0.0);
    for (size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * n;
        for (size_t p = 0; p < k; ++p) {
            double av = arow[p];
            if (av == 0.0) continue;
            const double* brow = b + p * n;
            for (size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// c += a * b^T, a is m x k, b is n x k.
void mm_abt_acc(const double* a, const double* b, double* c, size_t m, size_t k, size_t n) {
    for (size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * n;
        for (size_t j = 0; j < n; ++j) {
            const double* brow = b + j * k;
            double acc = 0.0;
            for (size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
            crow[j] += acc;
        }
    }
}

// c += a^T * b, a is k x m, b is k x n.
void mm_atb_acc(const double* a, const double* b, double* c, size_t m, size_t k, size_t n) {
    for (size_t p = 0; p < k; ++p) {
        const double* arow = a + p * m;
        const double* brow = b + p * n;
        for (size_t i = 0; i < m; ++i) {
            double av = arow[i];
            if (av == 0.0) continue;
            double* crow = c + i * n;
            for (size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

} // namespace

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) os << "x";
        os << s[i];
    }
    os << "]";
    return os.str();
}

NoGradGuard::NoGradGuard() { ++g_no_grad_depth; }
NoGradGuard::~NoGradGuard() { --g_no_grad_depth; }
bool grad_enabled() { return g_no_grad_depth == 0; }

Tensor::Tensor(Shape shape, double fill, bool requires_grad) {
    if (shape.empty()) throw DimensionError("Tensor: empty shape");
    for (size_t d : shape)
        if (d == 0) throw DimensionError("Tensor: zero dimension in " + shape_str(shape));
    node_ = new_node(shape, std::vector<double>(numel(shape), fill));
    node_->requires_grad = requires_grad;
    node_->is_leaf = true;
}

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad) {
    if (shape.empty()) throw DimensionError("Tensor: empty shape");
    if (numel(shape) != values.size())
        throw DimensionError("Tensor: " + shape_str(shape) + " does not hold " +
                             std::to_string(values.size()) + " values");
    node_ = new_node(std::move(shape), std::move(values));
    node_->requires_grad = requires_grad;
    node_->is_leaf = true;
}

Tensor Tensor::scalar(double v) { return Tensor({1}, std::vector<double>{v}); }

Tensor Tensor::wrap(NodePtr n) {
    Tensor t;
    t.node_ = std::move(n);
    return t;
}

const Shape& Tensor::shape() const {
    if (!node_) throw ContractError("shape(): undefined tensor");
    return node_->shape;
}

size_t Tensor::size() const { return shape().empty() ? 0 : node_->size(); }

size_t Tensor::dim(size_t i) const {
    const Shape& s = shape();
    if (i >= s.size()) throw IndexError("dim(): axis out of range");
    return s[i];
}

size_t Tensor::rows() const {
    if (rank() != 2) throw DimensionError("rows(): tensor is " + shape_str(shape()));
    return node_->shape[0];
}

size_t Tensor::cols() const {
    if (rank() != 2) throw DimensionError("cols(): tensor is " + shape_str(shape()));
    return node_->shape[1];
}

const std::vector<double>& Tensor::values() const {
    if (!node_) throw ContractError("values(): undefined tensor");
    return node_->values;
}

std::vector<double>& Tensor::mutable_values() {
    if (!node_) throw ContractError("mutable_values(): undefined tensor");
    return node_->values;
}

double Tensor::item() const {
    if (size() != 1)
        throw ContractError("item(): tensor has " + std::to_string(size()) + " elements");
    return node_->values[0];
}

double Tensor::at(size_t r, size_t c) const {
    if (rank() != 2) throw DimensionError("at(): tensor is " + shape_str(shape()));
    if (r >= rows() || c >= cols()) throw IndexError("at(): index out of range");
    return node_->values[r * cols() + c];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

bool Tensor::has_grad() const {
    return node_ && node_->grad.size() == node_->values.size();
}

const std::vector<double>& Tensor::grad() const {
    if (!has_grad()) throw ContractError("grad(): no gradient present");
    return node_->grad;
}

std::vector<double>& Tensor::mutable_grad() {
    if (!node_) throw ContractError("mutable_grad(): undefined tensor");
    node_->ensure_grad();
    return node_->grad;
}

void Tensor::zero_grad() {
    if (node_) node_->grad.assign(node_->values.size(), 0.0);
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    check_defined(a, "matmul");
    check_defined(b, "matmul");
    check_rank2(a, "matmul");
    check_rank2(b, "matmul");
    if (a.cols() != b.rows())
        throw DimensionError("matmul: inner dimensions disagree, " +
                             shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    size_t m = a.rows(), k = a.cols(), n = b.cols();
    std::vector<double> out(m * n);
    mm(a.values().data(), b.values().data(), out.data(), m, k, n);
    auto an = a.node(), bn = b.node();
    return make_op({m, n}, std::move(out), {a, b}, [an, bn, m, k, n](TensorNode& self) {
        if (an->requires_grad) {
            an->ensure_grad();
            mm_abt_acc(self.grad.data(), bn->values.data(), an->grad.data(), m, n, k);
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            mm_atb_acc(an->values.data(), self.grad.data(), bn->grad.data(), k, m, n);
        }
    });
}

Tensor transpose(const Tensor& x) {
    check_defined(x, "transpose");
    check_rank2(x, "transpose");
    size_t m = x.rows(), n = x.cols();
    std::vector<double> out(m * n);
    const auto& v = x.values();
    for (size_t i = 0; i < m; ++i)
        for (size_t j = 0; j < n; ++j) out[j * m + i] = v[i * n + j];
    auto xn = x.node();
    return make_op({n, m}, std::move(out), {x}, [xn, m, n](TensorNode& self) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (size_t i = 0; i < m; ++i)
            for (size_t j = 0; j < n; ++j) xn->grad[i * n + j] += self.grad[j * m + i];
    });
}

Tensor add(const Tensor& a, const Tensor& b) {
    check_defined(a, "add");
    check_defined(b, "add");
    check_same_shape(a, b, "add");
    std::vector<double> out(a.size());
    const auto& av = a.values();
    const auto& bv = b.values();
    for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
    auto an = a.node(), bn = b.node();
    return make_op(a.shape(), std::move(out), {a, b}, [an, bn](TensorNode& self) {
        if (an->requires_grad) {
            an->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] += self.grad[i];
        }
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_defined(a, "sub");
    check_defined(b, "sub");
    check_same_shape(a, b, "sub");
    std::vector<double> out(a.size());
    const auto& av = a.values();
    const auto& bv = b.values();
    for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
    auto an = a.node(), bn = b.node();
    return make_op(a.shape(), std::move(out), {a, b}, [an, bn](TensorNode& self) {
        if (an->requires_grad) {
            an->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] -= self.grad[i];
        }
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_defined(a, "mul");
    check_defined(b, "mul");
    check_same_shape(a, b, "mul");
    std::vector<double> out(a.size());
    const auto& av = a.values();
    const auto& bv = b.values();
    for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
    auto an = a.node(), bn = b.node();
    return make_op(a.shape(), std::move(out), {a, b}, [an, bn](TensorNode& self) {
        if (an->requires_grad) {
            an->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i)
                an->grad[i] += self.grad[i] * bn->values[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i)
                bn->grad[i] += self.grad[i] * an->values[i];
        }
    });
}

namespace {

void check_rowvec(const Tensor& x, const Tensor& v, const char* op) {
    check_defined(x, op);
    check_defined(v, op);
    check_rank2(x, op);
    bool ok = (v.rank() == 1 && v.dim(0) == x.cols()) ||
              (v.rank() == 2 && v.rows() == 1 && v.cols() == x.cols());
    if (!ok)
        throw DimensionError(std::string(op) + ": row vector " + shape_str(v.shape()) +
                             " does not broadcast over " + shape_str(x.shape()));
}

} // namespace

Tensor add_rowvec(const Tensor& x, const Tensor& v) {
    check_rowvec(x, v, "add_rowvec");
    size_t n = x.rows(), d = x.cols();
    std::vector<double> out(n * d);
    const auto& xv = x.values();
    const auto& vv = v.values();
    for (size_t i = 0; i < n; ++i)
        for (size_t j = 0; j < d; ++j) out[i * d + j] = xv[i * d + j] + vv[j];
    auto xn = x.node(), vn = v.node();
    return make_op(x.shape(), std::move(out), {x, v}, [xn, vn, n, d](TensorNode& self) {
        if (xn->requires_grad) {
            xn->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) xn->grad[i] += self.grad[i];
        }
        if (vn->requires_grad) {
            vn->ensure_grad();
            for (size_t i = 0; i < n; ++i)
                for (size_t j = 0; j < d; ++j) vn->grad[j] += self.grad[i * d + j];
        }
    });
}

Tensor mul_rowvec(const Tensor& x, const Tensor& v) {
    check_rowvec(x, v, "mul_rowvec");
    size_t n = x.rows(), d = x.cols();
    std::vector<double> out(n * d);
    const auto& xv = x.values();
    const auto& vv = v.values();
    for (size_t i = 0; i < n; ++i)
        for (size_t j = 0; j < d; ++j) out[i * d + j] = xv[i * d + j] * vv[j];
    auto xn = x.node(), vn = v.node();
    return make_op(x.shape(), std::move(out), {x, v}, [xn, vn, n, d](TensorNode& self) {
        if (xn->requires_grad) {
            xn->ensure_grad();
            for (size_t i = 0; i < n; ++i)
                for (size_t j = 0; j < d; ++j)
                    xn->grad[i * d + j] += self.grad[i * d + j] * vn->values[j];
        }
        if (vn->requires_grad) {
            vn->ensure_grad();
            for (size_t i = 0; i < n; ++i)
                for (size_t j = 0; j < d; ++j)
                    vn->grad[j] += self.grad[i * d + j] * xn->values[i * d + j];
        }
    });
}

Tensor scale(const Tensor& x, double c) {
    check_defined(x, "scale");
    std::vector<double> out(x.size());
    const auto& xv = x.values();
    for (size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * c;
    auto xn = x.node();
    return make_op(x.shape(), std::move(out), {x}, [xn, c](TensorNode& self) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) xn->grad[i] += self.grad[i] * c;
    });
}

Tensor add_scalar(const Tensor& x, double c) {
    check_defined(x, "add_scalar");
    std::vector<double> out(x.size());
    const auto& xv = x.values();
    for (size_t i = 0; i < out.size(); ++i) out[i] = xv[i] + c;
    auto xn = x.node();
    return make_op(x.shape(), std::move(out), {x}, [xn](TensorNode& self) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) xn->grad[i] += self.grad[i];
    });
}

Tensor scale_by(const Tensor& x, const Tensor& s) {
    check_defined(x, "scale_by");
    check_defined(s, "scale_by");
    if (s.size() != 1)
        throw DimensionError("scale_by: scale must have one element, got " +
                             shape_str(s.shape()));
    double c = s.values()[0];
    std::vector<double> out(x.size());
    const auto& xv = x.values();
    for (size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * c;
    auto xn = x.node(), sn = s.node();
    return make_op(x.shape(), std::move(out), {x, s}, [xn, sn](TensorNode& self) {
        if (xn->requires_grad) {
            xn->ensure_grad();
            double c = sn->values[0];
            for (size_t i = 0; i < self.grad.size(); ++i) xn->grad[i] += self.grad[i] * c;
        }
        if (sn->requires_grad) {
            sn->ensure_grad();
            double acc = 0.0;
            for (size_t i = 0; i < self.grad.size(); ++i)
                acc += self.grad[i] * xn->values[i];
            sn->grad[0] += acc;
        }
    });
}

Tensor sigmoid(const Tensor& x) {
    check_defined(x, "sigmoid");
    std::vector<double> out(x.size());
    const auto& xv = x.values();
    for (size_t i = 0; i < out.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-xv[i]));
    auto xn = x.node();
    auto y = out;  // keep activation for the backward pass
    return make_op(x.shape(), std::move(out), {x}, [xn, y = std::move(y)](TensorNode& self) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i)
            xn->grad[i] += self.grad[i] * y[i] * (1.0 - y[i]);
    });
}

Tensor relu(const Tensor& x) {
    check_defined(x, "relu");
    std::vector<double> out(x.size());
    const auto& xv = x.values();
    for (size_t i = 0; i < out.size(); ++i) out[i] = xv[i] > 0.0 ? xv[i] : 0.0;
    auto xn = x.node();
    return make_op(x.shape(), std::move(out), {x}, [xn](TensorNode& self) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i)
            if (xn->values[i] > 0.0) xn->grad[i] += self.grad[i];
    });
}

Tensor exp(const Tensor& x) {
    check_defined(x, "exp");
    std::vector<double> out(x.size());
    const auto& xv = x.values();
    for (size_t i = 0; i < out.size(); ++i) out[i] = std::exp(xv[i]);
    auto xn = x.node();
    auto y = out;
    return make_op(x.shape(), std::move(out), {x}, [xn, y = std::move(y)](TensorNode& self) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i)
            xn->grad[i] += self.grad[i] * y[i];
    });
}

Tensor log(const Tensor& x) {
    check_defined(x, "log");
    std::vector<double> out(x.size());
    const auto& xv = x.values();
    for (size_t i = 0; i < out.size(); ++i) out[i] = std::log(xv[i]);
    auto xn = x.node();
    return make_op(x.shape(), std::move(out), {x}, [xn](TensorNode& self) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i)
            xn->grad[i] += self.grad[i] / xn->values[i];
    });
}

Tensor sum(const Tensor& x) {
    check_defined(x, "sum");
    double acc = 0.0;
    for (double v : x.values()) acc += v;
    auto xn = x.node();
    return make_op({1}, {acc}, {x}, [xn](TensorNode& self) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        double g = self.grad[0];
        for (size_t i = 0; i < xn->grad.size(); ++i) xn->grad[i] += g;
    });
}

namespace {

// Softmax over contiguous slices of length `len`, strided so both the
// row-wise and column-wise cases share one routine. `count` slices; element
// t of slice s lives at offset s * slice_stride + t * elem_stride.
struct SliceLayout {
    size_t count, len, slice_stride, elem_stride;
};

SliceLayout softmax_layout(const Tensor& x, size_t axis) {
    if (x.rank() == 1) {
        if (axis != 0) throw DimensionError("softmax: axis out of range for rank-1");
        return {1, x.dim(0), 0, 1};
    }
    if (x.rank() == 2) {
        if (axis == 1) return {x.rows(), x.cols(), x.cols(), 1};
        if (axis == 0) return {x.cols(), x.rows(), 1, x.cols()};
        throw DimensionError("softmax: axis out of range for rank-2");
    }
    throw DimensionError("softmax: unsupported rank " + std::to_string(x.rank()));
}

} // namespace

Tensor softmax(const Tensor& x, size_t axis) {
    check_defined(x, "softmax");
    SliceLayout lay = softmax_layout(x, axis);
    if (lay.len == 0) throw DimensionError("softmax: empty axis");
    std::vector<double> out(x.size());
    const auto& xv = x.values();
    for (size_t s = 0; s < lay.count; ++s) {
        size_t base = s * lay.slice_stride;
        double mx = xv[base];
        for (size_t t = 1; t < lay.len; ++t)
            mx = std::max(mx, xv[base + t * lay.elem_stride]);
        double z = 0.0;
        for (size_t t = 0; t < lay.len; ++t) {
            size_t idx = base + t * lay.elem_stride;
            out[idx] = std::exp(xv[idx] - mx);
            z += out[idx];
        }
        for (size_t t = 0; t < lay.len; ++t) out[base + t * lay.elem_stride] /= z;
    }
    auto xn = x.node();
    auto probs = out;
    return make_op(x.shape(), std::move(out), {x},
                   [xn, probs = std::move(probs), lay](TensorNode& self) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (size_t s = 0; s < lay.count; ++s) {
            size_t base = s * lay.slice_stride;
            double dot = 0.0;
            for (size_t t = 0; t < lay.len; ++t) {
                size_t idx = base + t * lay.elem_stride;
                dot += self.grad[idx] * probs[idx];
            }
            for (size_t t = 0; t < lay.len; ++t) {
                size_t idx = base + t * lay.elem_stride;
                xn->grad[idx] += probs[idx] * (self.grad[idx] - dot);
            }
        }
    });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    check_defined(x, "layer_norm");
    check_defined(gain, "layer_norm");
    check_defined(bias, "layer_norm");
    size_t n, d;
    if (x.rank() == 2) { n = x.rows(); d = x.cols(); }
    else if (x.rank() == 1) { n = 1; d = x.dim(0); }
    else throw DimensionError("layer_norm: unsupported rank");
    if (d < 2) throw DimensionError("layer_norm: need at least 2 features, got " +
                                    shape_str(x.shape()));
    if (gain.size() != d || bias.size() != d)
        throw DimensionError("layer_norm: gain/bias must have " + std::to_string(d) +
                             " elements");
    const auto& xv = x.values();
    const auto& gv = gain.values();
    const auto& bv = bias.values();
    std::vector<double> out(x.size());
    std::vector<double> xhat(x.size());
    std::vector<double> inv_std(n);
    for (size_t i = 0; i < n; ++i) {
        const double* row = xv.data() + i * d;
        double mean = 0.0;
        for (size_t j = 0; j < d; ++j) mean += row[j];
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (size_t j = 0; j < d; ++j) {
            double c = row[j] - mean;
            var += c * c;
        }
        var /= static_cast<double>(d);
        double is = 1.0 / std::sqrt(var + eps);
        inv_std[i] = is;
        for (size_t j = 0; j < d; ++j) {
            double xh = (row[j] - mean) * is;
            xhat[i * d + j] = xh;
            out[i * d + j] = gv[j] * xh + bv[j];
        }
    }
    auto xn = x.node(), gn = gain.node(), bn = bias.node();
    return make_op(x.shape(), std::move(out), {x, gain, bias},
                   [xn, gn, bn, n, d, xhat = std::move(xhat),
                    inv_std = std::move(inv_std)](TensorNode& self) {
        for (size_t i = 0; i < n; ++i) {
            const double* g_out = self.grad.data() + i * d;
            const double* xh = xhat.data() + i * d;
            if (gn->requires_grad) {
                gn->ensure_grad();
                for (size_t j = 0; j < d; ++j) gn->grad[j] += g_out[j] * xh[j];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (size_t j = 0; j < d; ++j) bn->grad[j] += g_out[j];
            }
            if (xn->requires_grad) {
                xn->ensure_grad();
                double mean_dxh = 0.0, mean_dxh_xh = 0.0;
                for (size_t j = 0; j < d; ++j) {
                    double dxh = g_out[j] * gn->values[j];
                    mean_dxh += dxh;
                    mean_dxh_xh += dxh * xh[j];
                }
                mean_dxh /= static_cast<double>(d);
                mean_dxh_xh /= static_cast<double>(d);
                for (size_t j = 0; j < d; ++j) {
                    double dxh = g_out[j] * gn->values[j];
                    xn->grad[i * d + j] +=
                        inv_std[i] * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
                }
            }
        }
    });
}

Tensor embedding_rows(const Tensor& table, const std::vector<int>& ids) {
    check_defined(table, "embedding_rows");
    check_rank2(table, "embedding_rows");
    if (ids.empty()) throw DegenerateInputError("embedding_rows: empty id list");
    size_t v = table.rows(), d = table.cols();
    for (int id : ids)
        if (id < 0 || static_cast<size_t>(id) >= v)
            throw IndexError("embedding_rows: id " + std::to_string(id) +
                             " outside table with " + std::to_string(v) + " rows");
    std::vector<double> out(ids.size() * d);
    const auto& tv = table.values();
    for (size_t i = 0; i < ids.size(); ++i)
        std::copy_n(tv.data() + static_cast<size_t>(ids[i]) * d, d, out.data() + i * d);
    auto tn = table.node();
    return make_op({ids.size(), d}, std::move(out), {table},
                   [tn, ids, d](TensorNode& self) {
        if (!tn->requires_grad) return;
        tn->ensure_grad();
        for (size_t i = 0; i < ids.size(); ++i) {
            double* dst = tn->grad.data() + static_cast<size_t>(ids[i]) * d;
            const double* src = self.grad.data() + i * d;
            for (size_t j = 0; j < d; ++j) dst[j] += src[j];
        }
    });
}

Tensor slice_rows(const Tensor& x, size_t start, size_t count) {
    check_defined(x, "slice_rows");
    check_rank2(x, "slice_rows");
    if (count == 0 || start + count > x.rows())
        throw IndexError("slice_rows: [" + std::to_string(start) + ", " +
                         std::to_string(start + count) + ") outside " +
                         shape_str(x.shape()));
    size_t d = x.cols();
    std::vector<double> out(count * d);
    std::copy_n(x.values().data() + start * d, count * d, out.data());
    auto xn = x.node();
    return make_op({count, d}, std::move(out), {x}, [xn, start, d](TensorNode& self) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i)
            xn->grad[start * d + i] += self.grad[i];
    });
}

Tensor slice_cols(const Tensor& x, size_t start, size_t count) {
    check_defined(x, "slice_cols");
    check_rank2(x, "slice_cols");
    if (count == 0 || start + count > x.cols())
        throw IndexError("slice_cols: [" + std::to_string(start) + ", " +
                         std::to_string(start + count) + ") outside " +
                         shape_str(x.shape()));
    size_t n = x.rows(), d = x.cols();
    std::vector<double> out(n * count);
    const auto& xv = x.values();
    for (size_t i = 0; i < n; ++i)
        std::copy_n(xv.data() + i * d + start, count, out.data() + i * count);
    auto xn = x.node();
    return make_op({n, count}, std::move(out), {x},
                   [xn, start, count, n, d](TensorNode& self) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (size_t i = 0; i < n; ++i)
            for (size_t j = 0; j < count; ++j)
                xn->grad[i * d + start + j] += self.grad[i * count + j];
    });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw DegenerateInputError("concat_cols: no tensors");
    size_t n = 0, total = 0;
    for (size_t p = 0; p < parts.size(); ++p) {
        check_defined(parts[p], "concat_cols");
        check_rank2(parts[p], "concat_cols");
        if (p == 0) n = parts[p].rows();
        else if (parts[p].rows() != n)
            throw DimensionError("concat_cols: row counts disagree");
        total += parts[p].cols();
    }
    std::vector<double> out(n * total);
    size_t off = 0;
    for (const auto& p : parts) {
        size_t c = p.cols();
        const auto& pv = p.values();
        for (size_t i = 0; i < n; ++i)
            std::copy_n(pv.data() + i * c, c, out.data() + i * total + off);
        off += c;
    }
    std::vector<NodePtr> nodes;
    std::vector<size_t> widths;
    for (const auto& p : parts) {
        nodes.push_back(p.node());
        widths.push_back(p.cols());
    }
    return make_op({n, total}, std::move(out), parts,
                   [nodes, widths, n, total](TensorNode& self) {
        size_t off = 0;
        for (size_t p = 0; p < nodes.size(); ++p) {
            size_t c = widths[p];
            if (nodes[p]->requires_grad) {
                nodes[p]->ensure_grad();
                for (size_t i = 0; i < n; ++i)
                    for (size_t j = 0; j < c; ++j)
                        nodes[p]->grad[i * c + j] += self.grad[i * total + off + j];
            }
            off += c;
        }
    });
}

Tensor dropout(const Tensor& x, double p, Rng& rng, bool training) {
    check_defined(x, "dropout");
    if (p < 0.0 || p >= 1.0)
        throw ContractError("dropout: p must lie in [0, 1), got " + std::to_string(p));
    if (!training || p == 0.0) return x;
    double inv_keep = 1.0 / (1.0 - p);
    std::vector<double> mask(x.size());
    for (auto& m : mask) m = rng.uniform() < p ? 0.0 : inv_keep;
    std::vector<double> out(x.size());
    const auto& xv = x.values();
    for (size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * mask[i];
    auto xn = x.node();
    return make_op(x.shape(), std::move(out), {x},
                   [xn, mask = std::move(mask)](TensorNode& self) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i)
            xn->grad[i] += self.grad[i] * mask[i];
    });
}

Tensor cross_entropy_sum(const Tensor& logits, const std::vector<int>& targets,
                         int pad_id, size_t* non_pad_count) {
    check_defined(logits, "cross_entropy");
    check_rank2(logits, "cross_entropy");
    size_t n = logits.rows(), v = logits.cols();
    if (targets.size() != n)
        throw DimensionError("cross_entropy: " + std::to_string(targets.size()) +
                             " targets for " + std::to_string(n) + " logit rows");
    const auto& lv = logits.values();
    std::vector<double> probs(n * v, 0.0);
    std::vector<char> active(n, 0);
    double total = 0.0;
    size_t count = 0;
    for (size_t i = 0; i < n; ++i) {
        int t = targets[i];
        if (t == pad_id) continue;
        if (t < 0 || static_cast<size_t>(t) >= v)
            throw IndexError("cross_entropy: target " + std::to_string(t) +
                             " outside vocabulary of " + std::to_string(v));
        const double* row = lv.data() + i * v;
        double mx = row[0];
        for (size_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
        double z = 0.0;
        for (size_t j = 0; j < v; ++j) z += std::exp(row[j] - mx);
        double lse = mx + std::log(z);
        total += lse - row[static_cast<size_t>(t)];
        for (size_t j = 0; j < v; ++j)
            probs[i * v + j] = std::exp(row[j] - mx) / z;
        active[i] = 1;
        ++count;
    }
    if (non_pad_count) *non_pad_count = count;
    auto ln = logits.node();
    return make_op({1}, {total}, {logits},
                   [ln, targets, n, v, probs = std::move(probs),
                    active = std::move(active)](TensorNode& self) {
        if (!ln->requires_grad) return;
        ln->ensure_grad();
        double g = self.grad[0];
        for (size_t i = 0; i < n; ++i) {
            if (!active[i]) continue;
            double* dst = ln->grad.data() + i * v;
            const double* p = probs.data() + i * v;
            for (size_t j = 0; j < v; ++j) dst[j] += g * p[j];
            dst[static_cast<size_t>(targets[i])] -= g;
        }
    });
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets, int pad_id) {
    size_t count = 0;
    Tensor s = cross_entropy_sum(logits, targets, pad_id, &count);
    if (count == 0)
        throw DegenerateInputError("cross_entropy: every position is padding");
    return scale(s, 1.0 / static_cast<double>(count));
}

void backward(const Tensor& loss) {
    if (!loss.defined()) throw ContractError("backward: undefined tensor");
    if (loss.size() != 1)
        throw ContractError("backward: expected a single-element loss, got " +
                            shape_str(loss.shape()));
    NodePtr root = loss.node();
    // Iterative post-order DFS; closures then run in reverse topological order.
    std::vector<TensorNode*> order;
    std::unordered_set<TensorNode*> seen;
    std::vector<std::pair<TensorNode*, size_t>> stack;
    stack.emplace_back(root.get(), 0);
    seen.insert(root.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            TensorNode* p = node->parents[next].get();
            ++next;
            if (p && !seen.count(p)) {
                seen.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    root->ensure_grad();
    root->grad[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorNode* node = *it;
        if (node->backward_fn) {
            node->ensure_grad();
            node->backward_fn(*node);
        }
    }
    // Release the tape; leaves keep their accumulated gradients.
    for (TensorNode* node : order) {
        if (!node->is_leaf) {
            node->parents.clear();
            node->backward_fn = nullptr;
        }
    }
}

} // namespace cmgen

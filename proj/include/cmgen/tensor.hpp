#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace cmgen {

class Rng;

using Shape = std::vector<size_t>;

std::string shape_str(const Shape& s);

namespace detail {

struct TensorNode {
    Shape shape;
    std::vector<double> values;
    std::vector<double> grad;     // sized lazily, kept in sync with values
    bool requires_grad = false;
    bool is_leaf = false;

    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(TensorNode&)> backward_fn;

    size_t size() const { return values.size(); }
    void ensure_grad() {
        if (grad.size() != values.size()) grad.assign(values.size(), 0.0);
    }
};

} // namespace detail

// Dense row-major tensor of doubles with reverse-mode autodiff. Handles are
// cheap to copy and share storage; operations never mutate their inputs and
// record tape nodes only while gradients are enabled. Rank 1 and 2 cover
// everything this project needs.
class Tensor {
public:
    Tensor() = default;
    Tensor(Shape shape, double fill = 0.0, bool requires_grad = false);
    Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);
    static Tensor scalar(double v);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const;
    size_t rank() const { return shape().size(); }
    size_t size() const;
    size_t dim(size_t i) const;
    size_t rows() const;  // rank-2 only
    size_t cols() const;  // rank-2 only

    const std::vector<double>& values() const;
    std::vector<double>& mutable_values();  // optimizer / init access, off-tape
    double item() const;                    // single-element tensors only
    double at(size_t r, size_t c) const;

    bool requires_grad() const;
    bool has_grad() const;
    const std::vector<double>& grad() const;
    std::vector<double>& mutable_grad();
    void zero_grad();

    std::shared_ptr<detail::TensorNode> node() const { return node_; }
    static Tensor wrap(std::shared_ptr<detail::TensorNode> n);

private:
    std::shared_ptr<detail::TensorNode> node_;
};

// Tape recording switch. Instantiate to run forward passes without building
// a graph (evaluation, generation).
struct NoGradGuard {
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};
bool grad_enabled();

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& x);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add_rowvec(const Tensor& x, const Tensor& v);  // broadcast v over rows
Tensor mul_rowvec(const Tensor& x, const Tensor& v);
Tensor scale(const Tensor& x, double c);
Tensor add_scalar(const Tensor& x, double c);
Tensor scale_by(const Tensor& x, const Tensor& s);    // s has exactly 1 element
Tensor sigmoid(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor sum(const Tensor& x);                          // -> shape {1}
Tensor softmax(const Tensor& x, size_t axis);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps = 1e-5);
Tensor embedding_rows(const Tensor& table, const std::vector<int>& ids);
Tensor slice_rows(const Tensor& x, size_t start, size_t count);
Tensor slice_cols(const Tensor& x, size_t start, size_t count);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor dropout(const Tensor& x, double p, Rng& rng, bool training);

// Mean cross-entropy over non-pad positions of logits [n x vocab].
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets,
                     int pad_id);
// Summed variant for pooling across a batch; *non_pad_count gets the number
// of positions that contributed.
Tensor cross_entropy_sum(const Tensor& logits, const std::vector<int>& targets,
                         int pad_id, size_t* non_pad_count);

// Reverse pass from a single-element tensor. Accumulates into .grad of every
// reachable node and then frees the tape (parent links and closures).
void backward(const Tensor& loss);

} // namespace cmgen

#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "tden/rng.hpp"

namespace tden {

class Tape;

namespace detail {

struct TensorData {
    std::vector<std::size_t> shape;
    std::vector<double> value;
    std::vector<double> grad;  // empty until first accumulation
    bool requires_grad = false;
    const Tape* tape = nullptr;  // tape that produced this tensor, if any

    std::size_t size() const { return value.size(); }
    void ensure_grad() {
        if (grad.empty()) grad.assign(value.size(), 0.0);
    }
};

}  // namespace detail

// Dense 64-bit float tensor. A Tensor is a cheap shared handle; copying it
// aliases the same storage (value semantics are provided by the ops, which
// always allocate fresh outputs). Gradients live next to the values and are
// populated by Tape::backward.
class Tensor {
public:
    Tensor() : d_(std::make_shared<detail::TensorData>()) {}

    static Tensor zeros(std::vector<std::size_t> shape, bool requires_grad = false);
    static Tensor full(std::vector<std::size_t> shape, double fill, bool requires_grad = false);
    static Tensor from(std::vector<std::size_t> shape, std::vector<double> data,
                       bool requires_grad = false);
    static Tensor scalar(double v, bool requires_grad = false);
    static Tensor randn(std::vector<std::size_t> shape, Rng& rng, double sigma,
                        bool requires_grad = false);

    const std::vector<std::size_t>& shape() const { return d_->shape; }
    std::size_t size() const { return d_->value.size(); }
    std::size_t ndim() const { return d_->shape.size(); }
    // 2-D helpers; a 1-D tensor reads as a single row.
    std::size_t rows() const;
    std::size_t cols() const;

    double* data() { return d_->value.data(); }
    const double* data() const { return d_->value.data(); }
    const std::vector<double>& values() const { return d_->value; }
    std::vector<double>& values() { return d_->value; }

    double at(std::size_t r, std::size_t c) const;
    double& at(std::size_t r, std::size_t c);
    double item() const;  // value of a one-element tensor

    bool requires_grad() const { return d_->requires_grad; }
    void set_requires_grad(bool rg) { d_->requires_grad = rg; }

    bool has_grad() const { return !d_->grad.empty(); }
    const std::vector<double>& grad() const;
    std::vector<double>& grad_mut();
    void zero_grad() { d_->grad.clear(); }

    bool same_storage(const Tensor& other) const { return d_ == other.d_; }
    std::string shape_str() const;

    std::shared_ptr<detail::TensorData> handle() const { return d_; }

private:
    explicit Tensor(std::shared_ptr<detail::TensorData> d) : d_(std::move(d)) {}
    std::shared_ptr<detail::TensorData> d_;

    friend class Tape;
};

// Reverse-mode Wengert list. Ops append one node per application while a tape
// is active; nodes are stored in forward (hence topological) order and the
// backward sweep visits each node exactly once, in reverse. A tape is
// consumed by backward().
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // Seeds d(loss)/d(loss) = 1 and propagates to every recorded input.
    // Requires a scalar loss produced on this tape.
    void backward(const Tensor& loss);

    std::size_t node_count() const { return nodes_.size(); }
    bool consumed() const { return consumed_; }

    static Tape* current();

    void record(const char* op, std::shared_ptr<detail::TensorData> out,
                std::function<void()> back);

private:
    struct Node {
        const char* op;
        std::shared_ptr<detail::TensorData> out;
        std::function<void()> back;
    };
    std::vector<Node> nodes_;
    bool consumed_ = false;

    friend class TapeScope;
};

// RAII activation of a tape for the current thread. Ops record onto the
// innermost active tape; with no active tape they run as plain math.
class TapeScope {
public:
    explicit TapeScope(Tape& tape);
    ~TapeScope();
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    Tape* prev_;
};

// ---------------------------------------------------------------------------
// Ops. Each records its backward step when a tape is active and any input
// requires grad. Shapes are validated eagerly; mismatches throw
// std::invalid_argument naming both shapes.
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& x);
Tensor add(const Tensor& a, const Tensor& b);
// x[r, :] + v for a 1-D v of length cols(x).
Tensor add_rowvec(const Tensor& x, const Tensor& v);
// a * x + b, elementwise with scalar constants.
Tensor axpb(const Tensor& x, double a, double b);
Tensor relu(const Tensor& x);
Tensor gelu(const Tensor& x);  // tanh approximation
// Row-wise softmax with max-subtraction; operates on the last axis of a
// 1-D or 2-D tensor.
Tensor softmax(const Tensor& x);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps = 1e-5);
// Selects rows of x; gradients scatter-add back, so repeated indices
// accumulate (this doubles as the embedding lookup).
Tensor gather_rows(const Tensor& x, const std::vector<std::size_t>& idx);
Tensor concat_rows(const Tensor& a, const Tensor& b);
Tensor row_l2_normalize(const Tensor& x);
Tensor sum_all(const Tensor& x);

// Mean of -log softmax(logits)[target] over items; `weights`, if given,
// makes it the weighted mean over items with nonzero weight.
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets,
                     const std::vector<double>* weights = nullptr);
// Mean over rows of sum_c t_c (log t_c - log softmax(p)_c). target_dist is
// treated as constant; rows must be valid distributions.
Tensor kl_divergence(const Tensor& pred_logits, const Tensor& target_dist);
// Multibatch ranking loss over a similarity matrix S (rows: sentences,
// cols: images): mean over ordered pairs i != j of max(0, m - S_ii + S_ij).
Tensor triplet_hinge_loss(const Tensor& sim, double margin);
// Mean over entries of the binary cross entropy between sigmoid(logits) and
// soft targets in [0, 1].
Tensor sigmoid_bce(const Tensor& logits, const std::vector<double>& targets);

// Left fold with add(); used so that composite losses and their oracle
// recompositions share one summation order.
Tensor sum_terms(const std::vector<Tensor>& terms);

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

struct GradCheckOptions {
    double eps = 1e-5;
    std::size_t max_coords_per_tensor = 200;
    std::uint64_t seed = 0;
};

// Compares analytic gradients of f() against central finite differences on a
// sampled subset of coordinates of each parameter. f must be deterministic
// and rebuild its graph on every call. Returns the max relative error
// |analytic - numeric| / max(1, |analytic|, |numeric|).
double grad_check(const std::function<Tensor()>& f, const std::vector<Tensor>& params,
                  const GradCheckOptions& opts = {});

// Throws std::domain_error if any entry is NaN or infinite.
void check_finite(const Tensor& t, const char* where);

}  // namespace tden

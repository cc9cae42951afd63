#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace infovla {

using Shape = std::vector<int>;

class Tensor;

namespace detail {

// One recorded node of the computation tape. Nodes are created in execution
// order; parents always precede children, so a reverse walk of the recorded
// order is a valid reverse-mode schedule.
struct Node : std::enable_shared_from_this<Node> {
    std::uint64_t id = 0;
    const char* op = "leaf";
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // lazily allocated; persists on leaves
    bool requires_grad = false;
    bool backward_ran = false;  // set on the root once backward has run
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    int numel() const { return static_cast<int>(data.size()); }
    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    }
};

bool grad_enabled();
Node* raw(const Tensor& t);

}  // namespace detail

// Disables tape recording in a scope. Evaluation rollouts and teacher passes
// run under this guard so they cost only the forward arithmetic.
class NoGradGuard {
  public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

  private:
    bool prev_;
};

// Dense row-major 64-bit float tensor with reverse-mode autodiff.
//
// Values are finite by contract: every op validates its result and throws
// NumericError on NaN/Inf. Shape alignment is explicit; the only broadcast is
// scalar-against-tensor in the binary ops.
class Tensor {
  public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const;
    int numel() const;
    int ndim() const;
    int dim(int axis) const;
    bool requires_grad() const;

    const std::vector<double>& data() const;
    // Direct mutation is reserved for leaves (optimizer updates); mutating an
    // op result would desynchronize it from its recorded parents.
    std::vector<double>& mutable_data();

    bool has_grad() const;
    const std::vector<double>& grad() const;
    void zero_grad();

    double value() const;  // scalar tensors only
    double at(int i) const;
    double at(int i, int j) const;

    // Copy of the data as a fresh constant leaf; no tape attachment.
    Tensor detach() const;

    std::uint64_t id() const;
    const char* op() const;

  private:
    friend detail::Node* detail::raw(const Tensor& t);
    friend Tensor wrap_node(std::shared_ptr<detail::Node> node);
    std::shared_ptr<detail::Node> node_;
};

// ---- elementwise / binary (equal shapes, or either side scalar) ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor add_scalar(const Tensor& a, double s);
Tensor mul_scalar(const Tensor& a, double s);

// ---- elementwise unary ----
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor clamp_min(const Tensor& a, double floor);

// ---- reductions ----
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor sum_axis(const Tensor& a, int axis);  // 2-D only

// ---- linear algebra / structure ----
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);
Tensor concat(const std::vector<Tensor>& parts);  // 1-D tensors
Tensor add_row_broadcast(const Tensor& mat, const Tensor& row);
Tensor embedding_row(const Tensor& table, int row);
Tensor matvec(const Tensor& w, const Tensor& x);
Tensor outer(const Tensor& u, const Tensor& v);

// ---- probability / losses ----
// Numerically stable softmax (max subtraction). axis = -1 means last axis.
Tensor softmax(const Tensor& x, int axis = -1);
// KL(p || q) for probability vectors; probabilities are floored at 1e-8
// before the log (0 log 0 := 0). Floored entries are counted in the numeric
// diagnostics.
Tensor kl_divergence(const Tensor& p, const Tensor& q);
Tensor mse(const Tensor& a, const Tensor& b);
Tensor dot(const Tensor& a, const Tensor& b);
Tensor l2_normalize(const Tensor& a);
Tensor cosine_similarity(const Tensor& a, const Tensor& b);

// Reverse-mode accumulation from a scalar loss. Gradients accumulate (+=)
// into leaf .grad buffers; interior buffers are fresh per graph. Re-running
// backward on the same result is rejected (ContractError): zero grads and
// rebuild the graph instead.
void backward(const Tensor& loss);

// Debug dump of the recorded tape reachable from `root`, topologically
// ordered, as a JSON list of {op, input_ids, output_id, shape}.
std::string tape_json(const Tensor& root);

// Process-wide numeric diagnostics.
struct NumericDiagnostics {
    std::uint64_t kl_floor_events = 0;
};
NumericDiagnostics numeric_diagnostics();
void reset_numeric_diagnostics();

}  // namespace infovla

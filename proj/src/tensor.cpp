#include "infovla/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <unordered_set>
#include <utility>

#include "infovla/errors.hpp"

namespace infovla {

namespace {

std::atomic<std::uint64_t> g_next_id{1};
thread_local bool g_grad_enabled = true;
std::atomic<std::uint64_t> g_kl_floor_events{0};

int shape_numel(const Shape& s) {
    int n = 1;
    for (int d : s) {
        if (d <= 0) throw ShapeError("tensor dimensions must be positive");
        n *= d;
    }
    return n;
}

std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

void check_finite(const char* op, const std::vector<double>& v) {
    for (double x : v) {
        if (!std::isfinite(x)) {
            throw NumericError(std::string("non-finite value produced by '") + op + "'");
        }
    }
}

using detail::Node;

std::shared_ptr<Node> new_node(const char* op, Shape shape, std::vector<double> data) {
    if (shape_numel(shape) != static_cast<int>(data.size())) {
        throw ShapeError(std::string(op) + ": data length does not match shape " + shape_str(shape));
    }
    check_finite(op, data);
    auto n = std::make_shared<Node>();
    n->id = g_next_id.fetch_add(1);
    n->op = op;
    n->shape = std::move(shape);
    n->data = std::move(data);
    return n;
}

void accum(Node& dst, const std::vector<double>& g) {
    dst.ensure_grad();
    for (size_t i = 0; i < g.size(); ++i) dst.grad[i] += g[i];
}

}  // namespace

namespace detail {
bool grad_enabled() { return g_grad_enabled; }
Node* raw(const Tensor& t) { return t.node_.get(); }
}  // namespace detail

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

Tensor wrap_node(std::shared_ptr<Node> node) {
    Tensor t;
    t.node_ = std::move(node);
    return t;
}

namespace {

// Builds an op result node. Parent links and the backward closure are only
// recorded when some input requires grad and recording is enabled.
Tensor make_result(const char* op, Shape shape, std::vector<double> data,
                   std::vector<Tensor> parents, std::function<void(Node&)> backward_fn) {
    auto n = new_node(op, std::move(shape), std::move(data));
    bool needs = false;
    if (g_grad_enabled) {
        for (const Tensor& p : parents) {
            if (p.requires_grad()) {
                needs = true;
                break;
            }
        }
    }
    if (needs) {
        n->requires_grad = true;
        n->parents.reserve(parents.size());
        for (const Tensor& p : parents) n->parents.push_back(detail::raw(p)->shared_from_this());
        n->backward_fn = std::move(backward_fn);
    }
    return wrap_node(std::move(n));
}

Node& need(const Tensor& t, const char* op) {
    Node* n = detail::raw(t);
    if (!n) throw ContractError(std::string(op) + ": undefined tensor operand");
    return *n;
}

void require_same_shape(const char* op, const Node& a, const Node& b) {
    if (a.shape != b.shape) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape) + " vs " +
                         shape_str(b.shape));
    }
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor basics
// ---------------------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    int n = shape_numel(shape);
    auto node = new_node("leaf", std::move(shape), std::vector<double>(n, value));
    node->requires_grad = requires_grad;
    return wrap_node(std::move(node));
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
    auto node = new_node("leaf", std::move(shape), std::move(data));
    node->requires_grad = requires_grad;
    return wrap_node(std::move(node));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return from_data({1}, {value}, requires_grad);
}

const Shape& Tensor::shape() const { return need(*this, "shape").shape; }
int Tensor::numel() const { return need(*this, "numel").numel(); }
int Tensor::ndim() const { return static_cast<int>(shape().size()); }

int Tensor::dim(int axis) const {
    const Shape& s = shape();
    if (axis < 0 || axis >= static_cast<int>(s.size())) throw ShapeError("dim: axis out of range");
    return s[axis];
}

bool Tensor::requires_grad() const { return need(*this, "requires_grad").requires_grad; }
const std::vector<double>& Tensor::data() const { return need(*this, "data").data; }

std::vector<double>& Tensor::mutable_data() {
    Node& n = need(*this, "mutable_data");
    if (!n.parents.empty()) {
        throw ContractError("mutable_data: only leaf tensors may be mutated in place");
    }
    return n.data;
}

bool Tensor::has_grad() const { return !need(*this, "has_grad").grad.empty(); }

const std::vector<double>& Tensor::grad() const {
    Node& n = need(*this, "grad");
    if (n.grad.empty()) throw ContractError("grad: no gradient buffer present");
    return n.grad;
}

void Tensor::zero_grad() { need(*this, "zero_grad").grad.clear(); }

double Tensor::value() const {
    Node& n = need(*this, "value");
    if (n.numel() != 1) throw ContractError("value: tensor is not scalar");
    return n.data[0];
}

double Tensor::at(int i) const {
    Node& n = need(*this, "at");
    if (i < 0 || i >= n.numel()) throw ShapeError("at: index out of range");
    return n.data[static_cast<size_t>(i)];
}

double Tensor::at(int i, int j) const {
    Node& n = need(*this, "at");
    if (n.shape.size() != 2) throw ShapeError("at(i,j): tensor is not 2-D");
    if (i < 0 || i >= n.shape[0] || j < 0 || j >= n.shape[1]) {
        throw ShapeError("at(i,j): index out of range");
    }
    return n.data[static_cast<size_t>(i) * n.shape[1] + j];
}

Tensor Tensor::detach() const {
    Node& n = need(*this, "detach");
    return from_data(n.shape, n.data, false);
}

std::uint64_t Tensor::id() const { return need(*this, "id").id; }
const char* Tensor::op() const { return need(*this, "op").op; }

// ---------------------------------------------------------------------------
// Binary elementwise ops (scalar broadcast allowed on either side)
// ---------------------------------------------------------------------------

namespace {

enum class BinKind { kAdd, kSub, kMul, kDiv };

Tensor binary_op(const char* name, BinKind kind, const Tensor& ta, const Tensor& tb) {
    Node& a = need(ta, name);
    Node& b = need(tb, name);
    const bool a_scalar = a.numel() == 1;
    const bool b_scalar = b.numel() == 1;
    if (!a_scalar && !b_scalar) require_same_shape(name, a, b);
    const Shape& out_shape = a_scalar && !b_scalar ? b.shape : a.shape;
    const int n = a_scalar && !b_scalar ? b.numel() : a.numel();

    std::vector<double> out(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        const double x = a.data[a_scalar ? 0 : i];
        const double y = b.data[b_scalar ? 0 : i];
        switch (kind) {
            case BinKind::kAdd: out[i] = x + y; break;
            case BinKind::kSub: out[i] = x - y; break;
            case BinKind::kMul: out[i] = x * y; break;
            case BinKind::kDiv: out[i] = x / y; break;
        }
    }

    auto bw = [kind, a_scalar, b_scalar, n](Node& self) {
        Node& pa = *self.parents[0];
        Node& pb = *self.parents[1];
        const std::vector<double>& g = self.grad;
        if (pa.requires_grad) {
            pa.ensure_grad();
            for (int i = 0; i < n; ++i) {
                const double y = pb.data[b_scalar ? 0 : i];
                double d = 0.0;
                switch (kind) {
                    case BinKind::kAdd: d = g[i]; break;
                    case BinKind::kSub: d = g[i]; break;
                    case BinKind::kMul: d = g[i] * y; break;
                    case BinKind::kDiv: d = g[i] / y; break;
                }
                pa.grad[a_scalar ? 0 : i] += d;
            }
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            for (int i = 0; i < n; ++i) {
                const double x = pa.data[a_scalar ? 0 : i];
                const double y = pb.data[b_scalar ? 0 : i];
                double d = 0.0;
                switch (kind) {
                    case BinKind::kAdd: d = g[i]; break;
                    case BinKind::kSub: d = -g[i]; break;
                    case BinKind::kMul: d = g[i] * x; break;
                    case BinKind::kDiv: d = -g[i] * x / (y * y); break;
                }
                pb.grad[b_scalar ? 0 : i] += d;
            }
        }
    };
    return make_result(name, out_shape, std::move(out), {ta, tb}, std::move(bw));
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary_op("add", BinKind::kAdd, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary_op("sub", BinKind::kSub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary_op("mul", BinKind::kMul, a, b); }
Tensor div(const Tensor& a, const Tensor& b) { return binary_op("div", BinKind::kDiv, a, b); }

Tensor neg(const Tensor& a) { return mul_scalar(a, -1.0); }

Tensor add_scalar(const Tensor& ta, double s) {
    Node& a = need(ta, "add_scalar");
    std::vector<double> out(a.data);
    for (double& x : out) x += s;
    auto bw = [](Node& self) { accum(*self.parents[0], self.grad); };
    return make_result("add_scalar", a.shape, std::move(out), {ta}, std::move(bw));
}

Tensor mul_scalar(const Tensor& ta, double s) {
    Node& a = need(ta, "mul_scalar");
    std::vector<double> out(a.data);
    for (double& x : out) x *= s;
    auto bw = [s](Node& self) {
        Node& p = *self.parents[0];
        p.ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i] * s;
    };
    return make_result("mul_scalar", a.shape, std::move(out), {ta}, std::move(bw));
}

// ---------------------------------------------------------------------------
// Unary elementwise ops
// ---------------------------------------------------------------------------

Tensor exp(const Tensor& ta) {
    Node& a = need(ta, "exp");
    std::vector<double> out(a.data.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = std::exp(a.data[i]);
    auto bw = [](Node& self) {
        Node& p = *self.parents[0];
        p.ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i] * self.data[i];
    };
    return make_result("exp", a.shape, std::move(out), {ta}, std::move(bw));
}

Tensor log(const Tensor& ta) {
    Node& a = need(ta, "log");
    std::vector<double> out(a.data.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = std::log(a.data[i]);
    auto bw = [](Node& self) {
        Node& p = *self.parents[0];
        p.ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i] / p.data[i];
    };
    return make_result("log", a.shape, std::move(out), {ta}, std::move(bw));
}

Tensor sqrt(const Tensor& ta) {
    Node& a = need(ta, "sqrt");
    std::vector<double> out(a.data.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = std::sqrt(a.data[i]);
    auto bw = [](Node& self) {
        Node& p = *self.parents[0];
        p.ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) {
            p.grad[i] += self.grad[i] * 0.5 / self.data[i];
        }
    };
    return make_result("sqrt", a.shape, std::move(out), {ta}, std::move(bw));
}

Tensor tanh(const Tensor& ta) {
    Node& a = need(ta, "tanh");
    std::vector<double> out(a.data.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(a.data[i]);
    auto bw = [](Node& self) {
        Node& p = *self.parents[0];
        p.ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) {
            p.grad[i] += self.grad[i] * (1.0 - self.data[i] * self.data[i]);
        }
    };
    return make_result("tanh", a.shape, std::move(out), {ta}, std::move(bw));
}

Tensor clamp_min(const Tensor& ta, double floor) {
    Node& a = need(ta, "clamp_min");
    std::vector<double> out(a.data.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.data[i] < floor ? floor : a.data[i];
    auto bw = [floor](Node& self) {
        Node& p = *self.parents[0];
        p.ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) {
            if (p.data[i] > floor) p.grad[i] += self.grad[i];
        }
    };
    return make_result("clamp_min", a.shape, std::move(out), {ta}, std::move(bw));
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

Tensor sum(const Tensor& ta) {
    Node& a = need(ta, "sum");
    double s = 0.0;
    for (double x : a.data) s += x;
    auto bw = [](Node& self) {
        Node& p = *self.parents[0];
        p.ensure_grad();
        for (size_t i = 0; i < p.grad.size(); ++i) p.grad[i] += self.grad[0];
    };
    return make_result("sum", {1}, {s}, {ta}, std::move(bw));
}

Tensor mean(const Tensor& ta) {
    Node& a = need(ta, "mean");
    const double inv = 1.0 / static_cast<double>(a.numel());
    double s = 0.0;
    for (double x : a.data) s += x;
    auto bw = [inv](Node& self) {
        Node& p = *self.parents[0];
        p.ensure_grad();
        for (size_t i = 0; i < p.grad.size(); ++i) p.grad[i] += self.grad[0] * inv;
    };
    return make_result("mean", {1}, {s * inv}, {ta}, std::move(bw));
}

Tensor sum_axis(const Tensor& ta, int axis) {
    Node& a = need(ta, "sum_axis");
    if (a.shape.size() != 2) throw ShapeError("sum_axis: expects a 2-D tensor");
    if (axis != 0 && axis != 1) throw ShapeError("sum_axis: axis must be 0 or 1");
    const int rows = a.shape[0];
    const int cols = a.shape[1];
    const int out_n = axis == 0 ? cols : rows;
    std::vector<double> out(static_cast<size_t>(out_n), 0.0);
    for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < cols; ++c) {
            out[axis == 0 ? c : r] += a.data[static_cast<size_t>(r) * cols + c];
        }
    }
    auto bw = [axis, rows, cols](Node& self) {
        Node& p = *self.parents[0];
        p.ensure_grad();
        for (int r = 0; r < rows; ++r) {
            for (int c = 0; c < cols; ++c) {
                p.grad[static_cast<size_t>(r) * cols + c] += self.grad[axis == 0 ? c : r];
            }
        }
    };
    return make_result("sum_axis", {out_n}, std::move(out), {ta}, std::move(bw));
}

// ---------------------------------------------------------------------------
// Linear algebra / structure
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& ta, const Tensor& tb) {
    Node& a = need(ta, "matmul");
    Node& b = need(tb, "matmul");
    if (a.shape.size() != 2 || b.shape.size() != 2) throw ShapeError("matmul: operands must be 2-D");
    const int m = a.shape[0], k = a.shape[1];
    const int k2 = b.shape[0], n = b.shape[1];
    if (k != k2) {
        throw ShapeError("matmul: inner dimensions disagree " + shape_str(a.shape) + " x " +
                         shape_str(b.shape));
    }
    std::vector<double> out(static_cast<size_t>(m) * n, 0.0);
    for (int i = 0; i < m; ++i) {
        for (int p = 0; p < k; ++p) {
            const double av = a.data[static_cast<size_t>(i) * k + p];
            if (av == 0.0) continue;
            const double* brow = &b.data[static_cast<size_t>(p) * n];
            double* orow = &out[static_cast<size_t>(i) * n];
            for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
    auto bw = [m, k, n](Node& self) {
        Node& pa = *self.parents[0];
        Node& pb = *self.parents[1];
        const std::vector<double>& g = self.grad;
        if (pa.requires_grad) {
            pa.ensure_grad();
            // dA = G . B^T
            for (int i = 0; i < m; ++i) {
                const double* grow = &g[static_cast<size_t>(i) * n];
                double* arow = &pa.grad[static_cast<size_t>(i) * k];
                for (int p = 0; p < k; ++p) {
                    const double* brow = &pb.data[static_cast<size_t>(p) * n];
                    double s = 0.0;
                    for (int j = 0; j < n; ++j) s += grow[j] * brow[j];
                    arow[p] += s;
                }
            }
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            // dB = A^T . G, accumulated row-contiguously
            for (int i = 0; i < m; ++i) {
                const double* grow = &g[static_cast<size_t>(i) * n];
                for (int p = 0; p < k; ++p) {
                    const double av = pa.data[static_cast<size_t>(i) * k + p];
                    if (av == 0.0) continue;
                    double* brow = &pb.grad[static_cast<size_t>(p) * n];
                    for (int j = 0; j < n; ++j) brow[j] += av * grow[j];
                }
            }
        }
    };
    return make_result("matmul", {m, n}, std::move(out), {ta, tb}, std::move(bw));
}

Tensor transpose(const Tensor& ta) {
    Node& a = need(ta, "transpose");
    if (a.shape.size() != 2) throw ShapeError("transpose: expects a 2-D tensor");
    const int m = a.shape[0], n = a.shape[1];
    std::vector<double> out(a.data.size());
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) {
            out[static_cast<size_t>(j) * m + i] = a.data[static_cast<size_t>(i) * n + j];
        }
    }
    auto bw = [m, n](Node& self) {
        Node& p = *self.parents[0];
        p.ensure_grad();
        for (int i = 0; i < m; ++i) {
            for (int j = 0; j < n; ++j) {
                p.grad[static_cast<size_t>(i) * n + j] += self.grad[static_cast<size_t>(j) * m + i];
            }
        }
    };
    return make_result("transpose", {n, m}, std::move(out), {ta}, std::move(bw));
}

Tensor reshape(const Tensor& ta, Shape shape) {
    Node& a = need(ta, "reshape");
    if (shape_numel(shape) != a.numel()) {
        throw ShapeError("reshape: element count mismatch " + shape_str(a.shape) + " -> " +
                         shape_str(shape));
    }
    auto bw = [](Node& self) { accum(*self.parents[0], self.grad); };
    return make_result("reshape", std::move(shape), a.data, {ta}, std::move(bw));
}

Tensor concat(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ContractError("concat: needs at least one tensor");
    std::vector<double> out;
    std::vector<int> sizes;
    for (const Tensor& t : parts) {
        Node& n = need(t, "concat");
        if (n.shape.size() != 1) throw ShapeError("concat: expects 1-D tensors");
        sizes.push_back(n.numel());
        out.insert(out.end(), n.data.begin(), n.data.end());
    }
    const int total = static_cast<int>(out.size());
    auto bw = [sizes](Node& self) {
        size_t off = 0;
        for (size_t k = 0; k < self.parents.size(); ++k) {
            Node& p = *self.parents[k];
            if (p.requires_grad) {
                p.ensure_grad();
                for (int i = 0; i < sizes[k]; ++i) p.grad[i] += self.grad[off + i];
            }
            off += static_cast<size_t>(sizes[k]);
        }
    };
    return make_result("concat", {total}, std::move(out), parts, std::move(bw));
}

Tensor add_row_broadcast(const Tensor& tmat, const Tensor& trow) {
    Node& m = need(tmat, "add_row_broadcast");
    Node& r = need(trow, "add_row_broadcast");
    if (m.shape.size() != 2 || r.shape.size() != 1 || m.shape[1] != r.shape[0]) {
        throw ShapeError("add_row_broadcast: expects [m,n] and [n]");
    }
    const int rows = m.shape[0], cols = m.shape[1];
    std::vector<double> out(m.data);
    for (int i = 0; i < rows; ++i) {
        for (int j = 0; j < cols; ++j) out[static_cast<size_t>(i) * cols + j] += r.data[j];
    }
    auto bw = [rows, cols](Node& self) {
        Node& pm = *self.parents[0];
        Node& pr = *self.parents[1];
        if (pm.requires_grad) accum(pm, self.grad);
        if (pr.requires_grad) {
            pr.ensure_grad();
            for (int i = 0; i < rows; ++i) {
                for (int j = 0; j < cols; ++j) pr.grad[j] += self.grad[static_cast<size_t>(i) * cols + j];
            }
        }
    };
    return make_result("add_row_broadcast", m.shape, std::move(out), {tmat, trow}, std::move(bw));
}

Tensor embedding_row(const Tensor& ttable, int row) {
    Node& t = need(ttable, "embedding_row");
    if (t.shape.size() != 2) throw ShapeError("embedding_row: table must be 2-D");
    if (row < 0 || row >= t.shape[0]) {
        throw ContractError("embedding_row: id " + std::to_string(row) + " outside vocabulary of " +
                            std::to_string(t.shape[0]));
    }
    const int cols = t.shape[1];
    std::vector<double> out(t.data.begin() + static_cast<size_t>(row) * cols,
                            t.data.begin() + static_cast<size_t>(row + 1) * cols);
    auto bw = [row, cols](Node& self) {
        Node& p = *self.parents[0];
        p.ensure_grad();
        for (int j = 0; j < cols; ++j) p.grad[static_cast<size_t>(row) * cols + j] += self.grad[j];
    };
    return make_result("embedding_row", {cols}, std::move(out), {ttable}, std::move(bw));
}

Tensor matvec(const Tensor& w, const Tensor& x) {
    Node& xn = need(x, "matvec");
    if (xn.shape.size() != 1) throw ShapeError("matvec: x must be 1-D");
    Tensor col = reshape(x, {xn.shape[0], 1});
    Tensor prod = matmul(w, col);
    return reshape(prod, {prod.dim(0)});
}

Tensor outer(const Tensor& u, const Tensor& v) {
    Node& un = need(u, "outer");
    Node& vn = need(v, "outer");
    if (un.shape.size() != 1 || vn.shape.size() != 1) throw ShapeError("outer: expects 1-D tensors");
    return matmul(reshape(u, {un.shape[0], 1}), reshape(v, {1, vn.shape[0]}));
}

// ---------------------------------------------------------------------------
// Probability / losses
// ---------------------------------------------------------------------------

Tensor softmax(const Tensor& tx, int axis) {
    Node& x = need(tx, "softmax");
    const int nd = static_cast<int>(x.shape.size());
    if (nd < 1 || nd > 2) throw ShapeError("softmax: expects a 1-D or 2-D tensor");
    if (axis < 0) axis += nd;
    if (axis < 0 || axis >= nd) throw ShapeError("softmax: axis out of range");

    // View the tensor as independent lanes along `axis`.
    const int k = x.shape[axis];
    const int lanes = x.numel() / k;
    const bool contiguous = (nd == 1) || (axis == 1);
    const int stride = contiguous ? 1 : x.shape[1];
    const int lane_step = contiguous ? k : 1;

    std::vector<double> out(x.data.size());
    for (int lane = 0; lane < lanes; ++lane) {
        const size_t base = static_cast<size_t>(lane) * lane_step;
        double mx = x.data[base];
        for (int i = 1; i < k; ++i) mx = std::max(mx, x.data[base + static_cast<size_t>(i) * stride]);
        double z = 0.0;
        for (int i = 0; i < k; ++i) {
            const size_t idx = base + static_cast<size_t>(i) * stride;
            out[idx] = std::exp(x.data[idx] - mx);
            z += out[idx];
        }
        for (int i = 0; i < k; ++i) out[base + static_cast<size_t>(i) * stride] /= z;
    }

    auto bw = [k, lanes, stride, lane_step](Node& self) {
        Node& p = *self.parents[0];
        p.ensure_grad();
        for (int lane = 0; lane < lanes; ++lane) {
            const size_t base = static_cast<size_t>(lane) * lane_step;
            double gy = 0.0;
            for (int i = 0; i < k; ++i) {
                const size_t idx = base + static_cast<size_t>(i) * stride;
                gy += self.grad[idx] * self.data[idx];
            }
            for (int i = 0; i < k; ++i) {
                const size_t idx = base + static_cast<size_t>(i) * stride;
                p.grad[idx] += self.data[idx] * (self.grad[idx] - gy);
            }
        }
    };
    return make_result("softmax", x.shape, std::move(out), {tx}, std::move(bw));
}

Tensor kl_divergence(const Tensor& tp, const Tensor& tq) {
    Node& p = need(tp, "kl_divergence");
    Node& q = need(tq, "kl_divergence");
    require_same_shape("kl_divergence", p, q);
    constexpr double kFloor = 1e-8;
    constexpr double kSumTol = 1e-6;

    double sp = 0.0, sq = 0.0;
    for (size_t i = 0; i < p.data.size(); ++i) {
        if (p.data[i] < -1e-12 || q.data[i] < -1e-12) {
            throw ContractError("kl_divergence: inputs must be nonnegative");
        }
        sp += p.data[i];
        sq += q.data[i];
    }
    if (std::abs(sp - 1.0) > kSumTol || std::abs(sq - 1.0) > kSumTol) {
        throw ContractError("kl_divergence: inputs must each sum to 1");
    }

    double kl = 0.0;
    std::uint64_t floored = 0;
    for (size_t i = 0; i < p.data.size(); ++i) {
        const double pv = p.data[i];
        if (pv <= 0.0) continue;  // 0 log 0 convention
        const double pf = std::max(pv, kFloor);
        const double qf = std::max(q.data[i], kFloor);
        if (q.data[i] < kFloor) ++floored;
        kl += pv * (std::log(pf) - std::log(qf));
    }
    if (floored) g_kl_floor_events.fetch_add(floored);

    auto bw = [kFloor](Node& self) {
        Node& pp = *self.parents[0];
        Node& pq = *self.parents[1];
        const double g = self.grad[0];
        if (pp.requires_grad) {
            pp.ensure_grad();
            for (size_t i = 0; i < pp.data.size(); ++i) {
                const double pv = pp.data[i];
                const double pf = std::max(pv, kFloor);
                const double qf = std::max(pq.data[i], kFloor);
                // term = p (log pf - log qf); pf is constant below the floor
                double d = std::log(pf) - std::log(qf);
                if (pv > kFloor) d += 1.0;
                pp.grad[i] += g * d;
            }
        }
        if (pq.requires_grad) {
            pq.ensure_grad();
            for (size_t i = 0; i < pq.data.size(); ++i) {
                const double pv = pp.data[i];
                if (pv <= 0.0) continue;
                if (pq.data[i] > kFloor) pq.grad[i] -= g * pv / pq.data[i];
            }
        }
    };
    return make_result("kl_divergence", {1}, {kl}, {tp, tq}, std::move(bw));
}

Tensor mse(const Tensor& ta, const Tensor& tb) {
    Node& a = need(ta, "mse");
    Node& b = need(tb, "mse");
    require_same_shape("mse", a, b);
    const int n = a.numel();
    const double inv = 1.0 / static_cast<double>(n);
    double s = 0.0;
    for (int i = 0; i < n; ++i) {
        const double d = a.data[i] - b.data[i];
        s += d * d;
    }
    auto bw = [inv, n](Node& self) {
        Node& pa = *self.parents[0];
        Node& pb = *self.parents[1];
        const double g = self.grad[0];
        if (pa.requires_grad) pa.ensure_grad();
        if (pb.requires_grad) pb.ensure_grad();
        for (int i = 0; i < n; ++i) {
            const double d = 2.0 * inv * (pa.data[i] - pb.data[i]) * g;
            if (pa.requires_grad) pa.grad[i] += d;
            if (pb.requires_grad) pb.grad[i] -= d;
        }
    };
    return make_result("mse", {1}, {s * inv}, {ta, tb}, std::move(bw));
}

Tensor dot(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 1 || b.ndim() != 1) throw ShapeError("dot: expects 1-D tensors");
    return sum(mul(a, b));
}

Tensor l2_normalize(const Tensor& a) {
    Tensor ss = add_scalar(sum(mul(a, a)), 1e-24);
    return div(a, sqrt(ss));
}

Tensor cosine_similarity(const Tensor& a, const Tensor& b) {
    return dot(l2_normalize(a), l2_normalize(b));
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

namespace {

// Post-order over the requires-grad subgraph; the returned list has every
// node after all of its parents' dependants, so reverse iteration visits each
// node exactly once with its adjoint complete.
std::vector<Node*> topo_order(Node* root) {
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, size_t>> stack;
    stack.emplace_back(root, 0);
    seen.insert(root);
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* parent = node->parents[next++].get();
            if (parent->requires_grad && !seen.count(parent)) {
                seen.insert(parent);
                stack.emplace_back(parent, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    return order;
}

}  // namespace

void backward(const Tensor& loss) {
    Node& root = need(loss, "backward");
    if (root.numel() != 1) throw ContractError("backward: loss must be scalar");
    if (!root.requires_grad) {
        throw ContractError("backward: loss does not depend on any trainable tensor");
    }
    if (root.backward_ran) {
        throw ContractError(
            "backward: already run for this result; rebuild the graph to accumulate again");
    }
    root.backward_ran = true;

    std::vector<Node*> order = topo_order(&root);
    root.ensure_grad();
    root.grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
    }
}

std::string tape_json(const Tensor& root) {
    Node& r = need(root, "tape_json");
    std::vector<Node*> order = topo_order(&r);
    std::ostringstream os;
    os << "[";
    bool first = true;
    for (Node* n : order) {
        if (!first) os << ",";
        first = false;
        os << "{\"op\":\"" << n->op << "\",\"output_id\":" << n->id << ",\"input_ids\":[";
        for (size_t i = 0; i < n->parents.size(); ++i) {
            if (i) os << ",";
            os << n->parents[i]->id;
        }
        os << "],\"shape\":" << shape_str(n->shape) << "}";
    }
    os << "]";
    return os.str();
}

NumericDiagnostics numeric_diagnostics() {
    NumericDiagnostics d;
    d.kl_floor_events = g_kl_floor_events.load();
    return d;
}

void reset_numeric_diagnostics() { g_kl_floor_events.store(0); }

}  // namespace infovla

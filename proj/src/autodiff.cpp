#include "splatpose/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace splatpose::ad {

namespace {

thread_local Graph* g_active = nullptr;

double quantize(double v, DType dt) {
    return dt == DType::f32 ? static_cast<double>(static_cast<float>(v)) : v;
}

void quantize_all(std::vector<double>& v, DType dt) {
    if (dt == DType::f32) {
        for (double& x : v) x = static_cast<double>(static_cast<float>(x));
    }
}

DType promote(DType a, DType b) {
    return (a == DType::f64 || b == DType::f64) ? DType::f64 : DType::f32;
}

[[noreturn]] void shape_error(const std::string& op, const std::vector<int>& a,
                              const std::vector<int>& b) {
    throw std::invalid_argument("op '" + op + "': shape mismatch " + shape_str(a) + " vs " +
                                shape_str(b));
}

int normalize_axis(const std::string& op, int axis, int rank) {
    if (axis < 0) axis += rank;
    if (axis < 0 || axis >= rank)
        throw std::invalid_argument("op '" + op + "': axis out of range for rank " +
                                    std::to_string(rank));
    return axis;
}

std::vector<int64_t> row_major_strides(const std::vector<int>& shape) {
    std::vector<int64_t> s(shape.size(), 1);
    for (int i = static_cast<int>(shape.size()) - 2; i >= 0; --i)
        s[i] = s[i + 1] * shape[i + 1];
    return s;
}

// Strides of `shape` padded/broadcast against out_shape (trailing aligned);
// broadcast dims get stride 0.
std::vector<int64_t> broadcast_strides(const std::vector<int>& shape,
                                       const std::vector<int>& out_shape) {
    const int r = static_cast<int>(out_shape.size());
    const int ra = static_cast<int>(shape.size());
    auto base = row_major_strides(shape);
    std::vector<int64_t> s(r, 0);
    for (int i = 0; i < ra; ++i) {
        const int o = r - ra + i;
        s[o] = (shape[i] == 1 && out_shape[o] != 1) ? 0 : base[i];
    }
    return s;
}

std::vector<int> broadcast_shape(const std::string& op, const std::vector<int>& a,
                                 const std::vector<int>& b) {
    const int r = std::max(a.size(), b.size());
    std::vector<int> out(r, 1);
    for (int i = 0; i < r; ++i) {
        const int ia = static_cast<int>(a.size()) - r + i;
        const int ib = static_cast<int>(b.size()) - r + i;
        const int da = ia >= 0 ? a[ia] : 1;
        const int db = ib >= 0 ? b[ib] : 1;
        if (da != db && da != 1 && db != 1) shape_error(op, a, b);
        out[i] = std::max(da, db);
    }
    return out;
}

struct LambdaNode : Node {
    std::function<void(LambdaNode&)> fn;
    void backward() override { fn(*this); }
};

void record_lambda(const std::string& name, std::vector<Value> inputs, Value output,
                   std::function<void(LambdaNode&)> fn) {
    auto node = std::make_unique<LambdaNode>();
    node->name = name;
    node->inputs = std::move(inputs);
    node->output = std::move(output);
    node->fn = std::move(fn);
    g_active->record(std::move(node));
}

}  // namespace

struct ValueImpl {
    std::vector<int> shape;
    std::vector<double> data;
    std::vector<double> grad;
    bool has_grad = false;
    bool requires_grad = false;
    DType dtype = DType::f64;
};

// ---- Value ---------------------------------------------------------------

Value::Value(std::vector<int> shape, std::vector<double> data, bool requires_grad, DType dtype) {
    const int64_t n = shape_numel(shape);
    if (n != static_cast<int64_t>(data.size()))
        throw std::invalid_argument("Value: shape " + shape_str(shape) + " wants " +
                                    std::to_string(n) + " elements, got " +
                                    std::to_string(data.size()));
    impl_ = std::make_shared<ValueImpl>();
    impl_->shape = std::move(shape);
    quantize_all(data, dtype);
    impl_->data = std::move(data);
    impl_->requires_grad = requires_grad;
    impl_->dtype = dtype;
}

Value Value::zeros(std::vector<int> shape) {
    const int64_t n = shape_numel(shape);
    return Value(std::move(shape), std::vector<double>(n, 0.0));
}

Value Value::full(std::vector<int> shape, double v) {
    const int64_t n = shape_numel(shape);
    return Value(std::move(shape), std::vector<double>(n, v));
}

Value Value::scalar(double v) { return Value({}, {v}); }

Value Value::param(std::vector<int> shape, std::vector<double> data) {
    return Value(std::move(shape), std::move(data), true);
}

const std::vector<int>& Value::shape() const { return impl_->shape; }
int64_t Value::size() const { return static_cast<int64_t>(impl_->data.size()); }
int Value::rank() const { return static_cast<int>(impl_->shape.size()); }
bool Value::requires_grad() const { return impl_->requires_grad; }
DType Value::dtype() const { return impl_->dtype; }
const std::vector<double>& Value::data() const { return impl_->data; }
std::vector<double>& Value::mutable_data() { return impl_->data; }
bool Value::has_grad() const { return impl_ && impl_->has_grad; }

const std::vector<double>& Value::grad() const {
    if (!impl_->has_grad) throw std::runtime_error("Value: grad not populated");
    return impl_->grad;
}

std::vector<double>& Value::grad_or_init() {
    if (!impl_->has_grad) {
        impl_->grad.assign(impl_->data.size(), 0.0);
        impl_->has_grad = true;
    }
    return impl_->grad;
}

void Value::clear_grad() {
    impl_->grad.clear();
    impl_->has_grad = false;
}

double Value::item() const {
    if (size() != 1) throw std::runtime_error("Value::item on non-scalar of size " +
                                              std::to_string(size()));
    return impl_->data[0];
}

double Value::at(std::initializer_list<int> idx) const {
    const auto strides = row_major_strides(impl_->shape);
    int64_t off = 0;
    int i = 0;
    for (int v : idx) off += strides[i++] * v;
    return impl_->data[off];
}

// ---- Graph -----------------------------------------------------------------

void Graph::record(std::unique_ptr<Node> node) { nodes_.push_back(std::move(node)); }

void Graph::backward(const Value& root) {
    if (!root.defined() || root.size() != 1)
        throw std::invalid_argument("backward: root must be scalar");
    root.impl()->grad.assign(1, 1.0);
    root.impl()->has_grad = true;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        Node* n = it->get();
        if (n->output.defined() && n->output.has_grad()) n->backward();
    }
}

void Graph::zero_all_grads() {
    for (auto& n : nodes_) {
        if (n->output.defined()) n->output.clear_grad();
        for (auto& in : n->inputs)
            if (in.defined()) in.clear_grad();
    }
}

Graph* active_graph() { return g_active; }

GraphScope::GraphScope(Graph& g) : prev_(g_active) { g_active = &g; }
GraphScope::~GraphScope() { g_active = prev_; }

NoGradGuard::NoGradGuard() : prev_(g_active) { g_active = nullptr; }
NoGradGuard::~NoGradGuard() { g_active = prev_; }

void record_node(std::unique_ptr<Node> node) {
    if (g_active) g_active->record(std::move(node));
}

bool recording_for(const std::vector<Value>& inputs) {
    if (!g_active) return false;
    for (const auto& v : inputs)
        if (v.defined() && v.requires_grad()) return true;
    return false;
}

void accumulate_grad(const Value& v, const std::vector<double>& g) {
    if (!v.defined() || !v.requires_grad()) return;
    auto& dst = const_cast<Value&>(v).grad_or_init();
    for (size_t i = 0; i < dst.size(); ++i) dst[i] += g[i];
}

std::string shape_str(const std::vector<int>& shape) {
    std::string s = "(";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + ")";
}

int64_t shape_numel(const std::vector<int>& shape) {
    int64_t n = 1;
    for (int d : shape) {
        if (d <= 0) throw std::invalid_argument("shape extent must be positive, got " + shape_str(shape));
        n *= d;
    }
    return n;
}

// ---- elementwise binary with broadcasting ----------------------------------

namespace {

Value make_result(std::vector<int> shape, std::vector<double> data, const Value& a,
                  const Value& b) {
    const bool rg = (a.requires_grad() || b.requires_grad()) && g_active != nullptr;
    Value out(std::move(shape), std::move(data), rg, promote(a.dtype(), b.dtype()));
    return out;
}

Value make_result(std::vector<int> shape, std::vector<double> data, const Value& a) {
    const bool rg = a.requires_grad() && g_active != nullptr;
    Value out(std::move(shape), std::move(data), rg, a.dtype());
    return out;
}

// Walks an output shape, invoking f(out_index, a_offset, b_offset).
template <typename F>
void broadcast_walk(const std::vector<int>& out_shape, const std::vector<int64_t>& sa,
                    const std::vector<int64_t>& sb, F&& f) {
    const int r = static_cast<int>(out_shape.size());
    const int64_t n = shape_numel(out_shape);
    std::vector<int> idx(r, 0);
    int64_t oa = 0, ob = 0;
    for (int64_t i = 0; i < n; ++i) {
        f(i, oa, ob);
        for (int d = r - 1; d >= 0; --d) {
            idx[d]++;
            oa += sa[d];
            ob += sb[d];
            if (idx[d] < out_shape[d]) break;
            idx[d] = 0;
            oa -= static_cast<int64_t>(out_shape[d]) * sa[d];
            ob -= static_cast<int64_t>(out_shape[d]) * sb[d];
        }
    }
}

// dL/da for a broadcast binary op: reduce g over broadcast dims of a.
void reduce_into(const Value& a, const std::vector<int>& out_shape,
                 const std::vector<double>& contrib) {
    if (!a.requires_grad()) return;
    auto& ga = const_cast<Value&>(a).grad_or_init();
    const auto sa = broadcast_strides(a.shape(), out_shape);
    const std::vector<int64_t> sb(out_shape.size(), 0);
    broadcast_walk(out_shape, sa, sb,
                   [&](int64_t i, int64_t oa, int64_t) { ga[oa] += contrib[i]; });
}

enum class BinOp { Add, Sub, Mul, Div };

Value binary_op(const std::string& name, BinOp op, const Value& a, const Value& b) {
    const auto out_shape = broadcast_shape(name, a.shape(), b.shape());
    const auto sa = broadcast_strides(a.shape(), out_shape);
    const auto sb = broadcast_strides(b.shape(), out_shape);
    std::vector<double> data(shape_numel(out_shape));
    const auto& da = a.data();
    const auto& db = b.data();
    broadcast_walk(out_shape, sa, sb, [&](int64_t i, int64_t oa, int64_t ob) {
        switch (op) {
            case BinOp::Add: data[i] = da[oa] + db[ob]; break;
            case BinOp::Sub: data[i] = da[oa] - db[ob]; break;
            case BinOp::Mul: data[i] = da[oa] * db[ob]; break;
            case BinOp::Div: data[i] = da[oa] / db[ob]; break;
        }
    });
    Value out = make_result(out_shape, std::move(data), a, b);
    if (recording_for({a, b})) {
        record_lambda(name, {a, b}, out, [name, op, out_shape](LambdaNode& n) {
            const Value& a = n.inputs[0];
            const Value& b = n.inputs[1];
            const auto& g = n.output.grad();
            const auto& da = a.data();
            const auto& db = b.data();
            const auto sa = broadcast_strides(a.shape(), out_shape);
            const auto sb = broadcast_strides(b.shape(), out_shape);
            std::vector<double> ca(g.size()), cb(g.size());
            broadcast_walk(out_shape, sa, sb, [&](int64_t i, int64_t oa, int64_t ob) {
                switch (op) {
                    case BinOp::Add:
                        ca[i] = g[i];
                        cb[i] = g[i];
                        break;
                    case BinOp::Sub:
                        ca[i] = g[i];
                        cb[i] = -g[i];
                        break;
                    case BinOp::Mul:
                        ca[i] = g[i] * db[ob];
                        cb[i] = g[i] * da[oa];
                        break;
                    case BinOp::Div:
                        ca[i] = g[i] / db[ob];
                        cb[i] = -g[i] * da[oa] / (db[ob] * db[ob]);
                        break;
                }
            });
            reduce_into(a, out_shape, ca);
            reduce_into(b, out_shape, cb);
        });
    }
    return out;
}

}  // namespace

Value add(const Value& a, const Value& b) { return binary_op("add", BinOp::Add, a, b); }
Value sub(const Value& a, const Value& b) { return binary_op("sub", BinOp::Sub, a, b); }
Value mul(const Value& a, const Value& b) { return binary_op("mul", BinOp::Mul, a, b); }
Value divide(const Value& a, const Value& b) { return binary_op("div", BinOp::Div, a, b); }
Value scale(const Value& a, double s) { return mul(a, Value::scalar(s)); }
Value add_scalar(const Value& a, double s) { return add(a, Value::scalar(s)); }
Value neg(const Value& a) { return scale(a, -1.0); }

// ---- elementwise unary -------------------------------------------------------

namespace {

Value unary_op(const std::string& name, const Value& a,
               const std::function<double(double)>& f,
               const std::function<double(double /*x*/, double /*y*/)>& df) {
    std::vector<double> data(a.size());
    const auto& src = a.data();
    for (int64_t i = 0; i < a.size(); ++i) data[i] = f(src[i]);
    Value out = make_result(a.shape(), std::move(data), a);
    if (recording_for({a})) {
        record_lambda(name, {a}, out, [df](LambdaNode& n) {
            const Value& a = n.inputs[0];
            const auto& g = n.output.grad();
            const auto& x = a.data();
            const auto& y = n.output.data();
            std::vector<double> ga(g.size());
            for (size_t i = 0; i < g.size(); ++i) ga[i] = g[i] * df(x[i], y[i]);
            accumulate_grad(a, ga);
        });
    }
    return out;
}

}  // namespace

Value vexp(const Value& a) {
    return unary_op("exp", a, [](double x) { return std::exp(x); },
                    [](double, double y) { return y; });
}

Value vlog(const Value& a) {
    return unary_op("log", a, [](double x) { return std::log(x); },
                    [](double x, double) { return 1.0 / x; });
}

Value vsqrt(const Value& a) {
    return unary_op("sqrt", a, [](double x) { return std::sqrt(x); },
                    [](double, double y) { return y > 1e-150 ? 0.5 / y : 0.0; });
}

Value sigmoid(const Value& a) {
    return unary_op("sigmoid", a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
                    [](double, double y) { return y * (1.0 - y); });
}

Value relu(const Value& a) {
    return unary_op("relu", a, [](double x) { return x > 0 ? x : 0.0; },
                    [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

Value gelu(const Value& a) {
    constexpr double kInvSqrt2 = 0.7071067811865475244;
    constexpr double kInvSqrt2Pi = 0.3989422804014326779;
    return unary_op(
        "gelu", a,
        [](double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); },
        [](double x, double) {
            const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
            return cdf + x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
        });
}

Value clamp(const Value& a, double lo, double hi) {
    return unary_op("clamp", a,
                    [lo, hi](double x) { return std::min(std::max(x, lo), hi); },
                    [lo, hi](double x, double) { return (x > lo && x < hi) ? 1.0 : 0.0; });
}

// ---- matmul --------------------------------------------------------------

Value matmul(const Value& a, const Value& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0])
        shape_error("matmul", a.shape(), b.shape());
    const int m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    std::vector<double> data(static_cast<int64_t>(m) * n, 0.0);
    const auto& da = a.data();
    const auto& db = b.data();
    for (int i = 0; i < m; ++i)
        for (int p = 0; p < k; ++p) {
            const double av = da[static_cast<int64_t>(i) * k + p];
            if (av == 0.0) continue;
            const double* brow = &db[static_cast<int64_t>(p) * n];
            double* orow = &data[static_cast<int64_t>(i) * n];
            for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    Value out = make_result({m, n}, std::move(data), a, b);
    if (recording_for({a, b})) {
        record_lambda("matmul", {a, b}, out, [m, k, n](LambdaNode& nd) {
            const Value& a = nd.inputs[0];
            const Value& b = nd.inputs[1];
            const auto& g = nd.output.grad();
            if (a.requires_grad()) {
                auto& ga = const_cast<Value&>(a).grad_or_init();
                const auto& db = b.data();
                for (int i = 0; i < m; ++i)
                    for (int p = 0; p < k; ++p) {
                        double acc = 0.0;
                        const double* grow = &g[static_cast<int64_t>(i) * n];
                        const double* brow = &db[static_cast<int64_t>(p) * n];
                        for (int j = 0; j < n; ++j) acc += grow[j] * brow[j];
                        ga[static_cast<int64_t>(i) * k + p] += acc;
                    }
            }
            if (b.requires_grad()) {
                auto& gb = const_cast<Value&>(b).grad_or_init();
                const auto& da = a.data();
                for (int p = 0; p < k; ++p)
                    for (int i = 0; i < m; ++i) {
                        const double av = da[static_cast<int64_t>(i) * k + p];
                        if (av == 0.0) continue;
                        const double* grow = &g[static_cast<int64_t>(i) * n];
                        double* brow = &gb[static_cast<int64_t>(p) * n];
                        for (int j = 0; j < n; ++j) brow[j] += av * grow[j];
                    }
            }
        });
    }
    return out;
}

// ---- softmax / layernorm ---------------------------------------------------

Value softmax(const Value& a, int axis) {
    const int ax = normalize_axis("softmax", axis, a.rank());
    const auto& shape = a.shape();
    const int64_t axis_len = shape[ax];
    int64_t inner = 1, outer = 1;
    for (int i = ax + 1; i < a.rank(); ++i) inner *= shape[i];
    for (int i = 0; i < ax; ++i) outer *= shape[i];
    std::vector<double> data(a.size());
    const auto& x = a.data();
    for (int64_t o = 0; o < outer; ++o)
        for (int64_t in = 0; in < inner; ++in) {
            const int64_t base = o * axis_len * inner + in;
            double mx = -1e300;
            for (int64_t j = 0; j < axis_len; ++j) mx = std::max(mx, x[base + j * inner]);
            double s = 0.0;
            for (int64_t j = 0; j < axis_len; ++j) {
                const double e = std::exp(x[base + j * inner] - mx);
                data[base + j * inner] = e;
                s += e;
            }
            for (int64_t j = 0; j < axis_len; ++j) data[base + j * inner] /= s;
        }
    Value out = make_result(shape, std::move(data), a);
    if (recording_for({a})) {
        record_lambda("softmax", {a}, out, [axis_len, inner, outer](LambdaNode& n) {
            const Value& a = n.inputs[0];
            const auto& g = n.output.grad();
            const auto& y = n.output.data();
            std::vector<double> ga(g.size());
            for (int64_t o = 0; o < outer; ++o)
                for (int64_t in = 0; in < inner; ++in) {
                    const int64_t base = o * axis_len * inner + in;
                    double dot = 0.0;
                    for (int64_t j = 0; j < axis_len; ++j)
                        dot += g[base + j * inner] * y[base + j * inner];
                    for (int64_t j = 0; j < axis_len; ++j) {
                        const int64_t idx = base + j * inner;
                        ga[idx] = y[idx] * (g[idx] - dot);
                    }
                }
            accumulate_grad(a, ga);
        });
    }
    return out;
}

Value layernorm(const Value& a, double eps) {
    if (a.rank() < 1) throw std::invalid_argument("layernorm: rank must be >= 1");
    const int64_t d = a.shape().back();
    const int64_t rows = a.size() / d;
    std::vector<double> data(a.size());
    std::vector<double> inv_sigma(rows);
    const auto& x = a.data();
    for (int64_t r = 0; r < rows; ++r) {
        const double* xr = &x[r * d];
        double mu = 0.0;
        for (int64_t j = 0; j < d; ++j) mu += xr[j];
        mu /= d;
        double var = 0.0;
        for (int64_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
        var /= d;
        const double is = 1.0 / std::sqrt(var + eps);
        inv_sigma[r] = is;
        for (int64_t j = 0; j < d; ++j) data[r * d + j] = (xr[j] - mu) * is;
    }
    Value out = make_result(a.shape(), std::move(data), a);
    if (recording_for({a})) {
        record_lambda("layernorm", {a}, out, [d, rows, inv_sigma](LambdaNode& n) {
            const Value& a = n.inputs[0];
            const auto& g = n.output.grad();
            const auto& y = n.output.data();
            std::vector<double> ga(g.size());
            for (int64_t r = 0; r < rows; ++r) {
                const double* gr = &g[r * d];
                const double* yr = &y[r * d];
                double gmean = 0.0, gymean = 0.0;
                for (int64_t j = 0; j < d; ++j) {
                    gmean += gr[j];
                    gymean += gr[j] * yr[j];
                }
                gmean /= d;
                gymean /= d;
                for (int64_t j = 0; j < d; ++j)
                    ga[r * d + j] = inv_sigma[r] * (gr[j] - gmean - yr[j] * gymean);
            }
            accumulate_grad(a, ga);
        });
    }
    return out;
}

// ---- cross product / norms -------------------------------------------------

Value cross3(const Value& a, const Value& b) {
    if (a.shape() != b.shape() || a.rank() < 1 || a.shape().back() != 3)
        shape_error("cross3", a.shape(), b.shape());
    const int64_t rows = a.size() / 3;
    std::vector<double> data(a.size());
    const auto& da = a.data();
    const auto& db = b.data();
    for (int64_t r = 0; r < rows; ++r) {
        const double* u = &da[r * 3];
        const double* v = &db[r * 3];
        data[r * 3 + 0] = u[1] * v[2] - u[2] * v[1];
        data[r * 3 + 1] = u[2] * v[0] - u[0] * v[2];
        data[r * 3 + 2] = u[0] * v[1] - u[1] * v[0];
    }
    Value out = make_result(a.shape(), std::move(data), a, b);
    if (recording_for({a, b})) {
        record_lambda("cross3", {a, b}, out, [rows](LambdaNode& n) {
            const Value& a = n.inputs[0];
            const Value& b = n.inputs[1];
            const auto& g = n.output.grad();
            const auto& da = a.data();
            const auto& db = b.data();
            // d<g, a x b> : grad_a = b x g, grad_b = g x a.
            if (a.requires_grad()) {
                auto& ga = const_cast<Value&>(a).grad_or_init();
                for (int64_t r = 0; r < rows; ++r) {
                    const double* v = &db[r * 3];
                    const double* gr = &g[r * 3];
                    ga[r * 3 + 0] += v[1] * gr[2] - v[2] * gr[1];
                    ga[r * 3 + 1] += v[2] * gr[0] - v[0] * gr[2];
                    ga[r * 3 + 2] += v[0] * gr[1] - v[1] * gr[0];
                }
            }
            if (b.requires_grad()) {
                auto& gb = const_cast<Value&>(b).grad_or_init();
                for (int64_t r = 0; r < rows; ++r) {
                    const double* u = &da[r * 3];
                    const double* gr = &g[r * 3];
                    gb[r * 3 + 0] += gr[1] * u[2] - gr[2] * u[1];
                    gb[r * 3 + 1] += gr[2] * u[0] - gr[0] * u[2];
                    gb[r * 3 + 2] += gr[0] * u[1] - gr[1] * u[0];
                }
            }
        });
    }
    return out;
}

Value l2norm(const Value& a, int axis, bool keepdims) {
    const int ax = normalize_axis("l2norm", axis, a.rank());
    const auto& shape = a.shape();
    const int64_t axis_len = shape[ax];
    int64_t inner = 1, outer = 1;
    for (int i = ax + 1; i < a.rank(); ++i) inner *= shape[i];
    for (int i = 0; i < ax; ++i) outer *= shape[i];
    std::vector<int> out_shape;
    for (int i = 0; i < a.rank(); ++i) {
        if (i == ax) {
            if (keepdims) out_shape.push_back(1);
        } else {
            out_shape.push_back(shape[i]);
        }
    }
    std::vector<double> data(outer * inner);
    const auto& x = a.data();
    for (int64_t o = 0; o < outer; ++o)
        for (int64_t in = 0; in < inner; ++in) {
            double s = 0.0;
            const int64_t base = o * axis_len * inner + in;
            for (int64_t j = 0; j < axis_len; ++j) {
                const double v = x[base + j * inner];
                s += v * v;
            }
            data[o * inner + in] = std::sqrt(s);
        }
    Value out = make_result(out_shape, std::move(data), a);
    if (recording_for({a})) {
        record_lambda("l2norm", {a}, out, [axis_len, inner, outer](LambdaNode& n) {
            const Value& a = n.inputs[0];
            const auto& g = n.output.grad();
            const auto& y = n.output.data();
            const auto& x = a.data();
            std::vector<double> ga(a.size(), 0.0);
            for (int64_t o = 0; o < outer; ++o)
                for (int64_t in = 0; in < inner; ++in) {
                    const double norm = y[o * inner + in];
                    if (norm < 1e-150) continue;  // subgradient 0 at the origin
                    const double gv = g[o * inner + in] / norm;
                    const int64_t base = o * axis_len * inner + in;
                    for (int64_t j = 0; j < axis_len; ++j)
                        ga[base + j * inner] = gv * x[base + j * inner];
                }
            accumulate_grad(a, ga);
        });
    }
    return out;
}

// ---- shape ops ---------------------------------------------------------------

Value reshape(const Value& a, std::vector<int> shape) {
    if (shape_numel(shape) != a.size())
        throw std::invalid_argument("reshape: cannot view " + shape_str(a.shape()) + " as " +
                                    shape_str(shape));
    Value out = make_result(std::move(shape), a.data(), a);
    if (recording_for({a})) {
        record_lambda("reshape", {a}, out, [](LambdaNode& n) {
            accumulate_grad(n.inputs[0], n.output.grad());
        });
    }
    return out;
}

Value transpose(const Value& a, std::vector<int> perm) {
    const int r = a.rank();
    if (perm.empty()) {
        perm.resize(r);
        for (int i = 0; i < r; ++i) perm[i] = r - 1 - i;
    }
    if (static_cast<int>(perm.size()) != r)
        throw std::invalid_argument("transpose: perm rank mismatch");
    std::vector<int> out_shape(r);
    for (int i = 0; i < r; ++i) out_shape[i] = a.shape()[perm[i]];
    const auto in_strides = row_major_strides(a.shape());
    std::vector<int64_t> gather(r);
    for (int i = 0; i < r; ++i) gather[i] = in_strides[perm[i]];
    std::vector<double> data(a.size());
    const auto& x = a.data();
    std::vector<int> idx(r, 0);
    int64_t src = 0;
    for (int64_t i = 0; i < a.size(); ++i) {
        data[i] = x[src];
        for (int d = r - 1; d >= 0; --d) {
            idx[d]++;
            src += gather[d];
            if (idx[d] < out_shape[d]) break;
            idx[d] = 0;
            src -= static_cast<int64_t>(out_shape[d]) * gather[d];
        }
    }
    Value out = make_result(out_shape, std::move(data), a);
    if (recording_for({a})) {
        record_lambda("transpose", {a}, out, [out_shape, gather, r](LambdaNode& n) {
            const Value& a = n.inputs[0];
            const auto& g = n.output.grad();
            std::vector<double> ga(a.size(), 0.0);
            std::vector<int> idx(r, 0);
            int64_t src = 0;
            for (int64_t i = 0; i < static_cast<int64_t>(g.size()); ++i) {
                ga[src] += g[i];
                for (int d = r - 1; d >= 0; --d) {
                    idx[d]++;
                    src += gather[d];
                    if (idx[d] < out_shape[d]) break;
                    idx[d] = 0;
                    src -= static_cast<int64_t>(out_shape[d]) * gather[d];
                }
            }
            accumulate_grad(a, ga);
        });
    }
    return out;
}

Value concat(const std::vector<Value>& parts, int axis) {
    if (parts.empty()) throw std::invalid_argument("concat: empty input list");
    const int r = parts[0].rank();
    const int ax = normalize_axis("concat", axis, r);
    std::vector<int> out_shape = parts[0].shape();
    int total = 0;
    for (const auto& p : parts) {
        if (p.rank() != r) shape_error("concat", parts[0].shape(), p.shape());
        for (int i = 0; i < r; ++i)
            if (i != ax && p.shape()[i] != out_shape[i]) shape_error("concat", out_shape, p.shape());
        total += p.shape()[ax];
    }
    out_shape[ax] = total;
    int64_t inner = 1, outer = 1;
    for (int i = ax + 1; i < r; ++i) inner *= out_shape[i];
    for (int i = 0; i < ax; ++i) outer *= out_shape[i];
    std::vector<double> data(shape_numel(out_shape));
    int64_t off = 0;
    std::vector<int64_t> offsets;
    for (const auto& p : parts) {
        offsets.push_back(off);
        const int64_t len = p.shape()[ax] * inner;
        const auto& x = p.data();
        for (int64_t o = 0; o < outer; ++o)
            std::copy(&x[o * len], &x[o * len] + len, &data[o * total * inner + off]);
        off += len;
    }
    bool rg = false;
    for (const auto& p : parts) rg = rg || p.requires_grad();
    Value out(out_shape, std::move(data), rg && g_active != nullptr);
    if (g_active && rg) {
        record_lambda("concat", parts, out, [outer, inner, total, offsets](LambdaNode& n) {
            const auto& g = n.output.grad();
            for (size_t pi = 0; pi < n.inputs.size(); ++pi) {
                const Value& p = n.inputs[pi];
                if (!p.requires_grad()) continue;
                auto& gp = const_cast<Value&>(p).grad_or_init();
                const int64_t len = p.size() / outer;
                for (int64_t o = 0; o < outer; ++o)
                    for (int64_t j = 0; j < len; ++j)
                        gp[o * len + j] += g[o * total * inner + offsets[pi] + j];
            }
        });
    }
    return out;
}

Value slice(const Value& a, const std::vector<int>& starts, const std::vector<int>& sizes) {
    const int r = a.rank();
    if (static_cast<int>(starts.size()) != r || static_cast<int>(sizes.size()) != r)
        throw std::invalid_argument("slice: starts/sizes rank mismatch");
    for (int i = 0; i < r; ++i)
        if (starts[i] < 0 || sizes[i] <= 0 || starts[i] + sizes[i] > a.shape()[i])
            throw std::invalid_argument("slice: window out of bounds for " + shape_str(a.shape()));
    const auto strides = row_major_strides(a.shape());
    std::vector<double> data(shape_numel(sizes));
    const auto& x = a.data();
    std::vector<int> idx(r, 0);
    for (int64_t i = 0; i < static_cast<int64_t>(data.size()); ++i) {
        int64_t src = 0;
        for (int d = 0; d < r; ++d) src += (starts[d] + idx[d]) * strides[d];
        data[i] = x[src];
        for (int d = r - 1; d >= 0; --d) {
            idx[d]++;
            if (idx[d] < sizes[d]) break;
            idx[d] = 0;
        }
    }
    Value out = make_result(sizes, std::move(data), a);
    if (recording_for({a})) {
        record_lambda("slice", {a}, out, [starts, sizes, strides, r](LambdaNode& n) {
            const Value& a = n.inputs[0];
            const auto& g = n.output.grad();
            auto& ga = const_cast<Value&>(a).grad_or_init();
            std::vector<int> idx(r, 0);
            for (int64_t i = 0; i < static_cast<int64_t>(g.size()); ++i) {
                int64_t dst = 0;
                for (int d = 0; d < r; ++d) dst += (starts[d] + idx[d]) * strides[d];
                ga[dst] += g[i];
                for (int d = r - 1; d >= 0; --d) {
                    idx[d]++;
                    if (idx[d] < sizes[d]) break;
                    idx[d] = 0;
                }
            }
        });
    }
    return out;
}

Value take_rows(const Value& a, const std::vector<int>& indices) {
    if (a.rank() < 1) throw std::invalid_argument("take_rows: rank must be >= 1");
    const int64_t row = a.size() / a.shape()[0];
    for (int ix : indices)
        if (ix < 0 || ix >= a.shape()[0])
            throw std::invalid_argument("take_rows: index out of range");
    std::vector<int> out_shape = a.shape();
    out_shape[0] = static_cast<int>(indices.size());
    std::vector<double> data(row * indices.size());
    const auto& x = a.data();
    for (size_t i = 0; i < indices.size(); ++i)
        std::copy(&x[indices[i] * row], &x[indices[i] * row] + row, &data[i * row]);
    Value out = make_result(out_shape, std::move(data), a);
    if (recording_for({a})) {
        record_lambda("take_rows", {a}, out, [indices, row](LambdaNode& n) {
            const Value& a = n.inputs[0];
            const auto& g = n.output.grad();
            auto& ga = const_cast<Value&>(a).grad_or_init();
            for (size_t i = 0; i < indices.size(); ++i)
                for (int64_t j = 0; j < row; ++j) ga[indices[i] * row + j] += g[i * row + j];
        });
    }
    return out;
}

// ---- reductions -----------------------------------------------------------

Value sum(const Value& a) {
    double s = 0.0;
    for (double v : a.data()) s += v;
    Value out = make_result({}, {s}, a);
    if (recording_for({a})) {
        record_lambda("sum", {a}, out, [](LambdaNode& n) {
            const double g = n.output.grad()[0];
            accumulate_grad(n.inputs[0], std::vector<double>(n.inputs[0].size(), g));
        });
    }
    return out;
}

Value sum(const Value& a, int axis, bool keepdims) {
    const int ax = normalize_axis("sum", axis, a.rank());
    const auto& shape = a.shape();
    const int64_t axis_len = shape[ax];
    int64_t inner = 1, outer = 1;
    for (int i = ax + 1; i < a.rank(); ++i) inner *= shape[i];
    for (int i = 0; i < ax; ++i) outer *= shape[i];
    std::vector<int> out_shape;
    for (int i = 0; i < a.rank(); ++i) {
        if (i == ax) {
            if (keepdims) out_shape.push_back(1);
        } else {
            out_shape.push_back(shape[i]);
        }
    }
    std::vector<double> data(outer * inner, 0.0);
    const auto& x = a.data();
    for (int64_t o = 0; o < outer; ++o)
        for (int64_t j = 0; j < axis_len; ++j)
            for (int64_t in = 0; in < inner; ++in)
                data[o * inner + in] += x[(o * axis_len + j) * inner + in];
    Value out = make_result(out_shape, std::move(data), a);
    if (recording_for({a})) {
        record_lambda("sum_axis", {a}, out, [axis_len, inner, outer](LambdaNode& n) {
            const Value& a = n.inputs[0];
            const auto& g = n.output.grad();
            std::vector<double> ga(a.size());
            for (int64_t o = 0; o < outer; ++o)
                for (int64_t j = 0; j < axis_len; ++j)
                    for (int64_t in = 0; in < inner; ++in)
                        ga[(o * axis_len + j) * inner + in] = g[o * inner + in];
            accumulate_grad(a, ga);
        });
    }
    return out;
}

Value mean(const Value& a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

Value mean(const Value& a, int axis, bool keepdims) {
    const int ax = normalize_axis("mean", axis, a.rank());
    return scale(sum(a, ax, keepdims), 1.0 / a.shape()[ax]);
}

// ---- bilinear sampling ------------------------------------------------------

Value bilinear_sample(const Value& grid, const Value& pts) {
    if (grid.rank() != 3) throw std::invalid_argument("bilinear_sample: grid must be (H,W,C)");
    if (pts.rank() != 2 || pts.shape()[1] != 2)
        throw std::invalid_argument("bilinear_sample: pts must be (N,2)");
    const int h = grid.shape()[0], w = grid.shape()[1], c = grid.shape()[2];
    const int n = pts.shape()[0];
    std::vector<double> data(static_cast<int64_t>(n) * c);
    const auto& gdat = grid.data();
    const auto& pdat = pts.data();
    auto sample_one = [&](int i, double* out) {
        const double rawx = pdat[i * 2 + 0];
        const double rawy = pdat[i * 2 + 1];
        const double x = std::min(std::max(rawx, 0.0), static_cast<double>(w - 1));
        const double y = std::min(std::max(rawy, 0.0), static_cast<double>(h - 1));
        const int x0 = std::min(static_cast<int>(std::floor(x)), w - 1);
        const int y0 = std::min(static_cast<int>(std::floor(y)), h - 1);
        const int x1 = std::min(x0 + 1, w - 1);
        const int y1 = std::min(y0 + 1, h - 1);
        const double fx = x - x0;
        const double fy = y - y0;
        for (int ch = 0; ch < c; ++ch) {
            const double v00 = gdat[(static_cast<int64_t>(y0) * w + x0) * c + ch];
            const double v01 = gdat[(static_cast<int64_t>(y0) * w + x1) * c + ch];
            const double v10 = gdat[(static_cast<int64_t>(y1) * w + x0) * c + ch];
            const double v11 = gdat[(static_cast<int64_t>(y1) * w + x1) * c + ch];
            out[ch] = (1 - fy) * ((1 - fx) * v00 + fx * v01) + fy * ((1 - fx) * v10 + fx * v11);
        }
    };
    for (int i = 0; i < n; ++i) sample_one(i, &data[static_cast<int64_t>(i) * c]);
    Value out = make_result({n, c}, std::move(data), grid, pts);
    if (recording_for({grid, pts})) {
        record_lambda("bilinear_sample", {grid, pts}, out, [h, w, c, n](LambdaNode& nd) {
            const Value& grid = nd.inputs[0];
            const Value& pts = nd.inputs[1];
            const auto& g = nd.output.grad();
            const auto& gdat = grid.data();
            const auto& pdat = pts.data();
            std::vector<double> ggrid(grid.requires_grad() ? grid.size() : 0, 0.0);
            std::vector<double> gpts(pts.requires_grad() ? pts.size() : 0, 0.0);
            for (int i = 0; i < n; ++i) {
                const double rawx = pdat[i * 2 + 0];
                const double rawy = pdat[i * 2 + 1];
                const bool cx = rawx < 0.0 || rawx > w - 1;
                const bool cy = rawy < 0.0 || rawy > h - 1;
                const double x = std::min(std::max(rawx, 0.0), static_cast<double>(w - 1));
                const double y = std::min(std::max(rawy, 0.0), static_cast<double>(h - 1));
                const int x0 = std::min(static_cast<int>(std::floor(x)), w - 1);
                const int y0 = std::min(static_cast<int>(std::floor(y)), h - 1);
                const int x1 = std::min(x0 + 1, w - 1);
                const int y1 = std::min(y0 + 1, h - 1);
                const double fx = x - x0;
                const double fy = y - y0;
                double dx = 0.0, dy = 0.0;
                for (int ch = 0; ch < c; ++ch) {
                    const double go = g[static_cast<int64_t>(i) * c + ch];
                    if (go == 0.0) continue;
                    const int64_t i00 = (static_cast<int64_t>(y0) * w + x0) * c + ch;
                    const int64_t i01 = (static_cast<int64_t>(y0) * w + x1) * c + ch;
                    const int64_t i10 = (static_cast<int64_t>(y1) * w + x0) * c + ch;
                    const int64_t i11 = (static_cast<int64_t>(y1) * w + x1) * c + ch;
                    if (grid.requires_grad()) {
                        ggrid[i00] += go * (1 - fy) * (1 - fx);
                        ggrid[i01] += go * (1 - fy) * fx;
                        ggrid[i10] += go * fy * (1 - fx);
                        ggrid[i11] += go * fy * fx;
                    }
                    const double v00 = gdat[i00], v01 = gdat[i01];
                    const double v10 = gdat[i10], v11 = gdat[i11];
                    dx += go * ((1 - fy) * (v01 - v00) + fy * (v11 - v10));
                    dy += go * ((1 - fx) * (v10 - v00) + fx * (v11 - v01));
                }
                if (pts.requires_grad()) {
                    gpts[i * 2 + 0] = cx ? 0.0 : dx;
                    gpts[i * 2 + 1] = cy ? 0.0 : dy;
                }
            }
            if (grid.requires_grad()) accumulate_grad(grid, ggrid);
            if (pts.requires_grad()) accumulate_grad(pts, gpts);
        });
    }
    return out;
}

// ---- generic dispatch --------------------------------------------------------

Value op_forward(const std::string& name, const std::vector<Value>& inputs, const Attrs& attrs) {
    auto need = [&](size_t n) {
        if (inputs.size() != n)
            throw std::invalid_argument("op '" + name + "': expected " + std::to_string(n) +
                                        " inputs, got " + std::to_string(inputs.size()));
    };
    if (name == "matmul") { need(2); return matmul(inputs[0], inputs[1]); }
    if (name == "add") { need(2); return add(inputs[0], inputs[1]); }
    if (name == "mul") { need(2); return mul(inputs[0], inputs[1]); }
    if (name == "sub") { need(2); return sub(inputs[0], inputs[1]); }
    if (name == "div") { need(2); return divide(inputs[0], inputs[1]); }
    if (name == "exp") { need(1); return vexp(inputs[0]); }
    if (name == "log") { need(1); return vlog(inputs[0]); }
    if (name == "sigmoid") { need(1); return sigmoid(inputs[0]); }
    if (name == "softmax") {
        need(1);
        return softmax(inputs[0], attrs.axes.empty() ? -1 : attrs.axes[0]);
    }
    if (name == "layernorm") { need(1); return layernorm(inputs[0]); }
    if (name == "relu") { need(1); return relu(inputs[0]); }
    if (name == "gelu") { need(1); return gelu(inputs[0]); }
    if (name == "concat") return concat(inputs, attrs.axes.empty() ? 0 : attrs.axes[0]);
    if (name == "slice") { need(1); return slice(inputs[0], attrs.axes, attrs.sizes); }
    if (name == "reshape") { need(1); return reshape(inputs[0], attrs.sizes); }
    if (name == "transpose") { need(1); return transpose(inputs[0], attrs.axes); }
    if (name == "sum") {
        need(1);
        if (attrs.axes.empty()) return sum(inputs[0]);
        return sum(inputs[0], attrs.axes[0], attrs.keepdims);
    }
    if (name == "mean") {
        need(1);
        if (attrs.axes.empty()) return mean(inputs[0]);
        return mean(inputs[0], attrs.axes[0], attrs.keepdims);
    }
    if (name == "cross3") { need(2); return cross3(inputs[0], inputs[1]); }
    if (name == "l2norm") {
        need(1);
        return l2norm(inputs[0], attrs.axes.empty() ? -1 : attrs.axes[0], attrs.keepdims);
    }
    if (name == "bilinear_sample_2d") {
        need(2);
        Value grid = inputs[0];
        if (grid.rank() == 2) grid = reshape(grid, {grid.shape()[0], grid.shape()[1], 1});
        return bilinear_sample(grid, inputs[1]);
    }
    throw std::invalid_argument("op_forward: unknown op-identifier '" + name + "'");
}

// ---- grad check ---------------------------------------------------------------

double grad_check(const std::function<Value(const Value&)>& f, const Value& x, double eps) {
    if (eps < 1e-7 || eps > 1e-3) throw std::invalid_argument("grad_check: eps out of [1e-7,1e-3]");
    Value var(x.shape(), x.data(), true);
    Graph g;
    std::vector<double> analytic;
    {
        GraphScope scope(g);
        Value y = f(var);
        if (y.size() != 1) throw std::invalid_argument("grad_check: f must return a scalar");
        if (!std::isfinite(y.item())) throw std::runtime_error("grad_check: non-finite f(x)");
        g.backward(y);
        analytic = var.has_grad() ? var.grad() : std::vector<double>(var.size(), 0.0);
    }
    double worst = 0.0;
    std::vector<double> probe = x.data();
    for (int64_t i = 0; i < x.size(); ++i) {
        const double orig = probe[i];
        probe[i] = orig + eps;
        const double fp = f(Value(x.shape(), probe)).item();
        probe[i] = orig - eps;
        const double fm = f(Value(x.shape(), probe)).item();
        probe[i] = orig;
        if (!std::isfinite(fp) || !std::isfinite(fm))
            throw std::runtime_error("grad_check: non-finite evaluation");
        const double numeric = (fp - fm) / (2.0 * eps);
        const double err = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i]));
        worst = std::max(worst, err);
    }
    return worst;
}

}  // namespace splatpose::ad

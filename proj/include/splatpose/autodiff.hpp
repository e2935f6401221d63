#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <variant>
#include <vector>

// Dense tensors with reverse-mode differentiation. Ops execute eagerly and,
// when a Graph is active and any input requires grad, append a node to the
// tape. backward() walks the tape in reverse execution order, which is a
// valid topological order by construction.
namespace splatpose::ad {

enum class DType { f64, f32 };

struct ValueImpl;
class Graph;

class Value {
  public:
    Value() = default;
    Value(std::vector<int> shape, std::vector<double> data, bool requires_grad = false,
          DType dtype = DType::f64);

    static Value zeros(std::vector<int> shape);
    static Value full(std::vector<int> shape, double v);
    static Value scalar(double v);
    // Leaf tensor participating in optimization.
    static Value param(std::vector<int> shape, std::vector<double> data);

    bool defined() const { return impl_ != nullptr; }
    const std::vector<int>& shape() const;
    int64_t size() const;
    int rank() const;
    bool requires_grad() const;
    DType dtype() const;

    const std::vector<double>& data() const;
    // Direct mutation is only safe on leaves between graph builds (optimizer
    // updates); mutating a value saved by a live graph invalidates replay.
    std::vector<double>& mutable_data();

    bool has_grad() const;
    const std::vector<double>& grad() const;
    std::vector<double>& grad_or_init();
    void clear_grad();

    double item() const;                      // requires size()==1
    double at(std::initializer_list<int>) const;

    ValueImpl* impl() const { return impl_.get(); }

  private:
    friend class Graph;
    std::shared_ptr<ValueImpl> impl_;
};

struct Node {
    std::vector<Value> inputs;
    Value output;
    std::string name;
    virtual ~Node() = default;
    // Reads output grad, accumulates into grads of inputs that require grad.
    virtual void backward() = 0;
};

class Graph {
  public:
    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    // Accumulates d(root)/d(leaf) into every requires-grad leaf reachable
    // from root. root must be scalar (size 1).
    void backward(const Value& root);

    // Clears grads on every value touched by this graph (for replay tests
    // and between optimizer steps).
    void zero_all_grads();

    size_t num_nodes() const { return nodes_.size(); }
    void record(std::unique_ptr<Node> node);

  private:
    std::vector<std::unique_ptr<Node>> nodes_;
};

// Thread-local active recording graph.
Graph* active_graph();

class GraphScope {
  public:
    explicit GraphScope(Graph& g);
    ~GraphScope();
    GraphScope(const GraphScope&) = delete;
    GraphScope& operator=(const GraphScope&) = delete;

  private:
    Graph* prev_;
};

class NoGradGuard {
  public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

  private:
    Graph* prev_;
};

// ---- op set -----------------------------------------------------------

Value add(const Value& a, const Value& b);
Value sub(const Value& a, const Value& b);
Value mul(const Value& a, const Value& b);
Value divide(const Value& a, const Value& b);
Value scale(const Value& a, double s);
Value add_scalar(const Value& a, double s);
Value neg(const Value& a);

Value vexp(const Value& a);
Value vlog(const Value& a);
Value vsqrt(const Value& a);
Value sigmoid(const Value& a);
Value relu(const Value& a);
Value gelu(const Value& a);
Value clamp(const Value& a, double lo, double hi);

Value matmul(const Value& a, const Value& b);           // (m,k)x(k,n)
Value softmax(const Value& a, int axis = -1);
Value layernorm(const Value& a, double eps = 1e-5);     // over last axis
Value cross3(const Value& a, const Value& b);           // (...,3) rowwise
Value l2norm(const Value& a, int axis = -1, bool keepdims = true);

Value reshape(const Value& a, std::vector<int> shape);
Value transpose(const Value& a, std::vector<int> perm = {});
Value concat(const std::vector<Value>& parts, int axis);
Value slice(const Value& a, const std::vector<int>& starts, const std::vector<int>& sizes);
Value take_rows(const Value& a, const std::vector<int>& indices);

Value sum(const Value& a);
Value sum(const Value& a, int axis, bool keepdims = false);
Value mean(const Value& a);
Value mean(const Value& a, int axis, bool keepdims = false);

// grid: (H,W,C); pts: (N,2) as (x,y) in grid-index units. Out-of-range
// coordinates are border-clamped; the coordinate gradient is zero there.
Value bilinear_sample(const Value& grid, const Value& pts);

// ---- generic dispatch --------------------------------------------------

struct Attrs {
    std::vector<int> axes;   // axis / perm / starts, op dependent
    std::vector<int> sizes;  // slice sizes / reshape target
    double scalar = 0.0;
    bool keepdims = false;
};

// Dispatches on the supported op-identifier set; throws on unknown names
// and on shape mismatches (message names the op and the shapes).
Value op_forward(const std::string& name, const std::vector<Value>& inputs,
                 const Attrs& attrs = {});

// ---- utilities ---------------------------------------------------------

// Registers a node with an arbitrary backward. Used by fused ops (renderer,
// camera solves) that keep their own saved state.
void record_node(std::unique_ptr<Node> node);
bool recording_for(const std::vector<Value>& inputs);

// Accumulate g into v's grad buffer if v requires grad.
void accumulate_grad(const Value& v, const std::vector<double>& g);

// Max over coordinates of |analytic - central difference| / max(1, |analytic|).
// f must be deterministic; eps in [1e-7, 1e-3]. Throws on non-finite values.
double grad_check(const std::function<Value(const Value&)>& f, const Value& x, double eps);

std::string shape_str(const std::vector<int>& shape);
int64_t shape_numel(const std::vector<int>& shape);

}  // namespace splatpose::ad

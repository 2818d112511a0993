#include "mpq/tensor.hpp"

#include <atomic>
#include <sstream>
#include <unordered_set>

#include "mpq/errors.hpp"

namespace mpq {

namespace {

std::atomic<std::uint64_t> g_next_id{1};
thread_local bool g_checked = true;

}  // namespace

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t extent : shape) n *= extent;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << "x";
        os << shape[i];
    }
    os << ']';
    return os.str();
}

void set_checked_mode(bool on) { g_checked = on; }
bool checked_mode() { return g_checked; }

Tensor::Tensor() = default;

Tensor::Tensor(Shape shape, float fill, bool requires_grad)
    : impl_(std::make_shared<Impl>()) {
    for (std::size_t extent : shape) {
        if (extent == 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
    }
    impl_->data.assign(shape_numel(shape), fill);
    impl_->shape = std::move(shape);
    impl_->requires_grad = requires_grad;
    impl_->id = g_next_id.fetch_add(1, std::memory_order_relaxed);
}

Tensor::Tensor(Shape shape, std::vector<float> data, bool requires_grad)
    : impl_(std::make_shared<Impl>()) {
    for (std::size_t extent : shape) {
        if (extent == 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
    }
    if (shape_numel(shape) != data.size()) {
        throw ShapeError("shape " + shape_str(shape) + " needs " + std::to_string(shape_numel(shape)) +
                         " values, got " + std::to_string(data.size()));
    }
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
    impl_->requires_grad = requires_grad;
    impl_->id = g_next_id.fetch_add(1, std::memory_order_relaxed);
}

Tensor Tensor::scalar(float value, bool requires_grad) { return Tensor({1}, value, requires_grad); }

const Shape& Tensor::shape() const { return impl_->shape; }
std::size_t Tensor::numel() const { return impl_->data.size(); }

std::size_t Tensor::rows() const {
    const Shape& s = impl_->shape;
    if (s.size() <= 1) return 1;
    return shape_numel(s) / s.back();
}

std::size_t Tensor::cols() const { return impl_->shape.empty() ? 1 : impl_->shape.back(); }

std::span<float> Tensor::data() { return impl_->data; }
std::span<const float> Tensor::data() const { return impl_->data; }

float Tensor::item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return impl_->data[0];
}

bool Tensor::requires_grad() const { return impl_->requires_grad; }
void Tensor::set_requires_grad(bool on) { impl_->requires_grad = on; }

std::span<float> Tensor::grad() {
    if (impl_->grad.size() != impl_->data.size()) impl_->grad.assign(impl_->data.size(), 0.0f);
    return impl_->grad;
}

std::span<const float> Tensor::grad() const {
    if (impl_->grad.size() != impl_->data.size()) impl_->grad.assign(impl_->data.size(), 0.0f);
    return impl_->grad;
}

bool Tensor::has_grad() const { return impl_->grad.size() == impl_->data.size(); }

void Tensor::zero_grad() {
    if (has_grad()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0f);
}

const std::shared_ptr<Op>& Tensor::producer() const { return impl_->producer; }
void Tensor::set_producer(std::shared_ptr<Op> op) { impl_->producer = std::move(op); }

Tensor Tensor::clone() const { return Tensor(impl_->shape, impl_->data, false); }

std::uint64_t Tensor::id() const { return impl_->id; }

std::size_t Graph::index_of(const Tensor& t) const {
    auto it = position.find(t.id());
    return it == position.end() ? nodes.size() : it->second;
}

Graph build_graph(const Tensor& root) {
    Graph graph;
    // Iterative post-order DFS: a node is emitted after all of its inputs.
    struct Frame {
        Tensor t;
        std::size_t next_input;
    };
    std::unordered_set<std::uint64_t> visited;
    std::vector<Frame> stack;
    stack.push_back({root, 0});
    visited.insert(root.id());
    while (!stack.empty()) {
        Frame& top = stack.back();
        const auto& op = top.t.producer();
        if (op && top.next_input < op->inputs.size()) {
            const Tensor& in = op->inputs[top.next_input++];
            if (visited.insert(in.id()).second) stack.push_back({in, 0});
            continue;
        }
        graph.position.emplace(top.t.id(), graph.nodes.size());
        graph.nodes.push_back(top.t);
        stack.pop_back();
    }
    return graph;
}

std::vector<Tensor> gradient(const Tensor& loss, std::span<const Tensor> params) {
    if (loss.numel() != 1) throw ShapeError("gradient() needs a scalar loss, got " + shape_str(loss.shape()));
    Graph graph = build_graph(loss);
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (!graph.contains(params[i]) || !params[i].requires_grad()) {
            throw MissingDependencyError("parameter #" + std::to_string(i) + " of shape " +
                                         shape_str(params[i].shape()) + " does not reach the loss");
        }
    }
    for (Tensor& node : graph.nodes) {
        if (node.requires_grad()) {
            node.grad();
            node.zero_grad();
        }
    }
    Tensor seed = loss;
    seed.grad()[0] = 1.0f;
    for (std::size_t i = graph.nodes.size(); i-- > 0;) {
        const Tensor& node = graph.nodes[i];
        if (node.producer() && node.requires_grad()) node.producer()->backward(node);
    }
    std::vector<Tensor> grads;
    grads.reserve(params.size());
    for (const Tensor& p : params) {
        auto g = p.grad();
        grads.emplace_back(p.shape(), std::vector<float>(g.begin(), g.end()));
    }
    return grads;
}

}  // namespace mpq

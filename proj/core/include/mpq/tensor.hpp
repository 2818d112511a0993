#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace mpq {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tensor;

/// A primitive operation recorded in the differentiation graph. The output
/// tensor owns its producer; the producer owns its inputs, so a graph stays
/// alive exactly as long as the tensors computed from it.
class Op {
public:
    virtual ~Op() = default;
    virtual const char* name() const = 0;
    /// Accumulates d(loss)/d(input) into every input that requires a gradient,
    /// given d(loss)/d(output) in `out.grad()`.
    virtual void backward(const Tensor& out) = 0;

    std::vector<Tensor> inputs;
};

/// Dense row-major float32 array with optional gradient. Copies share
/// storage; use clone() for a detached deep copy.
class Tensor {
public:
    Tensor();
    explicit Tensor(Shape shape, float fill = 0.0f, bool requires_grad = false);
    Tensor(Shape shape, std::vector<float> data, bool requires_grad = false);

    static Tensor scalar(float value, bool requires_grad = false);

    const Shape& shape() const;
    std::size_t numel() const;
    std::size_t dim() const { return shape().size(); }
    /// Leading extent of a 2-D tensor, 1 for a vector.
    std::size_t rows() const;
    /// Trailing extent.
    std::size_t cols() const;

    std::span<float> data();
    std::span<const float> data() const;
    float item() const;

    bool requires_grad() const;
    void set_requires_grad(bool on);

    /// Gradient buffer; allocated (zeroed) on first access.
    std::span<float> grad();
    std::span<const float> grad() const;
    bool has_grad() const;
    void zero_grad();

    const std::shared_ptr<Op>& producer() const;
    void set_producer(std::shared_ptr<Op> op);

    /// Deep copy of shape and data; no gradient, no producer.
    Tensor clone() const;
    /// Same storage identity.
    bool is(const Tensor& other) const { return impl_ == other.impl_; }
    bool defined() const { return impl_ != nullptr; }
    std::uint64_t id() const;

private:
    struct Impl {
        Shape shape;
        std::vector<float> data;
        std::vector<float> grad;
        bool requires_grad = false;
        std::shared_ptr<Op> producer;
        std::uint64_t id = 0;
    };
    std::shared_ptr<Impl> impl_;
};

/// Topologically ordered view of every tensor reachable from a root.
struct Graph {
    std::vector<Tensor> nodes;
    std::unordered_map<std::uint64_t, std::size_t> position;

    /// Position of `t` in `nodes`, or nodes.size() when absent.
    std::size_t index_of(const Tensor& t) const;
    bool contains(const Tensor& t) const { return index_of(t) < nodes.size(); }
};

Graph build_graph(const Tensor& root);

/// Reverse-mode derivative of a scalar `loss` with respect to each of
/// `params`. Gradients are also left in each param's grad buffer.
/// Throws MissingDependencyError when a param is not an ancestor of `loss`.
std::vector<Tensor> gradient(const Tensor& loss, std::span<const Tensor> params);

/// When enabled (the default), every primitive rejects non-finite outputs.
void set_checked_mode(bool on);
bool checked_mode();

}  // namespace mpq

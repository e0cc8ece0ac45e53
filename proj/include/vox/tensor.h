#pragma once

#include "vox/prec.h"

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

VOX_BEGIN

using Shape = std::vector<size_t>;

size_t shape_numel(const Shape & shape);
std::string shape_str(const Shape & shape);

struct TensorNode {
    Shape shape;
    std::vector<real> data;
    std::vector<real> grad;  // empty until a gradient is accumulated
    bool requires_grad = false;
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(TensorNode &)> backward_fn;

    void accumulate(std::span<const real> g);
    std::vector<real> & grad_buffer();
};

// Dense row-major tensor handle with reverse-mode autodiff. Copies share the
// underlying node; use clone() for a deep copy.
class Tensor {
public:
    Tensor() = default;
    Tensor(Shape shape, std::vector<real> data, bool requires_grad = false);
    explicit Tensor(std::shared_ptr<TensorNode> node) : node_(std::move(node)) {}

    static Tensor zeros(const Shape & shape, bool requires_grad = false);
    static Tensor full(const Shape & shape, real value, bool requires_grad = false);
    static Tensor scalar(real value, bool requires_grad = false);
    static Tensor from(std::initializer_list<real> values, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape & shape() const;
    size_t ndim() const { return shape().size(); }
    size_t dim(size_t i) const;
    size_t numel() const;

    std::span<const real> data() const;
    std::span<real> mutable_data();
    real item() const;
    real operator[](size_t i) const { return data()[i]; }

    bool requires_grad() const;
    void set_requires_grad(bool flag);
    bool has_grad() const;
    std::span<const real> grad() const;
    std::span<real> mutable_grad();
    void zero_grad();

    // deep copy of value only (no graph)
    Tensor clone(bool requires_grad = false) const;
    std::vector<real> to_vector() const;

    const std::shared_ptr<TensorNode> & node() const { return node_; }

private:
    std::shared_ptr<TensorNode> node_;
};

// Runs reverse-mode accumulation from a scalar loss. Interior nodes are
// released afterwards; leaves keep their gradients.
void backward(const Tensor & loss);

bool grad_enabled();

class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard &) = delete;
    NoGradGuard & operator=(const NoGradGuard &) = delete;

private:
    bool prev_;
};

// Builds a result node. When gradient tracking applies, `parents` are
// recorded and `fn` is invoked during backward with the result node.
Tensor make_result(Shape shape, std::vector<real> data, std::vector<Tensor> parents,
                   std::function<void(TensorNode &)> fn);

VOX_END

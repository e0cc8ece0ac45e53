#include "vox/tensor.h"

#include <algorithm>
#include <stdexcept>
#include <unordered_set>

VOX_BEGIN

namespace {
thread_local bool g_grad_enabled = true;
}

size_t shape_numel(const Shape & shape) {
    size_t n = 1;
    for (size_t d : shape) {
        n *= d;
    }
    return n;
}

std::string shape_str(const Shape & shape) {
    std::string s = "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

std::vector<real> & TensorNode::grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), real(0));
    return grad;
}

void TensorNode::accumulate(std::span<const real> g) {
    auto & buf = grad_buffer();
    for (size_t i = 0; i < buf.size(); ++i) {
        buf[i] += g[i];
    }
}

Tensor::Tensor(Shape shape, std::vector<real> data, bool requires_grad) {
    if (shape_numel(shape) != data.size()) {
        throw std::invalid_argument("Tensor: data length " + std::to_string(data.size()) +
                                    " does not match shape " + shape_str(shape));
    }
    node_ = std::make_shared<TensorNode>();
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(const Shape & shape, bool requires_grad) {
    return Tensor(shape, std::vector<real>(shape_numel(shape), real(0)), requires_grad);
}

Tensor Tensor::full(const Shape & shape, real value, bool requires_grad) {
    return Tensor(shape, std::vector<real>(shape_numel(shape), value), requires_grad);
}

Tensor Tensor::scalar(real value, bool requires_grad) {
    return Tensor({}, {value}, requires_grad);
}

Tensor Tensor::from(std::initializer_list<real> values, bool requires_grad) {
    return Tensor({values.size()}, std::vector<real>(values), requires_grad);
}

const Shape & Tensor::shape() const {
    if (!node_) throw std::logic_error("Tensor: undefined");
    return node_->shape;
}

size_t Tensor::dim(size_t i) const {
    const auto & s = shape();
    if (i >= s.size()) throw std::out_of_range("Tensor::dim: axis out of range");
    return s[i];
}

size_t Tensor::numel() const { return node_ ? node_->data.size() : 0; }

std::span<const real> Tensor::data() const {
    if (!node_) throw std::logic_error("Tensor: undefined");
    return node_->data;
}

std::span<real> Tensor::mutable_data() {
    if (!node_) throw std::logic_error("Tensor: undefined");
    return node_->data;
}

real Tensor::item() const {
    if (numel() != 1) throw std::logic_error("Tensor::item: tensor has " + std::to_string(numel()) + " elements");
    return node_->data[0];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

void Tensor::set_requires_grad(bool flag) {
    if (!node_) throw std::logic_error("Tensor: undefined");
    node_->requires_grad = flag;
}

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

std::span<const real> Tensor::grad() const {
    if (!node_) throw std::logic_error("Tensor: undefined");
    return node_->grad_buffer();
}

std::span<real> Tensor::mutable_grad() {
    if (!node_) throw std::logic_error("Tensor: undefined");
    return node_->grad_buffer();
}

void Tensor::zero_grad() {
    if (node_) node_->grad.clear();
}

Tensor Tensor::clone(bool requires_grad) const { return Tensor(shape(), node_->data, requires_grad); }

std::vector<real> Tensor::to_vector() const {
    auto d = data();
    return {d.begin(), d.end()};
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

Tensor make_result(Shape shape, std::vector<real> data, std::vector<Tensor> parents,
                   std::function<void(TensorNode &)> fn) {
    Tensor out(std::move(shape), std::move(data));
    if (!g_grad_enabled) return out;
    bool any = std::any_of(parents.begin(), parents.end(), [](const Tensor & p) { return p.requires_grad(); });
    if (!any) return out;
    auto & node = *out.node();
    node.requires_grad = true;
    for (auto & p : parents) {
        node.parents.push_back(p.node());
    }
    node.backward_fn = std::move(fn);
    return out;
}

void backward(const Tensor & loss) {
    if (!loss.defined() || loss.numel() != 1) {
        throw std::invalid_argument("backward: loss must be a scalar tensor");
    }
    if (!loss.requires_grad()) return;

    // iterative post-order DFS
    std::vector<TensorNode *> order;
    std::unordered_set<TensorNode *> seen;
    std::vector<std::pair<TensorNode *, size_t>> stack;
    stack.emplace_back(loss.node().get(), 0);
    seen.insert(loss.node().get());
    while (!stack.empty()) {
        auto & [n, idx] = stack.back();
        if (idx < n->parents.size()) {
            TensorNode * p = n->parents[idx++].get();
            if (p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }

    loss.node()->grad_buffer()[0] += real(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorNode * n = *it;
        if (n->backward_fn && !n->grad.empty()) {
            n->backward_fn(*n);
        }
    }
    for (TensorNode * n : order) {
        if (n->backward_fn) {
            n->backward_fn = nullptr;
            n->parents.clear();
            n->grad.clear();
        }
    }
}

VOX_END

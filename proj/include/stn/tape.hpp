#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <limits>
#include <utility>
#include <vector>

#include "stn/errors.hpp"
#include "stn/tensor.hpp"

namespace stn {

// Handle into a Tape. Vars are only meaningful for the tape that issued them.
struct Var {
    uint32_t id = std::numeric_limits<uint32_t>::max();
    bool valid() const { return id != std::numeric_limits<uint32_t>::max(); }
};

// Append-only record of a forward pass (define-by-run). Nodes are stored in
// topological order by construction; one reverse sweep propagates gradients.
template <typename T>
class Tape {
  public:
    using BackwardFn = std::function<void(Tape&, Var, const Tensor<T>&)>;

    Var leaf(Tensor<T> value, bool requires_grad = false) {
        nodes_.push_back(Node{std::move(value), Tensor<T>{}, nullptr, requires_grad});
        return Var{static_cast<uint32_t>(nodes_.size() - 1)};
    }

    // Records an op result. `fn` receives the node itself and its accumulated
    // output gradient and must add input contributions via grad_buffer().
    Var record(Tensor<T> value, std::initializer_list<Var> inputs, BackwardFn fn) {
        bool req = false;
        for (Var v : inputs) req = req || nodes_[v.id].requires_grad;
        nodes_.push_back(Node{std::move(value), Tensor<T>{}, req ? std::move(fn) : nullptr, req});
        return Var{static_cast<uint32_t>(nodes_.size() - 1)};
    }

    Var record(Tensor<T> value, const std::vector<Var>& inputs, BackwardFn fn) {
        bool req = false;
        for (Var v : inputs) req = req || nodes_[v.id].requires_grad;
        nodes_.push_back(Node{std::move(value), Tensor<T>{}, req ? std::move(fn) : nullptr, req});
        return Var{static_cast<uint32_t>(nodes_.size() - 1)};
    }

    const Tensor<T>& val(Var v) const { return nodes_[v.id].value; }

    bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }

    // Gradient buffer, allocated as zeros on first access.
    Tensor<T>& grad_buffer(Var v) {
        Node& n = nodes_[v.id];
        if (n.grad.empty()) n.grad = Tensor<T>::zeros(n.value.shape());
        return n.grad;
    }

    // Gradient of a leaf after backward(); zeros if the loss never used it.
    const Tensor<T>& grad(Var v) { return grad_buffer(v); }

    void backward(Var loss) {
        if (val(loss).size() != 1)
            throw ContractError("backward requires a scalar loss, got shape " +
                                shape_str(val(loss).shape()));
        for (Node& n : nodes_) n.grad = Tensor<T>{};
        grad_buffer(loss)[0] = T(1);
        for (uint32_t i = loss.id + 1; i-- > 0;) {
            Node& n = nodes_[i];
            if (!n.requires_grad || !n.backward || n.grad.empty()) continue;
            n.backward(*this, Var{i}, n.grad);
        }
    }

    size_t size() const { return nodes_.size(); }

    void clear() { nodes_.clear(); }

  private:
    struct Node {
        Tensor<T> value;
        Tensor<T> grad;
        BackwardFn backward;
        bool requires_grad = false;
    };

    // deque keeps value/grad references stable while ops append nodes
    std::deque<Node> nodes_;
};

using TapeF = Tape<float>;
using TapeD = Tape<double>;

}  // namespace stn

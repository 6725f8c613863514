#pragma once

#include <deque>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "mhc/tensor.hpp"

namespace mhc {

// A named trainable tensor plus its accumulated gradient.
template <typename Scalar>
struct Parameter {
    std::string name;
    Tensor<Scalar> value;
    Tensor<Scalar> grad;

    Parameter() = default;
    Parameter(std::string n, Tensor<Scalar> v)
        : name(std::move(n)), value(std::move(v)), grad(Tensor<Scalar>::zeros(value.shape())) {}

    void zero_grad() { std::fill(grad.storage().begin(), grad.storage().end(), Scalar(0)); }
};

template <typename Scalar>
class Graph;

template <typename Scalar>
struct NodeData {
    Tensor<Scalar> value;
    Tensor<Scalar> grad;  // allocated lazily, zero-initialized
    std::vector<NodeData*> parents;
    std::function<void(NodeData&)> backprop;  // pushes this->grad into parents
    Parameter<Scalar>* bound = nullptr;
    bool reachable = false;

    void ensure_grad() {
        if (grad.size() == 0) grad = Tensor<Scalar>::zeros(value.shape());
    }
};

// Lightweight handle into a Graph's tape.
template <typename Scalar>
class Node {
public:
    Node() = default;
    Node(NodeData<Scalar>* d, Graph<Scalar>* g) : data_(d), graph_(g) {}

    const Tensor<Scalar>& value() const { return data_->value; }
    const Tensor<Scalar>& grad() const {
        static const Tensor<Scalar> empty;
        return data_->grad.size() ? data_->grad : empty;
    }
    const Shape& shape() const { return data_->value.shape(); }

    NodeData<Scalar>* impl() const { return data_; }
    Graph<Scalar>* graph() const { return graph_; }
    explicit operator bool() const { return data_ != nullptr; }

private:
    NodeData<Scalar>* data_ = nullptr;
    Graph<Scalar>* graph_ = nullptr;
};

// Define-by-run tape. Nodes are appended in execution order, so the tape order
// is a valid topological order and the backward sweep is a single reverse pass
// over the reachable subset. With recording off the same forward kernels run
// but no parents or closures are kept (inference mode).
template <typename Scalar>
class Graph {
public:
    explicit Graph(bool recording = true) : recording_(recording) {}

    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    bool recording() const { return recording_; }

    // Constant / externally produced value.
    Node<Scalar> input(Tensor<Scalar> value) { return make("input", std::move(value), {}, nullptr); }

    // Leaf bound to a parameter; gradients land in p.grad after backward().
    // Repeated calls with the same parameter return the same node so that all
    // uses share one leaf and gradient contributions accumulate on it.
    Node<Scalar> param(Parameter<Scalar>& p) {
        auto it = param_nodes_.find(&p);
        if (it != param_nodes_.end()) return {it->second, this};
        Node<Scalar> n = make("param", p.value, {}, nullptr);
        n.impl()->bound = &p;
        param_nodes_.emplace(&p, n.impl());
        return n;
    }

    Node<Scalar> make(const char* op, Tensor<Scalar> value, std::vector<NodeData<Scalar>*> parents,
                      std::function<void(NodeData<Scalar>&)> backprop) {
        if (finite_checks()) value.require_finite(op);
        nodes_.emplace_back();
        NodeData<Scalar>& nd = nodes_.back();
        nd.value = std::move(value);
        if (recording_) {
            nd.parents = std::move(parents);
            nd.backprop = std::move(backprop);
        }
        return {&nd, this};
    }

    // Reverse-mode sweep from a scalar loss. Each reachable node is visited
    // exactly once, in reverse topological (= reverse creation) order.
    void backward(Node<Scalar> loss) {
        if (!recording_) throw std::logic_error("backward: graph was built with recording off");
        if (loss.value().size() != 1)
            throw std::invalid_argument("backward: loss must be scalar, got " +
                                        shape_str(loss.value().shape()));

        for (auto& n : nodes_) n.reachable = false;
        std::vector<NodeData<Scalar>*> stack{loss.impl()};
        loss.impl()->reachable = true;
        while (!stack.empty()) {
            NodeData<Scalar>* n = stack.back();
            stack.pop_back();
            for (NodeData<Scalar>* p : n->parents) {
                if (!p->reachable) {
                    p->reachable = true;
                    stack.push_back(p);
                }
            }
        }

        loss.impl()->ensure_grad();
        loss.impl()->grad[0] = Scalar(1);

        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
            if (!it->reachable) continue;
            if (it->backprop) {
                it->ensure_grad();
                it->backprop(*it);
            }
            if (it->bound && it->grad.size()) {
                auto& pg = it->bound->grad.storage();
                const auto& ng = it->grad.storage();
                for (std::size_t i = 0; i < pg.size(); ++i) pg[i] += ng[i];
            }
        }
    }

    std::size_t node_count() const { return nodes_.size(); }

private:
    bool recording_;
    std::deque<NodeData<Scalar>> nodes_;  // deque: stable addresses as the tape grows
    std::unordered_map<Parameter<Scalar>*, NodeData<Scalar>*> param_nodes_;
};

}  // namespace mhc

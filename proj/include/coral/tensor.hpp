// tensor.hpp
//
// Dense row-major tensors of doubles with tape-based reverse-mode
// differentiation. Every op that sees an input with requires_grad set records
// a node holding its inputs and a backward rule; Tensor::backward() orders the
// reachable nodes topologically and replays the rules in reverse.
//
// Only bias-add broadcasts (over the last dimension). Everything else needs
// exactly matching shapes.
#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numbers>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "coral/common.hpp"
#include "coral/random.hpp"

namespace coral {

using Shape = std::vector<std::size_t>;

inline std::string shape_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        os << (i ? "x" : "") << shape[i];
    }
    os << ']';
    return os.str();
}

inline std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

namespace detail {

struct Node {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;
    bool requires_grad = false;
    bool is_leaf = true;
    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void(Node&)> backward;

    void ensure_grad() {
        if (grad.size() != data.size()) {
            grad.assign(data.size(), 0.0);
        }
    }
};

inline thread_local bool grad_enabled = true;

}  // namespace detail

// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
public:
    NoGradGuard() : previous_(detail::grad_enabled) { detail::grad_enabled = false; }
    ~NoGradGuard() { detail::grad_enabled = previous_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

class Tensor {
public:
    Tensor() = default;

    Tensor(Shape shape, std::vector<double> data, bool requires_grad = false) : node_(std::make_shared<detail::Node>()) {
        for (auto d : shape) {
            if (d == 0) {
                throw DimensionError("tensor dimensions must be positive, got " + shape_string(shape));
            }
        }
        if (shape_numel(shape) != data.size()) {
            throw DimensionError("shape " + shape_string(shape) + " does not match " + std::to_string(data.size()) +
                                 " values");
        }
        node_->shape = std::move(shape);
        node_->data = std::move(data);
        node_->requires_grad = requires_grad;
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) { return full(std::move(shape), 0.0, requires_grad); }

    static Tensor full(Shape shape, double value, bool requires_grad = false) {
        const auto n = shape_numel(shape);
        return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
    }

    static Tensor scalar(double value, bool requires_grad = false) { return Tensor({1}, {value}, requires_grad); }

    bool defined() const noexcept { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t numel() const { return node_->data.size(); }
    std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t rows() const { return numel() / cols(); }
    std::size_t cols() const { return node_->shape.back(); }

    std::span<const double> data() const { return node_->data; }
    // In-place access for leaves (optimizer updates, test perturbations).
    std::span<double> mutable_data() { return node_->data; }

    double item() const {
        if (numel() != 1) {
            throw RankError("item() needs a single-element tensor, got " + shape_string(shape()));
        }
        return node_->data[0];
    }

    double at(std::size_t r, std::size_t c) const { return node_->data[r * cols() + c]; }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool value) { node_->requires_grad = value; }
    bool is_leaf() const { return node_->is_leaf; }

    bool has_grad() const { return !node_->grad.empty(); }
    std::span<const double> grad() const { return node_->grad; }
    std::span<double> mutable_grad() {
        node_->ensure_grad();
        return node_->grad;
    }
    void zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), 0.0); }

    // Accumulates d(this)/d(leaf) into every requires_grad leaf reachable
    // from this scalar. Repeated calls keep summing.
    void backward() const;

    Tensor detach() const { return Tensor(shape(), node_->data, false); }
    Tensor clone() const { return Tensor(shape(), node_->data, requires_grad()); }

    detail::Node* node() const noexcept { return node_.get(); }
    const std::shared_ptr<detail::Node>& node_ptr() const noexcept { return node_; }

private:
    std::shared_ptr<detail::Node> node_;
};

// Topologically ordered record of the operations reachable from a root.
struct Tape {
    std::vector<detail::Node*> nodes;

    static Tape record(const Tensor& root) {
        Tape tape;
        std::unordered_set<const detail::Node*> seen;
        // Iterative post-order DFS: inputs are appended before their consumers.
        std::vector<std::pair<detail::Node*, std::size_t>> stack;
        stack.emplace_back(root.node(), 0);
        seen.insert(root.node());
        while (!stack.empty()) {
            auto& [node, next] = stack.back();
            if (next < node->inputs.size()) {
                detail::Node* child = node->inputs[next++].get();
                if (child->requires_grad && seen.insert(child).second) {
                    stack.emplace_back(child, 0);
                }
                continue;
            }
            tape.nodes.push_back(node);
            stack.pop_back();
        }
        return tape;
    }
};

inline void Tensor::backward() const {
    if (numel() != 1) {
        throw RankError("backward() needs a scalar loss, got shape " + shape_string(shape()));
    }
    if (!requires_grad()) {
        return;
    }
    const Tape tape = Tape::record(*this);
    for (auto* node : tape.nodes) {
        if (!node->is_leaf) {
            node->grad.assign(node->data.size(), 0.0);
        }
    }
    node_->ensure_grad();
    node_->grad[0] += 1.0;
    for (auto it = tape.nodes.rbegin(); it != tape.nodes.rend(); ++it) {
        if (!(*it)->is_leaf && (*it)->backward) {
            (*it)->backward(**it);
        }
    }
}

namespace detail {

inline bool any_requires_grad(std::initializer_list<const Tensor*> inputs) {
    if (!grad_enabled) {
        return false;
    }
    for (const auto* t : inputs) {
        if (t->requires_grad()) {
            return true;
        }
    }
    return false;
}

inline Tensor make_result(Shape shape, std::vector<double> data, std::initializer_list<const Tensor*> inputs,
                          std::function<void(Node&)> rule) {
    Tensor out(std::move(shape), std::move(data), false);
    if (any_requires_grad(inputs)) {
        auto* node = out.node();
        node->requires_grad = true;
        node->is_leaf = false;
        for (const auto* t : inputs) {
            node->inputs.push_back(t->node_ptr());
        }
        node->backward = std::move(rule);
    }
    return out;
}

inline Tensor make_result_many(Shape shape, std::vector<double> data, const std::vector<Tensor>& inputs,
                               std::function<void(Node&)> rule) {
    Tensor out(std::move(shape), std::move(data), false);
    bool needs = false;
    for (const auto& t : inputs) {
        needs = needs || t.requires_grad();
    }
    if (grad_enabled && needs) {
        auto* node = out.node();
        node->requires_grad = true;
        node->is_leaf = false;
        for (const auto& t : inputs) {
            node->inputs.push_back(t.node_ptr());
        }
        node->backward = std::move(rule);
    }
    return out;
}

inline void require_matrix(const Tensor& t, const char* op) {
    if (t.rank() != 2) {
        throw DimensionError(std::string(op) + " expects a matrix, got " + shape_string(t.shape()));
    }
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                             shape_string(b.shape()));
    }
}

}  // namespace detail

// a[m×k] · b[k×n]
inline Tensor matmul(const Tensor& a, const Tensor& b) {
    detail::require_matrix(a, "matmul");
    detail::require_matrix(b, "matmul");
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k) {
        throw DimensionError("matmul: inner dimensions differ, " + shape_string(a.shape()) + " vs " +
                             shape_string(b.shape()));
    }
    std::vector<double> out(m * n, 0.0);
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    for (std::size_t i = 0; i < m; ++i) {
        double* row = out.data() + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double s = pa[i * k + p];
            const double* brow = pb + p * n;
            for (std::size_t j = 0; j < n; ++j) {
                row[j] += s * brow[j];
            }
        }
    }
    auto* na = a.node();
    auto* nb = b.node();
    return detail::make_result({m, n}, std::move(out), {&a, &b}, [na, nb, m, k, n](detail::Node& self) {
        const double* g = self.grad.data();
        if (na->requires_grad) {
            na->ensure_grad();
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t p = 0; p < k; ++p) {
                    double acc = 0.0;
                    const double* brow = nb->data.data() + p * n;
                    for (std::size_t j = 0; j < n; ++j) {
                        acc += g[i * n + j] * brow[j];
                    }
                    na->grad[i * k + p] += acc;
                }
            }
        }
        if (nb->requires_grad) {
            nb->ensure_grad();
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t p = 0; p < k; ++p) {
                    const double s = na->data[i * k + p];
                    double* grow = nb->grad.data() + p * n;
                    for (std::size_t j = 0; j < n; ++j) {
                        grow[j] += s * g[i * n + j];
                    }
                }
            }
        }
    });
}

// a[m×k] · b[n×k]ᵀ
inline Tensor matmul_bt(const Tensor& a, const Tensor& b) {
    detail::require_matrix(a, "matmul_bt");
    detail::require_matrix(b, "matmul_bt");
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
    if (b.dim(1) != k) {
        throw DimensionError("matmul_bt: inner dimensions differ, " + shape_string(a.shape()) + " vs " +
                             shape_string(b.shape()) + "^T");
    }
    std::vector<double> out(m * n);
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (std::size_t p = 0; p < k; ++p) {
                acc += pa[i * k + p] * pb[j * k + p];
            }
            out[i * n + j] = acc;
        }
    }
    auto* na = a.node();
    auto* nb = b.node();
    return detail::make_result({m, n}, std::move(out), {&a, &b}, [na, nb, m, k, n](detail::Node& self) {
        const double* g = self.grad.data();
        if (na->requires_grad) {
            na->ensure_grad();
            for (std::size_t i = 0; i < m; ++i) {
                double* arow = na->grad.data() + i * k;
                for (std::size_t j = 0; j < n; ++j) {
                    const double s = g[i * n + j];
                    const double* brow = nb->data.data() + j * k;
                    for (std::size_t p = 0; p < k; ++p) {
                        arow[p] += s * brow[p];
                    }
                }
            }
        }
        if (nb->requires_grad) {
            nb->ensure_grad();
            for (std::size_t i = 0; i < m; ++i) {
                const double* arow = na->data.data() + i * k;
                for (std::size_t j = 0; j < n; ++j) {
                    const double s = g[i * n + j];
                    double* brow = nb->grad.data() + j * k;
                    for (std::size_t p = 0; p < k; ++p) {
                        brow[p] += s * arow[p];
                    }
                }
            }
        }
    });
}

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "add");
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = a.data()[i] + b.data()[i];
    }
    auto* na = a.node();
    auto* nb = b.node();
    return detail::make_result(a.shape(), std::move(out), {&a, &b}, [na, nb](detail::Node& self) {
        for (auto* in : {na, nb}) {
            if (in->requires_grad) {
                in->ensure_grad();
                for (std::size_t i = 0; i < self.grad.size(); ++i) {
                    in->grad[i] += self.grad[i];
                }
            }
        }
    });
}

// x[..×d] + bias[d], broadcast over every leading position.
inline Tensor add_bias(const Tensor& x, const Tensor& bias) {
    if (bias.rank() != 1 || bias.dim(0) != x.cols()) {
        throw DimensionError("add_bias: bias " + shape_string(bias.shape()) + " does not match last dimension of " +
                             shape_string(x.shape()));
    }
    const std::size_t d = x.cols(), rows = x.rows();
    std::vector<double> out(x.numel());
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < d; ++c) {
            out[r * d + c] = x.data()[r * d + c] + bias.data()[c];
        }
    }
    auto* nx = x.node();
    auto* nb = bias.node();
    return detail::make_result(x.shape(), std::move(out), {&x, &bias}, [nx, nb, rows, d](detail::Node& self) {
        if (nx->requires_grad) {
            nx->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                nx->grad[i] += self.grad[i];
            }
        }
        if (nb->requires_grad) {
            nb->ensure_grad();
            for (std::size_t r = 0; r < rows; ++r) {
                for (std::size_t c = 0; c < d; ++c) {
                    nb->grad[c] += self.grad[r * d + c];
                }
            }
        }
    });
}

// Elementwise product.
inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "mul");
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = a.data()[i] * b.data()[i];
    }
    auto* na = a.node();
    auto* nb = b.node();
    return detail::make_result(a.shape(), std::move(out), {&a, &b}, [na, nb](detail::Node& self) {
        if (na->requires_grad) {
            na->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                na->grad[i] += self.grad[i] * nb->data[i];
            }
        }
        if (nb->requires_grad) {
            nb->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                nb->grad[i] += self.grad[i] * na->data[i];
            }
        }
    });
}

inline Tensor scale(const Tensor& x, double factor) {
    std::vector<double> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = x.data()[i] * factor;
    }
    auto* nx = x.node();
    return detail::make_result(x.shape(), std::move(out), {&x}, [nx, factor](detail::Node& self) {
        nx->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            nx->grad[i] += self.grad[i] * factor;
        }
    });
}

inline Tensor sum(const Tensor& x) {
    double total = 0.0;
    for (double v : x.data()) {
        total += v;
    }
    auto* nx = x.node();
    return detail::make_result({1}, {total}, {&x}, [nx](detail::Node& self) {
        nx->ensure_grad();
        for (double& g : nx->grad) {
            g += self.grad[0];
        }
    });
}

// GELU, tanh approximation.
inline Tensor gelu(const Tensor& x) {
    constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
    constexpr double a = 0.044715;
    std::vector<double> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double v = x.data()[i];
        out[i] = 0.5 * v * (1.0 + std::tanh(c * (v + a * v * v * v)));
    }
    auto* nx = x.node();
    return detail::make_result(x.shape(), std::move(out), {&x}, [nx](detail::Node& self) {
        nx->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            const double v = nx->data[i];
            const double t = std::tanh(c * (v + a * v * v * v));
            const double dt = (1.0 - t * t) * c * (1.0 + 3.0 * a * v * v);
            nx->grad[i] += self.grad[i] * (0.5 * (1.0 + t) + 0.5 * v * dt);
        }
    });
}

namespace detail {

// Row softmax over the first `width(r)` entries of each row; the rest are 0.
template <class Width>
Tensor softmax_impl(const Tensor& x, Width width, const char* op) {
    require_matrix(x, op);
    const std::size_t m = x.dim(0), n = x.dim(1);
    std::vector<double> out(m * n, 0.0);
    for (std::size_t r = 0; r < m; ++r) {
        const std::size_t w = width(r);
        const double* in = x.data().data() + r * n;
        double* row = out.data() + r * n;
        const double mx = *std::max_element(in, in + w);
        double total = 0.0;
        for (std::size_t c = 0; c < w; ++c) {
            row[c] = std::exp(in[c] - mx);
            total += row[c];
        }
        for (std::size_t c = 0; c < w; ++c) {
            row[c] /= total;
        }
    }
    auto* nx = x.node();
    return make_result(x.shape(), std::move(out), {&x}, [nx, m, n](Node& self) {
        nx->ensure_grad();
        for (std::size_t r = 0; r < m; ++r) {
            const double* y = self.data.data() + r * n;
            const double* g = self.grad.data() + r * n;
            double dot = 0.0;
            for (std::size_t c = 0; c < n; ++c) {
                dot += g[c] * y[c];
            }
            for (std::size_t c = 0; c < n; ++c) {
                nx->grad[r * n + c] += y[c] * (g[c] - dot);
            }
        }
    });
}

}  // namespace detail

inline Tensor softmax_rows(const Tensor& x) {
    const std::size_t n = x.rank() == 2 ? x.dim(1) : 0;
    return detail::softmax_impl(x, [n](std::size_t) { return n; }, "softmax_rows");
}

// Softmax of a square score matrix where row i only sees columns 0..i;
// later columns get probability exactly 0.
inline Tensor causal_softmax(const Tensor& scores) {
    detail::require_matrix(scores, "causal_softmax");
    if (scores.dim(0) != scores.dim(1)) {
        throw DimensionError("causal_softmax expects a square matrix, got " + shape_string(scores.shape()));
    }
    return detail::softmax_impl(scores, [](std::size_t r) { return r + 1; }, "causal_softmax");
}

// Normalizes each length-d vector to zero mean / unit variance, then applies gain and bias.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    const std::size_t d = x.cols();
    if (gain.rank() != 1 || gain.dim(0) != d || bias.rank() != 1 || bias.dim(0) != d) {
        throw DimensionError("layer_norm: gain " + shape_string(gain.shape()) + " / bias " + shape_string(bias.shape()) +
                             " do not match last dimension of " + shape_string(x.shape()));
    }
    if (!(eps > 0.0)) {
        throw ConfigError("layer_norm: eps must be positive");
    }
    const std::size_t rows = x.rows();
    std::vector<double> out(x.numel());
    std::vector<double> normalized(x.numel());
    std::vector<double> inv_std(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* in = x.data().data() + r * d;
        double mean = 0.0;
        for (std::size_t c = 0; c < d; ++c) {
            mean += in[c];
        }
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t c = 0; c < d; ++c) {
            var += (in[c] - mean) * (in[c] - mean);
        }
        var /= static_cast<double>(d);
        inv_std[r] = 1.0 / std::sqrt(var + eps);
        for (std::size_t c = 0; c < d; ++c) {
            const double xh = (in[c] - mean) * inv_std[r];
            normalized[r * d + c] = xh;
            out[r * d + c] = gain.data()[c] * xh + bias.data()[c];
        }
    }
    auto* nx = x.node();
    auto* ng = gain.node();
    auto* nb = bias.node();
    return detail::make_result(
        x.shape(), std::move(out), {&x, &gain, &bias},
        [nx, ng, nb, rows, d, normalized = std::move(normalized), inv_std = std::move(inv_std)](detail::Node& self) {
            if (ng->requires_grad) {
                ng->ensure_grad();
            }
            if (nb->requires_grad) {
                nb->ensure_grad();
            }
            if (nx->requires_grad) {
                nx->ensure_grad();
            }
            std::vector<double> dxhat(d);
            for (std::size_t r = 0; r < rows; ++r) {
                const double* g = self.grad.data() + r * d;
                const double* xh = normalized.data() + r * d;
                double mean_dxhat = 0.0, mean_dxhat_xh = 0.0;
                for (std::size_t c = 0; c < d; ++c) {
                    if (ng->requires_grad) {
                        ng->grad[c] += g[c] * xh[c];
                    }
                    if (nb->requires_grad) {
                        nb->grad[c] += g[c];
                    }
                    dxhat[c] = g[c] * ng->data[c];
                    mean_dxhat += dxhat[c];
                    mean_dxhat_xh += dxhat[c] * xh[c];
                }
                if (!nx->requires_grad) {
                    continue;
                }
                mean_dxhat /= static_cast<double>(d);
                mean_dxhat_xh /= static_cast<double>(d);
                for (std::size_t c = 0; c < d; ++c) {
                    nx->grad[r * d + c] += inv_std[r] * (dxhat[c] - mean_dxhat - xh[c] * mean_dxhat_xh);
                }
            }
        });
}

// Mean negative log-likelihood of targets[i] under softmax(logits row i),
// taken over rows where mask[i] is set.
inline Tensor cross_entropy_masked(const Tensor& logits, std::span<const TokenId> targets,
                                   const std::vector<bool>& mask) {
    detail::require_matrix(logits, "cross_entropy_masked");
    const std::size_t L = logits.dim(0), V = logits.dim(1);
    if (targets.size() != L || mask.size() != L) {
        throw DimensionError("cross_entropy_masked: " + std::to_string(targets.size()) + " targets / " +
                             std::to_string(mask.size()) + " mask entries for logits " +
                             shape_string(logits.shape()));
    }
    std::size_t count = 0;
    for (std::size_t i = 0; i < L; ++i) {
        if (!mask[i]) {
            continue;
        }
        if (targets[i] >= V) {
            throw VocabularyError("cross_entropy_masked: target " + std::to_string(targets[i]) +
                                  " outside vocabulary of " + std::to_string(V));
        }
        ++count;
    }
    if (count == 0) {
        throw DegenerateMaskError("cross_entropy_masked: mask selects no positions");
    }
    std::vector<double> probs(L * V, 0.0);
    double total = 0.0;
    for (std::size_t i = 0; i < L; ++i) {
        if (!mask[i]) {
            continue;
        }
        const double* row = logits.data().data() + i * V;
        const double mx = *std::max_element(row, row + V);
        double z = 0.0;
        for (std::size_t c = 0; c < V; ++c) {
            probs[i * V + c] = std::exp(row[c] - mx);
            z += probs[i * V + c];
        }
        for (std::size_t c = 0; c < V; ++c) {
            probs[i * V + c] /= z;
        }
        total += (row[targets[i]] - mx) - std::log(z);
    }
    const double inv_count = 1.0 / static_cast<double>(count);
    auto* nl = logits.node();
    std::vector<TokenId> tgt(targets.begin(), targets.end());
    std::vector<bool> msk = mask;
    return detail::make_result(
        {1}, {-total * inv_count}, {&logits},
        [nl, L, V, inv_count, probs = std::move(probs), tgt = std::move(tgt), msk = std::move(msk)](detail::Node& self) {
            nl->ensure_grad();
            const double g = self.grad[0] * inv_count;
            for (std::size_t i = 0; i < L; ++i) {
                if (!msk[i]) {
                    continue;
                }
                for (std::size_t c = 0; c < V; ++c) {
                    nl->grad[i * V + c] += g * probs[i * V + c];
                }
                nl->grad[i * V + tgt[i]] -= g;
            }
        });
}

// Gathers rows of `table` (n×d) by id.
inline Tensor embedding(const Tensor& table, std::span<const TokenId> ids) {
    detail::require_matrix(table, "embedding");
    const std::size_t n = table.dim(0), d = table.dim(1);
    if (ids.empty()) {
        throw DimensionError("embedding: no ids");
    }
    std::vector<double> out(ids.size() * d);
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] >= n) {
            throw VocabularyError("embedding: id " + std::to_string(ids[i]) + " outside table of " + std::to_string(n) +
                                  " rows");
        }
        std::copy_n(table.data().data() + ids[i] * d, d, out.data() + i * d);
    }
    auto* nt = table.node();
    std::vector<TokenId> idx(ids.begin(), ids.end());
    return detail::make_result({ids.size(), d}, std::move(out), {&table}, [nt, d, idx = std::move(idx)](detail::Node& self) {
        nt->ensure_grad();
        for (std::size_t i = 0; i < idx.size(); ++i) {
            for (std::size_t c = 0; c < d; ++c) {
                nt->grad[idx[i] * d + c] += self.grad[i * d + c];
            }
        }
    });
}

// Columns [begin, begin+count) of a matrix.
inline Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t count) {
    detail::require_matrix(x, "slice_cols");
    const std::size_t m = x.dim(0), n = x.dim(1);
    if (count == 0 || begin + count > n) {
        throw DimensionError("slice_cols: [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                             ") outside " + shape_string(x.shape()));
    }
    std::vector<double> out(m * count);
    for (std::size_t r = 0; r < m; ++r) {
        std::copy_n(x.data().data() + r * n + begin, count, out.data() + r * count);
    }
    auto* nx = x.node();
    return detail::make_result({m, count}, std::move(out), {&x}, [nx, m, n, begin, count](detail::Node& self) {
        nx->ensure_grad();
        for (std::size_t r = 0; r < m; ++r) {
            for (std::size_t c = 0; c < count; ++c) {
                nx->grad[r * n + begin + c] += self.grad[r * count + c];
            }
        }
    });
}

// Side-by-side concatenation of matrices with equal row counts.
inline Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) {
        throw DimensionError("concat_cols: nothing to concatenate");
    }
    const std::size_t m = parts.front().dim(0);
    std::size_t n = 0;
    for (const auto& p : parts) {
        detail::require_matrix(p, "concat_cols");
        if (p.dim(0) != m) {
            throw DimensionError("concat_cols: row mismatch " + shape_string(parts.front().shape()) + " vs " +
                                 shape_string(p.shape()));
        }
        n += p.dim(1);
    }
    std::vector<double> out(m * n);
    std::vector<std::pair<detail::Node*, std::size_t>> pieces;
    std::size_t offset = 0;
    for (const auto& p : parts) {
        const std::size_t w = p.dim(1);
        for (std::size_t r = 0; r < m; ++r) {
            std::copy_n(p.data().data() + r * w, w, out.data() + r * n + offset);
        }
        pieces.emplace_back(p.node(), offset);
        offset += w;
    }
    return detail::make_result_many({m, n}, std::move(out), parts, [pieces = std::move(pieces), m, n](detail::Node& self) {
        for (const auto& [node, off] : pieces) {
            if (!node->requires_grad) {
                continue;
            }
            node->ensure_grad();
            const std::size_t w = node->shape[1];
            for (std::size_t r = 0; r < m; ++r) {
                for (std::size_t c = 0; c < w; ++c) {
                    node->grad[r * w + c] += self.grad[r * n + off + c];
                }
            }
        }
    });
}

// Inverted dropout with an explicit generator; rate 0 is the identity.
inline Tensor dropout(const Tensor& x, double rate, Rng& rng) {
    if (rate <= 0.0) {
        return x;
    }
    if (rate >= 1.0) {
        throw ConfigError("dropout rate must be below 1");
    }
    const double keep_scale = 1.0 / (1.0 - rate);
    std::vector<double> factor(x.numel());
    std::vector<double> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
        factor[i] = rng.uniform() < rate ? 0.0 : keep_scale;
        out[i] = x.data()[i] * factor[i];
    }
    auto* nx = x.node();
    return detail::make_result(x.shape(), std::move(out), {&x}, [nx, factor = std::move(factor)](detail::Node& self) {
        nx->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            nx->grad[i] += self.grad[i] * factor[i];
        }
    });
}

}  // namespace coral

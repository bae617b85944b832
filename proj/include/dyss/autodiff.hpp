#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "dyss/tensor.hpp"

namespace dyss {

// A trainable tensor. grad accumulates across backward passes until cleared.
struct Param {
    std::string name;
    Tensor value;
    Tensor grad;

    Param() = default;
    Param(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)), grad(value.shape) {}

    void zero_grad() { std::fill(grad.data.begin(), grad.data.end(), 0.0); }
};

class ParamStore {
public:
    int add(std::string name, Tensor init) {
        if (index_.count(name))
            throw std::logic_error("ParamStore: duplicate param name " + name);
        index_[name] = static_cast<int>(params_.size());
        params_.emplace_back(std::move(name), std::move(init));
        return static_cast<int>(params_.size()) - 1;
    }

    Param& operator[](int id) { return params_[static_cast<std::size_t>(id)]; }
    const Param& operator[](int id) const { return params_[static_cast<std::size_t>(id)]; }

    int find(const std::string& name) const {
        auto it = index_.find(name);
        return it == index_.end() ? -1 : it->second;
    }

    std::size_t size() const { return params_.size(); }

    void zero_grads() {
        for (auto& p : params_) p.zero_grad();
    }

    std::size_t total_entries() const {
        std::size_t n = 0;
        for (const auto& p : params_) n += p.value.numel();
        return n;
    }

private:
    std::vector<Param> params_;
    std::unordered_map<std::string, int> index_;
};

class Graph;

// Lightweight handle into a Graph node.
struct Val {
    Graph* g = nullptr;
    int id = -1;

    bool valid() const { return g != nullptr && id >= 0; }
    const Tensor& value() const;
    const Shape& shape() const { return value().shape; }
    std::size_t rows() const { return shape().at(0); }
    std::size_t cols() const { return shape().at(1); }
};

// Dynamic tape. One Graph per forward/backward pass; nodes are appended in
// execution order and replayed in reverse for backprop. Single-threaded; for
// scene parallelism each scene owns its own Graph and param gradients are
// merged afterwards in a fixed order.
class Graph {
public:
    // back(graph, self_id): add d(out)/d(parent) * grad(self) into parent grads.
    using BackFn = std::function<void(Graph&, int)>;

    struct Node {
        Tensor value;
        Tensor grad;
        BackFn back;  // empty for leaves
    };

    bool grad_enabled = true;

    int add_node(Tensor value, BackFn back = {}) {
        Node n;
        n.value = std::move(value);
        if (grad_enabled) {
            n.grad = Tensor(n.value.shape);
            n.back = std::move(back);
        }
        nodes_.push_back(std::move(n));
        return static_cast<int>(nodes_.size()) - 1;
    }

    Val leaf(Tensor t) { return Val{this, add_node(std::move(t))}; }

    // Trainable leaf; one node per distinct param so reuse accumulates.
    Val param(ParamStore& store, int pid) {
        auto key = std::make_pair(&store, pid);
        auto it = param_nodes_.find(key);
        if (it != param_nodes_.end()) return Val{this, it->second};
        int id = add_node(store[pid].value);
        param_nodes_[key] = id;
        return Val{this, id};
    }

    Tensor& value(int id) { return nodes_[static_cast<std::size_t>(id)].value; }
    const Tensor& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
    Tensor& grad(int id) { return nodes_[static_cast<std::size_t>(id)].grad; }

    const Tensor& grad_of(Val v) const { return nodes_[static_cast<std::size_t>(v.id)].grad; }

    std::size_t num_nodes() const { return nodes_.size(); }

    // Backprop from a scalar node. Leaves param grads inside the graph; call
    // add_param_grads to fold them into the store.
    void backward(Val loss) {
        if (!grad_enabled) throw std::logic_error("Graph::backward with grads disabled");
        if (loss.g != this) throw std::logic_error("Graph::backward: foreign Val");
        Tensor& g = grad(loss.id);
        if (g.numel() != 1) throw std::logic_error("Graph::backward: loss is not scalar");
        g.data[0] += 1.0;
        for (int i = loss.id; i >= 0; --i) {
            auto& n = nodes_[static_cast<std::size_t>(i)];
            if (n.back) n.back(*this, i);
        }
    }

    // Deterministic accumulation into the store (ordered by node id).
    void add_param_grads(ParamStore& store) {
        std::vector<std::pair<int, int>> items;  // (node id, pid)
        for (const auto& [key, node_id] : param_nodes_)
            if (key.first == &store) items.emplace_back(node_id, key.second);
        std::sort(items.begin(), items.end());
        for (auto [node_id, pid] : items) {
            const Tensor& g = nodes_[static_cast<std::size_t>(node_id)].grad;
            Tensor& dst = store[pid].grad;
            for (std::size_t i = 0; i < g.numel(); ++i) dst.data[i] += g.data[i];
        }
    }

private:
    struct PairHash {
        std::size_t operator()(const std::pair<ParamStore*, int>& p) const {
            return std::hash<ParamStore*>()(p.first) ^
                   (static_cast<std::size_t>(p.second) * 0x9e3779b9u);
        }
    };

    std::vector<Node> nodes_;
    std::unordered_map<std::pair<ParamStore*, int>, int, PairHash> param_nodes_;
};

inline const Tensor& Val::value() const { return g->value(id); }

namespace detail {

inline void same_graph(Val a, Val b, const char* op) {
    if (a.g != b.g) throw std::logic_error(std::string(op) + ": operands from different graphs");
}

inline void require_matrix(const Tensor& t, const char* op) {
    if (t.rank() != 2)
        throw std::invalid_argument(std::string(op) + ": expected matrix, got " +
                                    shape_str(t.shape));
}

// c += a.b  with a: [m x k], b: [k x n]
inline void matmul_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                       std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = arow[p];
            const double* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// c += a^T.b  with a: [k x m], b: [k x n]
inline void matmul_at_acc(const double* a, const double* b, double* c, std::size_t k,
                          std::size_t m, std::size_t n) {
    for (std::size_t p = 0; p < k; ++p) {
        const double* arow = a + p * m;
        const double* brow = b + p * n;
        for (std::size_t i = 0; i < m; ++i) {
            const double av = arow[i];
            double* crow = c + i * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// c += a.b^T  with a: [m x k], b: [n x k]
inline void matmul_bt_acc(const double* a, const double* b, double* c, std::size_t m,
                          std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * n;
        for (std::size_t j = 0; j < n; ++j) {
            const double* brow = b + j * k;
            double s = 0.0;
            for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
            crow[j] += s;
        }
    }
}

}  // namespace detail

// ---- elementwise ----

inline Val add(Val a, Val b) {
    detail::same_graph(a, b, "add");
    Graph& g = *a.g;
    const Tensor& av = g.value(a.id);
    const Tensor& bv = g.value(b.id);
    require_same_shape(av, bv, "add");
    Tensor out(av.shape);
    for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = av.data[i] + bv.data[i];
    const int aid = a.id, bid = b.id;
    int id = g.add_node(std::move(out), [aid, bid](Graph& gr, int self) {
        const Tensor& go = gr.grad(self);
        Tensor& ga = gr.grad(aid);
        Tensor& gb = gr.grad(bid);
        for (std::size_t i = 0; i < go.numel(); ++i) {
            ga.data[i] += go.data[i];
            gb.data[i] += go.data[i];
        }
    });
    return Val{&g, id};
}

inline Val sub(Val a, Val b) {
    detail::same_graph(a, b, "sub");
    Graph& g = *a.g;
    const Tensor& av = g.value(a.id);
    const Tensor& bv = g.value(b.id);
    require_same_shape(av, bv, "sub");
    Tensor out(av.shape);
    for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = av.data[i] - bv.data[i];
    const int aid = a.id, bid = b.id;
    int id = g.add_node(std::move(out), [aid, bid](Graph& gr, int self) {
        const Tensor& go = gr.grad(self);
        Tensor& ga = gr.grad(aid);
        Tensor& gb = gr.grad(bid);
        for (std::size_t i = 0; i < go.numel(); ++i) {
            ga.data[i] += go.data[i];
            gb.data[i] -= go.data[i];
        }
    });
    return Val{&g, id};
}

inline Val mul(Val a, Val b) {
    detail::same_graph(a, b, "mul");
    Graph& g = *a.g;
    const Tensor& av = g.value(a.id);
    const Tensor& bv = g.value(b.id);
    require_same_shape(av, bv, "mul");
    Tensor out(av.shape);
    for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = av.data[i] * bv.data[i];
    const int aid = a.id, bid = b.id;
    int id = g.add_node(std::move(out), [aid, bid](Graph& gr, int self) {
        const Tensor& go = gr.grad(self);
        const Tensor& av2 = gr.value(aid);
        const Tensor& bv2 = gr.value(bid);
        Tensor& ga = gr.grad(aid);
        Tensor& gb = gr.grad(bid);
        for (std::size_t i = 0; i < go.numel(); ++i) {
            ga.data[i] += go.data[i] * bv2.data[i];
            gb.data[i] += go.data[i] * av2.data[i];
        }
    });
    return Val{&g, id};
}

inline Val scale(Val a, double c) {
    Graph& g = *a.g;
    const Tensor& av = g.value(a.id);
    Tensor out(av.shape);
    for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = av.data[i] * c;
    const int aid = a.id;
    int id = g.add_node(std::move(out), [aid, c](Graph& gr, int self) {
        const Tensor& go = gr.grad(self);
        Tensor& ga = gr.grad(aid);
        for (std::size_t i = 0; i < go.numel(); ++i) ga.data[i] += go.data[i] * c;
    });
    return Val{&g, id};
}

inline Val add_scalar(Val a, double c) {
    Graph& g = *a.g;
    const Tensor& av = g.value(a.id);
    Tensor out(av.shape);
    for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = av.data[i] + c;
    const int aid = a.id;
    int id = g.add_node(std::move(out), [aid](Graph& gr, int self) {
        const Tensor& go = gr.grad(self);
        Tensor& ga = gr.grad(aid);
        for (std::size_t i = 0; i < go.numel(); ++i) ga.data[i] += go.data[i];
    });
    return Val{&g, id};
}

inline Val neg(Val a) { return scale(a, -1.0); }

namespace detail {

template <class F, class DF>
Val pointwise(Val a, F f, DF df, const char*) {
    Graph& g = *a.g;
    const Tensor& av = g.value(a.id);
    Tensor out(av.shape);
    for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = f(av.data[i]);
    const int aid = a.id;
    int id = g.add_node(std::move(out), [aid, df](Graph& gr, int self) {
        const Tensor& go = gr.grad(self);
        const Tensor& xv = gr.value(aid);
        const Tensor& yv = gr.value(self);
        Tensor& ga = gr.grad(aid);
        for (std::size_t i = 0; i < go.numel(); ++i)
            ga.data[i] += go.data[i] * df(xv.data[i], yv.data[i]);
    });
    return Val{&g, id};
}

}  // namespace detail

inline Val relu(Val a) {
    return detail::pointwise(
        a, [](double x) { return x > 0.0 ? x : 0.0; },
        [](double x, double) { return x > 0.0 ? 1.0 : 0.0; }, "relu");
}

inline Val sigmoid(Val a) {
    return detail::pointwise(
        a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
        [](double, double y) { return y * (1.0 - y); }, "sigmoid");
}

inline Val tanh(Val a) {
    return detail::pointwise(
        a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; },
        "tanh");
}

inline Val exp(Val a) {
    return detail::pointwise(
        a, [](double x) { return std::exp(x); }, [](double, double y) { return y; }, "exp");
}

inline Val log(Val a) {
    return detail::pointwise(
        a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; }, "log");
}

inline Val abs(Val a) {
    return detail::pointwise(
        a, [](double x) { return std::fabs(x); },
        [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); }, "abs");
}

inline Val sin(Val a) {
    return detail::pointwise(
        a, [](double x) { return std::sin(x); }, [](double x, double) { return std::cos(x); },
        "sin");
}

inline Val cos(Val a) {
    return detail::pointwise(
        a, [](double x) { return std::cos(x); }, [](double x, double) { return -std::sin(x); },
        "cos");
}

inline Val pow_const(Val a, double p) {
    return detail::pointwise(
        a, [p](double x) { return std::pow(x, p); },
        [p](double x, double) { return p * std::pow(x, p - 1.0); }, "pow_const");
}

// log(1 + e^x), stable for large |x|; derivative is sigmoid(x).
inline Val softplus(Val a) {
    return detail::pointwise(
        a, [](double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); },
        [](double x, double) { return 1.0 / (1.0 + std::exp(-x)); }, "softplus");
}

inline Val atan2(Val y, Val x) {
    detail::same_graph(y, x, "atan2");
    Graph& g = *y.g;
    const Tensor& yv = g.value(y.id);
    const Tensor& xv = g.value(x.id);
    require_same_shape(yv, xv, "atan2");
    Tensor out(yv.shape);
    for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = std::atan2(yv.data[i], xv.data[i]);
    const int yid = y.id, xid = x.id;
    int id = g.add_node(std::move(out), [yid, xid](Graph& gr, int self) {
        const Tensor& go = gr.grad(self);
        const Tensor& yv2 = gr.value(yid);
        const Tensor& xv2 = gr.value(xid);
        Tensor& gy = gr.grad(yid);
        Tensor& gx = gr.grad(xid);
        for (std::size_t i = 0; i < go.numel(); ++i) {
            double d = yv2.data[i] * yv2.data[i] + xv2.data[i] * xv2.data[i];
            if (d == 0.0) continue;
            gy.data[i] += go.data[i] * xv2.data[i] / d;
            gx.data[i] -= go.data[i] * yv2.data[i] / d;
        }
    });
    return Val{&g, id};
}

// ---- reductions ----

inline Val sum(Val a) {
    Graph& g = *a.g;
    const Tensor& av = g.value(a.id);
    double s = 0.0;
    for (double v : av.data) s += v;
    const int aid = a.id;
    int id = g.add_node(Tensor::scalar(s), [aid](Graph& gr, int self) {
        const double go = gr.grad(self).data[0];
        Tensor& ga = gr.grad(aid);
        for (std::size_t i = 0; i < ga.numel(); ++i) ga.data[i] += go;
    });
    return Val{&g, id};
}

inline Val mean(Val a) {
    std::size_t n = a.value().numel();
    return scale(sum(a), 1.0 / static_cast<double>(n));
}

// [n x d] -> [n]: mean over the last axis
inline Val row_mean(Val a) {
    Graph& g = *a.g;
    const Tensor& av = g.value(a.id);
    detail::require_matrix(av, "row_mean");
    const std::size_t n = av.dim(0), d = av.dim(1);
    Tensor out(Shape{n});
    for (std::size_t i = 0; i < n; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < d; ++j) s += av.at(i, j);
        out.data[i] = s / static_cast<double>(d);
    }
    const int aid = a.id;
    int id = g.add_node(std::move(out), [aid, n, d](Graph& gr, int self) {
        const Tensor& go = gr.grad(self);
        Tensor& ga = gr.grad(aid);
        for (std::size_t i = 0; i < n; ++i) {
            double gi = go.data[i] / static_cast<double>(d);
            for (std::size_t j = 0; j < d; ++j) ga.data[i * d + j] += gi;
        }
    });
    return Val{&g, id};
}

// [n x d] -> [n]: max over the last axis; gradient to the argmax entry
// (lowest index wins ties).
inline Val row_max(Val a) {
    Graph& g = *a.g;
    const Tensor& av = g.value(a.id);
    detail::require_matrix(av, "row_max");
    const std::size_t n = av.dim(0), d = av.dim(1);
    Tensor out(Shape{n});
    std::vector<std::size_t> arg(n, 0);
    for (std::size_t i = 0; i < n; ++i) {
        double best = av.at(i, 0);
        std::size_t bj = 0;
        for (std::size_t j = 1; j < d; ++j)
            if (av.at(i, j) > best) {
                best = av.at(i, j);
                bj = j;
            }
        out.data[i] = best;
        arg[i] = bj;
    }
    const int aid = a.id;
    int id = g.add_node(std::move(out), [aid, arg, d](Graph& gr, int self) {
        const Tensor& go = gr.grad(self);
        Tensor& ga = gr.grad(aid);
        for (std::size_t i = 0; i < go.numel(); ++i) ga.data[i * d + arg[i]] += go.data[i];
    });
    return Val{&g, id};
}

// ---- linear algebra ----

inline Val matmul(Val a, Val b) {
    detail::same_graph(a, b, "matmul");
    Graph& g = *a.g;
    const Tensor& av = g.value(a.id);
    const Tensor& bv = g.value(b.id);
    detail::require_matrix(av, "matmul");
    detail::require_matrix(bv, "matmul");
    if (av.dim(1) != bv.dim(0))
        throw std::invalid_argument("matmul: inner extents disagree, " + shape_str(av.shape) +
                                    " x " + shape_str(bv.shape));
    const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
    Tensor out(Shape{m, n});
    detail::matmul_acc(av.data.data(), bv.data.data(), out.data.data(), m, k, n);
    const int aid = a.id, bid = b.id;
    int id = g.add_node(std::move(out), [aid, bid, m, k, n](Graph& gr, int self) {
        const Tensor& go = gr.grad(self);
        const Tensor& av2 = gr.value(aid);
        const Tensor& bv2 = gr.value(bid);
        // dA += dOut . B^T ; dB += A^T . dOut
        detail::matmul_bt_acc(go.data.data(), bv2.data.data(), gr.grad(aid).data.data(), m, n, k);
        detail::matmul_at_acc(av2.data.data(), go.data.data(), gr.grad(bid).data.data(), m, k, n);
    });
    return Val{&g, id};
}

inline Val transpose(Val a) {
    Graph& g = *a.g;
    const Tensor& av = g.value(a.id);
    detail::require_matrix(av, "transpose");
    const std::size_t m = av.dim(0), n = av.dim(1);
    Tensor out(Shape{n, m});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out.at(j, i) = av.at(i, j);
    const int aid = a.id;
    int id = g.add_node(std::move(out), [aid, m, n](Graph& gr, int self) {
        const Tensor& go = gr.grad(self);
        Tensor& ga = gr.grad(aid);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) ga.data[i * n + j] += go.data[j * m + i];
    });
    return Val{&g, id};
}

// ---- broadcasts over matrix rows/columns ----

// [n x d] + [d]
inline Val add_rowvec(Val m, Val v) {
    detail::same_graph(m, v, "add_rowvec");
    Graph& g = *m.g;
    const Tensor& mv = g.value(m.id);
    const Tensor& vv = g.value(v.id);
    detail::require_matrix(mv, "add_rowvec");
    if (vv.numel() != mv.dim(1))
        throw std::invalid_argument("add_rowvec: vector " + shape_str(vv.shape) +
                                    " does not match columns of " + shape_str(mv.shape));
    const std::size_t n = mv.dim(0), d = mv.dim(1);
    Tensor out(mv.shape);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) out.at(i, j) = mv.at(i, j) + vv.data[j];
    const int mid = m.id, vid = v.id;
    int id = g.add_node(std::move(out), [mid, vid, n, d](Graph& gr, int self) {
        const Tensor& go = gr.grad(self);
        Tensor& gm = gr.grad(mid);
        Tensor& gv = gr.grad(vid);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < d; ++j) {
                gm.data[i * d + j] += go.data[i * d + j];
                gv.data[j] += go.data[i * d + j];
            }
    });
    return Val{&g, id};
}

// [n x d] * [d] (each row scaled elementwise by v)
inline Val mul_rowvec(Val m, Val v) {
    detail::same_graph(m, v, "mul_rowvec");
    Graph& g = *m.g;
    const Tensor& mv = g.value(m.id);
    const Tensor& vv = g.value(v.id);
    detail::require_matrix(mv, "mul_rowvec");
    if (vv.numel() != mv.dim(1))
        throw std::invalid_argument("mul_rowvec: vector " + shape_str(vv.shape) +
                                    " does not match columns of " + shape_str(mv.shape));
    const std::size_t n = mv.dim(0), d = mv.dim(1);
    Tensor out(mv.shape);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) out.at(i, j) = mv.at(i, j) * vv.data[j];
    const int mid = m.id, vid = v.id;
    int id = g.add_node(std::move(out), [mid, vid, n, d](Graph& gr, int self) {
        const Tensor& go = gr.grad(self);
        const Tensor& mv2 = gr.value(mid);
        const Tensor& vv2 = gr.value(vid);
        Tensor& gm = gr.grad(mid);
        Tensor& gv = gr.grad(vid);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < d; ++j) {
                gm.data[i * d + j] += go.data[i * d + j] * vv2.data[j];
                gv.data[j] += go.data[i * d + j] * mv2.data[i * d + j];
            }
    });
    return Val{&g, id};
}

// [n x d] - [n] (row i shifted by scalar v[i])
inline Val sub_colvec(Val m, Val v) {
    detail::same_graph(m, v, "sub_colvec");
    Graph& g = *m.g;
    const Tensor& mv = g.value(m.id);
    const Tensor& vv = g.value(v.id);
    detail::require_matrix(mv, "sub_colvec");
    if (vv.numel() != mv.dim(0))
        throw std::invalid_argument("sub_colvec: vector " + shape_str(vv.shape) +
                                    " does not match rows of " + shape_str(mv.shape));
    const std::size_t n = mv.dim(0), d = mv.dim(1);
    Tensor out(mv.shape);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) out.at(i, j) = mv.at(i, j) - vv.data[i];
    const int mid = m.id, vid = v.id;
    int id = g.add_node(std::move(out), [mid, vid, n, d](Graph& gr, int self) {
        const Tensor& go = gr.grad(self);
        Tensor& gm = gr.grad(mid);
        Tensor& gv = gr.grad(vid);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < d; ++j) {
                gm.data[i * d + j] += go.data[i * d + j];
                gv.data[i] -= go.data[i * d + j];
            }
    });
    return Val{&g, id};
}

// [n x d] * [n] (row i scaled by scalar v[i])
inline Val mul_colvec(Val m, Val v) {
    detail::same_graph(m, v, "mul_colvec");
    Graph& g = *m.g;
    const Tensor& mv = g.value(m.id);
    const Tensor& vv = g.value(v.id);
    detail::require_matrix(mv, "mul_colvec");
    if (vv.numel() != mv.dim(0))
        throw std::invalid_argument("mul_colvec: vector " + shape_str(vv.shape) +
                                    " does not match rows of " + shape_str(mv.shape));
    const std::size_t n = mv.dim(0), d = mv.dim(1);
    Tensor out(mv.shape);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) out.at(i, j) = mv.at(i, j) * vv.data[i];
    const int mid = m.id, vid = v.id;
    int id = g.add_node(std::move(out), [mid, vid, n, d](Graph& gr, int self) {
        const Tensor& go = gr.grad(self);
        const Tensor& mv2 = gr.value(mid);
        const Tensor& vv2 = gr.value(vid);
        Tensor& gm = gr.grad(mid);
        Tensor& gv = gr.grad(vid);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < d; ++j) {
                gm.data[i * d + j] += go.data[i * d + j] * vv2.data[i];
                gv.data[i] += go.data[i * d + j] * mv2.data[i * d + j];
            }
    });
    return Val{&g, id};
}

// ---- shape ops ----

inline Val reshape(Val a, Shape s) {
    Graph& g = *a.g;
    const Tensor& av = g.value(a.id);
    if (shape_numel(s) != av.numel())
        throw std::invalid_argument("reshape: cannot view " + shape_str(av.shape) + " as " +
                                    shape_str(s));
    Tensor out(std::move(s), av.data);
    const int aid = a.id;
    int id = g.add_node(std::move(out), [aid](Graph& gr, int self) {
        const Tensor& go = gr.grad(self);
        Tensor& ga = gr.grad(aid);
        for (std::size_t i = 0; i < go.numel(); ++i) ga.data[i] += go.data[i];
    });
    return Val{&g, id};
}

inline Val slice_cols(Val a, std::size_t from, std::size_t len) {
    Graph& g = *a.g;
    const Tensor& av = g.value(a.id);
    detail::require_matrix(av, "slice_cols");
    const std::size_t n = av.dim(0), d = av.dim(1);
    if (from + len > d)
        throw std::invalid_argument("slice_cols: [" + std::to_string(from) + "," +
                                    std::to_string(from + len) + ") out of range for " +
                                    shape_str(av.shape));
    Tensor out(Shape{n, len});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < len; ++j) out.at(i, j) = av.at(i, from + j);
    const int aid = a.id;
    int id = g.add_node(std::move(out), [aid, from, len, n, d](Graph& gr, int self) {
        const Tensor& go = gr.grad(self);
        Tensor& ga = gr.grad(aid);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < len; ++j)
                ga.data[i * d + from + j] += go.data[i * len + j];
    });
    return Val{&g, id};
}

inline Val concat_cols(Val a, Val b) {
    detail::same_graph(a, b, "concat_cols");
    Graph& g = *a.g;
    const Tensor& av = g.value(a.id);
    const Tensor& bv = g.value(b.id);
    detail::require_matrix(av, "concat_cols");
    detail::require_matrix(bv, "concat_cols");
    if (av.dim(0) != bv.dim(0))
        throw std::invalid_argument("concat_cols: row counts disagree, " + shape_str(av.shape) +
                                    " vs " + shape_str(bv.shape));
    const std::size_t n = av.dim(0), da = av.dim(1), db = bv.dim(1);
    Tensor out(Shape{n, da + db});
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < da; ++j) out.at(i, j) = av.at(i, j);
        for (std::size_t j = 0; j < db; ++j) out.at(i, da + j) = bv.at(i, j);
    }
    const int aid = a.id, bid = b.id;
    int id = g.add_node(std::move(out), [aid, bid, n, da, db](Graph& gr, int self) {
        const Tensor& go = gr.grad(self);
        Tensor& ga = gr.grad(aid);
        Tensor& gb = gr.grad(bid);
        const std::size_t d = da + db;
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < da; ++j) ga.data[i * da + j] += go.data[i * d + j];
            for (std::size_t j = 0; j < db; ++j) gb.data[i * db + j] += go.data[i * d + da + j];
        }
    });
    return Val{&g, id};
}

inline Val gather_rows(Val a, std::vector<std::size_t> idx) {
    Graph& g = *a.g;
    const Tensor& av = g.value(a.id);
    detail::require_matrix(av, "gather_rows");
    const std::size_t d = av.dim(1);
    for (std::size_t r : idx)
        if (r >= av.dim(0))
            throw std::invalid_argument("gather_rows: index " + std::to_string(r) +
                                        " out of range for " + shape_str(av.shape));
    Tensor out(Shape{idx.size(), d});
    for (std::size_t i = 0; i < idx.size(); ++i)
        for (std::size_t j = 0; j < d; ++j) out.at(i, j) = av.at(idx[i], j);
    const int aid = a.id;
    int id = g.add_node(std::move(out), [aid, idx, d](Graph& gr, int self) {
        const Tensor& go = gr.grad(self);
        Tensor& ga = gr.grad(aid);
        for (std::size_t i = 0; i < idx.size(); ++i)
            for (std::size_t j = 0; j < d; ++j) ga.data[idx[i] * d + j] += go.data[i * d + j];
    });
    return Val{&g, id};
}

inline Val concat_rows(const std::vector<Val>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_rows: empty input");
    Graph& g = *parts[0].g;
    const std::size_t d = g.value(parts[0].id).dim(1);
    std::size_t n = 0;
    for (const Val& p : parts) {
        detail::same_graph(parts[0], p, "concat_rows");
        const Tensor& pv = g.value(p.id);
        detail::require_matrix(pv, "concat_rows");
        if (pv.dim(1) != d)
            throw std::invalid_argument("concat_rows: column counts disagree, " +
                                        shape_str(g.value(parts[0].id).shape) + " vs " +
                                        shape_str(pv.shape));
        n += pv.dim(0);
    }
    Tensor out(Shape{n, d});
    std::vector<int> ids;
    std::vector<std::size_t> row_counts;
    std::size_t r = 0;
    for (const Val& p : parts) {
        const Tensor& pv = g.value(p.id);
        std::copy(pv.data.begin(), pv.data.end(), out.data.begin() + static_cast<long>(r * d));
        ids.push_back(p.id);
        row_counts.push_back(pv.dim(0));
        r += pv.dim(0);
    }
    int id = g.add_node(std::move(out), [ids, row_counts, d](Graph& gr, int self) {
        const Tensor& go = gr.grad(self);
        std::size_t r2 = 0;
        for (std::size_t p = 0; p < ids.size(); ++p) {
            Tensor& gp = gr.grad(ids[p]);
            for (std::size_t i = 0; i < row_counts[p] * d; ++i)
                gp.data[i] += go.data[r2 * d + i];
            r2 += row_counts[p];
        }
    });
    return Val{&g, id};
}

// ---- normalization / attention building blocks ----

inline Val softmax_rows(Val a) {
    Graph& g = *a.g;
    const Tensor& av = g.value(a.id);
    detail::require_matrix(av, "softmax_rows");
    const std::size_t n = av.dim(0), d = av.dim(1);
    Tensor out(av.shape);
    for (std::size_t i = 0; i < n; ++i) {
        double mx = av.at(i, 0);
        for (std::size_t j = 1; j < d; ++j) mx = std::max(mx, av.at(i, j));
        double s = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            out.at(i, j) = std::exp(av.at(i, j) - mx);
            s += out.at(i, j);
        }
        for (std::size_t j = 0; j < d; ++j) out.at(i, j) /= s;
    }
    const int aid = a.id;
    int id = g.add_node(std::move(out), [aid, n, d](Graph& gr, int self) {
        const Tensor& go = gr.grad(self);
        const Tensor& y = gr.value(self);
        Tensor& ga = gr.grad(aid);
        for (std::size_t i = 0; i < n; ++i) {
            double dot = 0.0;
            for (std::size_t j = 0; j < d; ++j) dot += go.data[i * d + j] * y.data[i * d + j];
            for (std::size_t j = 0; j < d; ++j)
                ga.data[i * d + j] += y.data[i * d + j] * (go.data[i * d + j] - dot);
        }
    });
    return Val{&g, id};
}

constexpr double kLayerNormEps = 1e-6;

// Per-row standardization over the last axis, then affine with gain/bias.
inline Val layer_norm_rows(Val x, Val gain, Val bias, double eps = kLayerNormEps) {
    detail::same_graph(x, gain, "layer_norm_rows");
    detail::same_graph(x, bias, "layer_norm_rows");
    Graph& g = *x.g;
    const Tensor& xv = g.value(x.id);
    detail::require_matrix(xv, "layer_norm_rows");
    const std::size_t n = xv.dim(0), d = xv.dim(1);
    if (g.value(gain.id).numel() != d || g.value(bias.id).numel() != d)
        throw std::invalid_argument("layer_norm_rows: gain/bias must have " + std::to_string(d) +
                                    " entries");
    Tensor out(xv.shape);
    std::vector<double> mu(n), inv_sd(n);
    const Tensor& gv = g.value(gain.id);
    const Tensor& bv = g.value(bias.id);
    for (std::size_t i = 0; i < n; ++i) {
        double m = 0.0;
        for (std::size_t j = 0; j < d; ++j) m += xv.at(i, j);
        m /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            double c = xv.at(i, j) - m;
            var += c * c;
        }
        var /= static_cast<double>(d);
        mu[i] = m;
        inv_sd[i] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < d; ++j)
            out.at(i, j) = (xv.at(i, j) - m) * inv_sd[i] * gv.data[j] + bv.data[j];
    }
    const int xid = x.id, gid = gain.id, bid = bias.id;
    int id = g.add_node(std::move(out), [xid, gid, bid, n, d, mu, inv_sd](Graph& gr, int self) {
        const Tensor& go = gr.grad(self);
        const Tensor& xv2 = gr.value(xid);
        const Tensor& gv2 = gr.value(gid);
        Tensor& gx = gr.grad(xid);
        Tensor& gg = gr.grad(gid);
        Tensor& gb = gr.grad(bid);
        for (std::size_t i = 0; i < n; ++i) {
            // xhat = (x - mu) * inv_sd; out = xhat * gain + bias
            double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
            std::vector<double> dxhat(d);
            for (std::size_t j = 0; j < d; ++j) {
                double xhat = (xv2.data[i * d + j] - mu[i]) * inv_sd[i];
                double goij = go.data[i * d + j];
                gg.data[j] += goij * xhat;
                gb.data[j] += goij;
                dxhat[j] = goij * gv2.data[j];
                sum_dxhat += dxhat[j];
                sum_dxhat_xhat += dxhat[j] * xhat;
            }
            for (std::size_t j = 0; j < d; ++j) {
                double xhat = (xv2.data[i * d + j] - mu[i]) * inv_sd[i];
                gx.data[i * d + j] +=
                    inv_sd[i] * (dxhat[j] - (sum_dxhat + xhat * sum_dxhat_xhat) /
                                                static_cast<double>(d));
            }
        }
    });
    return Val{&g, id};
}

// Wrap one column of a matrix into (-pi, pi]. The wrap is a constant offset,
// so the backward pass is the identity on that column.
inline double wrap_angle(double a) {
    const double pi = 3.14159265358979323846;
    const double two_pi = 2.0 * pi;
    double r = std::fmod(a + pi, two_pi);
    if (r < 0.0) r += two_pi;
    r -= pi;
    if (r == -pi) r = pi;
    return r;
}

inline Val wrap_col(Val a, std::size_t col) {
    Graph& g = *a.g;
    const Tensor& av = g.value(a.id);
    detail::require_matrix(av, "wrap_col");
    const std::size_t n = av.dim(0), d = av.dim(1);
    if (col >= d) throw std::invalid_argument("wrap_col: column out of range");
    Tensor out = av;
    for (std::size_t i = 0; i < n; ++i) out.at(i, col) = wrap_angle(out.at(i, col));
    const int aid = a.id;
    int id = g.add_node(std::move(out), [aid](Graph& gr, int self) {
        const Tensor& go = gr.grad(self);
        Tensor& ga = gr.grad(aid);
        for (std::size_t i = 0; i < go.numel(); ++i) ga.data[i] += go.data[i];
    });
    return Val{&g, id};
}

// ---- small conveniences ----

inline Val linear(Val x, Val w, Val b) { return add_rowvec(matmul(x, w), b); }

inline Val mse(Val a, Val b) {
    Val d = sub(a, b);
    return mean(mul(d, d));
}

}  // namespace dyss

#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "dyss/autodiff.hpp"

namespace dyss {

struct GradCheckReport {
    double max_rel_err = 0.0;
    bool analytic_finite = true;
    std::size_t worst_input = 0;
    std::size_t worst_entry = 0;

    bool pass(double tol) const { return analytic_finite && max_rel_err <= tol; }

    std::string describe() const {
        if (!analytic_finite)
            return "non-finite analytic gradient at input " + std::to_string(worst_input) +
                   " entry " + std::to_string(worst_entry);
        return "max rel err " + std::to_string(max_rel_err) + " (input " +
               std::to_string(worst_input) + " entry " + std::to_string(worst_entry) + ")";
    }
};

// Scalar function of leaf tensors; called once with grads on for the analytic
// pass and repeatedly with grads off for central differences.
using ScalarFn = std::function<Val(Graph&, const std::vector<Val>&)>;

// Central finite differences (default step 1e-5) against the tape gradient.
// Returns the max relative error over every entry of every input. The
// denominator floors at 1e-2 so near-zero gradients are compared absolutely,
// which keeps the FD roundoff floor (~1e-11) from dominating.
inline GradCheckReport grad_check(const ScalarFn& f, const std::vector<Tensor>& inputs,
                                  double step = 1e-5) {
    GradCheckReport rep;

    Graph g;
    std::vector<Val> leaves;
    leaves.reserve(inputs.size());
    for (const Tensor& t : inputs) leaves.push_back(g.leaf(t));
    Val loss = f(g, leaves);
    if (loss.value().numel() != 1)
        throw std::logic_error("grad_check: function must be scalar-reduced");
    g.backward(loss);

    auto eval = [&](const std::vector<Tensor>& ins) {
        Graph ge;
        ge.grad_enabled = false;
        std::vector<Val> ls;
        ls.reserve(ins.size());
        for (const Tensor& t : ins) ls.push_back(ge.leaf(t));
        return f(ge, ls).value().item();
    };

    std::vector<Tensor> work = inputs;
    for (std::size_t in = 0; in < inputs.size(); ++in) {
        const Tensor& analytic = g.grad_of(leaves[in]);
        for (std::size_t e = 0; e < analytic.numel(); ++e) {
            double a = analytic.data[e];
            if (!std::isfinite(a)) {
                rep.analytic_finite = false;
                rep.worst_input = in;
                rep.worst_entry = e;
                return rep;
            }
            double keep = work[in].data[e];
            work[in].data[e] = keep + step;
            double fp = eval(work);
            work[in].data[e] = keep - step;
            double fm = eval(work);
            work[in].data[e] = keep;
            double numeric = (fp - fm) / (2.0 * step);
            double denom = std::max(std::fabs(a) + std::fabs(numeric), 1e-2);
            double rel = std::fabs(a - numeric) / denom;
            if (rel > rep.max_rel_err) {
                rep.max_rel_err = rel;
                rep.worst_input = in;
                rep.worst_entry = e;
            }
        }
    }
    return rep;
}

// Same check but driven through a ParamStore: the analytic side goes through
// backward + add_param_grads, the numeric side perturbs the stored values in
// place. This is how whole-module and end-to-end losses are checked; the
// function must be deterministic (frozen masks and selection plans).
inline GradCheckReport grad_check_params(const std::function<Val(Graph&)>& f, ParamStore& ps,
                                         const std::vector<int>& pids, double step = 1e-5) {
    GradCheckReport rep;
    ps.zero_grads();
    {
        Graph g;
        Val loss = f(g);
        if (loss.value().numel() != 1)
            throw std::logic_error("grad_check_params: function must be scalar-reduced");
        g.backward(loss);
        g.add_param_grads(ps);
    }
    auto eval = [&]() {
        Graph g;
        g.grad_enabled = false;
        return f(g).value().item();
    };
    for (std::size_t pi = 0; pi < pids.size(); ++pi) {
        Param& p = ps[pids[pi]];
        for (std::size_t e = 0; e < p.value.numel(); ++e) {
            double a = p.grad.data[e];
            if (!std::isfinite(a)) {
                rep.analytic_finite = false;
                rep.worst_input = pi;
                rep.worst_entry = e;
                return rep;
            }
            double keep = p.value.data[e];
            p.value.data[e] = keep + step;
            double fp = eval();
            p.value.data[e] = keep - step;
            double fm = eval();
            p.value.data[e] = keep;
            double numeric = (fp - fm) / (2.0 * step);
            double denom = std::max(std::fabs(a) + std::fabs(numeric), 1e-2);
            double rel = std::fabs(a - numeric) / denom;
            if (rel > rep.max_rel_err) {
                rep.max_rel_err = rel;
                rep.worst_input = pi;
                rep.worst_entry = e;
            }
        }
    }
    return rep;
}

}  // namespace dyss

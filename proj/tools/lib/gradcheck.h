#pragma once

// Central finite-difference oracle. Independent of the autodiff path: it only
// evaluates the forward function under perturbed leaf values.

#include "vox/tensor.h"

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

namespace gradcheck {

using vox::real;
using vox::Tensor;

struct Report {
    double max_rel = 0;     // worst per-leaf ||analytic - numeric|| / max(||analytic||, ||numeric||)
    double max_abs = 0;
    size_t worst_leaf = 0;
    size_t checked = 0;     // coordinates compared
    size_t kinks = 0;       // coordinates left out because the stencil straddles a kink
};

// loss_fn must be a pure function of the current leaf values. With
// per_leaf > 0 only that many randomly chosen coordinates of each leaf are
// perturbed and compared. With skip_kinks, a coordinate whose forward and
// backward one-sided slopes disagree is not compared: the loss is not
// differentiable inside the stencil (ReLU, |x|), so no finite difference is a
// valid reference there. A wrong analytic gradient still shows up, since
// its one-sided slopes agree with each other.
inline Report check(std::vector<Tensor> leaves, const std::function<Tensor()> & loss_fn, double step = 1e-3,
                    double floor = 1e-8, size_t per_leaf = 0, uint64_t seed = 0, bool skip_kinks = false) {
    for (auto & l : leaves) {
        l.set_requires_grad(true);
        l.zero_grad();
    }
    vox::backward(loss_fn());
    std::vector<std::vector<real>> analytic;
    for (auto & l : leaves) {
        auto g = l.grad();
        analytic.emplace_back(g.begin(), g.end());
    }

    Report rep;
    vox::NoGradGuard guard;
    const double f0 = skip_kinks ? double(loss_fn().item()) : 0;
    for (size_t li = 0; li < leaves.size(); ++li) {
        auto data = leaves[li].mutable_data();
        std::vector<size_t> coords(data.size());
        for (size_t i = 0; i < coords.size(); ++i) coords[i] = i;
        if (per_leaf && per_leaf < coords.size()) {
            std::mt19937_64 eng(seed * 1000003 + li);
            std::shuffle(coords.begin(), coords.end(), eng);
            coords.resize(per_leaf);
        }
        double diff2 = 0, a2 = 0, n2 = 0;
        for (size_t i : coords) {
            const real orig = data[i];
            data[i] = orig + real(step);
            const double up = loss_fn().item();
            data[i] = orig - real(step);
            const double down = loss_fn().item();
            data[i] = orig;
            if (skip_kinks) {
                const double fwd = (up - f0) / step, bwd = (f0 - down) / step;
                if (std::abs(fwd - bwd) > 1e-3 * std::max({std::abs(fwd), std::abs(bwd), 1e-6})) {
                    ++rep.kinks;
                    continue;
                }
            }
            ++rep.checked;
            const double num = (up - down) / (2 * step);
            const double an = analytic[li][i];
            diff2 += (an - num) * (an - num);
            a2 += an * an;
            n2 += num * num;
            rep.max_abs = std::max(rep.max_abs, std::abs(an - num));
        }
        const double denom = std::max({std::sqrt(a2), std::sqrt(n2), floor});
        const double rel = std::sqrt(diff2) / denom;
        if (rel > rep.max_rel) {
            rep.max_rel = rel;
            rep.worst_leaf = li;
        }
    }
    return rep;
}

}  // namespace gradcheck

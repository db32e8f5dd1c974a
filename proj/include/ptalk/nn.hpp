#pragma once

#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "ptalk/autodiff.hpp"
#include "ptalk/rng.hpp"
#include "ptalk/tensor.hpp"

namespace ptalk::nn {

using ad::Tape;
using ad::Var;

struct Parameter {
    std::string name;
    Tensor value;
    Tensor grad;

    Parameter() = default;
    Parameter(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)), grad(value.shape, 0.0) {}

    Var use(Tape& tape) { return tape.leaf(value, &grad); }
    Var frozen(Tape& tape) const { return tape.leaf(value, nullptr); }
    void zero_grad() { grad.fill(0.0); }
};

// Anything with trainable state. collect() appends raw pointers whose
// lifetime is tied to the module.
class Module {
public:
    virtual ~Module() = default;
    virtual void collect(std::vector<Parameter*>& out) = 0;

    std::vector<Parameter*> parameters() {
        std::vector<Parameter*> out;
        collect(out);
        return out;
    }
    void zero_grad() {
        for (Parameter* p : parameters()) p->zero_grad();
    }
    int64_t param_count() {
        int64_t n = 0;
        for (Parameter* p : parameters()) n += p->value.size();
        return n;
    }
};

inline Tensor xavier_init(SeedStream& rng, std::vector<int> shape, int fan_in, int fan_out) {
    const Scalar limit = std::sqrt(6.0 / (fan_in + fan_out));
    return rng.uniform_tensor(std::move(shape), -limit, limit);
}

struct Linear : Module {
    Parameter w;  // (in, out)
    Parameter b;  // (out)

    Linear() = default;
    Linear(const std::string& name, int in, int out, SeedStream& rng)
        : w(name + ".w", xavier_init(rng, {in, out}, in, out)), b(name + ".b", Tensor({out}, 0.0)) {}

    // x: (B, in) -> (B, out)
    Var operator()(Tape& t, Var x) { return t.add_rowvec(t.matmul(x, w.use(t)), b.use(t)); }

    void collect(std::vector<Parameter*>& out) override {
        out.push_back(&w);
        out.push_back(&b);
    }
};

struct Conv2d : Module {
    Parameter w;  // (Co, Ci, kh, kw)
    Parameter b;  // (Co)
    int stride = 1;
    int pad = 0;

    Conv2d() = default;
    Conv2d(const std::string& name, int ci, int co, int k, int stride_, int pad_, SeedStream& rng)
        : w(name + ".w", xavier_init(rng, {co, ci, k, k}, ci * k * k, co * k * k)),
          b(name + ".b", Tensor({co}, 0.0)),
          stride(stride_),
          pad(pad_) {}

    Var operator()(Tape& t, Var x) { return t.conv2d(x, w.use(t), b.use(t), stride, pad); }

    void zero_init() {
        w.value.fill(0.0);
        b.value.fill(0.0);
    }
    void collect(std::vector<Parameter*>& out) override {
        out.push_back(&w);
        out.push_back(&b);
    }
};

// Adam with bias correction; state lives alongside the bound parameters.
class Adam {
public:
    explicit Adam(std::vector<Parameter*> params, Scalar lr = 1e-3, Scalar beta1 = 0.9,
                  Scalar beta2 = 0.999, Scalar eps = 1e-8)
        : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
        for (Parameter* p : params_) {
            m_.emplace_back(p->value.shape, 0.0);
            v_.emplace_back(p->value.shape, 0.0);
        }
    }

    void step() {
        ++t_;
        const Scalar bc1 = 1.0 - std::pow(beta1_, t_);
        const Scalar bc2 = 1.0 - std::pow(beta2_, t_);
        for (size_t i = 0; i < params_.size(); ++i) {
            Tensor& val = params_[i]->value;
            const Tensor& g = params_[i]->grad;
            for (int64_t k = 0; k < val.size(); ++k) {
                m_[i][k] = beta1_ * m_[i][k] + (1.0 - beta1_) * g[k];
                v_[i][k] = beta2_ * v_[i][k] + (1.0 - beta2_) * g[k] * g[k];
                val[k] -= lr_ * (m_[i][k] / bc1) / (std::sqrt(v_[i][k] / bc2) + eps_);
            }
        }
    }

    void zero_grad() {
        for (Parameter* p : params_) p->zero_grad();
    }
    void set_lr(Scalar lr) { lr_ = lr; }

private:
    std::vector<Parameter*> params_;
    std::vector<Tensor> m_, v_;
    Scalar lr_, beta1_, beta2_, eps_;
    int t_ = 0;
};

// Sinusoidal timestep features, computed outside the graph (no parameters).
inline Tensor timestep_embedding(int t, int dim) {
    Tensor e({dim});
    const int half = dim / 2;
    for (int i = 0; i < half; ++i) {
        const Scalar freq = std::pow(10000.0, -static_cast<Scalar>(i) / std::max(half - 1, 1));
        e[2 * i] = std::sin(t * freq);
        e[2 * i + 1] = std::cos(t * freq);
    }
    if (dim % 2 == 1) e[dim - 1] = static_cast<Scalar>(t);
    return e;
}

}  // namespace ptalk::nn

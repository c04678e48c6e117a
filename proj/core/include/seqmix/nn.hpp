#pragma once

#include <string>
#include <vector>

#include "seqmix/rng.hpp"
#include "seqmix/tensor.hpp"

namespace seqmix::nn {

struct NamedParam {
    std::string name;
    Tensor tensor;
};

using ParamList = std::vector<NamedParam>;

/// Fill with uniform Kaiming-style values, bound sqrt(6 / fan_in).
void kaiming_uniform_(Tensor& t, std::int64_t fan_in, Rng& rng);
void gaussian_fill_(Tensor& t, double mean, double stddev, Rng& rng);

/// y = x W + b with W (in,out). Accepts (..,in) of rank 2 or 3.
struct Linear {
    Tensor w, b;

    Linear() = default;
    Linear(std::int64_t in, std::int64_t out, Rng& rng);

    Tensor forward(const Tensor& x) const { return add_bias(matmul(x, w), b); }
    void collect(ParamList& out, const std::string& prefix) const;
    std::int64_t param_count() const { return w.numel() + b.numel(); }
};

struct LayerNorm {
    Tensor gamma, beta;

    LayerNorm() = default;
    explicit LayerNorm(std::int64_t d);

    Tensor forward(const Tensor& x) const { return layer_norm(x, gamma, beta); }
    void collect(ParamList& out, const std::string& prefix) const;
    std::int64_t param_count() const { return gamma.numel() + beta.numel(); }
};

/// Adam with bias correction; state tensors are plain payloads, never on tape.
class Adam {
  public:
    explicit Adam(double lr = 1e-3, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

    void step(ParamList& params);

    std::int64_t step_count() const { return t_; }
    double learning_rate() const { return lr_; }
    void set_learning_rate(double lr) { lr_ = lr; }

    // checkpoint access
    std::vector<std::vector<real>>& moment1() { return m_; }
    std::vector<std::vector<real>>& moment2() { return v_; }
    void set_step_count(std::int64_t t) { t_ = t; }

  private:
    double lr_, beta1_, beta2_, eps_;
    std::int64_t t_ = 0;
    std::vector<std::vector<real>> m_, v_;
};

}  // namespace seqmix::nn

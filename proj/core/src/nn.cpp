#include "seqmix/nn.hpp"

#include <cmath>

namespace seqmix::nn {

void kaiming_uniform_(Tensor& t, std::int64_t fan_in, Rng& rng) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    for (auto& v : t.mutable_data()) v = static_cast<real>(rng.uniform(-bound, bound));
}

void gaussian_fill_(Tensor& t, double mean, double stddev, Rng& rng) {
    for (auto& v : t.mutable_data()) v = static_cast<real>(rng.gaussian(mean, stddev));
}

Linear::Linear(std::int64_t in, std::int64_t out, Rng& rng) {
    w = Tensor::zeros({in, out}, true);
    b = Tensor::zeros({out}, true);
    kaiming_uniform_(w, in, rng);
}

void Linear::collect(ParamList& out, const std::string& prefix) const {
    out.push_back({prefix + ".w", w});
    out.push_back({prefix + ".b", b});
}

LayerNorm::LayerNorm(std::int64_t d) {
    gamma = Tensor::full({d}, real(1), true);
    beta = Tensor::zeros({d}, true);
}

void LayerNorm::collect(ParamList& out, const std::string& prefix) const {
    out.push_back({prefix + ".gamma", gamma});
    out.push_back({prefix + ".beta", beta});
}

void Adam::step(ParamList& params) {
    if (m_.empty()) {
        m_.resize(params.size());
        v_.resize(params.size());
        for (std::size_t i = 0; i < params.size(); ++i) {
            m_[i].assign(static_cast<std::size_t>(params[i].tensor.numel()), real(0));
            v_[i].assign(static_cast<std::size_t>(params[i].tensor.numel()), real(0));
        }
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor& p = params[i].tensor;
        if (!p.has_grad()) continue;
        Tensor g = p.grad();
        auto gv = g.data();
        auto pv = p.mutable_data();
        auto& m = m_[i];
        auto& v = v_[i];
        for (std::size_t j = 0; j < pv.size(); ++j) {
            m[j] = static_cast<real>(beta1_ * m[j] + (1.0 - beta1_) * gv[j]);
            v[j] = static_cast<real>(beta2_ * v[j] + (1.0 - beta2_) * gv[j] * gv[j]);
            const double mhat = m[j] / bc1;
            const double vhat = v[j] / bc2;
            pv[j] -= static_cast<real>(lr_ * mhat / (std::sqrt(vhat) + eps_));
        }
    }
}

}  // namespace seqmix::nn

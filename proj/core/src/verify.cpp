#include "seqmix/verify.hpp"

#include <cmath>
#include <sstream>

#include "seqmix/bestrq.hpp"
#include "seqmix/encoder.hpp"
#include "seqmix/mixers.hpp"
#include "seqmix/nn.hpp"

namespace seqmix::verify {

namespace {

using mixers::MixerConfig;
using mixers::MixerKind;

Tensor random_input(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor t = Tensor::zeros(std::move(shape));
    for (auto& v : t.mutable_data()) v = static_cast<real>(rng.uniform(lo, hi));
    return t;
}

/// Central-difference comparison with an optional fault added to the analytic
/// side (the harness hook fault-injection tests rely on).
double max_grad_error(const std::function<Tensor(const Tensor&)>& f, Tensor x, double step,
                      double fault) {
    x.set_requires_grad(true);
    x.zero_grad();
    std::vector<real> analytic;
    {
        Tape tape;
        Tensor loss = f(x);
        tape.backward(loss);
        Tensor g = x.grad();
        analytic.assign(g.data().begin(), g.data().end());
    }
    if (!analytic.empty()) analytic[0] += static_cast<real>(fault);

    double max_err = 0.0;
    auto xd = x.mutable_data();
    for (std::size_t i = 0; i < xd.size(); ++i) {
        const real saved = xd[i];
        xd[i] = saved + static_cast<real>(step);
        const double fp = static_cast<double>(f(x).item());
        xd[i] = saved - static_cast<real>(step);
        const double fm = static_cast<double>(f(x).item());
        xd[i] = saved;
        const double fd = (fp - fm) / (2.0 * step);
        const double an = static_cast<double>(analytic[i]);
        const double denom = std::max(std::abs(an), std::abs(fd));
        max_err = std::max(max_err, denom < 1e-8 ? std::abs(an - fd) : std::abs(an - fd) / denom);
    }
    return max_err;
}

MixerConfig small_config(MixerKind kind, std::uint64_t seed) {
    MixerConfig cfg;
    cfg.kind = kind;
    cfg.d_model = 8;
    cfg.n_heads = 2;
    cfg.d_summary = 6;
    cfg.d_tmmlp = 6;
    cfg.d_state = 4;
    cfg.d_inner = 10;
    cfg.seed = seed;
    return cfg;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    double m = 0.0;
    auto av = a.data(), bv = b.data();
    for (std::size_t i = 0; i < av.size(); ++i)
        m = std::max(m, std::abs(static_cast<double>(av[i]) - static_cast<double>(bv[i])));
    return m;
}

Tensor permute_time(const Tensor& x, const std::vector<std::int64_t>& perm) {
    const std::int64_t B = x.dim(0), T = x.dim(1), d = x.dim(2);
    Tensor out = Tensor::zeros(x.shape());
    auto xv = x.data();
    auto ov = out.mutable_data();
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t t = 0; t < T; ++t)
            std::copy(xv.data() + (b * T + perm[static_cast<std::size_t>(t)]) * d,
                      xv.data() + (b * T + perm[static_cast<std::size_t>(t)] + 1) * d,
                      ov.data() + (b * T + t) * d);
    return out;
}

std::vector<std::int64_t> random_permutation(std::int64_t n, Rng& rng) {
    std::vector<std::int64_t> perm(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) perm[static_cast<std::size_t>(i)] = i;
    for (std::int64_t i = n - 1; i > 0; --i) {
        const auto j = static_cast<std::int64_t>(rng.uniform_index(static_cast<std::uint64_t>(i + 1)));
        std::swap(perm[static_cast<std::size_t>(i)], perm[static_cast<std::size_t>(j)]);
    }
    return perm;
}

}  // namespace

std::vector<CheckResult> run_property_suite(const VerifyOptions& options) {
    std::vector<CheckResult> results;
    auto wants = [&](const std::string& name) {
        return options.only_filter.empty() || name.find(options.only_filter) != std::string::npos;
    };
    auto add = [&](const std::string& name, bool pass, const std::string& detail) {
        results.push_back({name, pass, detail});
    };

    // gradient correctness per mixer: d(sum of outputs)/dx vs central differences
    for (MixerKind kind : mixers::all_kinds()) {
        const std::string name = "gradcheck." + mixers::kind_name(kind);
        if (!wants(name)) continue;
        Rng rng(options.seed);
        MixerConfig cfg = small_config(kind, options.seed + 1);
        auto mixer = mixers::make_mixer(cfg);
        Tensor x = random_input({1, 6, cfg.d_model}, rng);
        const double err = max_grad_error(
            [&](const Tensor& in) { return sum_all(mixer->forward(in)); }, x, 1e-5,
            options.inject_gradient_fault);
        std::ostringstream detail;
        detail << "max rel err " << err;
        add(name, err < 1e-5, detail.str());
    }

    // scan output equals the sequential recurrence
    if (wants("mamba.scan_recurrence")) {
        Rng rng(options.seed + 2);
        double worst = 0.0;
        for (int trial = 0; trial < 10; ++trial) {
            for (std::int64_t t_steps : {1, 2, 7, 64}) {
                const std::int64_t B = 2, H = 3, N = 4;
                Tensor u = random_input({B, t_steps, H}, rng);
                Tensor abar = random_input({B, t_steps, H * N}, rng, 0.05, 0.95);
                Tensor bcoef = random_input({B, t_steps, H * N}, rng);
                Tensor c = random_input({B, t_steps, N}, rng);
                Tensor oracle = mixers::mamba_recurrence_oracle(u, abar, bcoef, c);
                Tensor ux = Tensor::zeros({B, t_steps, H * N});
                {
                    auto uv = u.data();
                    auto bv = bcoef.data();
                    auto xv = ux.mutable_data();
                    for (std::int64_t i = 0; i < B * t_steps; ++i)
                        for (std::int64_t hh = 0; hh < H; ++hh)
                            for (std::int64_t n = 0; n < N; ++n)
                                xv[(i * H + hh) * N + n] = bv[(i * H + hh) * N + n] * uv[i * H + hh];
                }
                Tensor scanned = ssm_output(linear_scan(abar, ux), c);
                worst = std::max(worst, max_abs_diff(oracle, scanned));
            }
        }
        std::ostringstream detail;
        detail << "max |scan - recurrence| " << worst;
        add("mamba.scan_recurrence", worst < 1e-10, detail.str());
    }

    // quantizer invariances
    if (wants("quantizer.scale_invariance")) {
        Rng rng(options.seed + 3);
        bestrq::RandomProjection proj = bestrq::RandomProjection::create(20, 8, rng);
        bestrq::Codebook book = bestrq::Codebook::create(64, 8, rng);
        bool ok = true;
        for (int trial = 0; trial < 100 && ok; ++trial) {
            std::vector<real> m(80);
            for (auto& v : m) v = static_cast<real>(rng.gaussian());
            const std::int32_t base = bestrq::quantize(m, proj, book);
            for (double lambda : {1e-3, 1.0, 1e3}) {
                std::vector<real> scaled = m;
                for (auto& v : scaled) v = static_cast<real>(static_cast<double>(v) * lambda);
                ok = ok && bestrq::quantize(scaled, proj, book) == base;
            }
        }
        add("quantizer.scale_invariance", ok, ok ? "100 instances" : "mismatch found");
    }

    if (wants("quantizer.argmin_equals_argmax_cosine")) {
        Rng rng(options.seed + 4);
        bestrq::RandomProjection proj = bestrq::RandomProjection::create(20, 8, rng);
        bestrq::Codebook book = bestrq::Codebook::create(64, 8, rng);
        bool ok = true;
        for (int trial = 0; trial < 100 && ok; ++trial) {
            std::vector<real> m(80);
            for (auto& v : m) v = static_cast<real>(rng.gaussian());
            const std::int32_t dist_route = bestrq::quantize(m, proj, book);

            // cosine route, recomputed from scratch
            std::vector<double> am(8, 0.0);
            auto av = proj.a.data();
            for (std::int64_t i = 0; i < 80; ++i)
                for (std::int64_t j = 0; j < 8; ++j)
                    am[static_cast<std::size_t>(j)] += static_cast<double>(m[static_cast<std::size_t>(i)]) *
                                                       static_cast<double>(av[i * 8 + j]);
            double norm = 0.0;
            for (double v : am) norm += v * v;
            norm = std::sqrt(norm);
            auto cv = book.c.data();
            std::int32_t best = 0;
            double best_cos = -2.0;
            for (std::int64_t i = 0; i < 64; ++i) {
                double dot = 0.0, cn = 0.0;
                for (std::int64_t j = 0; j < 8; ++j) {
                    dot += static_cast<double>(cv[i * 8 + j]) * am[static_cast<std::size_t>(j)];
                    cn += static_cast<double>(cv[i * 8 + j]) * static_cast<double>(cv[i * 8 + j]);
                }
                const double cos = dot / (std::sqrt(cn) * norm);
                if (cos > best_cos) {
                    best_cos = cos;
                    best = static_cast<std::int32_t>(i);
                }
            }
            ok = ok && best == dist_route;
        }
        add("quantizer.argmin_equals_argmax_cosine", ok, ok ? "100 instances" : "routes disagree");
    }

    // permutation equivariance for the four order-free mixers
    for (MixerKind kind : {MixerKind::MHSA, MixerKind::Fastformer, MixerKind::HyperMixing,
                           MixerKind::SummaryMixing}) {
        const std::string name = "equivariance." + mixers::kind_name(kind);
        if (!wants(name)) continue;
        Rng rng(options.seed + 5);
        MixerConfig cfg = small_config(kind, options.seed + 6);
        auto mixer = mixers::make_mixer(cfg);
        const std::int64_t T = 11;
        Tensor x = random_input({2, T, cfg.d_model}, rng);
        Tensor y = mixer->forward(x, nullptr);
        double worst = 0.0;
        for (int trial = 0; trial < 5; ++trial) {
            auto perm = random_permutation(T, rng);
            Tensor y_perm = mixer->forward(permute_time(x, perm), nullptr);
            worst = std::max(worst, max_abs_diff(y_perm, permute_time(y, perm)));
        }
        std::ostringstream detail;
        detail << "max |mix(Px) - P mix(x)| " << worst;
        add(name, worst < 1e-10, detail.str());
    }

    // Mamba must be order sensitive
    if (wants("mamba.order_sensitivity")) {
        Rng rng(options.seed + 7);
        MixerConfig cfg = small_config(MixerKind::Mamba, options.seed + 8);
        auto mixer = mixers::make_mixer(cfg);
        const std::int64_t T = 11;
        Tensor x = random_input({1, T, cfg.d_model}, rng);
        Tensor y = mixer->forward(x, nullptr);
        bool violated = false;
        for (int trial = 0; trial < 5 && !violated; ++trial) {
            auto perm = random_permutation(T, rng);
            Tensor y_perm = mixer->forward(permute_time(x, perm), nullptr);
            violated = max_abs_diff(y_perm, permute_time(y, perm)) > 1e-6;
        }
        add("mamba.order_sensitivity", violated,
            violated ? "permutation changes output" : "unexpectedly equivariant");
    }

    // parameter matching at the desk-scale budget
    if (wants("params.matching")) {
        encoder::EncoderConfig base;
        base.mixer.d_model = 128;
        base.mixer.n_heads = 4;
        base.n_layers = 4;
        base.d_ffn = 1280;
        base.vocab = 512;
        base.d_feat = 80;
        encoder::ParamBudget budget{3'000'000, 0.02};
        bool ok = true;
        std::ostringstream detail;
        try {
            auto configs = encoder::build_matched_configs(budget, base);
            for (const auto& cfg : configs) {
                const std::int64_t analytic = encoder::param_count(cfg);
                const std::int64_t recount = encoder::Encoder(cfg).param_count();
                const double rel = std::abs(static_cast<double>(analytic - budget.target_params)) /
                                   static_cast<double>(budget.target_params);
                detail << mixers::kind_name(cfg.mixer.kind) << "=" << recount << " ";
                ok = ok && analytic == recount && rel <= budget.tolerance_fraction;
            }
        } catch (const std::exception& e) {
            ok = false;
            detail << e.what();
        }
        add("params.matching", ok, detail.str());
    }

    return results;
}

bool all_passed(const std::vector<CheckResult>& results) {
    for (const auto& r : results)
        if (!r.pass) return false;
    return true;
}

}  // namespace seqmix::verify

#include "seqmix/mixers.hpp"

#include <cmath>

namespace seqmix::mixers {

MixerKind parse_kind(const std::string& name) {
    if (name == "mhsa") return MixerKind::MHSA;
    if (name == "fastformer") return MixerKind::Fastformer;
    if (name == "hypermixing") return MixerKind::HyperMixing;
    if (name == "summarymixing") return MixerKind::SummaryMixing;
    if (name == "mamba") return MixerKind::Mamba;
    throw ContractError("unknown mixer kind '" + name +
                        "' (expected mhsa|fastformer|hypermixing|summarymixing|mamba)");
}

std::string kind_name(MixerKind kind) {
    switch (kind) {
        case MixerKind::MHSA: return "mhsa";
        case MixerKind::Fastformer: return "fastformer";
        case MixerKind::HyperMixing: return "hypermixing";
        case MixerKind::SummaryMixing: return "summarymixing";
        case MixerKind::Mamba: return "mamba";
    }
    throw ContractError("unknown mixer kind value");
}

const std::vector<MixerKind>& all_kinds() {
    static const std::vector<MixerKind> kinds = {MixerKind::MHSA, MixerKind::Fastformer,
                                                 MixerKind::HyperMixing, MixerKind::SummaryMixing,
                                                 MixerKind::Mamba};
    return kinds;
}

void MixerConfig::validate() const {
    if (d_model < 1 || n_heads < 1 || d_summary < 1 || d_tmmlp < 1 || d_state < 1 || d_inner < 1)
        throw ContractError("MixerConfig: all widths must be >= 1");
    if ((kind == MixerKind::MHSA || kind == MixerKind::Fastformer) && d_model % n_heads != 0)
        throw ContractError("MixerConfig: d_model=" + std::to_string(d_model) +
                            " not divisible by n_heads=" + std::to_string(n_heads));
}

Tensor sinusoid_positions(std::int64_t t_steps, std::int64_t dim) {
    std::vector<real> out(static_cast<std::size_t>(t_steps * dim));
    for (std::int64_t t = 0; t < t_steps; ++t) {
        for (std::int64_t i = 0; i < dim; ++i) {
            const double freq = std::pow(10000.0, -2.0 * static_cast<double>(i / 2) / static_cast<double>(dim));
            const double angle = static_cast<double>(t) * freq;
            out[static_cast<std::size_t>(t * dim + i)] =
                static_cast<real>((i % 2 == 0) ? std::sin(angle) : std::cos(angle));
        }
    }
    return Tensor::from_vector({t_steps, dim}, std::move(out));
}

// ---- MHSA -------------------------------------------------------------------

MhsaCell::MhsaCell(const MixerConfig& config, Rng& rng)
    : n_heads(config.n_heads),
      q(config.d_model, config.d_model, rng),
      k(config.d_model, config.d_model, rng),
      v(config.d_model, config.d_model, rng),
      o(config.d_model, config.d_model, rng) {}

Tensor MhsaCell::forward(const Tensor& x, MixStats* stats) const {
    const std::int64_t B = x.dim(0);
    const std::int64_t dh = x.dim(2) / n_heads;
    const real inv_sqrt = static_cast<real>(1.0 / std::sqrt(static_cast<double>(dh)));

    std::vector<Tensor> outs;
    outs.reserve(static_cast<std::size_t>(B));
    for (std::int64_t b = 0; b < B; ++b) {
        Tensor xb = slice_batch(x, b);
        Tensor qh = split_heads(q.forward(xb), n_heads);  // (H,T,dh)
        Tensor kh = split_heads(k.forward(xb), n_heads);
        Tensor vh = split_heads(v.forward(xb), n_heads);
        MacScope scope;
        Tensor attn;
        {
            Tensor scores = scale(matmul(qh, transpose_last2(kh)), inv_sqrt);  // (H,T,T)
            attn = softmax_lastdim(scores);
        }
        Tensor ctx = matmul(attn, vh);  // (H,T,dh)
        if (stats) stats->mixing_macs += scope.macs();
        outs.push_back(merge_heads(ctx));
    }
    return o.forward(stack_batch(outs));
}

void MhsaCell::collect(nn::ParamList& out, const std::string& prefix) const {
    q.collect(out, prefix + ".q");
    k.collect(out, prefix + ".k");
    v.collect(out, prefix + ".v");
    o.collect(out, prefix + ".o");
}

// ---- Fastformer -------------------------------------------------------------

FastformerCell::FastformerCell(const MixerConfig& config, Rng& rng)
    : n_heads(config.n_heads),
      q(config.d_model, config.d_model, rng),
      k(config.d_model, config.d_model, rng),
      v(config.d_model, config.d_model, rng),
      o(config.d_model, config.d_model, rng) {
    const std::int64_t dh = config.d_model / config.n_heads;
    for (std::int64_t h = 0; h < n_heads; ++h) {
        Tensor wq = Tensor::zeros({dh}, true);
        Tensor wk = Tensor::zeros({dh}, true);
        nn::kaiming_uniform_(wq, dh, rng);
        nn::kaiming_uniform_(wk, dh, rng);
        w_query_score.push_back(wq);
        w_key_score.push_back(wk);
    }
}

Tensor fastformer_additive_pool(const Tensor& m, const Tensor& w) {
    if (m.rank() != 3 || w.rank() != 1 || m.dim(2) != w.dim(0))
        throw ShapeError("fastformer_additive_pool: expected (B,T,c) and (c), got " +
                         shape_to_string(m.shape()) + " and " + shape_to_string(w.shape()));
    const std::int64_t B = m.dim(0), c = m.dim(2);
    const real inv_sqrt = static_cast<real>(1.0 / std::sqrt(static_cast<double>(c)));
    Tensor scores = scale(matmul(m, reshape(w, {c, 1})), inv_sqrt);  // (B,T,1)
    Tensor alpha = softmax_lastdim(transpose_last2(scores));        // (B,1,T)
    return reshape(matmul(alpha, m), {B, c});
}

Tensor FastformerCell::forward(const Tensor& x, MixStats* stats) const {
    const std::int64_t d = x.dim(2);
    const std::int64_t dh = d / n_heads;

    Tensor Q = q.forward(x), K = k.forward(x), V = v.forward(x);
    Tensor u;  // (B,T,d) after head concat
    for (std::int64_t h = 0; h < n_heads; ++h) {
        Tensor qh = slice_lastdim(Q, h * dh, (h + 1) * dh);
        Tensor kh = slice_lastdim(K, h * dh, (h + 1) * dh);
        Tensor vh = slice_lastdim(V, h * dh, (h + 1) * dh);

        MacScope pool1;
        Tensor q_glob = fastformer_additive_pool(qh, w_query_score[static_cast<std::size_t>(h)]);
        if (stats) stats->mixing_macs += pool1.macs();

        Tensor p = mul_time_broadcast(kh, q_glob);  // global-context-aware keys

        MacScope pool2;
        Tensor k_glob = fastformer_additive_pool(p, w_key_score[static_cast<std::size_t>(h)]);
        if (stats) stats->mixing_macs += pool2.macs();

        Tensor uh = mul_time_broadcast(vh, k_glob);
        u = (h == 0) ? uh : concat_lastdim(u, uh);
    }
    return add(o.forward(u), Q);  // residual on the query path
}

void FastformerCell::collect(nn::ParamList& out, const std::string& prefix) const {
    q.collect(out, prefix + ".q");
    k.collect(out, prefix + ".k");
    v.collect(out, prefix + ".v");
    o.collect(out, prefix + ".o");
    for (std::size_t h = 0; h < w_query_score.size(); ++h) {
        out.push_back({prefix + ".wq_score.h" + std::to_string(h), w_query_score[h]});
        out.push_back({prefix + ".wk_score.h" + std::to_string(h), w_key_score[h]});
    }
}

// ---- HyperMixing --------------------------------------------------------------

HyperMixingCell::HyperMixingCell(const MixerConfig& config, Rng& rng)
    : positional(config.hyper_positional),
      trunk(config.d_model + (config.hyper_positional ? kPosFeatureDim : 0), config.d_tmmlp, rng),
      head_w1(config.d_tmmlp, config.d_tmmlp, rng),
      head_w2(config.d_tmmlp, config.d_tmmlp, rng),
      out_proj(config.d_model, config.d_model, rng) {}

Tensor tm_mlp(const Tensor& x, const Tensor& w1, const Tensor& w2) {
    if (x.rank() != 3 || w1.rank() != 3 || w2.rank() != 3)
        throw ShapeError("tm_mlp: expected rank-3 inputs");
    if (w1.dim(0) != x.dim(0) || w2.dim(0) != x.dim(0) || w1.dim(1) != x.dim(1) ||
        w2.dim(1) != x.dim(1))
        throw ShapeError("tm_mlp: token counts differ: x " + shape_to_string(x.shape()) + ", W1 " +
                         shape_to_string(w1.shape()) + ", W2 " + shape_to_string(w2.shape()));
    const std::int64_t d = x.dim(2);
    Tensor mixed = matmul(transpose_last2(w2), x);  // (B,n,d)
    Tensor y = matmul(w1, gelu(mixed));             // (B,T,d)
    Tensor unit_gamma = Tensor::full({d}, real(1));
    Tensor zero_beta = Tensor::zeros({d});
    return layer_norm(y, unit_gamma, zero_beta);
}

Tensor HyperMixingCell::forward(const Tensor& x, MixStats* stats) const {
    const std::int64_t B = x.dim(0), T = x.dim(1);
    Tensor hyper_in = x;
    if (positional) {
        Tensor pos = sinusoid_positions(T, kPosFeatureDim);
        std::vector<Tensor> reps(static_cast<std::size_t>(B), pos);
        hyper_in = concat_lastdim(x, stack_batch(reps));
    }
    Tensor t1 = gelu(trunk.forward(hyper_in));
    Tensor w1_rows = head_w1.forward(t1);
    Tensor w2_rows = head_w2.forward(t1);
    MacScope scope;
    Tensor mixed = tm_mlp(x, w1_rows, w2_rows);
    if (stats) stats->mixing_macs += scope.macs();
    return out_proj.forward(mixed);
}

void HyperMixingCell::collect(nn::ParamList& out, const std::string& prefix) const {
    trunk.collect(out, prefix + ".trunk");
    head_w1.collect(out, prefix + ".head_w1");
    head_w2.collect(out, prefix + ".head_w2");
    out_proj.collect(out, prefix + ".out");
}

// ---- SummaryMixing --------------------------------------------------------------

SummaryMixingCell::SummaryMixingCell(const MixerConfig& config, Rng& rng)
    : s1(config.d_model, config.d_summary, rng),
      s2(config.d_summary, config.d_summary, rng),
      f1(config.d_model, config.d_summary, rng),
      f2(config.d_summary, config.d_model, rng),
      c1(config.d_model + config.d_summary, config.d_summary, rng),
      c2(config.d_summary, config.d_model, rng) {}

Tensor SummaryMixingCell::forward(const Tensor& x, MixStats* stats) const {
    const std::int64_t T = x.dim(1);
    Tensor s_tok = s2.forward(gelu(s1.forward(x)));  // (B,T,ds)
    MacScope scope;
    Tensor summary = mean_over_time(s_tok);  // (B,ds)
    if (stats) stats->mixing_macs += scope.macs();
    Tensor f_tok = f2.forward(gelu(f1.forward(x)));  // (B,T,d)
    Tensor cat = concat_lastdim(f_tok, repeat_over_time(summary, T));
    return c2.forward(gelu(c1.forward(cat)));
}

void SummaryMixingCell::collect(nn::ParamList& out, const std::string& prefix) const {
    s1.collect(out, prefix + ".s1");
    s2.collect(out, prefix + ".s2");
    f1.collect(out, prefix + ".f1");
    f2.collect(out, prefix + ".f2");
    c1.collect(out, prefix + ".c1");
    c2.collect(out, prefix + ".c2");
}

// ---- Mamba -----------------------------------------------------------------------

namespace {

Tensor init_a_log(std::int64_t h, std::int64_t n) {
    // A = -exp(a_log) starts at -(1..N) for every channel
    std::vector<real> vals(static_cast<std::size_t>(h * n));
    for (std::int64_t i = 0; i < h; ++i)
        for (std::int64_t j = 0; j < n; ++j)
            vals[static_cast<std::size_t>(i * n + j)] =
                static_cast<real>(std::log(static_cast<double>(j + 1)));
    Tensor t = Tensor::from_vector({h, n}, std::move(vals));
    t.set_requires_grad(true);
    return t;
}

MambaCell::Direction make_direction(const MixerConfig& config, Rng& rng) {
    MambaCell::Direction dir;
    dir.in_proj = nn::Linear(config.d_model, config.d_inner, rng);
    dir.gate_proj = nn::Linear(config.d_model, config.d_inner, rng);
    dir.delta_proj = nn::Linear(config.d_model, config.d_inner, rng);
    dir.b_proj = nn::Linear(config.d_model, config.d_state, rng);
    dir.c_proj = nn::Linear(config.d_model, config.d_state, rng);
    dir.a_log = init_a_log(config.d_inner, config.d_state);
    return dir;
}

void collect_direction(const MambaCell::Direction& dir, nn::ParamList& out,
                       const std::string& prefix) {
    dir.in_proj.collect(out, prefix + ".in");
    dir.gate_proj.collect(out, prefix + ".gate");
    dir.delta_proj.collect(out, prefix + ".delta");
    dir.b_proj.collect(out, prefix + ".b");
    dir.c_proj.collect(out, prefix + ".c");
    out.push_back({prefix + ".a_log", dir.a_log});
}

}  // namespace

MambaCell::MambaCell(const MixerConfig& config, Rng& rng)
    : fwd(make_direction(config, rng)),
      bwd(make_direction(config, rng)),
      combine(2 * config.d_inner, config.d_model, rng) {}

Tensor MambaCell::run_direction(const Direction& dir, const Tensor& x, MixStats* stats) const {
    Tensor u = dir.in_proj.forward(x);                     // (B,T,H)
    Tensor z = dir.gate_proj.forward(x);                   // (B,T,H)
    Tensor delta = softplus(dir.delta_proj.forward(x));    // (B,T,H)
    Tensor b_t = dir.b_proj.forward(x);                    // (B,T,N)
    Tensor c_t = dir.c_proj.forward(x);                    // (B,T,N)
    Tensor a_diag = scale(exp(dir.a_log), real(-1));       // (H,N), strictly negative

    MacScope scope;
    Tensor y = ssm_scan(delta, a_diag, b_t, u, c_t);  // (B,T,H)
    if (stats) stats->mixing_macs += scope.macs();
    return mul(y, silu(z));
}

Tensor MambaCell::forward(const Tensor& x, MixStats* stats) const {
    Tensor y_fwd = run_direction(fwd, x, stats);
    Tensor y_bwd = reverse_time(run_direction(bwd, reverse_time(x), stats));
    return combine.forward(concat_lastdim(y_fwd, y_bwd));
}

void MambaCell::collect(nn::ParamList& out, const std::string& prefix) const {
    collect_direction(fwd, out, prefix + ".fwd");
    collect_direction(bwd, out, prefix + ".bwd");
    combine.collect(out, prefix + ".combine");
}

Tensor mamba_recurrence_oracle(const Tensor& x, const Tensor& abar, const Tensor& bbar,
                               const Tensor& c) {
    if (x.rank() != 3 || abar.rank() != 3 || bbar.rank() != 3 || c.rank() != 3)
        throw ShapeError("mamba_recurrence_oracle: expected rank-3 inputs");
    const std::int64_t B = x.dim(0), T = x.dim(1), H = x.dim(2);
    const std::int64_t N = c.dim(2);
    if (abar.dim(2) != H * N || bbar.dim(2) != H * N)
        throw ShapeError("mamba_recurrence_oracle: abar/bbar last dim must be H*N");

    std::vector<real> y(static_cast<std::size_t>(B * T * H), real(0));
    std::vector<real> h(static_cast<std::size_t>(H * N));
    auto xv = x.data();
    auto av = abar.data();
    auto bv = bbar.data();
    auto cv = c.data();
    for (std::int64_t b = 0; b < B; ++b) {
        std::fill(h.begin(), h.end(), real(0));
        for (std::int64_t t = 0; t < T; ++t) {
            const real* arow = av.data() + (b * T + t) * H * N;
            const real* brow = bv.data() + (b * T + t) * H * N;
            const real* crow = cv.data() + (b * T + t) * N;
            for (std::int64_t hh = 0; hh < H; ++hh) {
                const real xval = xv[(b * T + t) * H + hh];
                real acc = 0;
                for (std::int64_t n = 0; n < N; ++n) {
                    real& state = h[static_cast<std::size_t>(hh * N + n)];
                    state = arow[hh * N + n] * state + brow[hh * N + n] * xval;
                    acc += crow[n] * state;
                }
                y[static_cast<std::size_t>((b * T + t) * H + hh)] = acc;
            }
        }
    }
    return Tensor::from_vector({B, T, H}, std::move(y));
}

// ---- dispatch -----------------------------------------------------------------

std::unique_ptr<Mixer> make_mixer(const MixerConfig& config) {
    config.validate();
    Rng rng(config.seed);
    switch (config.kind) {
        case MixerKind::MHSA: return std::make_unique<MhsaCell>(config, rng);
        case MixerKind::Fastformer: return std::make_unique<FastformerCell>(config, rng);
        case MixerKind::HyperMixing: return std::make_unique<HyperMixingCell>(config, rng);
        case MixerKind::SummaryMixing: return std::make_unique<SummaryMixingCell>(config, rng);
        case MixerKind::Mamba: return std::make_unique<MambaCell>(config, rng);
    }
    throw ContractError("make_mixer: unknown mixer kind");
}

MixerOutput mix(const Tensor& x, const MixerConfig& config) {
    if (x.rank() != 3)
        throw ShapeError("mix: expected (B,T,d), got " + shape_to_string(x.shape()));
    if (x.dim(2) != config.d_model)
        throw ShapeError("mix: input width " + std::to_string(x.dim(2)) +
                         " differs from d_model " + std::to_string(config.d_model));
    auto mixer = make_mixer(config);
    MixStats stats;
    Tensor hidden = mixer->forward(x, &stats);
    return {hidden, stats.mixing_macs};
}

namespace {

Tensor one_shot(const Tensor& x, const MixerConfig& config, MixerKind kind) {
    MixerConfig c = config;
    c.kind = kind;
    return mix(x, c).hidden;
}

}  // namespace

Tensor mhsa_forward(const Tensor& x, const MixerConfig& c) { return one_shot(x, c, MixerKind::MHSA); }
Tensor fastformer_forward(const Tensor& x, const MixerConfig& c) {
    return one_shot(x, c, MixerKind::Fastformer);
}
Tensor hypermixing_forward(const Tensor& x, const MixerConfig& c) {
    return one_shot(x, c, MixerKind::HyperMixing);
}
Tensor summarymixing_forward(const Tensor& x, const MixerConfig& c) {
    return one_shot(x, c, MixerKind::SummaryMixing);
}
Tensor mamba_forward(const Tensor& x, const MixerConfig& c) { return one_shot(x, c, MixerKind::Mamba); }

}  // namespace seqmix::mixers

#include "seqmix/encoder.hpp"

#include <cmath>
#include <cstdlib>

namespace seqmix::encoder {

using mixers::MixerKind;

PositionalMode parse_positional(const std::string& name) {
    if (name == "none") return PositionalMode::None;
    if (name == "sinusoidal") return PositionalMode::Sinusoidal;
    throw ContractError("unknown positional mode '" + name + "' (expected none|sinusoidal)");
}

std::string positional_name(PositionalMode mode) {
    return mode == PositionalMode::None ? "none" : "sinusoidal";
}

void EncoderConfig::validate() const {
    mixer.validate();
    if (n_layers < 1) throw ContractError("EncoderConfig: n_layers must be >= 1");
    if (conv_kernel < 1 || conv_kernel % 2 == 0)
        throw ContractError("EncoderConfig: conv_kernel must be odd, got " +
                            std::to_string(conv_kernel));
    if (vocab < 1 || d_ffn < 1 || d_feat < 1)
        throw ContractError("EncoderConfig: vocab, d_ffn, d_feat must be >= 1");
}

void ParamBudget::validate() const {
    if (target_params < 1) throw ContractError("ParamBudget: target must be positive");
    if (!(tolerance_fraction > 0.0 && tolerance_fraction <= 0.05))
        throw ContractError("ParamBudget: tolerance_fraction must lie in (0, 0.05]");
}

// ---- frontend ----------------------------------------------------------------

ConvFrontend::ConvFrontend(std::int64_t d_feat, std::int64_t d_model, Rng& rng) {
    w1 = Tensor::zeros({d_model, 3, d_feat}, true);
    b1 = Tensor::zeros({d_model}, true);
    w2 = Tensor::zeros({d_model, 3, d_model}, true);
    b2 = Tensor::zeros({d_model}, true);
    nn::kaiming_uniform_(w1, 3 * d_feat, rng);
    nn::kaiming_uniform_(w2, 3 * d_model, rng);
}

Tensor ConvFrontend::forward(const Tensor& features) const {
    Tensor h = gelu(conv1d(features, w1, b1, 2, 1, 1));
    return gelu(conv1d(h, w2, b2, 2, 1, 1));
}

void ConvFrontend::collect(nn::ParamList& out, const std::string& prefix) const {
    out.push_back({prefix + ".conv1.w", w1});
    out.push_back({prefix + ".conv1.b", b1});
    out.push_back({prefix + ".conv2.w", w2});
    out.push_back({prefix + ".conv2.b", b2});
}

// ---- block ---------------------------------------------------------------------

Block::Block(const EncoderConfig& config, Rng& rng)
    : ln_ffn1(config.mixer.d_model),
      ln_mixer(config.mixer.d_model),
      ln_conv(config.mixer.d_model),
      ln_ffn2(config.mixer.d_model),
      ln_final(config.mixer.d_model),
      ffn1_in(config.mixer.d_model, config.d_ffn, rng),
      ffn1_out(config.d_ffn, config.mixer.d_model, rng),
      ffn2_in(config.mixer.d_model, config.d_ffn, rng),
      ffn2_out(config.d_ffn, config.mixer.d_model, rng),
      conv_kernel(config.conv_kernel) {
    conv_w = Tensor::zeros({config.mixer.d_model, config.conv_kernel, 1}, true);
    conv_b = Tensor::zeros({config.mixer.d_model}, true);
    nn::kaiming_uniform_(conv_w, config.conv_kernel, rng);
    mixers::MixerConfig mc = config.mixer;
    mc.seed = rng.next_u64();
    mixer = make_mixer(mc);
}

Tensor Block::forward(const Tensor& x, mixers::MixStats* stats) const {
    Tensor h = add(x, scale(ffn1_out.forward(gelu(ffn1_in.forward(ln_ffn1.forward(x)))), real(0.5)));
    h = add(h, mixer->forward(ln_mixer.forward(h), stats));
    h = add(h, silu(conv1d(ln_conv.forward(h), conv_w, conv_b, 1, (conv_kernel - 1) / 2,
                           conv_w.dim(0))));
    h = add(h, scale(ffn2_out.forward(gelu(ffn2_in.forward(ln_ffn2.forward(h)))), real(0.5)));
    return ln_final.forward(h);
}

void Block::collect(nn::ParamList& out, const std::string& prefix) const {
    ln_ffn1.collect(out, prefix + ".ln_ffn1");
    ffn1_in.collect(out, prefix + ".ffn1_in");
    ffn1_out.collect(out, prefix + ".ffn1_out");
    ln_mixer.collect(out, prefix + ".ln_mixer");
    mixer->collect(out, prefix + ".mixer");
    ln_conv.collect(out, prefix + ".ln_conv");
    out.push_back({prefix + ".dwconv.w", conv_w});
    out.push_back({prefix + ".dwconv.b", conv_b});
    ln_ffn2.collect(out, prefix + ".ln_ffn2");
    ffn2_in.collect(out, prefix + ".ffn2_in");
    ffn2_out.collect(out, prefix + ".ffn2_out");
    ln_final.collect(out, prefix + ".ln_final");
}

// ---- encoder ----------------------------------------------------------------------

Encoder::Encoder(const EncoderConfig& config) : config_(config) {
    config_.validate();
    Rng rng(config.mixer.seed);
    frontend = ConvFrontend(config.d_feat, config.mixer.d_model, rng);
    blocks.reserve(static_cast<std::size_t>(config.n_layers));
    for (std::int64_t i = 0; i < config.n_layers; ++i) blocks.emplace_back(config, rng);
    head = nn::Linear(config.mixer.d_model, config.vocab, rng);
}

Tensor Encoder::encode_hidden(const Tensor& features, mixers::MixStats* stats) const {
    if (features.rank() != 3)
        throw ShapeError("encode: features must be (B,T,d_feat), got " +
                         shape_to_string(features.shape()));
    const std::int64_t t_raw = features.dim(1);
    if (t_raw < 4)
        throw ShapeError("encode: input has " + std::to_string(t_raw) +
                         " frames; minimum length is 4");
    Tensor h = frontend.forward(features);  // (B, ceil(T/4), d)
    if (config_.positional == PositionalMode::Sinusoidal) {
        const std::int64_t B = h.dim(0), T = h.dim(1), d = h.dim(2);
        Tensor pos = mixers::sinusoid_positions(T, d);
        std::vector<Tensor> reps(static_cast<std::size_t>(B), pos);
        h = add(h, stack_batch(reps));
    }
    const std::int64_t t_target = t_raw / 4;  // stacked-target axis
    if (h.dim(1) > t_target) h = slice_time(h, 0, t_target);
    for (const Block& block : blocks) h = block.forward(h, stats);
    return h;
}

Tensor Encoder::encode(const Tensor& features, mixers::MixStats* stats) const {
    return head.forward(encode_hidden(features, stats));
}

nn::ParamList Encoder::parameters() const {
    nn::ParamList out;
    frontend.collect(out, "frontend");
    for (std::size_t i = 0; i < blocks.size(); ++i)
        blocks[i].collect(out, "block" + std::to_string(i));
    head.collect(out, "head");
    return out;
}

std::int64_t Encoder::param_count() const {
    std::int64_t total = 0;
    for (const auto& p : parameters()) total += p.tensor.numel();
    return total;
}

Tensor conv_subsample(const Tensor& features, const EncoderConfig& config) {
    if (features.rank() != 3)
        throw ShapeError("conv_subsample: features must be (B,T,d_feat)");
    if (features.dim(1) < 4)
        throw ShapeError("conv_subsample: input has " + std::to_string(features.dim(1)) +
                         " frames; minimum length is 4");
    Rng rng(config.mixer.seed);
    ConvFrontend fe(config.d_feat, config.mixer.d_model, rng);
    return fe.forward(features);
}

Tensor block_forward(const Tensor& x, const EncoderConfig& config) {
    config.validate();
    Rng rng(config.mixer.seed);
    Block block(config, rng);
    return block.forward(x);
}

Tensor encode(const Tensor& features, const EncoderConfig& config) {
    Encoder enc(config);
    return enc.encode(features);
}

// ---- parameter counting --------------------------------------------------------------

namespace {

std::int64_t linear_params(std::int64_t in, std::int64_t out) { return in * out + out; }

std::int64_t mixer_params(const mixers::MixerConfig& m) {
    const std::int64_t d = m.d_model;
    switch (m.kind) {
        case MixerKind::MHSA: return 4 * linear_params(d, d);
        case MixerKind::Fastformer:
            return 4 * linear_params(d, d) + 2 * d;  // score vectors, d_head per head
        case MixerKind::HyperMixing: {
            const std::int64_t n = m.d_tmmlp;
            const std::int64_t trunk_in =
                d + (m.hyper_positional ? mixers::HyperMixingCell::kPosFeatureDim : 0);
            return linear_params(trunk_in, n) + 2 * linear_params(n, n) + linear_params(d, d);
        }
        case MixerKind::SummaryMixing: {
            const std::int64_t s = m.d_summary;
            return linear_params(d, s) + linear_params(s, s) + linear_params(d, s) +
                   linear_params(s, d) + linear_params(d + s, s) + linear_params(s, d);
        }
        case MixerKind::Mamba: {
            const std::int64_t H = m.d_inner, N = m.d_state;
            const std::int64_t per_dir =
                3 * linear_params(d, H) + 2 * linear_params(d, N) + H * N;
            return 2 * per_dir + linear_params(2 * H, d);
        }
    }
    throw ContractError("mixer_params: unknown kind");
}

}  // namespace

std::int64_t param_count(const EncoderConfig& config) {
    const std::int64_t d = config.mixer.d_model;
    std::int64_t total = 0;
    total += d * 3 * config.d_feat + d;  // frontend conv1
    total += d * 3 * d + d;              // frontend conv2
    const std::int64_t per_block = 5 * (2 * d)                          // layer norms
                                   + 2 * (linear_params(d, config.d_ffn) +
                                          linear_params(config.d_ffn, d))  // two half-FFNs
                                   + d * config.conv_kernel + d            // depthwise conv
                                   + mixer_params(config.mixer);
    total += config.n_layers * per_block;
    total += linear_params(d, config.vocab);  // head
    return total;
}

// ---- budget matching -------------------------------------------------------------------

namespace {

std::int64_t get_knob(const EncoderConfig& c) {
    switch (c.mixer.kind) {
        case MixerKind::MHSA:
        case MixerKind::Fastformer: return c.d_ffn;
        case MixerKind::SummaryMixing: return c.mixer.d_summary;
        case MixerKind::HyperMixing: return c.mixer.d_tmmlp;
        case MixerKind::Mamba: return c.mixer.d_inner;
    }
    throw ContractError("get_knob: unknown kind");
}

void set_knob(EncoderConfig& c, std::int64_t value) {
    switch (c.mixer.kind) {
        case MixerKind::MHSA:
        case MixerKind::Fastformer: c.d_ffn = value; return;
        case MixerKind::SummaryMixing: c.mixer.d_summary = value; return;
        case MixerKind::HyperMixing: c.mixer.d_tmmlp = value; return;
        case MixerKind::Mamba: c.mixer.d_inner = value; return;
    }
    throw ContractError("set_knob: unknown kind");
}

}  // namespace

std::vector<EncoderConfig> build_matched_configs(const ParamBudget& budget,
                                                 const EncoderConfig& base) {
    budget.validate();
    base.validate();
    const std::int64_t target = budget.target_params;
    const std::int64_t tol =
        static_cast<std::int64_t>(budget.tolerance_fraction * static_cast<double>(target));

    std::vector<EncoderConfig> results;
    for (MixerKind kind : mixers::all_kinds()) {
        EncoderConfig cfg = base;
        cfg.mixer.kind = kind;

        if (std::llabs(param_count(cfg) - target) <= tol) {
            results.push_back(cfg);  // already within budget: return unchanged
            continue;
        }

        auto count_at = [&](std::int64_t knob) {
            EncoderConfig probe = cfg;
            set_knob(probe, knob);
            return param_count(probe);
        };

        constexpr std::int64_t kKnobCap = 1 << 20;
        std::int64_t lo = 1;
        if (count_at(lo) > target) {
            throw ContractError("build_matched_configs: budget " + std::to_string(target) +
                                " unreachable for " + mixers::kind_name(kind) +
                                "; closest achievable is " + std::to_string(count_at(lo)) +
                                " at knob 1");
        }
        std::int64_t hi = std::max<std::int64_t>(get_knob(cfg), 2);
        while (hi < kKnobCap && count_at(hi) < target) hi *= 2;
        if (count_at(hi) < target) {
            throw ContractError("build_matched_configs: budget " + std::to_string(target) +
                                " unreachable for " + mixers::kind_name(kind) +
                                "; closest achievable is " + std::to_string(count_at(hi)) +
                                " at knob " + std::to_string(hi));
        }
        // largest knob with count <= target (counts are strictly increasing)
        while (lo + 1 < hi) {
            const std::int64_t mid = lo + (hi - lo) / 2;
            if (count_at(mid) <= target) lo = mid;
            else hi = mid;
        }
        const std::int64_t best =
            (std::llabs(count_at(hi) - target) < std::llabs(count_at(lo) - target)) ? hi : lo;
        if (std::llabs(count_at(best) - target) > tol) {
            throw ContractError("build_matched_configs: budget " + std::to_string(target) +
                                " not reachable within tolerance for " + mixers::kind_name(kind) +
                                "; closest achievable is " + std::to_string(count_at(best)));
        }
        set_knob(cfg, best);
        results.push_back(cfg);
    }
    return results;
}

}  // namespace seqmix::encoder

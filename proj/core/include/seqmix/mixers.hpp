#pragma once

#include <memory>
#include <string>
#include <vector>

#include "seqmix/nn.hpp"
#include "seqmix/rng.hpp"
#include "seqmix/tensor.hpp"

namespace seqmix::mixers {

enum class MixerKind { MHSA, Fastformer, HyperMixing, SummaryMixing, Mamba };

MixerKind parse_kind(const std::string& name);  // rejects unknown names
std::string kind_name(MixerKind kind);
const std::vector<MixerKind>& all_kinds();

struct MixerConfig {
    MixerKind kind = MixerKind::MHSA;
    std::int64_t d_model = 128;
    std::int64_t n_heads = 4;     // MHSA / Fastformer
    std::int64_t d_summary = 128; // SummaryMixing
    std::int64_t d_tmmlp = 128;   // HyperMixing
    std::int64_t d_state = 16;    // Mamba N
    std::int64_t d_inner = 256;   // Mamba H
    bool hyper_positional = false;
    std::uint64_t seed = 42;

    void validate() const;
};

/// Per-forward counters. mixing_macs covers the cross-token operations only
/// (attention score/context products, pooling reductions, the summary
/// average, token-mixing matmuls, the state scan) — the part whose growth
/// with T separates the mechanisms; per-token projections are excluded.
struct MixStats {
    std::uint64_t mixing_macs = 0;
};

/// A token mixer maps (B,T,d_model) -> (B,T,d_model) without resampling time.
/// Parameters are immutable after construction and shareable across threads;
/// concurrent forwards on distinct inputs are safe.
class Mixer {
  public:
    virtual ~Mixer() = default;
    virtual Tensor forward(const Tensor& x, MixStats* stats = nullptr) const = 0;
    virtual void collect(nn::ParamList& out, const std::string& prefix) const = 0;
    virtual MixerKind kind() const = 0;
};

std::unique_ptr<Mixer> make_mixer(const MixerConfig& config);

struct MixerOutput {
    Tensor hidden;
    std::uint64_t mixing_macs = 0;
};

/// Uniform entry point: builds the configured mixer (seeded from the config)
/// and runs one forward pass.
MixerOutput mix(const Tensor& x, const MixerConfig& config);

Tensor mhsa_forward(const Tensor& x, const MixerConfig& config);
Tensor fastformer_forward(const Tensor& x, const MixerConfig& config);
Tensor hypermixing_forward(const Tensor& x, const MixerConfig& config);
Tensor summarymixing_forward(const Tensor& x, const MixerConfig& config);
Tensor mamba_forward(const Tensor& x, const MixerConfig& config);

/// alpha_t = softmax_t(w . m_t / sqrt(d_head)); returns sum_t alpha_t m_t.
Tensor fastformer_additive_pool(const Tensor& m, const Tensor& w);

/// Token-mixing MLP: per batch item, LayerNorm(W1 gelu(W2^T X)) with the
/// normalization parameter-free. W1, W2 are per-token generated rows (B,T,n).
Tensor tm_mlp(const Tensor& x, const Tensor& w1, const Tensor& w2);

/// Literal sequential recurrence h_t = abar_t h_{t-1} + bbar_t x_t,
/// y_t = sum_n c_tn h_t. Reference oracle for the parallel scan; runs
/// outside the autograd graph.
/// x (B,T,H), abar/bbar (B,T,H*N), c (B,T,N) -> (B,T,H).
Tensor mamba_recurrence_oracle(const Tensor& x, const Tensor& abar, const Tensor& bbar,
                               const Tensor& c);

/// Sinusoidal position table (T, dim); constant, no gradient.
Tensor sinusoid_positions(std::int64_t t_steps, std::int64_t dim);

// ---- cells ------------------------------------------------------------------
//
// Concrete cells are exposed so the encoder can hold trained instances and
// tests can reach individual parameters.

struct MhsaCell : Mixer {
    std::int64_t n_heads;
    nn::Linear q, k, v, o;

    MhsaCell(const MixerConfig& config, Rng& rng);
    Tensor forward(const Tensor& x, MixStats* stats) const override;
    void collect(nn::ParamList& out, const std::string& prefix) const override;
    MixerKind kind() const override { return MixerKind::MHSA; }
};

struct FastformerCell : Mixer {
    std::int64_t n_heads;
    nn::Linear q, k, v, o;
    std::vector<Tensor> w_query_score, w_key_score;  // one (d_head) vector per head

    FastformerCell(const MixerConfig& config, Rng& rng);
    Tensor forward(const Tensor& x, MixStats* stats) const override;
    void collect(nn::ParamList& out, const std::string& prefix) const override;
    MixerKind kind() const override { return MixerKind::Fastformer; }
};

struct HyperMixingCell : Mixer {
    bool positional;
    nn::Linear trunk, head_w1, head_w2, out_proj;

    HyperMixingCell(const MixerConfig& config, Rng& rng);
    Tensor forward(const Tensor& x, MixStats* stats) const override;
    void collect(nn::ParamList& out, const std::string& prefix) const override;
    MixerKind kind() const override { return MixerKind::HyperMixing; }

    static constexpr std::int64_t kPosFeatureDim = 16;
};

struct SummaryMixingCell : Mixer {
    nn::Linear s1, s2, f1, f2, c1, c2;

    SummaryMixingCell(const MixerConfig& config, Rng& rng);
    Tensor forward(const Tensor& x, MixStats* stats) const override;
    void collect(nn::ParamList& out, const std::string& prefix) const override;
    MixerKind kind() const override { return MixerKind::SummaryMixing; }
};

struct MambaCell : Mixer {
    struct Direction {
        nn::Linear in_proj, gate_proj, delta_proj, b_proj, c_proj;
        Tensor a_log;  // (H,N); A = -exp(a_log)
    };
    Direction fwd, bwd;
    nn::Linear combine;  // (2H) -> d

    MambaCell(const MixerConfig& config, Rng& rng);
    Tensor forward(const Tensor& x, MixStats* stats) const override;
    void collect(nn::ParamList& out, const std::string& prefix) const override;
    MixerKind kind() const override { return MixerKind::Mamba; }

    Tensor run_direction(const Direction& dir, const Tensor& x, MixStats* stats) const;
};

}  // namespace seqmix::mixers

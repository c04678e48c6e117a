#pragma once

#include <memory>
#include <string>
#include <vector>

#include "seqmix/mixers.hpp"
#include "seqmix/nn.hpp"
#include "seqmix/tensor.hpp"

namespace seqmix::encoder {

enum class PositionalMode { None, Sinusoidal };

PositionalMode parse_positional(const std::string& name);
std::string positional_name(PositionalMode mode);

struct EncoderConfig {
    mixers::MixerConfig mixer;
    std::int64_t n_layers = 4;
    std::int64_t d_ffn = 512;
    std::int64_t conv_kernel = 15;  // odd, symmetric padding
    std::int64_t vocab = 512;
    std::int64_t d_feat = 80;
    PositionalMode positional = PositionalMode::Sinusoidal;

    void validate() const;
};

struct ParamBudget {
    std::int64_t target_params = 3'000'000;
    double tolerance_fraction = 0.02;

    void validate() const;
};

/// Two stride-2 convolutions with GELU; reduces time by a factor of 4
/// (kernel 3, padding 1, so T -> ceil(T/4)).
struct ConvFrontend {
    Tensor w1, b1, w2, b2;

    ConvFrontend() = default;
    ConvFrontend(std::int64_t d_feat, std::int64_t d_model, Rng& rng);
    Tensor forward(const Tensor& features) const;
    void collect(nn::ParamList& out, const std::string& prefix) const;
};

/// Conformer-lite block: pre-norm residual half-FFN / mixer / depthwise conv
/// / half-FFN sandwich, then a final layer norm. Only the mixer slot varies
/// between configurations.
struct Block {
    nn::LayerNorm ln_ffn1, ln_mixer, ln_conv, ln_ffn2, ln_final;
    nn::Linear ffn1_in, ffn1_out, ffn2_in, ffn2_out;
    Tensor conv_w, conv_b;  // depthwise (d, k, 1)
    std::shared_ptr<mixers::Mixer> mixer;
    std::int64_t conv_kernel = 0;

    Block() = default;
    Block(const EncoderConfig& config, Rng& rng);
    Tensor forward(const Tensor& x, mixers::MixStats* stats = nullptr) const;
    void collect(nn::ParamList& out, const std::string& prefix) const;
};

/// conv frontend -> optional sinusoidal positions -> blocks -> linear head.
/// Output time axis is trimmed to floor(T/4), matching the stacked-target
/// axis the pre-training loss aligns against.
class Encoder {
  public:
    explicit Encoder(const EncoderConfig& config);

    Tensor encode(const Tensor& features, mixers::MixStats* stats = nullptr) const;
    /// Hidden states before the vocabulary head.
    Tensor encode_hidden(const Tensor& features, mixers::MixStats* stats = nullptr) const;

    nn::ParamList parameters() const;
    std::int64_t param_count() const;
    const EncoderConfig& config() const { return config_; }

    ConvFrontend frontend;
    std::vector<Block> blocks;
    nn::Linear head;

  private:
    EncoderConfig config_;
};

/// One-shot forms; parameters are derived deterministically from the config
/// seed.
Tensor conv_subsample(const Tensor& features, const EncoderConfig& config);
Tensor block_forward(const Tensor& x, const EncoderConfig& config);
Tensor encode(const Tensor& features, const EncoderConfig& config);

/// Exact trainable-parameter count, computed analytically from the config.
/// Matches Encoder::param_count() (verified by tests).
std::int64_t param_count(const EncoderConfig& config);

/// For each mixer kind, adjusts the kind-specific width knob (d_ffn for MHSA
/// and Fastformer, d_summary, d_tmmlp, d_inner) by bisection until the model
/// lands within the budget tolerance. Throws when no knob setting reaches the
/// budget, naming the closest achievable count.
std::vector<EncoderConfig> build_matched_configs(const ParamBudget& budget,
                                                 const EncoderConfig& base);

}  // namespace seqmix::encoder

#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "seqmix/encoder.hpp"
#include "seqmix/nn.hpp"
#include "seqmix/rng.hpp"
#include "seqmix/tensor.hpp"

namespace seqmix::bestrq {

/// Frozen random projection A: (4*d_feat, d_code). Never receives gradients;
/// bytes are identical before and after any training run.
struct RandomProjection {
    Tensor a;

    static RandomProjection create(std::int64_t d_feat, std::int64_t d_code, Rng& rng);
};

/// Frozen random codebook C: (vocab, d_code). Rows with near-zero norm are
/// redrawn at init so every entry can be normalized.
struct Codebook {
    Tensor c;

    static Codebook create(std::int64_t vocab, std::int64_t d_code, Rng& rng);
    std::int64_t vocab() const { return c.dim(0); }
};

/// Span mask over the stacked-time axis.
struct MaskPlan {
    std::vector<std::uint8_t> mask;      // one flag per stacked position
    std::vector<std::int64_t> starts;    // span start positions (mask = union of spans)
    std::int64_t span_length = 8;
    double start_prob = 0.01;

    std::int64_t masked_count() const;
};

struct MaskParams {
    double start_prob = 0.01;
    std::int64_t span_length = 8;  // stacked positions
    double noise_std = 0.1;
};

/// Consecutive non-overlapping groups of 4 frames concatenated in order;
/// trailing remainder dropped. (B,T,d_feat) -> (B,floor(T/4),4*d_feat).
Tensor stack_frames(const Tensor& features);

/// argmin_i || c_i/|c_i| - A m/|A m| ||, ties broken by lowest index.
/// m is one stacked frame (4*d_feat). Throws when A m cannot be normalized.
std::int32_t quantize(std::span<const real> m, const RandomProjection& proj,
                      const Codebook& book);

/// Pseudo-targets for every stacked position: (B,T',4*d_feat) -> B*T' indices.
std::vector<std::int32_t> quantize_batch(const Tensor& stacked, const RandomProjection& proj,
                                         const Codebook& book);

/// Each position independently starts a span with start_prob; spans are
/// clipped at the sequence end; the mask is the union of spans.
MaskPlan make_mask(std::int64_t n_positions, double start_prob, std::int64_t span_length,
                   Rng& rng);

/// Replaces raw frames under masked stacked positions (4 raw frames per
/// position) with N(0, noise_std^2) noise; unmasked frames are bit-identical
/// to the input. One plan per batch item.
Tensor apply_mask(const Tensor& features, const std::vector<MaskPlan>& plans, double noise_std,
                  Rng& rng);

/// Mean cross-entropy over masked positions only. Throws when the plans mask
/// zero positions (caller resamples the mask).
Tensor pretrain_loss(const Tensor& logits, const std::vector<std::int32_t>& targets,
                     const std::vector<MaskPlan>& plans);

struct TrainerConfig {
    encoder::EncoderConfig model;
    MaskParams mask;
    std::int64_t d_code = 16;
    double learning_rate = 2e-3;
    std::uint64_t quantizer_seed = 7;
};

struct StepResult {
    double loss = 0.0;
    std::int64_t masked_positions = 0;
};

/// Owns the model, the frozen quantizer pair, the optimizer, and the
/// training RNG (masks and noise). One training step at a time per instance.
class Trainer {
  public:
    explicit Trainer(const TrainerConfig& config);

    /// Target computation on the clean features, masking, forward, masked
    /// cross-entropy, gradient step on the model only.
    StepResult step(const Tensor& features);

    std::int64_t step_count() const { return opt_.step_count(); }
    const encoder::Encoder& model() const { return model_; }
    encoder::Encoder& model() { return model_; }
    const RandomProjection& projection() const { return proj_; }
    const Codebook& codebook() const { return book_; }
    const TrainerConfig& config() const { return config_; }
    Rng& train_rng() { return train_rng_; }

    void save_checkpoint(std::ostream& os,
                         const std::map<std::string, std::string>& extra = {}) const;
    /// Restores parameters, optimizer state, RNG state, and step count.
    /// Returns the extra key/value entries stored alongside.
    std::map<std::string, std::string> load_checkpoint(std::istream& is);

  private:
    TrainerConfig config_;
    encoder::Encoder model_;
    RandomProjection proj_;
    Codebook book_;
    nn::Adam opt_;
    Rng train_rng_;
    nn::ParamList params_;
};

}  // namespace seqmix::bestrq

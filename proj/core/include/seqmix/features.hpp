#pragma once

#include <string>
#include <vector>

#include "seqmix/rng.hpp"
#include "seqmix/tensor.hpp"

namespace seqmix::cli {

/// Synthetic feature source: `n=64,len=400..800,d=80`.
struct SynthSpec {
    std::int64_t n_sequences = 64;
    std::int64_t len_lo = 400;
    std::int64_t len_hi = 800;
    std::int64_t d_feat = 80;

    static SynthSpec parse(const std::string& text);
    void validate() const;
};

/// Deterministic synthetic sequences (T,d_feat): a stationary Gaussian
/// mixture over time, realized as piecewise-constant segment means with
/// small within-segment noise. Segments are long enough that a masked span
/// usually leaves same-segment frames visible, so masked positions carry
/// learnable signal, and fresh means per segment keep the pseudo-label
/// entropy high.
std::vector<Tensor> synth_features(const SynthSpec& spec, std::uint64_t seed);

/// Feature container: concatenated tensor records in the core container
/// format, one (T,d_feat) record per sequence.
std::vector<Tensor> load_feature_container(const std::string& path);
void write_feature_container(const std::string& path, const std::vector<Tensor>& sequences);

/// Dynamic batching at desk scale: sequences are bucketed by length, each
/// batch is truncated to its shortest member rounded down to a multiple of 4,
/// and no batch exceeds frame_cap raw frames. Batch composition and ordering
/// are pure functions of (seed, step), so resuming at step k reproduces the
/// exact stream.
class BatchPlan {
  public:
    BatchPlan(std::vector<Tensor> sequences, std::int64_t frame_cap, std::uint64_t seed);

    std::int64_t batches_per_epoch() const { return static_cast<std::int64_t>(groups_.size()); }
    Tensor batch_for_step(std::int64_t step) const;
    std::int64_t batch_frames(std::int64_t group_index) const;

  private:
    struct Group {
        std::vector<std::size_t> members;
        std::int64_t truncated_len;
    };
    std::vector<Tensor> sequences_;
    std::vector<Group> groups_;
    std::uint64_t seed_;
};

}  // namespace seqmix::cli

#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "seqmix/bench.hpp"
#include "seqmix/bestrq.hpp"
#include "seqmix/encoder.hpp"

namespace seqmix::cli {

/// Flat key = value settings shared by all commands. Every key has a default;
/// unknown keys are rejected; the effective configuration serializes back to
/// a parseable file via echo().
struct RunConfig {
    // global
    std::uint64_t seed = 42;
    std::string out = "seqmix-out";

    // model
    std::string mixer = "mhsa";
    std::int64_t d_model = 128;
    std::int64_t n_layers = 4;
    std::int64_t d_ffn = 512;
    std::int64_t conv_kernel = 15;
    std::int64_t vocab = 512;
    std::int64_t d_feat = 80;
    std::int64_t n_heads = 4;
    std::int64_t d_summary = 128;
    std::int64_t d_tmmlp = 128;
    std::int64_t d_state = 16;
    std::int64_t d_inner = 256;
    bool hyper_positional = false;
    std::string positional = "sinusoidal";

    // pre-training objective
    double mask_start_prob = 0.01;
    std::int64_t mask_span = 8;
    double mask_noise_std = 0.1;
    std::int64_t d_code = 16;
    double learning_rate = 2e-3;
    std::uint64_t quantizer_seed = 7;

    // bench
    std::string lengths = "1000,2000,3000,4000,5000,6000,7000,8000";
    std::int64_t batch_size = 6;
    std::int64_t repeats = 10;
    std::int64_t warmup = 2;
    std::string kinds = "mhsa,fastformer,hypermixing,summarymixing,mamba";
    std::int64_t match_target = 3'000'000;
    double match_tolerance = 0.02;
    /// FFN width of the parameter-matching base model used by `bench`. A
    /// wider shared FFN keeps the per-kind mixer slots small, so the timed
    /// mixing layers differ by mechanism rather than by bulk.
    std::int64_t match_base_d_ffn = 1280;

    // pretrain
    std::int64_t steps = 1000;
    std::int64_t frame_cap = 512;
    std::int64_t log_every = 1;
    std::string synthetic = "n=64,len=400..800,d=80";
    std::string features_path;
    std::string resume;

    // verify
    std::string only;

    /// Assign one key; throws ContractError on unknown keys or bad values.
    void set(const std::string& key, const std::string& value);

    /// Every effective setting as `key = value` lines; re-parsing the echo
    /// reproduces this configuration.
    std::string echo() const;

    encoder::EncoderConfig encoder_config() const;
    bestrq::TrainerConfig trainer_config() const;
    bench::SweepSpec sweep_spec() const;
    std::vector<std::int64_t> length_list() const;
    std::vector<mixers::MixerKind> kind_list() const;
};

using Overrides = std::vector<std::pair<std::string, std::string>>;

/// `key = value` lines with # comments; errors name the offending line.
RunConfig parse_config_text(const std::string& text, const Overrides& overrides = {});
/// Missing path with empty string = defaults; otherwise reads the file.
RunConfig parse_config_file(const std::string& path, const Overrides& overrides = {});

}  // namespace seqmix::cli

#pragma once

#include <functional>
#include <string>
#include <vector>

#include "seqmix/encoder.hpp"
#include "seqmix/mixers.hpp"
#include "seqmix/rng.hpp"

namespace seqmix::bench {

/// Length sweep over the paper's 10..80 s range at a 10 ms hop: raw frame
/// counts 1000..8000. The mixing layers run on length/4 post-frontend steps.
struct SweepSpec {
    std::vector<std::int64_t> lengths = {1000, 2000, 3000, 4000, 5000, 6000, 7000, 8000};
    std::int64_t batch_size = 6;
    std::int64_t repeats = 10;
    std::int64_t warmup = 2;
    std::vector<mixers::MixerKind> kinds = mixers::all_kinds();
    std::uint64_t seed = 42;

    void validate() const;
};

struct BenchmarkRecord {
    mixers::MixerKind kind = mixers::MixerKind::MHSA;
    std::int64_t length_frames = 0;  // raw frames; post-frontend steps = /4
    std::vector<double> wall_times;  // seconds, one per repeat
    std::vector<std::uint64_t> peak_bytes;
    std::uint64_t mac_count = 0;  // mixing MACs per forward pass
    bool failed = false;          // cell ran out of memory
};

struct ScalingReport {
    struct Cell {
        mixers::MixerKind kind;
        std::int64_t length_frames;
        double time_lo, time_mean, time_hi;
        std::uint64_t peak_bytes;
        std::uint64_t mac_count;
    };
    struct KindFit {
        mixers::MixerKind kind;
        double time_exponent;
        double mem_exponent;
        double mac_exponent;
    };
    struct Delta {
        mixers::MixerKind kind;
        std::int64_t length_frames;
        double time_delta;  // (alt - mhsa) / mhsa
        double mem_delta;
    };
    std::vector<Cell> cells;
    std::vector<KindFit> fits;
    std::vector<Delta> deltas;
    bool missing_baseline = false;  // no MHSA records; deltas omitted
};

/// Percentile bootstrap of the mean: (low, mean, high) with `mean` the plain
/// sample mean. Deterministic under the seeded generator.
struct BootstrapCi {
    double low, mean, high;
};
BootstrapCi bootstrap_ci(const std::vector<double>& samples, double level, int resamples,
                         Rng& rng);

/// Least-squares slope of log(measure) against log(length). Needs >= 3
/// positive points.
double fit_exponent(const std::vector<std::pair<double, double>>& points);

/// For each (kind, length) cell: builds the matched mixer stack, generates
/// random input, runs warmup, then `repeats` timed forward passes under
/// payload metering. The timed computation is the stack of n_layers
/// token-mixing cells — the component that varies between configurations.
/// Gradient recording stays disabled throughout. An out-of-memory cell is
/// recorded as failed and the sweep continues.
std::vector<BenchmarkRecord> run_scaling_sweep(
    const SweepSpec& spec,
    const std::function<encoder::EncoderConfig(mixers::MixerKind)>& config_builder);

ScalingReport build_report(const std::vector<BenchmarkRecord>& records, double level = 0.95,
                           int resamples = 1000, std::uint64_t seed = 1234);

/// CSV schema (bit-exact header):
///   kind,length_frames,mean_time_s,time_lo,time_hi,peak_bytes,mac_count
/// Numeric fields carry 17 significant digits; the summary (fitted exponents
/// and deltas vs MHSA) follows as #exp / #delta comment records.
std::string emit_csv_string(const ScalingReport& report);
void emit_csv(const ScalingReport& report, const std::string& path);
ScalingReport parse_csv_string(const std::string& text);

}  // namespace seqmix::bench

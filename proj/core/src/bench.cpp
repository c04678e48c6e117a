#include "seqmix/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <new>
#include <sstream>

namespace seqmix::bench {

using mixers::MixerKind;

void SweepSpec::validate() const {
    if (lengths.empty()) throw ContractError("SweepSpec: lengths must be non-empty");
    for (std::size_t i = 1; i < lengths.size(); ++i)
        if (lengths[i] <= lengths[i - 1])
            throw ContractError("SweepSpec: lengths must be strictly increasing");
    for (auto l : lengths)
        if (l < 4) throw ContractError("SweepSpec: lengths must be >= 4 raw frames");
    if (repeats < 3) throw ContractError("SweepSpec: repeats must be >= 3 for CI validity");
    if (warmup < 0) throw ContractError("SweepSpec: warmup must be >= 0");
    if (batch_size < 1) throw ContractError("SweepSpec: batch_size must be >= 1");
    if (kinds.empty()) throw ContractError("SweepSpec: kinds must be non-empty");
}

BootstrapCi bootstrap_ci(const std::vector<double>& samples, double level, int resamples,
                         Rng& rng) {
    if (samples.empty()) throw ContractError("bootstrap_ci: samples must be non-empty");
    if (level <= 0.0 || level >= 1.0) throw ContractError("bootstrap_ci: level must be in (0,1)");
    if (resamples < 1) throw ContractError("bootstrap_ci: resamples must be >= 1");

    double mean = 0.0;
    for (double s : samples) mean += s;
    mean /= static_cast<double>(samples.size());

    std::vector<double> means(static_cast<std::size_t>(resamples));
    for (auto& m : means) {
        double acc = 0.0;
        for (std::size_t i = 0; i < samples.size(); ++i)
            acc += samples[rng.uniform_index(samples.size())];
        m = acc / static_cast<double>(samples.size());
    }
    std::sort(means.begin(), means.end());
    const double tail = (1.0 - level) / 2.0;
    const auto pick = [&](double q) {
        const auto idx = static_cast<std::size_t>(
            std::llround(q * static_cast<double>(means.size() - 1)));
        return means[std::min(idx, means.size() - 1)];
    };
    double lo = pick(tail);
    double hi = pick(1.0 - tail);
    // invariant: lower <= mean <= upper
    lo = std::min(lo, mean);
    hi = std::max(hi, mean);
    return {lo, mean, hi};
}

double fit_exponent(const std::vector<std::pair<double, double>>& points) {
    if (points.size() < 3) throw ContractError("fit_exponent: need at least 3 points");
    for (const auto& [x, y] : points)
        if (x <= 0.0 || y <= 0.0)
            throw ContractError("fit_exponent: all lengths and measures must be positive");
    double sx = 0, sy = 0;
    for (const auto& [x, y] : points) {
        sx += std::log(x);
        sy += std::log(y);
    }
    const double n = static_cast<double>(points.size());
    const double mx = sx / n, my = sy / n;
    double num = 0, den = 0;
    for (const auto& [x, y] : points) {
        const double dx = std::log(x) - mx;
        num += dx * (std::log(y) - my);
        den += dx * dx;
    }
    if (den == 0.0) throw ContractError("fit_exponent: degenerate length set");
    return num / den;
}

std::vector<BenchmarkRecord> run_scaling_sweep(
    const SweepSpec& spec,
    const std::function<encoder::EncoderConfig(MixerKind)>& config_builder) {
    spec.validate();
    tune_malloc_for_large_payloads();
    std::vector<BenchmarkRecord> records;

    for (MixerKind kind : spec.kinds) {
        const encoder::EncoderConfig cfg = config_builder(kind);
        for (std::int64_t length : spec.lengths) {
            BenchmarkRecord rec;
            rec.kind = kind;
            rec.length_frames = length;
            const std::int64_t t_steps = std::max<std::int64_t>(1, length / 4);
            try {
                // the varying component: the stack of token-mixing layers
                std::vector<std::unique_ptr<mixers::Mixer>> stack;
                Rng seeder(spec.seed ^ (0x9e37ULL * static_cast<std::uint64_t>(kind) + 1));
                for (std::int64_t i = 0; i < cfg.n_layers; ++i) {
                    mixers::MixerConfig mc = cfg.mixer;
                    mc.seed = seeder.next_u64();
                    stack.push_back(mixers::make_mixer(mc));
                }

                Rng input_rng(spec.seed ^ static_cast<std::uint64_t>(length) * 0x517cc1b7ULL);
                Tensor x = Tensor::zeros({spec.batch_size, t_steps, cfg.mixer.d_model});
                for (auto& v : x.mutable_data()) v = static_cast<real>(input_rng.uniform(-1.0, 1.0));

                auto run_stack = [&](mixers::MixStats* stats) {
                    Tensor h = x;
                    for (const auto& cell : stack) h = cell->forward(h, stats);
                    return h;
                };

                for (std::int64_t w = 0; w < spec.warmup; ++w) {
                    mixers::MixStats stats;
                    Tensor sink = run_stack(&stats);
                    (void)sink;
                }

                for (std::int64_t r = 0; r < spec.repeats; ++r) {
                    mixers::MixStats stats;
                    const auto t0 = std::chrono::steady_clock::now();
                    auto [result, peak] = with_metering([&] { return run_stack(&stats); });
                    const auto t1 = std::chrono::steady_clock::now();
                    rec.wall_times.push_back(std::chrono::duration<double>(t1 - t0).count());
                    rec.peak_bytes.push_back(peak);
                    rec.mac_count = stats.mixing_macs;
                }
            } catch (const std::bad_alloc&) {
                rec.failed = true;
                rec.wall_times.clear();
                rec.peak_bytes.clear();
            }
            records.push_back(std::move(rec));
        }
    }
    return records;
}

ScalingReport build_report(const std::vector<BenchmarkRecord>& records, double level,
                           int resamples, std::uint64_t seed) {
    ScalingReport report;
    Rng rng(seed);

    for (const auto& rec : records) {
        if (rec.failed) continue;
        const BootstrapCi ci = bootstrap_ci(rec.wall_times, level, resamples, rng);
        report.cells.push_back({rec.kind, rec.length_frames, ci.low, ci.mean, ci.high,
                                rec.peak_bytes.empty() ? 0 : rec.peak_bytes.front(),
                                rec.mac_count});
    }

    auto cells_of = [&](MixerKind kind) {
        std::vector<const ScalingReport::Cell*> out;
        for (const auto& c : report.cells)
            if (c.kind == kind) out.push_back(&c);
        return out;
    };

    for (MixerKind kind : mixers::all_kinds()) {
        auto cells = cells_of(kind);
        if (cells.size() < 3) continue;
        std::vector<std::pair<double, double>> tp, mp, cp;
        for (const auto* c : cells) {
            tp.push_back({static_cast<double>(c->length_frames), c->time_mean});
            mp.push_back({static_cast<double>(c->length_frames), static_cast<double>(c->peak_bytes)});
            cp.push_back({static_cast<double>(c->length_frames), static_cast<double>(c->mac_count)});
        }
        report.fits.push_back({kind, fit_exponent(tp), fit_exponent(mp), fit_exponent(cp)});
    }

    auto baseline = cells_of(MixerKind::MHSA);
    if (baseline.empty()) {
        report.missing_baseline = true;
        return report;
    }
    for (const auto& c : report.cells) {
        if (c.kind == MixerKind::MHSA) continue;
        const ScalingReport::Cell* base = nullptr;
        for (const auto* b : baseline)
            if (b->length_frames == c.length_frames) base = b;
        if (!base) continue;
        report.deltas.push_back({c.kind, c.length_frames,
                                 (c.time_mean - base->time_mean) / base->time_mean,
                                 (static_cast<double>(c.peak_bytes) -
                                  static_cast<double>(base->peak_bytes)) /
                                     static_cast<double>(base->peak_bytes)});
    }
    return report;
}

// ---- csv ---------------------------------------------------------------------

namespace {

std::string fmt_g17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

}  // namespace

std::string emit_csv_string(const ScalingReport& report) {
    std::ostringstream os;
    os << "# seqmix scaling sweep\n";
    os << "# length_frames counts raw 10 ms-hop input frames (10 s = 1000 frames); the mixing "
          "layers run on length_frames/4 post-frontend steps\n";
    os << "kind,length_frames,mean_time_s,time_lo,time_hi,peak_bytes,mac_count\n";
    for (const auto& c : report.cells) {
        os << mixers::kind_name(c.kind) << "," << c.length_frames << "," << fmt_g17(c.time_mean)
           << "," << fmt_g17(c.time_lo) << "," << fmt_g17(c.time_hi) << "," << c.peak_bytes << ","
           << c.mac_count << "\n";
    }
    for (const auto& f : report.fits) {
        os << "#exp," << mixers::kind_name(f.kind) << "," << fmt_g17(f.time_exponent) << ","
           << fmt_g17(f.mem_exponent) << "," << fmt_g17(f.mac_exponent) << "\n";
    }
    for (const auto& d : report.deltas) {
        os << "#delta," << mixers::kind_name(d.kind) << "," << d.length_frames << ","
           << fmt_g17(d.time_delta) << "," << fmt_g17(d.mem_delta) << "\n";
    }
    if (report.missing_baseline) os << "#warning,missing-mhsa-baseline\n";
    return os.str();
}

void emit_csv(const ScalingReport& report, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("emit_csv: cannot open '" + path + "' for writing");
    os << emit_csv_string(report);
    if (!os) throw std::runtime_error("emit_csv: write failure on '" + path + "'");
}

ScalingReport parse_csv_string(const std::string& text) {
    ScalingReport report;
    std::istringstream is(text);
    std::string line;
    bool header_seen = false;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::vector<std::string> fields;
        {
            std::istringstream ls(line);
            std::string f;
            while (std::getline(ls, f, ',')) fields.push_back(f);
        }
        if (line.rfind("#exp,", 0) == 0) {
            report.fits.push_back({mixers::parse_kind(fields[1]), std::stod(fields[2]),
                                   std::stod(fields[3]), std::stod(fields[4])});
            continue;
        }
        if (line.rfind("#delta,", 0) == 0) {
            report.deltas.push_back({mixers::parse_kind(fields[1]), std::stoll(fields[2]),
                                     std::stod(fields[3]), std::stod(fields[4])});
            continue;
        }
        if (line.rfind("#warning,missing-mhsa-baseline", 0) == 0) {
            report.missing_baseline = true;
            continue;
        }
        if (line[0] == '#') continue;
        if (!header_seen) {
            if (line != "kind,length_frames,mean_time_s,time_lo,time_hi,peak_bytes,mac_count")
                throw std::runtime_error("parse_csv: unexpected header '" + line + "'");
            header_seen = true;
            continue;
        }
        if (fields.size() != 7) throw std::runtime_error("parse_csv: bad row '" + line + "'");
        report.cells.push_back({mixers::parse_kind(fields[0]), std::stoll(fields[1]),
                                std::stod(fields[3]), std::stod(fields[2]), std::stod(fields[4]),
                                static_cast<std::uint64_t>(std::stoull(fields[5])),
                                static_cast<std::uint64_t>(std::stoull(fields[6]))});
    }
    if (!header_seen) throw std::runtime_error("parse_csv: missing header");
    return report;
}

}  // namespace seqmix::bench

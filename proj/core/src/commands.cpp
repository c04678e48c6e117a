#include "seqmix/commands.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>

#include "seqmix/features.hpp"
#include "seqmix/verify.hpp"

namespace seqmix::cli {

namespace {

namespace fs = std::filesystem;

void prepare_out_dir(const RunConfig& config, std::ostream& log) {
    fs::create_directories(config.out);
    const fs::path echo_path = fs::path(config.out) / "config_used.cfg";
    std::ofstream os(echo_path);
    if (!os) throw std::runtime_error("cannot write config echo to " + echo_path.string());
    os << config.echo();
    log << "effective config written to " << echo_path.string() << "\n";
}

}  // namespace

int cmd_bench(const RunConfig& config, std::ostream& log) {
    prepare_out_dir(config, log);

    encoder::EncoderConfig base = config.encoder_config();
    base.d_ffn = config.match_base_d_ffn;
    encoder::ParamBudget budget{config.match_target, config.match_tolerance};
    const auto matched = encoder::build_matched_configs(budget, base);
    log << "parameter-matched configs (target " << budget.target_params << "):\n";
    for (const auto& cfg : matched)
        log << "  " << mixers::kind_name(cfg.mixer.kind) << ": " << encoder::param_count(cfg)
            << " params\n";

    auto config_for = [&matched](mixers::MixerKind kind) -> encoder::EncoderConfig {
        for (const auto& cfg : matched)
            if (cfg.mixer.kind == kind) return cfg;
        throw ContractError("no matched config for kind " + mixers::kind_name(kind));
    };

    const bench::SweepSpec spec = config.sweep_spec();
    log << "sweeping " << spec.kinds.size() << " kinds x " << spec.lengths.size()
        << " lengths, batch " << spec.batch_size << ", " << spec.repeats << " repeats\n";
    const auto records = bench::run_scaling_sweep(spec, config_for);
    const auto report = bench::build_report(records, 0.95, 1000, config.seed);

    const std::string csv_path = (fs::path(config.out) / "scaling.csv").string();
    bench::emit_csv(report, csv_path);
    log << "wrote " << csv_path << "\n\n";

    log << "fitted exponents (log measure vs log length):\n";
    log << "  kind            time    memory  mixing-macs\n";
    for (const auto& f : report.fits) {
        log << "  " << std::left << std::setw(15) << mixers::kind_name(f.kind) << std::right
            << std::fixed << std::setprecision(3) << std::setw(7) << f.time_exponent
            << std::setw(9) << f.mem_exponent << std::setw(12) << f.mac_exponent << "\n";
    }
    if (report.missing_baseline) {
        log << "warning: no mhsa baseline in this sweep; deltas omitted\n";
        return 0;
    }
    log << "\nrelative to mhsa (negative = cheaper):\n";
    log << "  kind            length   time      memory\n";
    for (const auto& d : report.deltas) {
        log << "  " << std::left << std::setw(15) << mixers::kind_name(d.kind) << std::right
            << std::setw(7) << d.length_frames << "  " << std::showpos << std::fixed
            << std::setprecision(1) << std::setw(6) << d.time_delta * 100.0 << "%  " << std::setw(6)
            << d.mem_delta * 100.0 << "%" << std::noshowpos << "\n";
    }
    return 0;
}

int cmd_pretrain(const RunConfig& config, std::ostream& log) {
    prepare_out_dir(config, log);

    std::vector<Tensor> sequences;
    if (!config.features_path.empty()) {
        sequences = load_feature_container(config.features_path);
        log << "loaded " << sequences.size() << " sequences from " << config.features_path << "\n";
    } else {
        SynthSpec spec = SynthSpec::parse(config.synthetic);
        sequences = synth_features(spec, config.seed);
        log << "generated " << sequences.size() << " synthetic sequences (" << spec.len_lo << ".."
            << spec.len_hi << " frames, d=" << spec.d_feat << ")\n";
    }
    for (const Tensor& s : sequences) {
        if (s.dim(1) != config.d_feat)
            throw ContractError("feature dim " + std::to_string(s.dim(1)) +
                                " does not match configured d_feat " +
                                std::to_string(config.d_feat));
    }

    bestrq::Trainer trainer(config.trainer_config());
    BatchPlan plan(std::move(sequences), config.frame_cap, config.seed ^ 0xda7aULL);
    log << plan.batches_per_epoch() << " batches per epoch under a " << config.frame_cap
        << "-frame cap\n";

    std::int64_t start_step = 0;
    if (!config.resume.empty()) {
        std::ifstream is(config.resume, std::ios::binary);
        if (!is) throw std::runtime_error("cannot open checkpoint '" + config.resume + "'");
        trainer.load_checkpoint(is);
        start_step = trainer.step_count();
        log << "resumed from " << config.resume << " at step " << start_step << "\n";
    }

    const fs::path loss_path = fs::path(config.out) / "loss_log.csv";
    std::ofstream loss_log;
    if (start_step > 0 && fs::exists(loss_path)) {
        loss_log.open(loss_path, std::ios::app);
    } else {
        loss_log.open(loss_path);
        loss_log << "step,loss\n";
    }
    if (!loss_log) throw std::runtime_error("cannot write loss log to " + loss_path.string());

    for (std::int64_t step = start_step; step < config.steps; ++step) {
        Tensor batch = plan.batch_for_step(step);
        bestrq::StepResult result;
        try {
            result = trainer.step(batch);
        } catch (const NumericError& e) {
            log << "aborting: numeric failure at step " << (step + 1) << ": " << e.what() << "\n";
            return 1;
        }
        if (!std::isfinite(result.loss)) {
            log << "aborting: loss became non-finite at step " << (step + 1) << "\n";
            return 1;
        }
        if ((step + 1) % config.log_every == 0) {
            loss_log << (step + 1) << "," << std::setprecision(17) << result.loss << "\n";
        }
        if ((step + 1) % 100 == 0) {
            log << "step " << (step + 1) << "/" << config.steps << "  loss "
                << std::setprecision(6) << result.loss << "\n";
        }
    }
    loss_log.flush();

    const fs::path ckpt_path = fs::path(config.out) / "checkpoint.bin";
    std::ofstream ckpt(ckpt_path, std::ios::binary);
    if (!ckpt) throw std::runtime_error("cannot write checkpoint to " + ckpt_path.string());
    trainer.save_checkpoint(ckpt);
    log << "checkpoint written to " << ckpt_path.string() << "\n";
    return 0;
}

int cmd_verify(const RunConfig& config, std::ostream& log) {
    verify::VerifyOptions options;
    options.only_filter = config.only;
    options.seed = config.seed;
    const auto results = verify::run_property_suite(options);
    if (results.empty()) {
        log << "no checks match filter '" << config.only << "'\n";
        return 1;
    }
    std::size_t width = 0;
    for (const auto& r : results) width = std::max(width, r.name.size());
    for (const auto& r : results) {
        log << (r.pass ? "PASS  " : "FAIL  ") << std::left << std::setw(static_cast<int>(width + 2))
            << r.name << std::right << r.detail << "\n";
    }
    const bool ok = verify::all_passed(results);
    log << (ok ? "all checks passed\n" : "some checks FAILED\n");
    return ok ? 0 : 1;
}

}  // namespace seqmix::cli

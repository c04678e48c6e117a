// seqmix: sequence-mixing mechanisms, masked pre-training, and scaling
// benchmarks from one binary. Subcommands: bench, pretrain, verify.

#include <CLI11.hpp>
#include <iostream>
#include <string>
#include <vector>

#include "seqmix/commands.hpp"

namespace {

struct TrackedOptions {
    // option storage; only options the user actually passed become overrides
    std::map<std::string, std::string> values;
    std::vector<CLI::Option*> options;
    std::vector<std::string> keys;

    void add(CLI::App* app, const std::string& flag, const std::string& key,
             const std::string& description) {
        auto* opt = app->add_option_function<std::string>(
            flag, [this, key](const std::string& v) { values[key] = v; }, description);
        options.push_back(opt);
        keys.push_back(key);
    }

    seqmix::cli::Overrides overrides() const {
        seqmix::cli::Overrides out;
        for (std::size_t i = 0; i < options.size(); ++i)
            if (options[i]->count() > 0) out.push_back({keys[i], values.at(keys[i])});
        return out;
    }
};

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"token-mixing mechanisms, BEST-RQ pre-training, and scaling benchmarks"};
    app.require_subcommand(1);
    app.fallthrough();  // global flags may follow the subcommand

    std::string config_path;
    app.add_option("--config", config_path, "key = value configuration file");

    TrackedOptions global;
    global.add(&app, "--seed", "seed", "global RNG seed");
    global.add(&app, "--out", "out", "output directory");

    CLI::App* bench = app.add_subcommand("bench", "run the length-scaling sweep");
    TrackedOptions bench_opts;
    bench_opts.add(bench, "--kinds", "kinds", "comma list of mixer kinds");
    bench_opts.add(bench, "--lengths", "lengths", "comma list of raw frame counts");
    bench_opts.add(bench, "--repeats", "repeats", "timed runs per cell");
    bench_opts.add(bench, "--warmup", "warmup", "discarded runs per cell");
    bench_opts.add(bench, "--batch-size", "batch_size", "sequences per run");
    bench_opts.add(bench, "--match-target", "match_target", "parameter budget");
    bench_opts.add(bench, "--match-tolerance", "match_tolerance", "budget tolerance fraction");
    bench_opts.add(bench, "--match-base-d-ffn", "match_base_d_ffn", "FFN width of the match base");
    bench_opts.add(bench, "--d-model", "d_model", "embedding width");
    bench_opts.add(bench, "--n-layers", "n_layers", "mixing layers in the timed stack");
    bench_opts.add(bench, "--n-heads", "n_heads", "attention heads");

    CLI::App* pretrain = app.add_subcommand("pretrain", "run desk-scale masked pre-training");
    TrackedOptions pre_opts;
    pre_opts.add(pretrain, "--mixer", "mixer", "mixer kind for the encoder");
    pre_opts.add(pretrain, "--steps", "steps", "training steps");
    pre_opts.add(pretrain, "--synthetic", "synthetic", "synthetic source, e.g. n=64,len=400..800,d=80");
    pre_opts.add(pretrain, "--features", "features", "feature container file");
    pre_opts.add(pretrain, "--resume", "resume", "checkpoint to resume from");
    pre_opts.add(pretrain, "--frame-cap", "frame_cap", "max raw frames per batch");
    pre_opts.add(pretrain, "--lr", "learning_rate", "Adam learning rate");
    pre_opts.add(pretrain, "--log-every", "log_every", "loss log cadence");
    pre_opts.add(pretrain, "--d-model", "d_model", "embedding width");
    pre_opts.add(pretrain, "--n-layers", "n_layers", "encoder blocks");
    pre_opts.add(pretrain, "--d-ffn", "d_ffn", "feed-forward width");
    pre_opts.add(pretrain, "--vocab", "vocab", "codebook size");
    pre_opts.add(pretrain, "--d-feat", "d_feat", "feature dimension");

    CLI::App* verify = app.add_subcommand("verify", "run the property suite");
    TrackedOptions verify_opts;
    verify_opts.add(verify, "--only", "only", "run only checks whose name contains this string");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);  // prints help, exit 0
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;  // usage error
    }

    try {
        seqmix::cli::Overrides overrides = global.overrides();
        for (auto& o : bench_opts.overrides()) overrides.push_back(o);
        for (auto& o : pre_opts.overrides()) overrides.push_back(o);
        for (auto& o : verify_opts.overrides()) overrides.push_back(o);
        const seqmix::cli::RunConfig config = seqmix::cli::parse_config_file(config_path, overrides);

        if (app.got_subcommand(bench)) return seqmix::cli::cmd_bench(config, std::cout);
        if (app.got_subcommand(pretrain)) return seqmix::cli::cmd_pretrain(config, std::cout);
        if (app.got_subcommand(verify)) return seqmix::cli::cmd_verify(config, std::cout);
        std::cerr << "no subcommand selected\n";
        return 2;
    } catch (const seqmix::ContractError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

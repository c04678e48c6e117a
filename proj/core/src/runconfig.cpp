#include "seqmix/runconfig.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

namespace seqmix::cli {

namespace {

std::int64_t to_i64(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        const std::int64_t out = std::stoll(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return out;
    } catch (const std::exception&) {
        throw ContractError("config: cannot parse integer for '" + key + "' from '" + v + "'");
    }
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        const std::uint64_t out = std::stoull(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return out;
    } catch (const std::exception&) {
        throw ContractError("config: cannot parse integer for '" + key + "' from '" + v + "'");
    }
}

double to_f64(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        const double out = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return out;
    } catch (const std::exception&) {
        throw ContractError("config: cannot parse number for '" + key + "' from '" + v + "'");
    }
}

bool to_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ContractError("config: cannot parse bool for '" + key + "' from '" + v + "'");
}

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

}  // namespace

void RunConfig::set(const std::string& key, const std::string& value) {
    if (key == "seed") seed = to_u64(key, value);
    else if (key == "out") out = value;
    else if (key == "mixer") mixer = mixers::kind_name(mixers::parse_kind(value));
    else if (key == "d_model") d_model = to_i64(key, value);
    else if (key == "n_layers") n_layers = to_i64(key, value);
    else if (key == "d_ffn") d_ffn = to_i64(key, value);
    else if (key == "conv_kernel") conv_kernel = to_i64(key, value);
    else if (key == "vocab") vocab = to_i64(key, value);
    else if (key == "d_feat") d_feat = to_i64(key, value);
    else if (key == "n_heads") n_heads = to_i64(key, value);
    else if (key == "d_summary") d_summary = to_i64(key, value);
    else if (key == "d_tmmlp") d_tmmlp = to_i64(key, value);
    else if (key == "d_state") d_state = to_i64(key, value);
    else if (key == "d_inner") d_inner = to_i64(key, value);
    else if (key == "hyper_positional") hyper_positional = to_bool(key, value);
    else if (key == "positional")
        positional = encoder::positional_name(encoder::parse_positional(value));
    else if (key == "mask_start_prob") mask_start_prob = to_f64(key, value);
    else if (key == "mask_span") mask_span = to_i64(key, value);
    else if (key == "mask_noise_std") mask_noise_std = to_f64(key, value);
    else if (key == "d_code") d_code = to_i64(key, value);
    else if (key == "learning_rate") learning_rate = to_f64(key, value);
    else if (key == "quantizer_seed") quantizer_seed = to_u64(key, value);
    else if (key == "lengths") lengths = value;
    else if (key == "batch_size") batch_size = to_i64(key, value);
    else if (key == "repeats") repeats = to_i64(key, value);
    else if (key == "warmup") warmup = to_i64(key, value);
    else if (key == "kinds") kinds = value;
    else if (key == "match_target") match_target = to_i64(key, value);
    else if (key == "match_tolerance") match_tolerance = to_f64(key, value);
    else if (key == "match_base_d_ffn") match_base_d_ffn = to_i64(key, value);
    else if (key == "steps") steps = to_i64(key, value);
    else if (key == "frame_cap") frame_cap = to_i64(key, value);
    else if (key == "log_every") log_every = to_i64(key, value);
    else if (key == "synthetic") synthetic = value;
    else if (key == "features") features_path = value;
    else if (key == "resume") resume = value;
    else if (key == "only") only = value;
    else throw ContractError("config: unknown key '" + key + "'");
}

std::string RunConfig::echo() const {
    std::ostringstream os;
    os << "seed = " << seed << "\n";
    os << "out = " << out << "\n";
    os << "mixer = " << mixer << "\n";
    os << "d_model = " << d_model << "\n";
    os << "n_layers = " << n_layers << "\n";
    os << "d_ffn = " << d_ffn << "\n";
    os << "conv_kernel = " << conv_kernel << "\n";
    os << "vocab = " << vocab << "\n";
    os << "d_feat = " << d_feat << "\n";
    os << "n_heads = " << n_heads << "\n";
    os << "d_summary = " << d_summary << "\n";
    os << "d_tmmlp = " << d_tmmlp << "\n";
    os << "d_state = " << d_state << "\n";
    os << "d_inner = " << d_inner << "\n";
    os << "hyper_positional = " << (hyper_positional ? "true" : "false") << "\n";
    os << "positional = " << positional << "\n";
    os << "mask_start_prob = " << fmt_double(mask_start_prob) << "\n";
    os << "mask_span = " << mask_span << "\n";
    os << "mask_noise_std = " << fmt_double(mask_noise_std) << "\n";
    os << "d_code = " << d_code << "\n";
    os << "learning_rate = " << fmt_double(learning_rate) << "\n";
    os << "quantizer_seed = " << quantizer_seed << "\n";
    os << "lengths = " << lengths << "\n";
    os << "batch_size = " << batch_size << "\n";
    os << "repeats = " << repeats << "\n";
    os << "warmup = " << warmup << "\n";
    os << "kinds = " << kinds << "\n";
    os << "match_target = " << match_target << "\n";
    os << "match_tolerance = " << fmt_double(match_tolerance) << "\n";
    os << "match_base_d_ffn = " << match_base_d_ffn << "\n";
    os << "steps = " << steps << "\n";
    os << "frame_cap = " << frame_cap << "\n";
    os << "log_every = " << log_every << "\n";
    os << "synthetic = " << synthetic << "\n";
    os << "features = " << features_path << "\n";
    os << "resume = " << resume << "\n";
    os << "only = " << only << "\n";
    return os.str();
}

encoder::EncoderConfig RunConfig::encoder_config() const {
    encoder::EncoderConfig cfg;
    cfg.mixer.kind = mixers::parse_kind(mixer);
    cfg.mixer.d_model = d_model;
    cfg.mixer.n_heads = n_heads;
    cfg.mixer.d_summary = d_summary;
    cfg.mixer.d_tmmlp = d_tmmlp;
    cfg.mixer.d_state = d_state;
    cfg.mixer.d_inner = d_inner;
    cfg.mixer.hyper_positional = hyper_positional;
    cfg.mixer.seed = seed;
    cfg.n_layers = n_layers;
    cfg.d_ffn = d_ffn;
    cfg.conv_kernel = conv_kernel;
    cfg.vocab = vocab;
    cfg.d_feat = d_feat;
    cfg.positional = encoder::parse_positional(positional);
    return cfg;
}

bestrq::TrainerConfig RunConfig::trainer_config() const {
    bestrq::TrainerConfig cfg;
    cfg.model = encoder_config();
    cfg.mask.start_prob = mask_start_prob;
    cfg.mask.span_length = mask_span;
    cfg.mask.noise_std = mask_noise_std;
    cfg.d_code = d_code;
    cfg.learning_rate = learning_rate;
    cfg.quantizer_seed = quantizer_seed;
    return cfg;
}

std::vector<std::int64_t> RunConfig::length_list() const {
    std::vector<std::int64_t> out;
    std::istringstream is(lengths);
    std::string item;
    while (std::getline(is, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(to_i64("lengths", item));
    }
    if (out.empty()) throw ContractError("config: 'lengths' is empty");
    return out;
}

std::vector<mixers::MixerKind> RunConfig::kind_list() const {
    std::vector<mixers::MixerKind> out;
    std::istringstream is(kinds);
    std::string item;
    while (std::getline(is, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(mixers::parse_kind(item));
    }
    if (out.empty()) throw ContractError("config: 'kinds' is empty");
    return out;
}

bench::SweepSpec RunConfig::sweep_spec() const {
    bench::SweepSpec spec;
    spec.lengths = length_list();
    spec.batch_size = batch_size;
    spec.repeats = repeats;
    spec.warmup = warmup;
    spec.kinds = kind_list();
    spec.seed = seed;
    return spec;
}

RunConfig parse_config_text(const std::string& text, const Overrides& overrides) {
    RunConfig cfg;
    std::istringstream is(text);
    std::string line;
    int line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ContractError("config line " + std::to_string(line_no) +
                                ": expected 'key = value', got '" + line + "'");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        try {
            cfg.set(key, value);
        } catch (const ContractError& e) {
            throw ContractError("config line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    for (const auto& [key, value] : overrides) cfg.set(key, value);
    return cfg;
}

RunConfig parse_config_file(const std::string& path, const Overrides& overrides) {
    if (path.empty()) {
        RunConfig cfg;
        for (const auto& [key, value] : overrides) cfg.set(key, value);
        return cfg;
    }
    std::ifstream is(path);
    if (!is) throw std::runtime_error("config: cannot open '" + path + "'");
    std::ostringstream buffer;
    buffer << is.rdbuf();
    return parse_config_text(buffer.str(), overrides);
}

}  // namespace seqmix::cli

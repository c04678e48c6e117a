#include "seqmix/bestrq.hpp"

#include <cmath>
#include <istream>
#include <ostream>
#include <sstream>

namespace seqmix::bestrq {

RandomProjection RandomProjection::create(std::int64_t d_feat, std::int64_t d_code, Rng& rng) {
    RandomProjection proj;
    proj.a = Tensor::zeros({4 * d_feat, d_code});
    nn::gaussian_fill_(proj.a, 0.0, 1.0, rng);
    return proj;
}

Codebook Codebook::create(std::int64_t vocab, std::int64_t d_code, Rng& rng) {
    Codebook book;
    book.c = Tensor::zeros({vocab, d_code});
    auto data = book.c.mutable_data();
    for (std::int64_t i = 0; i < vocab; ++i) {
        real* row = data.data() + i * d_code;
        double norm = 0.0;
        do {
            norm = 0.0;
            for (std::int64_t j = 0; j < d_code; ++j) {
                row[j] = static_cast<real>(rng.gaussian());
                norm += static_cast<double>(row[j]) * static_cast<double>(row[j]);
            }
        } while (std::sqrt(norm) < 1e-6);
    }
    return book;
}

std::int64_t MaskPlan::masked_count() const {
    std::int64_t n = 0;
    for (auto m : mask) n += (m != 0);
    return n;
}

Tensor stack_frames(const Tensor& features) {
    if (features.rank() != 3)
        throw ShapeError("stack_frames: features must be (B,T,d_feat), got " +
                         shape_to_string(features.shape()));
    const std::int64_t B = features.dim(0), T = features.dim(1), d = features.dim(2);
    if (T < 4)
        throw ShapeError("stack_frames: input has " + std::to_string(T) +
                         " frames; need at least 4");
    const std::int64_t Ts = T / 4;
    std::vector<real> out(static_cast<std::size_t>(B * Ts * 4 * d));
    auto fv = features.data();
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t t = 0; t < Ts; ++t)
            std::copy(fv.data() + (b * T + 4 * t) * d, fv.data() + (b * T + 4 * t + 4) * d,
                      out.data() + (b * Ts + t) * 4 * d);
    return Tensor::from_vector({B, Ts, 4 * d}, std::move(out));
}

std::int32_t quantize(std::span<const real> m, const RandomProjection& proj,
                      const Codebook& book) {
    const std::int64_t rows = proj.a.dim(0), d_code = proj.a.dim(1);
    if (static_cast<std::int64_t>(m.size()) != rows)
        throw ShapeError("quantize: frame length " + std::to_string(m.size()) +
                         " does not match projection rows " + std::to_string(rows));

    std::vector<double> projected(static_cast<std::size_t>(d_code), 0.0);
    auto av = proj.a.data();
    for (std::int64_t i = 0; i < rows; ++i) {
        const double mv = static_cast<double>(m[static_cast<std::size_t>(i)]);
        if (mv == 0.0) continue;
        for (std::int64_t j = 0; j < d_code; ++j)
            projected[static_cast<std::size_t>(j)] += mv * static_cast<double>(av[i * d_code + j]);
    }
    double norm = 0.0;
    for (double v : projected) norm += v * v;
    norm = std::sqrt(norm);
    if (norm == 0.0) throw NumericError("quantize: degenerate projection, A m is zero");
    for (double& v : projected) v /= norm;

    auto cv = book.c.data();
    const std::int64_t vocab = book.c.dim(0);
    std::int32_t best = 0;
    double best_dist = std::numeric_limits<double>::infinity();
    for (std::int64_t i = 0; i < vocab; ++i) {
        double row_norm = 0.0;
        for (std::int64_t j = 0; j < d_code; ++j) {
            const double c = static_cast<double>(cv[i * d_code + j]);
            row_norm += c * c;
        }
        row_norm = std::sqrt(row_norm);
        double dist = 0.0;
        for (std::int64_t j = 0; j < d_code; ++j) {
            const double diff =
                static_cast<double>(cv[i * d_code + j]) / row_norm - projected[static_cast<std::size_t>(j)];
            dist += diff * diff;
        }
        if (dist < best_dist) {  // strict: ties keep the lowest index
            best_dist = dist;
            best = static_cast<std::int32_t>(i);
        }
    }
    return best;
}

std::vector<std::int32_t> quantize_batch(const Tensor& stacked, const RandomProjection& proj,
                                         const Codebook& book) {
    if (stacked.rank() != 3) throw ShapeError("quantize_batch: expected (B,T',4*d_feat)");
    const std::int64_t B = stacked.dim(0), Ts = stacked.dim(1), m = stacked.dim(2);
    std::vector<std::int32_t> out(static_cast<std::size_t>(B * Ts));
    auto sv = stacked.data();
    for (std::int64_t i = 0; i < B * Ts; ++i)
        out[static_cast<std::size_t>(i)] = quantize({sv.data() + i * m, static_cast<std::size_t>(m)}, proj, book);
    return out;
}

MaskPlan make_mask(std::int64_t n_positions, double start_prob, std::int64_t span_length,
                   Rng& rng) {
    if (start_prob < 0.0 || start_prob > 1.0)
        throw ContractError("make_mask: start_prob must lie in [0,1]");
    if (span_length < 1) throw ContractError("make_mask: span_length must be >= 1");
    MaskPlan plan;
    plan.span_length = span_length;
    plan.start_prob = start_prob;
    plan.mask.assign(static_cast<std::size_t>(n_positions), 0);
    for (std::int64_t i = 0; i < n_positions; ++i) {
        if (rng.uniform() < start_prob) {
            plan.starts.push_back(i);
            const std::int64_t end = std::min(n_positions, i + span_length);
            for (std::int64_t j = i; j < end; ++j) plan.mask[static_cast<std::size_t>(j)] = 1;
        }
    }
    return plan;
}

Tensor apply_mask(const Tensor& features, const std::vector<MaskPlan>& plans, double noise_std,
                  Rng& rng) {
    if (features.rank() != 3) throw ShapeError("apply_mask: features must be (B,T,d_feat)");
    const std::int64_t B = features.dim(0), T = features.dim(1), d = features.dim(2);
    if (static_cast<std::int64_t>(plans.size()) != B)
        throw ContractError("apply_mask: got " + std::to_string(plans.size()) + " plans for B=" +
                            std::to_string(B));
    Tensor out = features.clone();
    auto ov = out.mutable_data();
    for (std::int64_t b = 0; b < B; ++b) {
        const MaskPlan& plan = plans[static_cast<std::size_t>(b)];
        for (std::size_t pos = 0; pos < plan.mask.size(); ++pos) {
            if (!plan.mask[pos]) continue;
            const std::int64_t t0 = static_cast<std::int64_t>(pos) * 4;
            const std::int64_t t1 = std::min(T, t0 + 4);
            for (std::int64_t t = t0; t < t1; ++t)
                for (std::int64_t j = 0; j < d; ++j)
                    ov[(b * T + t) * d + j] = static_cast<real>(rng.gaussian(0.0, noise_std));
        }
    }
    return out;
}

Tensor pretrain_loss(const Tensor& logits, const std::vector<std::int32_t>& targets,
                     const std::vector<MaskPlan>& plans) {
    const std::int64_t B = logits.dim(0), Ts = logits.dim(1);
    if (static_cast<std::int64_t>(plans.size()) != B)
        throw ContractError("pretrain_loss: got " + std::to_string(plans.size()) +
                            " plans for B=" + std::to_string(B));
    std::vector<std::uint8_t> mask(static_cast<std::size_t>(B * Ts), 0);
    for (std::int64_t b = 0; b < B; ++b) {
        const MaskPlan& plan = plans[static_cast<std::size_t>(b)];
        if (static_cast<std::int64_t>(plan.mask.size()) != Ts)
            throw ContractError("pretrain_loss: plan covers " + std::to_string(plan.mask.size()) +
                                " positions, logits have T'=" + std::to_string(Ts));
        std::copy(plan.mask.begin(), plan.mask.end(), mask.begin() + b * Ts);
    }
    return masked_mean_cross_entropy(logits, targets, mask);
}

// ---- trainer -------------------------------------------------------------------

Trainer::Trainer(const TrainerConfig& config)
    : config_(config),
      model_(config.model),
      opt_(config.learning_rate),
      train_rng_(config.quantizer_seed ^ 0x5eed5eed5eed5eedULL) {
    tune_malloc_for_large_payloads();
    Rng qrng(config.quantizer_seed);
    proj_ = RandomProjection::create(config.model.d_feat, config.d_code, qrng);
    book_ = Codebook::create(config.model.vocab, config.d_code, qrng);
    params_ = model_.parameters();
}

StepResult Trainer::step(const Tensor& features) {
    const std::int64_t T = features.dim(1);
    const std::int64_t Ts = T / 4;

    // path (ii): pseudo-targets from the clean features
    Tensor stacked = stack_frames(features);
    std::vector<std::int32_t> targets = quantize_batch(stacked, proj_, book_);

    // path (i): mask, forward, loss on masked positions only
    const std::int64_t B = features.dim(0);
    std::vector<MaskPlan> plans;
    std::int64_t masked = 0;
    for (int attempt = 0; attempt < 64 && masked == 0; ++attempt) {
        plans.clear();
        for (std::int64_t b = 0; b < B; ++b) {
            plans.push_back(make_mask(Ts, config_.mask.start_prob, config_.mask.span_length,
                                      train_rng_));
            masked += plans.back().masked_count();
        }
    }
    if (masked == 0)
        throw ContractError("pretrain step: mask sampling produced zero masked positions");

    Tensor masked_features = apply_mask(features, plans, config_.mask.noise_std, train_rng_);

    StepResult result;
    {
        Tape tape;
        Tensor logits = model_.encode(masked_features);
        if (logits.dim(1) != Ts)
            throw ContractError("pretrain step: model emits T'=" + std::to_string(logits.dim(1)) +
                                " steps but targets have T'=" + std::to_string(Ts));
        Tensor loss = pretrain_loss(logits, targets, plans);
        tape.backward(loss);
        result.loss = static_cast<double>(loss.item());
        result.masked_positions = masked;
    }
    opt_.step(params_);
    for (auto& p : params_) p.tensor.zero_grad();
    return result;
}

// ---- checkpoint -------------------------------------------------------------------

namespace {

void write_named_tensor(std::ostream& os, const std::string& name, const Tensor& t) {
    os << "tensor " << name << "\n";
    write_tensor(os, t);
}

}  // namespace

void Trainer::save_checkpoint(std::ostream& os,
                              const std::map<std::string, std::string>& extra) const {
    os << "seqmix-checkpoint v1\n";
    os << "step = " << opt_.step_count() << "\n";
    os << "train_rng = " << train_rng_.save_state() << "\n";
    // config echo, informational
    const auto& m = config_.model;
    os << "config.mixer = " << mixers::kind_name(m.mixer.kind) << "\n";
    os << "config.d_model = " << m.mixer.d_model << "\n";
    os << "config.n_heads = " << m.mixer.n_heads << "\n";
    os << "config.d_summary = " << m.mixer.d_summary << "\n";
    os << "config.d_tmmlp = " << m.mixer.d_tmmlp << "\n";
    os << "config.d_state = " << m.mixer.d_state << "\n";
    os << "config.d_inner = " << m.mixer.d_inner << "\n";
    os << "config.model_seed = " << m.mixer.seed << "\n";
    os << "config.n_layers = " << m.n_layers << "\n";
    os << "config.d_ffn = " << m.d_ffn << "\n";
    os << "config.conv_kernel = " << m.conv_kernel << "\n";
    os << "config.vocab = " << m.vocab << "\n";
    os << "config.d_feat = " << m.d_feat << "\n";
    os << "config.positional = " << encoder::positional_name(m.positional) << "\n";
    os << "config.mask_start_prob = " << config_.mask.start_prob << "\n";
    os << "config.mask_span = " << config_.mask.span_length << "\n";
    os << "config.mask_noise_std = " << config_.mask.noise_std << "\n";
    os << "config.d_code = " << config_.d_code << "\n";
    os << "config.learning_rate = " << config_.learning_rate << "\n";
    os << "config.quantizer_seed = " << config_.quantizer_seed << "\n";
    for (const auto& [k, v] : extra) os << "extra." << k << " = " << v << "\n";
    os << "end-header\n";

    for (const auto& p : params_) write_named_tensor(os, "param." + p.name, p.tensor);

    // Adam moments; empty until the first step
    auto& opt = const_cast<nn::Adam&>(opt_);
    if (!opt.moment1().empty()) {
        for (std::size_t i = 0; i < params_.size(); ++i) {
            Tensor m = Tensor::from_vector(params_[i].tensor.shape(), opt.moment1()[i]);
            Tensor v = Tensor::from_vector(params_[i].tensor.shape(), opt.moment2()[i]);
            write_named_tensor(os, "adam.m." + params_[i].name, m);
            write_named_tensor(os, "adam.v." + params_[i].name, v);
        }
    }
    write_named_tensor(os, "quantizer.projection", proj_.a);
    write_named_tensor(os, "quantizer.codebook", book_.c);
    os << "end-checkpoint\n";
    if (!os) throw std::runtime_error("save_checkpoint: stream failure");
}

std::map<std::string, std::string> Trainer::load_checkpoint(std::istream& is) {
    std::string line;
    if (!std::getline(is, line) || line != "seqmix-checkpoint v1")
        throw std::runtime_error("load_checkpoint: bad magic line '" + line + "'");
    std::int64_t step = 0;
    std::map<std::string, std::string> extra;
    while (std::getline(is, line) && line != "end-header") {
        const auto eq = line.find(" = ");
        if (eq == std::string::npos)
            throw std::runtime_error("load_checkpoint: bad header line '" + line + "'");
        const std::string key = line.substr(0, eq);
        const std::string value = line.substr(eq + 3);
        if (key == "step") step = std::stoll(value);
        else if (key == "train_rng") train_rng_.load_state(value);
        else if (key.rfind("extra.", 0) == 0) extra[key.substr(6)] = value;
        // config.* echo lines are informational; the live config wins
    }

    std::map<std::string, Tensor> named;
    while (std::getline(is, line) && line != "end-checkpoint") {
        if (line.rfind("tensor ", 0) != 0)
            throw std::runtime_error("load_checkpoint: expected tensor record, got '" + line + "'");
        const std::string name = line.substr(7);
        named.emplace(name, read_tensor(is));
    }

    auto take = [&](const std::string& name) -> Tensor {
        auto it = named.find(name);
        if (it == named.end())
            throw std::runtime_error("load_checkpoint: missing tensor '" + name + "'");
        return it->second;
    };

    for (auto& p : params_) {
        Tensor stored = take("param." + p.name);
        if (stored.shape() != p.tensor.shape())
            throw std::runtime_error("load_checkpoint: shape mismatch for '" + p.name + "'");
        std::copy(stored.data().begin(), stored.data().end(), p.tensor.mutable_data().begin());
        p.tensor.zero_grad();
    }
    if (named.count("adam.m." + params_.front().name)) {
        opt_.moment1().resize(params_.size());
        opt_.moment2().resize(params_.size());
        for (std::size_t i = 0; i < params_.size(); ++i) {
            Tensor m = take("adam.m." + params_[i].name);
            Tensor v = take("adam.v." + params_[i].name);
            opt_.moment1()[i].assign(m.data().begin(), m.data().end());
            opt_.moment2()[i].assign(v.data().begin(), v.data().end());
        }
    }
    opt_.set_step_count(step);

    Tensor a = take("quantizer.projection");
    Tensor c = take("quantizer.codebook");
    std::copy(a.data().begin(), a.data().end(), proj_.a.mutable_data().begin());
    std::copy(c.data().begin(), c.data().end(), book_.c.mutable_data().begin());
    return extra;
}

}  // namespace seqmix::bestrq

#include "seqmix/features.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <sstream>

namespace seqmix::cli {

SynthSpec SynthSpec::parse(const std::string& text) {
    SynthSpec spec;
    std::istringstream is(text);
    std::string item;
    while (std::getline(is, item, ',')) {
        const auto eq = item.find('=');
        if (eq == std::string::npos)
            throw ContractError("synthetic spec: expected key=value, got '" + item + "'");
        const std::string key = item.substr(0, eq);
        const std::string value = item.substr(eq + 1);
        try {
            if (key == "n") spec.n_sequences = std::stoll(value);
            else if (key == "d") spec.d_feat = std::stoll(value);
            else if (key == "len") {
                const auto dots = value.find("..");
                if (dots == std::string::npos) {
                    spec.len_lo = spec.len_hi = std::stoll(value);
                } else {
                    spec.len_lo = std::stoll(value.substr(0, dots));
                    spec.len_hi = std::stoll(value.substr(dots + 2));
                }
            } else {
                throw ContractError("synthetic spec: unknown key '" + key + "'");
            }
        } catch (const ContractError&) {
            throw;
        } catch (const std::exception&) {
            throw ContractError("synthetic spec: cannot parse '" + item + "'");
        }
    }
    spec.validate();
    return spec;
}

void SynthSpec::validate() const {
    if (n_sequences < 1) throw ContractError("synthetic spec: n must be >= 1");
    if (d_feat < 1) throw ContractError("synthetic spec: d must be >= 1");
    if (len_lo < 8 || len_hi < len_lo)
        throw ContractError("synthetic spec: degenerate length range " + std::to_string(len_lo) +
                            ".." + std::to_string(len_hi));
}

std::vector<Tensor> synth_features(const SynthSpec& spec, std::uint64_t seed) {
    spec.validate();
    Rng rng(seed);
    std::vector<Tensor> out;
    out.reserve(static_cast<std::size_t>(spec.n_sequences));
    for (std::int64_t i = 0; i < spec.n_sequences; ++i) {
        const std::int64_t len = rng.uniform_int(spec.len_lo, spec.len_hi);
        Tensor seq = Tensor::zeros({len, spec.d_feat});
        auto data = seq.mutable_data();
        std::int64_t t = 0;
        std::vector<double> mean(static_cast<std::size_t>(spec.d_feat));
        while (t < len) {
            const std::int64_t seg = rng.uniform_int(96, 160);
            for (auto& m : mean) m = rng.gaussian();
            const std::int64_t end = std::min(len, t + seg);
            for (; t < end; ++t)
                for (std::int64_t j = 0; j < spec.d_feat; ++j)
                    data[t * spec.d_feat + j] =
                        static_cast<real>(mean[static_cast<std::size_t>(j)] + rng.gaussian(0.0, 0.05));
        }
        out.push_back(std::move(seq));
    }
    return out;
}

std::vector<Tensor> load_feature_container(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("features: cannot open '" + path + "'");
    std::vector<Tensor> out;
    while (is.peek() != std::char_traits<char>::eof()) {
        Tensor t = read_tensor(is);
        if (t.rank() != 2)
            throw std::runtime_error("features: expected (T,d_feat) records in '" + path + "'");
        out.push_back(std::move(t));
    }
    if (out.empty()) throw std::runtime_error("features: '" + path + "' holds no records");
    return out;
}

void write_feature_container(const std::string& path, const std::vector<Tensor>& sequences) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("features: cannot open '" + path + "' for writing");
    for (const Tensor& t : sequences) write_tensor(os, t);
    if (!os) throw std::runtime_error("features: write failure on '" + path + "'");
}

BatchPlan::BatchPlan(std::vector<Tensor> sequences, std::int64_t frame_cap, std::uint64_t seed)
    : sequences_(std::move(sequences)), seed_(seed) {
    if (sequences_.empty()) throw ContractError("BatchPlan: no sequences");
    if (frame_cap < 4) throw ContractError("BatchPlan: frame_cap must be >= 4");
    for (const Tensor& t : sequences_)
        if (t.rank() != 2 || t.dim(0) < 4)
            throw ContractError("BatchPlan: sequences must be (T>=4, d_feat)");

    std::vector<std::size_t> order(sequences_.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        const auto la = sequences_[a].dim(0), lb = sequences_[b].dim(0);
        return la != lb ? la < lb : a < b;
    });

    Group current;
    for (std::size_t idx : order) {
        const std::int64_t len = sequences_[idx].dim(0);
        if (current.members.empty()) {
            current.truncated_len = std::min(len, frame_cap) / 4 * 4;
            current.members.push_back(idx);
            continue;
        }
        const std::int64_t next_frames =
            current.truncated_len * static_cast<std::int64_t>(current.members.size() + 1);
        if (next_frames <= frame_cap) {
            current.members.push_back(idx);
        } else {
            groups_.push_back(std::move(current));
            current = Group{};
            current.truncated_len = std::min(len, frame_cap) / 4 * 4;
            current.members.push_back(idx);
        }
    }
    if (!current.members.empty()) groups_.push_back(std::move(current));
}

std::int64_t BatchPlan::batch_frames(std::int64_t group_index) const {
    const Group& g = groups_[static_cast<std::size_t>(group_index)];
    return g.truncated_len * static_cast<std::int64_t>(g.members.size());
}

Tensor BatchPlan::batch_for_step(std::int64_t step) const {
    const std::int64_t n = batches_per_epoch();
    const std::int64_t epoch = step / n;
    const std::int64_t slot = step % n;

    // per-epoch deterministic shuffle of group order
    std::vector<std::int64_t> perm(static_cast<std::size_t>(n));
    std::iota(perm.begin(), perm.end(), 0);
    Rng rng(seed_ ^ (0x45b3ULL + static_cast<std::uint64_t>(epoch) * 0x9e3779b97f4a7c15ULL));
    for (std::int64_t i = n - 1; i > 0; --i) {
        const auto j = static_cast<std::int64_t>(rng.uniform_index(static_cast<std::uint64_t>(i + 1)));
        std::swap(perm[static_cast<std::size_t>(i)], perm[static_cast<std::size_t>(j)]);
    }

    const Group& g = groups_[static_cast<std::size_t>(perm[static_cast<std::size_t>(slot)])];
    const std::int64_t B = static_cast<std::int64_t>(g.members.size());
    const std::int64_t T = g.truncated_len;
    const std::int64_t d = sequences_.front().dim(1);
    Tensor batch = Tensor::zeros({B, T, d});
    auto bv = batch.mutable_data();
    for (std::int64_t b = 0; b < B; ++b) {
        auto sv = sequences_[g.members[static_cast<std::size_t>(b)]].data();
        std::copy(sv.data(), sv.data() + T * d, bv.data() + b * T * d);
    }
    return batch;
}

}  // namespace seqmix::cli

#include "seqmix/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <istream>
#include <ostream>
#include <sstream>

#ifdef __GLIBC__
#include <malloc.h>
#endif

namespace seqmix {

namespace {

constexpr double kLayerNormEps = 1e-5;

thread_local std::uint64_t t_mac_count = 0;
thread_local Tape* t_active_tape = nullptr;

void check(bool cond, const char* op, const std::string& msg) {
    if (!cond) throw ShapeError(std::string(op) + ": " + msg);
}

std::int64_t rows_before_lastdim(const Shape& s) {
    std::int64_t r = 1;
    for (std::size_t i = 0; i + 1 < s.size(); ++i) r *= s[i];
    return r;
}

}  // namespace

std::string shape_to_string(const Shape& s) {
    std::string out = "(";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + ")";
}

std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (auto d : s) n *= d;
    return n;
}

AllocationMeter& thread_meter() {
    // leaked on purpose: payloads may outlive the creating thread
    thread_local AllocationMeter* m = new AllocationMeter();
    return *m;
}

void tune_malloc_for_large_payloads() {
#ifdef __GLIBC__
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

std::uint64_t thread_mac_count() { return t_mac_count; }
void thread_mac_add(std::uint64_t n) { t_mac_count += n; }

namespace detail {

Storage::Storage(std::size_t n) : data_(n, real(0)), meter_(&thread_meter()) {
    meter_->charge(n * sizeof(real));
}

Storage::Storage(Storage&& other) noexcept : data_(std::move(other.data_)), meter_(other.meter_) {
    other.meter_ = nullptr;
}

Storage::~Storage() {
    if (meter_) meter_->credit(data_.size() * sizeof(real));
}

}  // namespace detail

// ---- Tensor ----------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    const auto n = shape_numel(shape);
    check(n >= 0, "zeros", "negative extent in " + shape_to_string(shape));
    auto node = std::make_shared<detail::TensorNode>(std::move(shape), static_cast<std::size_t>(n));
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
}

Tensor Tensor::full(Shape shape, real value, bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    std::fill(t.mutable_data().begin(), t.mutable_data().end(), value);
    return t;
}

Tensor Tensor::from_vector(Shape shape, std::vector<real> values, bool requires_grad) {
    const auto n = shape_numel(shape);
    check(n == static_cast<std::int64_t>(values.size()), "from_vector",
          "shape " + shape_to_string(shape) + " needs " + std::to_string(n) + " values, got " +
              std::to_string(values.size()));
    Tensor t = zeros(std::move(shape), requires_grad);
    std::copy(values.begin(), values.end(), t.mutable_data().begin());
    return t;
}

Tensor Tensor::scalar(real value, bool requires_grad) {
    return full(Shape{1}, value, requires_grad);
}

real Tensor::item() const {
    if (numel() != 1) throw ContractError("item: tensor has " + std::to_string(numel()) + " elements");
    return data()[0];
}

real Tensor::at(std::initializer_list<std::int64_t> idx) const {
    const Shape& s = shape();
    if (idx.size() != s.size()) throw ContractError("at: rank mismatch");
    std::int64_t flat = 0;
    std::size_t i = 0;
    for (auto v : idx) {
        flat = flat * s[i] + v;
        ++i;
    }
    return data()[static_cast<std::size_t>(flat)];
}

Tensor& Tensor::set_requires_grad(bool v) {
    node_->requires_grad = v;
    return *this;
}

Tensor Tensor::grad() const {
    Tensor g = Tensor::zeros(shape());
    if (node_->grad) {
        std::copy(node_->grad->data(), node_->grad->data() + node_->grad->size(),
                  g.mutable_data().begin());
    }
    return g;
}

void Tensor::zero_grad() { node_->grad.reset(); }

Tensor Tensor::clone() const {
    Tensor t = Tensor::zeros(shape());
    std::copy(data().begin(), data().end(), t.mutable_data().begin());
    return t;
}

// ---- Tape ------------------------------------------------------------------

Tape::Tape() {
    if (t_active_tape) throw ContractError("Tape: another tape is already active on this thread");
    t_active_tape = this;
}

Tape::~Tape() { t_active_tape = nullptr; }

Tape* Tape::active() { return t_active_tape; }

void accumulate_adjoint(Adjoints& adj, detail::TensorNode* node, std::span<const real> src) {
    auto& buf = adj[node];
    if (buf.empty()) buf.assign(src.begin(), src.end());
    else {
        for (std::size_t i = 0; i < src.size(); ++i) buf[i] += src[i];
    }
}

void Tape::backward(const Tensor& loss) {
    if (loss.numel() != 1) {
        throw ContractError("backward: loss must be scalar, got shape " +
                            shape_to_string(loss.shape()));
    }
    Adjoints adj;
    adj[loss.node()] = {real(1)};

    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
        auto found = adj.find(it->output.get());
        if (found == adj.end()) continue;  // not in the loss's ancestry
        it->backprop(found->second, adj);
    }

    for (auto& [node, buf] : adj) {
        if (!node->requires_grad) continue;
        if (!node->grad) node->grad = std::make_unique<detail::Storage>(buf.size());
        real* g = node->grad->data();
        for (std::size_t i = 0; i < buf.size(); ++i) g[i] += buf[i];
    }
}

// ---- op plumbing -----------------------------------------------------------

Tensor make_op_output(Shape shape, std::vector<real> values, const std::vector<Tensor>& inputs,
                      std::function<void(const std::vector<real>&, Adjoints&)> backprop,
                      const char* op_name) {
    Tensor out = Tensor::from_vector(std::move(shape), std::move(values));
    for (real v : out.data()) {
        if (!std::isfinite(v)) {
            throw NumericError(std::string(op_name) + ": non-finite value in output");
        }
    }
    bool needs_grad = false;
    for (const Tensor& in : inputs) needs_grad = needs_grad || in.requires_grad();
    Tape* tape = Tape::active();
    if (tape && needs_grad) {
        out.set_requires_grad(true);
        tape->record({out.node_, std::move(backprop)});
    }
    return out;
}

namespace {

// Shorthand: capture-by-value Tensor handles keep input payloads alive for
// the backward sweep.
using BackFn = std::function<void(const std::vector<real>&, Adjoints&)>;

// Saved-state copies are only worth making when the op will actually land on
// a tape; skipping them keeps untaped forward passes free of copy traffic.
bool will_record(std::initializer_list<const Tensor*> inputs) {
    if (!Tape::active()) return false;
    for (const Tensor* t : inputs)
        if (t->requires_grad()) return true;
    return false;
}

Tensor elementwise_unary(const Tensor& a, const char* name, real (*fwd)(real),
                         real (*dydx_from)(real x, real y)) {
    std::vector<real> out(static_cast<std::size_t>(a.numel()));
    auto in = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(in[i]);
    std::vector<real> saved_y;
    if (will_record({&a})) saved_y = out;
    Tensor at = a;
    return make_op_output(
        a.shape(), std::move(out), {a},
        [at, saved_y, dydx_from](const std::vector<real>& g, Adjoints& adj) {
            if (!at.requires_grad()) return;
            std::vector<real> da(g.size());
            auto x = at.data();
            thread_mac_add(g.size());
            for (std::size_t i = 0; i < g.size(); ++i) da[i] = g[i] * dydx_from(x[i], saved_y[i]);
            accumulate_adjoint(adj, at.node(), da);
        },
        name);
}

}  // namespace

// ---- matmul ----------------------------------------------------------------

namespace {

// C (m,n) += A (m,k) * B (k,n), row-major; i-k-j order keeps the inner loop
// contiguous on both C and B.
void gemm_acc(const real* a, const real* b, real* c, std::int64_t m, std::int64_t k,
              std::int64_t n) {
    for (std::int64_t i = 0; i < m; ++i) {
        const real* arow = a + i * k;
        real* crow = c + i * n;
        for (std::int64_t kk = 0; kk < k; ++kk) {
            const real av = arow[kk];
            if (av == real(0)) continue;
            const real* brow = b + kk * n;
            for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C (m,n) += A (m,k) * B^T where Bt is (n,k) row-major.
void gemm_nt_acc(const real* a, const real* bt, real* c, std::int64_t m, std::int64_t k,
                 std::int64_t n) {
    for (std::int64_t i = 0; i < m; ++i) {
        const real* arow = a + i * k;
        real* crow = c + i * n;
        for (std::int64_t j = 0; j < n; ++j) {
            const real* brow = bt + j * k;
            real acc = 0;
            for (std::int64_t kk = 0; kk < k; ++kk) acc += arow[kk] * brow[kk];
            crow[j] += acc;
        }
    }
}

// C (m,n) += A^T * B where At is (k,m) and B is (k,n).
void gemm_tn_acc(const real* at, const real* b, real* c, std::int64_t m, std::int64_t k,
                 std::int64_t n) {
    for (std::int64_t kk = 0; kk < k; ++kk) {
        const real* arow = at + kk * m;
        const real* brow = b + kk * n;
        for (std::int64_t i = 0; i < m; ++i) {
            const real av = arow[i];
            if (av == real(0)) continue;
            real* crow = c + i * n;
            for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    const int ra = a.rank(), rb = b.rank();
    check((ra == 2 && rb == 2) || (ra == 3 && rb == 3) || (ra == 3 && rb == 2), "matmul",
          "unsupported ranks " + shape_to_string(a.shape()) + " x " + shape_to_string(b.shape()));

    const std::int64_t batch = (ra == 3) ? a.dim(0) : 1;
    const std::int64_t m = a.dim(ra - 2), k = a.dim(ra - 1);
    const std::int64_t kb = b.dim(rb - 2), n = b.dim(rb - 1);
    check(k == kb, "matmul",
          "inner dimensions differ: " + shape_to_string(a.shape()) + " x " +
              shape_to_string(b.shape()));
    if (ra == 3 && rb == 3) {
        check(a.dim(0) == b.dim(0), "matmul", "batch dimensions differ");
    }

    Shape out_shape = (ra == 3) ? Shape{batch, m, n} : Shape{m, n};
    std::vector<real> out(static_cast<std::size_t>(batch * m * n), real(0));
    const bool b_batched = (rb == 3);
    for (std::int64_t bi = 0; bi < batch; ++bi) {
        gemm_acc(a.data().data() + bi * m * k, b.data().data() + (b_batched ? bi * k * n : 0),
                 out.data() + bi * m * n, m, k, n);
    }
    thread_mac_add(static_cast<std::uint64_t>(batch * m * k * n));

    Tensor at = a, bt = b;
    return make_op_output(
        std::move(out_shape), std::move(out), {a, b},
        [at, bt, batch, m, k, n, b_batched](const std::vector<real>& g, Adjoints& adj) {
            // dA = g * B^T ; dB = A^T * g
            if (at.requires_grad()) {
                std::vector<real> da(static_cast<std::size_t>(batch * m * k), real(0));
                for (std::int64_t bi = 0; bi < batch; ++bi) {
                    gemm_nt_acc(g.data() + bi * m * n,
                                bt.data().data() + (b_batched ? bi * k * n : 0), da.data() + bi * m * k,
                                m, n, k);
                }
                thread_mac_add(static_cast<std::uint64_t>(batch * m * k * n));
                accumulate_adjoint(adj, at.node(), da);
            }
            if (bt.requires_grad()) {
                std::vector<real> db(static_cast<std::size_t>((b_batched ? batch : 1) * k * n),
                                     real(0));
                for (std::int64_t bi = 0; bi < batch; ++bi) {
                    gemm_tn_acc(at.data().data() + bi * m * k, g.data() + bi * m * n,
                                db.data() + (b_batched ? bi * k * n : 0), k, m, n);
                }
                thread_mac_add(static_cast<std::uint64_t>(batch * m * k * n));
                accumulate_adjoint(adj, bt.node(), db);
            }
        },
        "matmul");
}

Tensor transpose(const Tensor& a) {
    check(a.rank() == 2, "transpose", "expected rank 2, got " + shape_to_string(a.shape()));
    const std::int64_t m = a.dim(0), n = a.dim(1);
    std::vector<real> out(static_cast<std::size_t>(m * n));
    auto in = a.data();
    for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t j = 0; j < n; ++j) out[static_cast<std::size_t>(j * m + i)] = in[i * n + j];
    Tensor at = a;
    return make_op_output(
        Shape{n, m}, std::move(out), {a},
        [at, m, n](const std::vector<real>& g, Adjoints& adj) {
            if (!at.requires_grad()) return;
            std::vector<real> da(static_cast<std::size_t>(m * n));
            for (std::int64_t j = 0; j < n; ++j)
                for (std::int64_t i = 0; i < m; ++i)
                    da[static_cast<std::size_t>(i * n + j)] = g[static_cast<std::size_t>(j * m + i)];
            accumulate_adjoint(adj, at.node(), da);
        },
        "transpose");
}

Tensor transpose_last2(const Tensor& a) {
    check(a.rank() == 3, "transpose_last2", "expected rank 3, got " + shape_to_string(a.shape()));
    const std::int64_t b = a.dim(0), m = a.dim(1), n = a.dim(2);
    std::vector<real> out(static_cast<std::size_t>(b * m * n));
    auto in = a.data();
    for (std::int64_t bi = 0; bi < b; ++bi)
        for (std::int64_t i = 0; i < m; ++i)
            for (std::int64_t j = 0; j < n; ++j)
                out[static_cast<std::size_t>((bi * n + j) * m + i)] = in[(bi * m + i) * n + j];
    Tensor at = a;
    return make_op_output(
        Shape{b, n, m}, std::move(out), {a},
        [at, b, m, n](const std::vector<real>& g, Adjoints& adj) {
            if (!at.requires_grad()) return;
            std::vector<real> da(static_cast<std::size_t>(b * m * n));
            for (std::int64_t bi = 0; bi < b; ++bi)
                for (std::int64_t j = 0; j < n; ++j)
                    for (std::int64_t i = 0; i < m; ++i)
                        da[static_cast<std::size_t>((bi * m + i) * n + j)] =
                            g[static_cast<std::size_t>((bi * n + j) * m + i)];
            accumulate_adjoint(adj, at.node(), da);
        },
        "transpose_last2");
}

// ---- elementwise -----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
    check(a.shape() == b.shape(), "add",
          "shape mismatch " + shape_to_string(a.shape()) + " vs " + shape_to_string(b.shape()));
    std::vector<real> out(static_cast<std::size_t>(a.numel()));
    auto xa = a.data(), xb = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = xa[i] + xb[i];
    Tensor at = a, bt = b;
    return make_op_output(
        a.shape(), std::move(out), {a, b},
        [at, bt](const std::vector<real>& g, Adjoints& adj) {
            if (at.requires_grad()) accumulate_adjoint(adj, at.node(), g);
            if (bt.requires_grad()) accumulate_adjoint(adj, bt.node(), g);
        },
        "add");
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check(a.shape() == b.shape(), "sub",
          "shape mismatch " + shape_to_string(a.shape()) + " vs " + shape_to_string(b.shape()));
    std::vector<real> out(static_cast<std::size_t>(a.numel()));
    auto xa = a.data(), xb = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = xa[i] - xb[i];
    Tensor at = a, bt = b;
    return make_op_output(
        a.shape(), std::move(out), {a, b},
        [at, bt](const std::vector<real>& g, Adjoints& adj) {
            if (at.requires_grad()) accumulate_adjoint(adj, at.node(), g);
            if (bt.requires_grad()) {
                std::vector<real> db(g.size());
                for (std::size_t i = 0; i < g.size(); ++i) db[i] = -g[i];
                accumulate_adjoint(adj, bt.node(), db);
            }
        },
        "sub");
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check(a.shape() == b.shape(), "mul",
          "shape mismatch " + shape_to_string(a.shape()) + " vs " + shape_to_string(b.shape()));
    std::vector<real> out(static_cast<std::size_t>(a.numel()));
    auto xa = a.data(), xb = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = xa[i] * xb[i];
    thread_mac_add(out.size());
    Tensor at = a, bt = b;
    return make_op_output(
        a.shape(), std::move(out), {a, b},
        [at, bt](const std::vector<real>& g, Adjoints& adj) {
            if (at.requires_grad()) {
                std::vector<real> da(g.size());
                auto x = bt.data();
                for (std::size_t i = 0; i < g.size(); ++i) da[i] = g[i] * x[i];
                thread_mac_add(g.size());
                accumulate_adjoint(adj, at.node(), da);
            }
            if (bt.requires_grad()) {
                std::vector<real> db(g.size());
                auto x = at.data();
                for (std::size_t i = 0; i < g.size(); ++i) db[i] = g[i] * x[i];
                thread_mac_add(g.size());
                accumulate_adjoint(adj, bt.node(), db);
            }
        },
        "mul");
}

Tensor scale(const Tensor& a, real c) {
    std::vector<real> out(static_cast<std::size_t>(a.numel()));
    auto x = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * c;
    thread_mac_add(out.size());
    Tensor at = a;
    return make_op_output(
        a.shape(), std::move(out), {a},
        [at, c](const std::vector<real>& g, Adjoints& adj) {
            if (!at.requires_grad()) return;
            std::vector<real> da(g.size());
            for (std::size_t i = 0; i < g.size(); ++i) da[i] = g[i] * c;
            thread_mac_add(g.size());
            accumulate_adjoint(adj, at.node(), da);
        },
        "scale");
}

Tensor add_bias(const Tensor& x, const Tensor& b) {
    check(b.rank() == 1, "add_bias", "bias must be rank 1");
    const std::int64_t d = x.dim(x.rank() - 1);
    check(b.dim(0) == d, "add_bias",
          "bias length " + std::to_string(b.dim(0)) + " vs last dim " + std::to_string(d));
    const std::int64_t rows = rows_before_lastdim(x.shape());
    std::vector<real> out(static_cast<std::size_t>(x.numel()));
    auto xv = x.data(), bv = b.data();
    for (std::int64_t r = 0; r < rows; ++r)
        for (std::int64_t j = 0; j < d; ++j)
            out[static_cast<std::size_t>(r * d + j)] = xv[r * d + j] + bv[j];
    Tensor xt = x, bt = b;
    return make_op_output(
        x.shape(), std::move(out), {x, b},
        [xt, bt, rows, d](const std::vector<real>& g, Adjoints& adj) {
            if (xt.requires_grad()) accumulate_adjoint(adj, xt.node(), g);
            if (bt.requires_grad()) {
                std::vector<real> db(static_cast<std::size_t>(d), real(0));
                for (std::int64_t r = 0; r < rows; ++r)
                    for (std::int64_t j = 0; j < d; ++j) db[static_cast<std::size_t>(j)] += g[r * d + j];
                accumulate_adjoint(adj, bt.node(), db);
            }
        },
        "add_bias");
}

Tensor mul_time_broadcast(const Tensor& x, const Tensor& v) {
    check(x.rank() == 3 && v.rank() == 2, "mul_time_broadcast", "expected (B,T,c) and (B,c)");
    const std::int64_t B = x.dim(0), T = x.dim(1), c = x.dim(2);
    check(v.dim(0) == B && v.dim(1) == c, "mul_time_broadcast",
          "got " + shape_to_string(x.shape()) + " and " + shape_to_string(v.shape()));
    std::vector<real> out(static_cast<std::size_t>(x.numel()));
    auto xv = x.data(), vv = v.data();
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t t = 0; t < T; ++t)
            for (std::int64_t j = 0; j < c; ++j)
                out[static_cast<std::size_t>((b * T + t) * c + j)] =
                    xv[(b * T + t) * c + j] * vv[b * c + j];
    thread_mac_add(out.size());
    Tensor xt = x, vt = v;
    return make_op_output(
        x.shape(), std::move(out), {x, v},
        [xt, vt, B, T, c](const std::vector<real>& g, Adjoints& adj) {
            if (xt.requires_grad()) {
                std::vector<real> dx(g.size());
                auto vv = vt.data();
                for (std::int64_t b = 0; b < B; ++b)
                    for (std::int64_t t = 0; t < T; ++t)
                        for (std::int64_t j = 0; j < c; ++j)
                            dx[static_cast<std::size_t>((b * T + t) * c + j)] =
                                g[(b * T + t) * c + j] * vv[b * c + j];
                thread_mac_add(g.size());
                accumulate_adjoint(adj, xt.node(), dx);
            }
            if (vt.requires_grad()) {
                std::vector<real> dv(static_cast<std::size_t>(B * c), real(0));
                auto xv = xt.data();
                for (std::int64_t b = 0; b < B; ++b)
                    for (std::int64_t t = 0; t < T; ++t)
                        for (std::int64_t j = 0; j < c; ++j)
                            dv[static_cast<std::size_t>(b * c + j)] +=
                                g[(b * T + t) * c + j] * xv[(b * T + t) * c + j];
                thread_mac_add(g.size());
                accumulate_adjoint(adj, vt.node(), dv);
            }
        },
        "mul_time_broadcast");
}

// ---- activations -----------------------------------------------------------

Tensor exp(const Tensor& a) {
    return elementwise_unary(
        a, "exp", [](real x) { return std::exp(x); }, [](real, real y) { return y; });
}

Tensor sigmoid(const Tensor& a) {
    return elementwise_unary(
        a, "sigmoid",
        [](real x) { return real(1) / (real(1) + std::exp(-x)); },
        [](real, real y) { return y * (real(1) - y); });
}

Tensor silu(const Tensor& a) {
    return elementwise_unary(
        a, "silu",
        [](real x) { return x / (real(1) + std::exp(-x)); },
        [](real x, real) {
            const real s = real(1) / (real(1) + std::exp(-x));
            return s * (real(1) + x * (real(1) - s));
        });
}

Tensor gelu(const Tensor& a) {
    return elementwise_unary(
        a, "gelu",
        [](real x) { return real(0.5) * x * (real(1) + std::erf(x * real(0.7071067811865476))); },
        [](real x, real) {
            const real phi = real(0.5) * (real(1) + std::erf(x * real(0.7071067811865476)));
            const real pdf = real(0.3989422804014327) * std::exp(real(-0.5) * x * x);
            return phi + x * pdf;
        });
}

Tensor softplus(const Tensor& a) {
    return elementwise_unary(
        a, "softplus",
        [](real x) { return x > real(30) ? x : std::log1p(std::exp(x)); },
        [](real x, real) { return real(1) / (real(1) + std::exp(-x)); });
}

// ---- softmax / layer norm ---------------------------------------------------

Tensor softmax_lastdim(const Tensor& a) {
    const std::int64_t d = a.dim(a.rank() - 1);
    const std::int64_t rows = rows_before_lastdim(a.shape());
    std::vector<real> out(static_cast<std::size_t>(a.numel()));
    auto x = a.data();
    for (std::int64_t r = 0; r < rows; ++r) {
        const real* row = x.data() + r * d;
        real* orow = out.data() + r * d;
        real mx = row[0];
        for (std::int64_t j = 1; j < d; ++j) mx = std::max(mx, row[j]);
        real sum = 0;
        for (std::int64_t j = 0; j < d; ++j) {
            orow[j] = std::exp(row[j] - mx);
            sum += orow[j];
        }
        const real inv = real(1) / sum;
        for (std::int64_t j = 0; j < d; ++j) orow[j] *= inv;
    }
    thread_mac_add(static_cast<std::uint64_t>(a.numel()));
    std::vector<real> y;
    if (will_record({&a})) y = out;
    Tensor at = a;
    return make_op_output(
        a.shape(), std::move(out), {a},
        [at, y, rows, d](const std::vector<real>& g, Adjoints& adj) {
            if (!at.requires_grad()) return;
            std::vector<real> da(g.size());
            for (std::int64_t r = 0; r < rows; ++r) {
                const real* yr = y.data() + r * d;
                const real* gr = g.data() + r * d;
                real dot = 0;
                for (std::int64_t j = 0; j < d; ++j) dot += yr[j] * gr[j];
                for (std::int64_t j = 0; j < d; ++j)
                    da[static_cast<std::size_t>(r * d + j)] = yr[j] * (gr[j] - dot);
            }
            thread_mac_add(2 * g.size());
            accumulate_adjoint(adj, at.node(), da);
        },
        "softmax_lastdim");
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta) {
    const std::int64_t d = x.dim(x.rank() - 1);
    check(gamma.rank() == 1 && gamma.dim(0) == d, "layer_norm", "gamma must be rank 1 of last dim");
    check(beta.rank() == 1 && beta.dim(0) == d, "layer_norm", "beta must be rank 1 of last dim");
    const std::int64_t rows = rows_before_lastdim(x.shape());
    std::vector<real> out(static_cast<std::size_t>(x.numel()));
    std::vector<real> xhat(static_cast<std::size_t>(x.numel()));
    std::vector<real> inv_std(static_cast<std::size_t>(rows));
    auto xv = x.data();
    auto gv = gamma.data();
    auto bv = beta.data();
    for (std::int64_t r = 0; r < rows; ++r) {
        const real* row = xv.data() + r * d;
        real mean = 0;
        for (std::int64_t j = 0; j < d; ++j) mean += row[j];
        mean /= real(d);
        real var = 0;
        for (std::int64_t j = 0; j < d; ++j) {
            const real c = row[j] - mean;
            var += c * c;
        }
        var /= real(d);
        const real is = real(1) / std::sqrt(var + real(kLayerNormEps));
        inv_std[static_cast<std::size_t>(r)] = is;
        for (std::int64_t j = 0; j < d; ++j) {
            const real h = (row[j] - mean) * is;
            xhat[static_cast<std::size_t>(r * d + j)] = h;
            out[static_cast<std::size_t>(r * d + j)] = h * gv[j] + bv[j];
        }
    }
    thread_mac_add(static_cast<std::uint64_t>(2 * x.numel()));
    const bool rec = will_record({&x, &gamma, &beta});
    if (!rec) {
        xhat.clear();
        xhat.shrink_to_fit();
        inv_std.clear();
        inv_std.shrink_to_fit();
    }
    Tensor xt = x, gt = gamma, bt = beta;
    return make_op_output(
        x.shape(), std::move(out), {x, gamma, beta},
        [xt, gt, bt, xhat = std::move(xhat), inv_std = std::move(inv_std), rows,
         d](const std::vector<real>& g, Adjoints& adj) {
            auto gv = gt.data();
            if (xt.requires_grad()) {
                std::vector<real> dx(g.size());
                for (std::int64_t r = 0; r < rows; ++r) {
                    const real* hr = xhat.data() + r * d;
                    const real* gr = g.data() + r * d;
                    real m1 = 0, m2 = 0;  // mean(gamma*g), mean(gamma*g*xhat)
                    for (std::int64_t j = 0; j < d; ++j) {
                        const real gg = gv[j] * gr[j];
                        m1 += gg;
                        m2 += gg * hr[j];
                    }
                    m1 /= real(d);
                    m2 /= real(d);
                    const real is = inv_std[static_cast<std::size_t>(r)];
                    for (std::int64_t j = 0; j < d; ++j) {
                        const real gg = gv[j] * gr[j];
                        dx[static_cast<std::size_t>(r * d + j)] = (gg - m1 - hr[j] * m2) * is;
                    }
                }
                thread_mac_add(3 * g.size());
                accumulate_adjoint(adj, xt.node(), dx);
            }
            if (gt.requires_grad()) {
                std::vector<real> dg(static_cast<std::size_t>(d), real(0));
                for (std::int64_t r = 0; r < rows; ++r)
                    for (std::int64_t j = 0; j < d; ++j)
                        dg[static_cast<std::size_t>(j)] += g[r * d + j] * xhat[r * d + j];
                thread_mac_add(g.size());
                accumulate_adjoint(adj, gt.node(), dg);
            }
            if (bt.requires_grad()) {
                std::vector<real> db(static_cast<std::size_t>(d), real(0));
                for (std::int64_t r = 0; r < rows; ++r)
                    for (std::int64_t j = 0; j < d; ++j) db[static_cast<std::size_t>(j)] += g[r * d + j];
                accumulate_adjoint(adj, bt.node(), db);
            }
        },
        "layer_norm");
}

// ---- shape ops --------------------------------------------------------------

Tensor concat_lastdim(const Tensor& a, const Tensor& b) {
    check(a.rank() == b.rank(), "concat_lastdim", "rank mismatch");
    for (int i = 0; i + 1 < a.rank(); ++i)
        check(a.dim(i) == b.dim(i), "concat_lastdim",
              "leading dims differ: " + shape_to_string(a.shape()) + " vs " +
                  shape_to_string(b.shape()));
    const std::int64_t da = a.dim(a.rank() - 1), db = b.dim(b.rank() - 1);
    const std::int64_t rows = rows_before_lastdim(a.shape());
    Shape out_shape = a.shape();
    out_shape.back() = da + db;
    std::vector<real> out(static_cast<std::size_t>(rows * (da + db)));
    auto xa = a.data(), xb = b.data();
    for (std::int64_t r = 0; r < rows; ++r) {
        std::copy(xa.data() + r * da, xa.data() + (r + 1) * da, out.data() + r * (da + db));
        std::copy(xb.data() + r * db, xb.data() + (r + 1) * db, out.data() + r * (da + db) + da);
    }
    Tensor at = a, bt = b;
    return make_op_output(
        std::move(out_shape), std::move(out), {a, b},
        [at, bt, rows, da, db](const std::vector<real>& g, Adjoints& adj) {
            if (at.requires_grad()) {
                std::vector<real> ga(static_cast<std::size_t>(rows * da));
                for (std::int64_t r = 0; r < rows; ++r)
                    std::copy(g.data() + r * (da + db), g.data() + r * (da + db) + da,
                              ga.data() + r * da);
                accumulate_adjoint(adj, at.node(), ga);
            }
            if (bt.requires_grad()) {
                std::vector<real> gb(static_cast<std::size_t>(rows * db));
                for (std::int64_t r = 0; r < rows; ++r)
                    std::copy(g.data() + r * (da + db) + da, g.data() + (r + 1) * (da + db),
                              gb.data() + r * db);
                accumulate_adjoint(adj, bt.node(), gb);
            }
        },
        "concat_lastdim");
}

Tensor mean_over_time(const Tensor& x) {
    check(x.rank() == 3, "mean_over_time", "expected (B,T,d), got " + shape_to_string(x.shape()));
    const std::int64_t B = x.dim(0), T = x.dim(1), d = x.dim(2);
    std::vector<real> out(static_cast<std::size_t>(B * d), real(0));
    auto xv = x.data();
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t t = 0; t < T; ++t)
            for (std::int64_t j = 0; j < d; ++j)
                out[static_cast<std::size_t>(b * d + j)] += xv[(b * T + t) * d + j];
    const real inv = real(1) / real(T);
    for (auto& v : out) v *= inv;
    thread_mac_add(static_cast<std::uint64_t>(x.numel()));
    Tensor xt = x;
    return make_op_output(
        Shape{B, d}, std::move(out), {x},
        [xt, B, T, d](const std::vector<real>& g, Adjoints& adj) {
            if (!xt.requires_grad()) return;
            std::vector<real> dx(static_cast<std::size_t>(B * T * d));
            const real inv = real(1) / real(T);
            for (std::int64_t b = 0; b < B; ++b)
                for (std::int64_t t = 0; t < T; ++t)
                    for (std::int64_t j = 0; j < d; ++j)
                        dx[static_cast<std::size_t>((b * T + t) * d + j)] = g[b * d + j] * inv;
            thread_mac_add(dx.size());
            accumulate_adjoint(adj, xt.node(), dx);
        },
        "mean_over_time");
}

Tensor repeat_over_time(const Tensor& s, std::int64_t t_steps) {
    check(s.rank() == 2, "repeat_over_time", "expected (B,d), got " + shape_to_string(s.shape()));
    check(t_steps >= 1, "repeat_over_time", "t must be >= 1");
    const std::int64_t B = s.dim(0), d = s.dim(1);
    std::vector<real> out(static_cast<std::size_t>(B * t_steps * d));
    auto sv = s.data();
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t t = 0; t < t_steps; ++t)
            std::copy(sv.data() + b * d, sv.data() + (b + 1) * d, out.data() + (b * t_steps + t) * d);
    Tensor st = s;
    return make_op_output(
        Shape{B, t_steps, d}, std::move(out), {s},
        [st, B, t_steps, d](const std::vector<real>& g, Adjoints& adj) {
            if (!st.requires_grad()) return;
            std::vector<real> ds(static_cast<std::size_t>(B * d), real(0));
            for (std::int64_t b = 0; b < B; ++b)
                for (std::int64_t t = 0; t < t_steps; ++t)
                    for (std::int64_t j = 0; j < d; ++j)
                        ds[static_cast<std::size_t>(b * d + j)] += g[(b * t_steps + t) * d + j];
            accumulate_adjoint(adj, st.node(), ds);
        },
        "repeat_over_time");
}

Tensor sum_all(const Tensor& x) {
    real total = 0;
    for (real v : x.data()) total += v;
    Tensor xt = x;
    return make_op_output(
        Shape{1}, {total}, {x},
        [xt](const std::vector<real>& g, Adjoints& adj) {
            if (!xt.requires_grad()) return;
            std::vector<real> dx(static_cast<std::size_t>(xt.numel()), g[0]);
            accumulate_adjoint(adj, xt.node(), dx);
        },
        "sum_all");
}

// ---- conv1d -----------------------------------------------------------------

Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& bias, std::int64_t stride,
              std::int64_t padding, std::int64_t groups) {
    check(x.rank() == 3, "conv1d", "input must be (B,T,C), got " + shape_to_string(x.shape()));
    check(w.rank() == 3, "conv1d", "weight must be (Cout,K,Cin/groups)");
    const std::int64_t B = x.dim(0), T = x.dim(1), cin = x.dim(2);
    const std::int64_t cout = w.dim(0), K = w.dim(1), wc = w.dim(2);
    check(groups == 1 || groups == cin, "conv1d", "groups must be 1 or Cin");
    check(stride >= 1, "conv1d", "stride must be >= 1");
    if (groups == 1) check(wc == cin, "conv1d", "weight channel dim must equal Cin");
    else {
        check(wc == 1 && cout == cin, "conv1d", "depthwise weight must be (C,K,1)");
    }
    check(bias.rank() == 1 && bias.dim(0) == cout, "conv1d", "bias must be (Cout)");
    const std::int64_t t_out = (T + 2 * padding - K) / stride + 1;
    check(t_out >= 1, "conv1d",
          "input too short: T=" + std::to_string(T) + " with kernel " + std::to_string(K) +
              " stride " + std::to_string(stride) + " needs T >= " +
              std::to_string(K - 2 * padding));

    std::vector<real> out(static_cast<std::size_t>(B * t_out * cout));
    auto xv = x.data(), wv = w.data(), bv = bias.data();
    for (std::int64_t b = 0; b < B; ++b) {
        for (std::int64_t to = 0; to < t_out; ++to) {
            real* orow = out.data() + (b * t_out + to) * cout;
            for (std::int64_t co = 0; co < cout; ++co) orow[co] = bv[co];
            const std::int64_t t0 = to * stride - padding;
            for (std::int64_t k = 0; k < K; ++k) {
                const std::int64_t t = t0 + k;
                if (t < 0 || t >= T) continue;
                const real* xrow = xv.data() + (b * T + t) * cin;
                if (groups == 1) {
                    for (std::int64_t co = 0; co < cout; ++co) {
                        const real* wrow = wv.data() + (co * K + k) * cin;
                        real acc = 0;
                        for (std::int64_t ci = 0; ci < cin; ++ci) acc += xrow[ci] * wrow[ci];
                        orow[co] += acc;
                    }
                } else {
                    for (std::int64_t c = 0; c < cin; ++c) orow[c] += xrow[c] * wv[c * K + k];
                }
            }
        }
    }
    const std::uint64_t macs =
        static_cast<std::uint64_t>(B * t_out * K) * static_cast<std::uint64_t>(groups == 1 ? cout * cin : cin);
    thread_mac_add(macs);

    Tensor xt = x, wt = w, bt = bias;
    return make_op_output(
        Shape{B, t_out, cout}, std::move(out), {x, w, bias},
        [xt, wt, bt, B, T, cin, cout, K, stride, padding, groups, t_out, macs](
            const std::vector<real>& g, Adjoints& adj) {
            auto xv = xt.data();
            auto wv = wt.data();
            std::vector<real> dx, dw, db;
            const bool need_dx = xt.requires_grad();
            const bool need_dw = wt.requires_grad();
            const bool need_db = bt.requires_grad();
            if (need_dx) dx.assign(static_cast<std::size_t>(B * T * cin), real(0));
            if (need_dw) dw.assign(static_cast<std::size_t>(wt.numel()), real(0));
            if (need_db) db.assign(static_cast<std::size_t>(cout), real(0));
            for (std::int64_t b = 0; b < B; ++b) {
                for (std::int64_t to = 0; to < t_out; ++to) {
                    const real* grow = g.data() + (b * t_out + to) * cout;
                    if (need_db)
                        for (std::int64_t co = 0; co < cout; ++co) db[static_cast<std::size_t>(co)] += grow[co];
                    const std::int64_t t0 = to * stride - padding;
                    for (std::int64_t k = 0; k < K; ++k) {
                        const std::int64_t t = t0 + k;
                        if (t < 0 || t >= T) continue;
                        const real* xrow = xv.data() + (b * T + t) * cin;
                        if (groups == 1) {
                            for (std::int64_t co = 0; co < cout; ++co) {
                                const real gv = grow[co];
                                if (gv == real(0)) continue;
                                const real* wrow = wv.data() + (co * K + k) * cin;
                                if (need_dx) {
                                    real* dxrow = dx.data() + (b * T + t) * cin;
                                    for (std::int64_t ci = 0; ci < cin; ++ci) dxrow[ci] += gv * wrow[ci];
                                }
                                if (need_dw) {
                                    real* dwrow = dw.data() + (co * K + k) * cin;
                                    for (std::int64_t ci = 0; ci < cin; ++ci) dwrow[ci] += gv * xrow[ci];
                                }
                            }
                        } else {
                            for (std::int64_t c = 0; c < cin; ++c) {
                                const real gv = grow[c];
                                if (need_dx) dx[static_cast<std::size_t>((b * T + t) * cin + c)] += gv * wv[c * K + k];
                                if (need_dw) dw[static_cast<std::size_t>(c * K + k)] += gv * xrow[c];
                            }
                        }
                    }
                }
            }
            thread_mac_add(2 * macs);
            if (need_dx) accumulate_adjoint(adj, xt.node(), dx);
            if (need_dw) accumulate_adjoint(adj, wt.node(), dw);
            if (need_db) accumulate_adjoint(adj, bt.node(), db);
        },
        "conv1d");
}

// ---- lookup / slicing -------------------------------------------------------

Tensor embedding_lookup(const Tensor& table, const std::vector<std::int64_t>& ids,
                        const Shape& id_shape) {
    check(table.rank() == 2, "embedding_lookup", "table must be (V,d)");
    check(shape_numel(id_shape) == static_cast<std::int64_t>(ids.size()), "embedding_lookup",
          "id_shape does not match id count");
    const std::int64_t V = table.dim(0), d = table.dim(1);
    for (auto id : ids)
        check(id >= 0 && id < V, "embedding_lookup",
              "index " + std::to_string(id) + " out of range [0," + std::to_string(V) + ")");
    Shape out_shape = id_shape;
    out_shape.push_back(d);
    std::vector<real> out(ids.size() * static_cast<std::size_t>(d));
    auto tv = table.data();
    for (std::size_t i = 0; i < ids.size(); ++i)
        std::copy(tv.data() + ids[i] * d, tv.data() + (ids[i] + 1) * d, out.data() + i * d);
    Tensor tt = table;
    return make_op_output(
        std::move(out_shape), std::move(out), {table},
        [tt, ids, d](const std::vector<real>& g, Adjoints& adj) {
            if (!tt.requires_grad()) return;
            std::vector<real> dt(static_cast<std::size_t>(tt.numel()), real(0));
            for (std::size_t i = 0; i < ids.size(); ++i)
                for (std::int64_t j = 0; j < d; ++j) dt[static_cast<std::size_t>(ids[i] * d + j)] += g[i * d + j];
            accumulate_adjoint(adj, tt.node(), dt);
        },
        "embedding_lookup");
}

Tensor reshape(const Tensor& x, Shape new_shape) {
    check(shape_numel(new_shape) == x.numel(), "reshape",
          "cannot reshape " + shape_to_string(x.shape()) + " to " + shape_to_string(new_shape));
    std::vector<real> out(x.data().begin(), x.data().end());
    Tensor xt = x;
    return make_op_output(
        std::move(new_shape), std::move(out), {x},
        [xt](const std::vector<real>& g, Adjoints& adj) {
            if (!xt.requires_grad()) return;
            accumulate_adjoint(adj, xt.node(), g);
        },
        "reshape");
}

Tensor slice_lastdim(const Tensor& x, std::int64_t c0, std::int64_t c1) {
    const std::int64_t d = x.dim(x.rank() - 1);
    check(0 <= c0 && c0 < c1 && c1 <= d, "slice_lastdim",
          "range [" + std::to_string(c0) + "," + std::to_string(c1) + ") out of d=" + std::to_string(d));
    const std::int64_t rows = rows_before_lastdim(x.shape());
    const std::int64_t ds = c1 - c0;
    Shape out_shape = x.shape();
    out_shape.back() = ds;
    std::vector<real> out(static_cast<std::size_t>(rows * ds));
    auto xv = x.data();
    for (std::int64_t r = 0; r < rows; ++r)
        std::copy(xv.data() + r * d + c0, xv.data() + r * d + c1, out.data() + r * ds);
    Tensor xt = x;
    return make_op_output(
        std::move(out_shape), std::move(out), {x},
        [xt, rows, d, c0, ds](const std::vector<real>& g, Adjoints& adj) {
            if (!xt.requires_grad()) return;
            std::vector<real> dx(static_cast<std::size_t>(rows * d), real(0));
            for (std::int64_t r = 0; r < rows; ++r)
                std::copy(g.data() + r * ds, g.data() + (r + 1) * ds, dx.data() + r * d + c0);
            accumulate_adjoint(adj, xt.node(), dx);
        },
        "slice_lastdim");
}

Tensor slice_time(const Tensor& x, std::int64_t t0, std::int64_t t1) {
    check(x.rank() == 3, "slice_time", "expected (B,T,d)");
    const std::int64_t B = x.dim(0), T = x.dim(1), d = x.dim(2);
    check(0 <= t0 && t0 < t1 && t1 <= T, "slice_time",
          "range [" + std::to_string(t0) + "," + std::to_string(t1) + ") out of T=" + std::to_string(T));
    const std::int64_t Ts = t1 - t0;
    std::vector<real> out(static_cast<std::size_t>(B * Ts * d));
    auto xv = x.data();
    for (std::int64_t b = 0; b < B; ++b)
        std::copy(xv.data() + (b * T + t0) * d, xv.data() + (b * T + t1) * d, out.data() + b * Ts * d);
    Tensor xt = x;
    return make_op_output(
        Shape{B, Ts, d}, std::move(out), {x},
        [xt, B, T, d, t0, Ts](const std::vector<real>& g, Adjoints& adj) {
            if (!xt.requires_grad()) return;
            std::vector<real> dx(static_cast<std::size_t>(B * T * d), real(0));
            for (std::int64_t b = 0; b < B; ++b)
                std::copy(g.data() + b * Ts * d, g.data() + (b + 1) * Ts * d,
                          dx.data() + (b * T + t0) * d);
            accumulate_adjoint(adj, xt.node(), dx);
        },
        "slice_time");
}

Tensor reverse_time(const Tensor& x) {
    check(x.rank() == 3, "reverse_time", "expected (B,T,d)");
    const std::int64_t B = x.dim(0), T = x.dim(1), d = x.dim(2);
    std::vector<real> out(static_cast<std::size_t>(x.numel()));
    auto xv = x.data();
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t t = 0; t < T; ++t)
            std::copy(xv.data() + (b * T + t) * d, xv.data() + (b * T + t + 1) * d,
                      out.data() + (b * T + (T - 1 - t)) * d);
    Tensor xt = x;
    return make_op_output(
        x.shape(), std::move(out), {x},
        [xt, B, T, d](const std::vector<real>& g, Adjoints& adj) {
            if (!xt.requires_grad()) return;
            std::vector<real> dx(g.size());
            for (std::int64_t b = 0; b < B; ++b)
                for (std::int64_t t = 0; t < T; ++t)
                    std::copy(g.data() + (b * T + t) * d, g.data() + (b * T + t + 1) * d,
                              dx.data() + (b * T + (T - 1 - t)) * d);
            accumulate_adjoint(adj, xt.node(), dx);
        },
        "reverse_time");
}

Tensor slice_batch(const Tensor& x, std::int64_t b) {
    check(x.rank() == 3, "slice_batch", "expected (B,T,d)");
    const std::int64_t B = x.dim(0), T = x.dim(1), d = x.dim(2);
    check(0 <= b && b < B, "slice_batch", "batch index " + std::to_string(b) + " out of range");
    std::vector<real> out(static_cast<std::size_t>(T * d));
    auto xv = x.data();
    std::copy(xv.data() + b * T * d, xv.data() + (b + 1) * T * d, out.data());
    Tensor xt = x;
    return make_op_output(
        Shape{T, d}, std::move(out), {x},
        [xt, B, T, d, b](const std::vector<real>& g, Adjoints& adj) {
            if (!xt.requires_grad()) return;
            std::vector<real> dx(static_cast<std::size_t>(B * T * d), real(0));
            std::copy(g.begin(), g.end(), dx.begin() + b * T * d);
            accumulate_adjoint(adj, xt.node(), dx);
        },
        "slice_batch");
}

Tensor stack_batch(const std::vector<Tensor>& items) {
    check(!items.empty(), "stack_batch", "no items");
    const Shape& s0 = items[0].shape();
    check(s0.size() == 2, "stack_batch", "items must be rank 2");
    for (const auto& t : items)
        check(t.shape() == s0, "stack_batch", "all items must share a shape");
    const std::int64_t B = static_cast<std::int64_t>(items.size());
    const std::int64_t T = s0[0], d = s0[1];
    std::vector<real> out(static_cast<std::size_t>(B * T * d));
    for (std::int64_t b = 0; b < B; ++b)
        std::copy(items[static_cast<std::size_t>(b)].data().begin(),
                  items[static_cast<std::size_t>(b)].data().end(), out.begin() + b * T * d);
    std::vector<Tensor> saved = items;
    return make_op_output(
        Shape{B, T, d}, std::move(out), items,
        [saved, T, d](const std::vector<real>& g, Adjoints& adj) {
            for (std::size_t b = 0; b < saved.size(); ++b) {
                if (!saved[b].requires_grad()) continue;
                std::vector<real> gi(g.begin() + static_cast<std::int64_t>(b) * T * d,
                                     g.begin() + static_cast<std::int64_t>(b + 1) * T * d);
                accumulate_adjoint(adj, saved[b].node(), gi);
            }
        },
        "stack_batch");
}

// ---- head split/merge -------------------------------------------------------

Tensor split_heads(const Tensor& x, std::int64_t heads) {
    check(x.rank() == 2, "split_heads", "expected (T,d)");
    const std::int64_t T = x.dim(0), d = x.dim(1);
    check(heads >= 1 && d % heads == 0, "split_heads",
          "d=" + std::to_string(d) + " not divisible by heads=" + std::to_string(heads));
    const std::int64_t dh = d / heads;
    std::vector<real> out(static_cast<std::size_t>(T * d));
    auto xv = x.data();
    for (std::int64_t h = 0; h < heads; ++h)
        for (std::int64_t t = 0; t < T; ++t)
            std::copy(xv.data() + t * d + h * dh, xv.data() + t * d + (h + 1) * dh,
                      out.data() + (h * T + t) * dh);
    Tensor xt = x;
    return make_op_output(
        Shape{heads, T, dh}, std::move(out), {x},
        [xt, heads, T, dh, d](const std::vector<real>& g, Adjoints& adj) {
            if (!xt.requires_grad()) return;
            std::vector<real> dx(static_cast<std::size_t>(T * d));
            for (std::int64_t h = 0; h < heads; ++h)
                for (std::int64_t t = 0; t < T; ++t)
                    std::copy(g.data() + (h * T + t) * dh, g.data() + (h * T + t + 1) * dh,
                              dx.data() + t * d + h * dh);
            accumulate_adjoint(adj, xt.node(), dx);
        },
        "split_heads");
}

Tensor merge_heads(const Tensor& x) {
    check(x.rank() == 3, "merge_heads", "expected (H,T,dh)");
    const std::int64_t H = x.dim(0), T = x.dim(1), dh = x.dim(2);
    const std::int64_t d = H * dh;
    std::vector<real> out(static_cast<std::size_t>(T * d));
    auto xv = x.data();
    for (std::int64_t h = 0; h < H; ++h)
        for (std::int64_t t = 0; t < T; ++t)
            std::copy(xv.data() + (h * T + t) * dh, xv.data() + (h * T + t + 1) * dh,
                      out.data() + t * d + h * dh);
    Tensor xt = x;
    return make_op_output(
        Shape{T, d}, std::move(out), {x},
        [xt, H, T, dh, d](const std::vector<real>& g, Adjoints& adj) {
            if (!xt.requires_grad()) return;
            std::vector<real> dx(static_cast<std::size_t>(H * T * dh));
            for (std::int64_t h = 0; h < H; ++h)
                for (std::int64_t t = 0; t < T; ++t)
                    std::copy(g.data() + t * d + h * dh, g.data() + t * d + (h + 1) * dh,
                              dx.data() + (h * T + t) * dh);
            accumulate_adjoint(adj, xt.node(), dx);
        },
        "merge_heads");
}

// ---- linear scan -------------------------------------------------------------

Tensor linear_scan(const Tensor& a, const Tensor& b) {
    check(a.rank() == 3 && b.rank() == 3, "linear_scan", "expected (B,T,K)");
    check(a.shape() == b.shape(), "linear_scan",
          "shape mismatch " + shape_to_string(a.shape()) + " vs " + shape_to_string(b.shape()));
    const std::int64_t B = a.dim(0), T = a.dim(1), K = a.dim(2);

    // Blocked associative scan: compose affine-map prefixes inside fixed-size
    // blocks, chain block summaries, then apply each block's entry state.
    // This is a different evaluation order from the sequential recurrence,
    // which serves as the independent oracle.
    constexpr std::int64_t kBlock = 64;
    std::vector<real> pa(static_cast<std::size_t>(a.numel()));  // prefix A within block
    std::vector<real> h(static_cast<std::size_t>(a.numel()));   // prefix B within block -> output
    auto av = a.data();
    auto bv = b.data();
    std::uint64_t macs = 0;
    for (std::int64_t bi = 0; bi < B; ++bi) {
        const real* ab = av.data() + bi * T * K;
        const real* bb = bv.data() + bi * T * K;
        real* pab = pa.data() + bi * T * K;
        real* hb = h.data() + bi * T * K;
        for (std::int64_t t0 = 0; t0 < T; t0 += kBlock) {
            const std::int64_t t1 = std::min(T, t0 + kBlock);
            std::copy(ab + t0 * K, ab + (t0 + 1) * K, pab + t0 * K);
            std::copy(bb + t0 * K, bb + (t0 + 1) * K, hb + t0 * K);
            for (std::int64_t t = t0 + 1; t < t1; ++t) {
                const real* at_ = ab + t * K;
                const real* bt_ = bb + t * K;
                const real* ppa = pab + (t - 1) * K;
                const real* ph = hb + (t - 1) * K;
                real* cpa = pab + t * K;
                real* ch = hb + t * K;
                for (std::int64_t c = 0; c < K; ++c) {
                    cpa[c] = at_[c] * ppa[c];
                    ch[c] = at_[c] * ph[c] + bt_[c];
                }
                macs += static_cast<std::uint64_t>(2 * K);
            }
        }
        // chain the block carries: entry state of block i is the final h of
        // block i-1; h_t = prefixA_t * entry + prefixB_t
        for (std::int64_t t0 = kBlock; t0 < T; t0 += kBlock) {
            const std::int64_t t1 = std::min(T, t0 + kBlock);
            const real* entry = hb + (t0 - 1) * K;
            for (std::int64_t t = t0; t < t1; ++t) {
                real* ch = hb + t * K;
                const real* cpa = pab + t * K;
                for (std::int64_t c = 0; c < K; ++c) ch[c] += cpa[c] * entry[c];
                macs += static_cast<std::uint64_t>(K);
            }
        }
    }
    thread_mac_add(macs);

    std::vector<real> h_saved;
    if (will_record({&a, &b})) h_saved = h;
    Tensor at = a, bt = b;
    return make_op_output(
        a.shape(), std::move(h), {a, b},
        [at, bt, h_saved = std::move(h_saved), B, T, K](const std::vector<real>& g, Adjoints& adj) {
            // adjoint of h_t = a_t h_{t-1} + b_t via the reverse-time
            // recurrence lambda_t = g_t + a_{t+1} lambda_{t+1}
            auto av = at.data();
            std::vector<real> da(static_cast<std::size_t>(at.numel()), real(0));
            std::vector<real> db(static_cast<std::size_t>(bt.numel()), real(0));
            std::vector<real> lam(static_cast<std::size_t>(K));
            for (std::int64_t bi = 0; bi < B; ++bi) {
                const real* ab = av.data() + bi * T * K;
                const real* hb = h_saved.data() + bi * T * K;
                const real* gb = g.data() + bi * T * K;
                real* dab = da.data() + bi * T * K;
                real* dbb = db.data() + bi * T * K;
                std::fill(lam.begin(), lam.end(), real(0));
                for (std::int64_t t = T - 1; t >= 0; --t) {
                    for (std::int64_t c = 0; c < K; ++c) {
                        lam[static_cast<std::size_t>(c)] =
                            gb[t * K + c] + (t + 1 < T ? ab[(t + 1) * K + c] * lam[static_cast<std::size_t>(c)]
                                                       : real(0));
                        dbb[t * K + c] = lam[static_cast<std::size_t>(c)];
                        dab[t * K + c] = (t > 0) ? lam[static_cast<std::size_t>(c)] * hb[(t - 1) * K + c]
                                                 : real(0);
                    }
                }
            }
            thread_mac_add(static_cast<std::uint64_t>(2 * at.numel()));
            if (at.requires_grad()) accumulate_adjoint(adj, at.node(), da);
            if (bt.requires_grad()) accumulate_adjoint(adj, bt.node(), db);
        },
        "linear_scan");
}

// ---- ssm helpers --------------------------------------------------------------

Tensor ssm_discretize(const Tensor& delta, const Tensor& a_diag) {
    check(delta.rank() == 3, "ssm_discretize", "delta must be (B,T,H)");
    check(a_diag.rank() == 2, "ssm_discretize", "A must be (H,N)");
    const std::int64_t B = delta.dim(0), T = delta.dim(1), H = delta.dim(2);
    check(a_diag.dim(0) == H, "ssm_discretize", "A rows must equal H");
    const std::int64_t N = a_diag.dim(1);
    auto dv = delta.data();
    for (std::int64_t i = 0; i < delta.numel(); ++i) {
        if (!std::isfinite(dv[static_cast<std::size_t>(i)])) {
            const std::int64_t t = (i / H) % T;
            throw NumericError("ssm_discretize: non-finite delta at step t=" + std::to_string(t));
        }
    }
    std::vector<real> out(static_cast<std::size_t>(B * T * H * N));
    auto avv = a_diag.data();
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t t = 0; t < T; ++t)
            for (std::int64_t hh = 0; hh < H; ++hh) {
                const real d = dv[(b * T + t) * H + hh];
                real* orow = out.data() + ((b * T + t) * H + hh) * N;
                const real* arow = avv.data() + hh * N;
                for (std::int64_t n = 0; n < N; ++n) orow[n] = std::exp(d * arow[n]);
            }
    thread_mac_add(static_cast<std::uint64_t>(B * T * H * N));
    std::vector<real> saved;
    if (will_record({&delta, &a_diag})) saved = out;
    Tensor dt = delta, at = a_diag;
    return make_op_output(
        Shape{B, T, H * N}, std::move(out), {delta, a_diag},
        [dt, at, saved = std::move(saved), B, T, H, N](const std::vector<real>& g, Adjoints& adj) {
            auto dv = dt.data();
            auto avv = at.data();
            if (dt.requires_grad()) {
                std::vector<real> dd(static_cast<std::size_t>(B * T * H), real(0));
                for (std::int64_t b = 0; b < B; ++b)
                    for (std::int64_t t = 0; t < T; ++t)
                        for (std::int64_t hh = 0; hh < H; ++hh) {
                            real acc = 0;
                            const std::size_t base = static_cast<std::size_t>(((b * T + t) * H + hh) * N);
                            for (std::int64_t n = 0; n < N; ++n)
                                acc += g[base + n] * saved[base + n] * avv[hh * N + n];
                            dd[static_cast<std::size_t>((b * T + t) * H + hh)] = acc;
                        }
                thread_mac_add(static_cast<std::uint64_t>(2 * B * T * H * N));
                accumulate_adjoint(adj, dt.node(), dd);
            }
            if (at.requires_grad()) {
                std::vector<real> da(static_cast<std::size_t>(H * N), real(0));
                for (std::int64_t b = 0; b < B; ++b)
                    for (std::int64_t t = 0; t < T; ++t)
                        for (std::int64_t hh = 0; hh < H; ++hh) {
                            const real d = dv[(b * T + t) * H + hh];
                            const std::size_t base = static_cast<std::size_t>(((b * T + t) * H + hh) * N);
                            for (std::int64_t n = 0; n < N; ++n)
                                da[static_cast<std::size_t>(hh * N + n)] += g[base + n] * saved[base + n] * d;
                        }
                thread_mac_add(static_cast<std::uint64_t>(2 * B * T * H * N));
                accumulate_adjoint(adj, at.node(), da);
            }
        },
        "ssm_discretize");
}

Tensor ssm_input(const Tensor& delta, const Tensor& b_proj, const Tensor& u) {
    check(delta.rank() == 3 && b_proj.rank() == 3 && u.rank() == 3, "ssm_input",
          "expected delta (B,T,H), b (B,T,N), u (B,T,H)");
    const std::int64_t B = delta.dim(0), T = delta.dim(1), H = delta.dim(2);
    const std::int64_t N = b_proj.dim(2);
    check(u.shape() == delta.shape(), "ssm_input", "u must match delta shape");
    check(b_proj.dim(0) == B && b_proj.dim(1) == T, "ssm_input", "b batch/time mismatch");
    std::vector<real> out(static_cast<std::size_t>(B * T * H * N));
    auto dv = delta.data();
    auto bvv = b_proj.data();
    auto uv = u.data();
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t t = 0; t < T; ++t) {
            const real* brow = bvv.data() + (b * T + t) * N;
            for (std::int64_t hh = 0; hh < H; ++hh) {
                const real du = dv[(b * T + t) * H + hh] * uv[(b * T + t) * H + hh];
                real* orow = out.data() + ((b * T + t) * H + hh) * N;
                for (std::int64_t n = 0; n < N; ++n) orow[n] = du * brow[n];
            }
        }
    thread_mac_add(static_cast<std::uint64_t>(B * T * H * (N + 1)));
    Tensor dt = delta, bt = b_proj, ut = u;
    return make_op_output(
        Shape{B, T, H * N}, std::move(out), {delta, b_proj, u},
        [dt, bt, ut, B, T, H, N](const std::vector<real>& g, Adjoints& adj) {
            auto dv = dt.data();
            auto bvv = bt.data();
            auto uv = ut.data();
            std::vector<real> dd, db, du;
            if (dt.requires_grad()) dd.assign(static_cast<std::size_t>(B * T * H), real(0));
            if (bt.requires_grad()) db.assign(static_cast<std::size_t>(B * T * N), real(0));
            if (ut.requires_grad()) du.assign(static_cast<std::size_t>(B * T * H), real(0));
            for (std::int64_t b = 0; b < B; ++b)
                for (std::int64_t t = 0; t < T; ++t) {
                    const real* brow = bvv.data() + (b * T + t) * N;
                    for (std::int64_t hh = 0; hh < H; ++hh) {
                        const std::size_t base = static_cast<std::size_t>(((b * T + t) * H + hh) * N);
                        const real dval = dv[(b * T + t) * H + hh];
                        const real uval = uv[(b * T + t) * H + hh];
                        real acc_gb = 0;
                        for (std::int64_t n = 0; n < N; ++n) {
                            const real gv = g[base + n];
                            acc_gb += gv * brow[n];
                            if (!db.empty())
                                db[static_cast<std::size_t>((b * T + t) * N + n)] += gv * dval * uval;
                        }
                        if (!dd.empty()) dd[static_cast<std::size_t>((b * T + t) * H + hh)] = acc_gb * uval;
                        if (!du.empty()) du[static_cast<std::size_t>((b * T + t) * H + hh)] = acc_gb * dval;
                    }
                }
            thread_mac_add(static_cast<std::uint64_t>(3 * B * T * H * N));
            if (!dd.empty()) accumulate_adjoint(adj, dt.node(), dd);
            if (!db.empty()) accumulate_adjoint(adj, bt.node(), db);
            if (!du.empty()) accumulate_adjoint(adj, ut.node(), du);
        },
        "ssm_input");
}

Tensor ssm_output(const Tensor& h, const Tensor& c_proj) {
    check(h.rank() == 3 && c_proj.rank() == 3, "ssm_output", "expected h (B,T,H*N), c (B,T,N)");
    const std::int64_t B = h.dim(0), T = h.dim(1);
    const std::int64_t N = c_proj.dim(2);
    check(h.dim(2) % N == 0, "ssm_output", "h channels must be a multiple of N");
    const std::int64_t H = h.dim(2) / N;
    check(c_proj.dim(0) == B && c_proj.dim(1) == T, "ssm_output", "c batch/time mismatch");
    std::vector<real> out(static_cast<std::size_t>(B * T * H), real(0));
    auto hv = h.data();
    auto cv = c_proj.data();
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t t = 0; t < T; ++t) {
            const real* crow = cv.data() + (b * T + t) * N;
            for (std::int64_t hh = 0; hh < H; ++hh) {
                const real* hrow = hv.data() + ((b * T + t) * H + hh) * N;
                real acc = 0;
                for (std::int64_t n = 0; n < N; ++n) acc += hrow[n] * crow[n];
                out[static_cast<std::size_t>((b * T + t) * H + hh)] = acc;
            }
        }
    thread_mac_add(static_cast<std::uint64_t>(B * T * H * N));
    Tensor ht = h, ct = c_proj;
    return make_op_output(
        Shape{B, T, H}, std::move(out), {h, c_proj},
        [ht, ct, B, T, H, N](const std::vector<real>& g, Adjoints& adj) {
            auto hv = ht.data();
            auto cv = ct.data();
            if (ht.requires_grad()) {
                std::vector<real> dh(static_cast<std::size_t>(B * T * H * N));
                for (std::int64_t b = 0; b < B; ++b)
                    for (std::int64_t t = 0; t < T; ++t) {
                        const real* crow = cv.data() + (b * T + t) * N;
                        for (std::int64_t hh = 0; hh < H; ++hh) {
                            const real gv = g[static_cast<std::size_t>((b * T + t) * H + hh)];
                            real* drow = dh.data() + ((b * T + t) * H + hh) * N;
                            for (std::int64_t n = 0; n < N; ++n) drow[n] = gv * crow[n];
                        }
                    }
                thread_mac_add(static_cast<std::uint64_t>(B * T * H * N));
                accumulate_adjoint(adj, ht.node(), dh);
            }
            if (ct.requires_grad()) {
                std::vector<real> dc(static_cast<std::size_t>(B * T * N), real(0));
                for (std::int64_t b = 0; b < B; ++b)
                    for (std::int64_t t = 0; t < T; ++t)
                        for (std::int64_t hh = 0; hh < H; ++hh) {
                            const real gv = g[static_cast<std::size_t>((b * T + t) * H + hh)];
                            const real* hrow = hv.data() + ((b * T + t) * H + hh) * N;
                            for (std::int64_t n = 0; n < N; ++n)
                                dc[static_cast<std::size_t>((b * T + t) * N + n)] += gv * hrow[n];
                        }
                thread_mac_add(static_cast<std::uint64_t>(B * T * H * N));
                accumulate_adjoint(adj, ct.node(), dc);
            }
        },
        "ssm_output");
}

Tensor ssm_scan(const Tensor& delta, const Tensor& a_diag, const Tensor& b_proj, const Tensor& u,
                const Tensor& c_proj) {
    check(delta.rank() == 3 && b_proj.rank() == 3 && u.rank() == 3 && c_proj.rank() == 3,
          "ssm_scan", "delta/b/u/c must be rank 3");
    check(a_diag.rank() == 2, "ssm_scan", "A must be (H,N)");
    const std::int64_t B = delta.dim(0), T = delta.dim(1), H = delta.dim(2);
    const std::int64_t N = a_diag.dim(1);
    check(a_diag.dim(0) == H, "ssm_scan", "A rows must equal H");
    check(u.shape() == delta.shape(), "ssm_scan", "u must match delta shape");
    check(b_proj.dim(0) == B && b_proj.dim(1) == T && b_proj.dim(2) == N, "ssm_scan",
          "b shape mismatch");
    check(c_proj.dim(0) == B && c_proj.dim(1) == T && c_proj.dim(2) == N, "ssm_scan",
          "c shape mismatch");

    auto dv = delta.data();
    for (std::int64_t i = 0; i < delta.numel(); ++i) {
        if (!std::isfinite(dv[static_cast<std::size_t>(i)])) {
            const std::int64_t t = (i / H) % T;
            throw NumericError("ssm_scan: non-finite delta at step t=" + std::to_string(t));
        }
    }

    const std::int64_t K = H * N;
    const bool rec = will_record({&delta, &a_diag, &b_proj, &u, &c_proj});
    auto av = a_diag.data();
    auto bv = b_proj.data();
    auto uv = u.data();
    auto cv = c_proj.data();

    constexpr std::int64_t kBlock = 64;
    std::vector<real> y(static_cast<std::size_t>(B * T * H), real(0));
    std::vector<real> h_saved;  // states for the backward sweep
    if (rec) h_saved.resize(static_cast<std::size_t>(B * T * K));
    std::vector<real> pa(static_cast<std::size_t>(kBlock * K));
    std::vector<real> ph(static_cast<std::size_t>(kBlock * K));
    std::vector<real> carry(static_cast<std::size_t>(K));

    for (std::int64_t b = 0; b < B; ++b) {
        std::fill(carry.begin(), carry.end(), real(0));
        for (std::int64_t t0 = 0; t0 < T; t0 += kBlock) {
            const std::int64_t t1 = std::min(T, t0 + kBlock);
            // within-block prefix composition of the per-step affine maps
            for (std::int64_t t = t0; t < t1; ++t) {
                const std::int64_t j = t - t0;
                const real* brow = bv.data() + (b * T + t) * N;
                real* parow = pa.data() + j * K;
                real* phrow = ph.data() + j * K;
                const real* prev_pa = (j > 0) ? parow - K : nullptr;
                const real* prev_ph = (j > 0) ? phrow - K : nullptr;
                for (std::int64_t hh = 0; hh < H; ++hh) {
                    const real d = dv[(b * T + t) * H + hh];
                    const real du = d * uv[(b * T + t) * H + hh];
                    const real* arow = av.data() + hh * N;
                    for (std::int64_t n = 0; n < N; ++n) {
                        const std::int64_t c = hh * N + n;
                        const real a_t = std::exp(d * arow[n]);
                        const real b_t = du * brow[n];
                        if (j == 0) {
                            parow[c] = a_t;
                            phrow[c] = b_t;
                        } else {
                            parow[c] = a_t * prev_pa[c];
                            phrow[c] = a_t * prev_ph[c] + b_t;
                        }
                    }
                }
            }
            // apply the block entry state, emit outputs, refresh the carry
            for (std::int64_t t = t0; t < t1; ++t) {
                const std::int64_t j = t - t0;
                const real* parow = pa.data() + j * K;
                real* phrow = ph.data() + j * K;
                const real* crow = cv.data() + (b * T + t) * N;
                real* yrow = y.data() + (b * T + t) * H;
                for (std::int64_t hh = 0; hh < H; ++hh) {
                    real acc = 0;
                    for (std::int64_t n = 0; n < N; ++n) {
                        const std::int64_t c = hh * N + n;
                        const real state = phrow[c] + parow[c] * carry[static_cast<std::size_t>(c)];
                        phrow[c] = state;
                        acc += crow[n] * state;
                    }
                    yrow[hh] = acc;
                }
                if (rec)
                    std::copy(phrow, phrow + K, h_saved.data() + (b * T + t) * K);
            }
            std::copy(ph.data() + (t1 - 1 - t0) * K, ph.data() + (t1 - t0) * K, carry.data());
        }
    }
    // per element: discretize exp + input product (2) + compose (2) + carry
    // application (1) + output contraction (1)
    thread_mac_add(static_cast<std::uint64_t>(B * T * K) * 6);

    Tensor dt = delta, at = a_diag, bt = b_proj, ut = u, ct = c_proj;
    return make_op_output(
        Shape{B, T, H}, std::move(y), {delta, a_diag, b_proj, u, c_proj},
        [dt, at, bt, ut, ct, h_saved = std::move(h_saved), B, T, H,
         N](const std::vector<real>& g, Adjoints& adj) {
            const std::int64_t K = H * N;
            auto dv = dt.data();
            auto av = at.data();
            auto bv = bt.data();
            auto uv = ut.data();
            auto cv = ct.data();
            std::vector<real> ddelta(static_cast<std::size_t>(B * T * H), real(0));
            std::vector<real> da(static_cast<std::size_t>(H * N), real(0));
            std::vector<real> db(static_cast<std::size_t>(B * T * N), real(0));
            std::vector<real> du(static_cast<std::size_t>(B * T * H), real(0));
            std::vector<real> dc(static_cast<std::size_t>(B * T * N), real(0));
            std::vector<real> lam(static_cast<std::size_t>(K));
            for (std::int64_t b = 0; b < B; ++b) {
                std::fill(lam.begin(), lam.end(), real(0));
                for (std::int64_t t = T - 1; t >= 0; --t) {
                    const real* brow = bv.data() + (b * T + t) * N;
                    const real* crow = cv.data() + (b * T + t) * N;
                    const real* grow = g.data() + (b * T + t) * H;
                    const real* hrow = h_saved.data() + (b * T + t) * K;
                    const real* hprev = (t > 0) ? h_saved.data() + (b * T + t - 1) * K : nullptr;
                    for (std::int64_t hh = 0; hh < H; ++hh) {
                        const real d = dv[(b * T + t) * H + hh];
                        const real uval = uv[(b * T + t) * H + hh];
                        const real gy = grow[hh];
                        const real* arow = av.data() + hh * N;
                        real acc_ddelta = 0, acc_du = 0;
                        for (std::int64_t n = 0; n < N; ++n) {
                            const std::int64_t c = hh * N + n;
                            dc[static_cast<std::size_t>((b * T + t) * N + n)] += gy * hrow[c];
                            // gh: direct output contribution plus the carried
                            // adjoint from step t+1 (already folded into lam)
                            const real gh = gy * crow[n] + lam[static_cast<std::size_t>(c)];
                            const real a_t = std::exp(d * arow[n]);
                            const real hp = hprev ? hprev[c] : real(0);
                            const real da_local = gh * hp;
                            acc_ddelta += da_local * a_t * arow[n] + gh * brow[n] * uval;
                            da[static_cast<std::size_t>(c)] += da_local * a_t * d;
                            db[static_cast<std::size_t>((b * T + t) * N + n)] += gh * d * uval;
                            acc_du += gh * d * brow[n];
                            lam[static_cast<std::size_t>(c)] = a_t * gh;
                        }
                        ddelta[static_cast<std::size_t>((b * T + t) * H + hh)] = acc_ddelta;
                        du[static_cast<std::size_t>((b * T + t) * H + hh)] = acc_du;
                    }
                }
            }
            thread_mac_add(static_cast<std::uint64_t>(B * T * K) * 10);
            if (dt.requires_grad()) accumulate_adjoint(adj, dt.node(), ddelta);
            if (at.requires_grad()) accumulate_adjoint(adj, at.node(), da);
            if (bt.requires_grad()) accumulate_adjoint(adj, bt.node(), db);
            if (ut.requires_grad()) accumulate_adjoint(adj, ut.node(), du);
            if (ct.requires_grad()) accumulate_adjoint(adj, ct.node(), dc);
        },
        "ssm_scan");
}

// ---- loss --------------------------------------------------------------------

Tensor masked_mean_cross_entropy(const Tensor& logits, const std::vector<std::int32_t>& targets,
                                 const std::vector<std::uint8_t>& mask) {
    check(logits.rank() == 3, "masked_mean_cross_entropy", "logits must be (B,T,V)");
    const std::int64_t B = logits.dim(0), T = logits.dim(1), V = logits.dim(2);
    check(targets.size() == static_cast<std::size_t>(B * T), "masked_mean_cross_entropy",
          "targets size must be B*T");
    check(mask.size() == static_cast<std::size_t>(B * T), "masked_mean_cross_entropy",
          "mask size must be B*T");
    std::int64_t count = 0;
    for (auto m : mask) count += (m != 0);
    if (count == 0)
        throw ContractError("masked_mean_cross_entropy: mask selects zero positions");
    for (std::size_t i = 0; i < targets.size(); ++i) {
        if (mask[i] && (targets[i] < 0 || targets[i] >= V))
            throw ContractError("masked_mean_cross_entropy: target out of range at position " +
                                std::to_string(i));
    }

    auto lv = logits.data();
    double loss = 0;
    for (std::int64_t i = 0; i < B * T; ++i) {
        if (!mask[static_cast<std::size_t>(i)]) continue;
        const real* row = lv.data() + i * V;
        real mx = row[0];
        for (std::int64_t v = 1; v < V; ++v) mx = std::max(mx, row[v]);
        double sum = 0;
        for (std::int64_t v = 0; v < V; ++v) sum += std::exp(static_cast<double>(row[v] - mx));
        loss += std::log(sum) + static_cast<double>(mx) -
                static_cast<double>(row[targets[static_cast<std::size_t>(i)]]);
    }
    loss /= static_cast<double>(count);

    Tensor lt = logits;
    return make_op_output(
        Shape{1}, {static_cast<real>(loss)}, {logits},
        [lt, targets, mask, B, T, V, count](const std::vector<real>& g, Adjoints& adj) {
            if (!lt.requires_grad()) return;
            auto lv = lt.data();
            std::vector<real> dl(static_cast<std::size_t>(B * T * V), real(0));
            const real scale_g = g[0] / static_cast<real>(count);
            for (std::int64_t i = 0; i < B * T; ++i) {
                if (!mask[static_cast<std::size_t>(i)]) continue;
                const real* row = lv.data() + i * V;
                real* drow = dl.data() + i * V;
                real mx = row[0];
                for (std::int64_t v = 1; v < V; ++v) mx = std::max(mx, row[v]);
                double sum = 0;
                for (std::int64_t v = 0; v < V; ++v) sum += std::exp(static_cast<double>(row[v] - mx));
                for (std::int64_t v = 0; v < V; ++v) {
                    const real p = static_cast<real>(std::exp(static_cast<double>(row[v] - mx)) / sum);
                    drow[v] = p * scale_g;
                }
                drow[targets[static_cast<std::size_t>(i)]] -= scale_g;
            }
            thread_mac_add(static_cast<std::uint64_t>(count * V));
            accumulate_adjoint(adj, lt.node(), dl);
        },
        "masked_mean_cross_entropy");
}

// ---- grad check ---------------------------------------------------------------

GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor x, double step,
                           double tol) {
    if (step <= 0) throw ContractError("grad_check: step must be positive");
    x.set_requires_grad(true);
    x.zero_grad();

    std::vector<real> analytic;
    {
        Tape tape;
        Tensor loss = f(x);
        if (loss.numel() != 1) throw ContractError("grad_check: f must be scalar-valued");
        tape.backward(loss);
        Tensor g = x.grad();
        analytic.assign(g.data().begin(), g.data().end());
    }

    GradCheckReport report;
    report.max_rel_error = 0.0;
    auto xd = x.mutable_data();
    for (std::size_t i = 0; i < xd.size(); ++i) {
        const real saved = xd[i];
        xd[i] = saved + static_cast<real>(step);
        const double fp = static_cast<double>(f(x).item());
        xd[i] = saved - static_cast<real>(step);
        const double fm = static_cast<double>(f(x).item());
        xd[i] = saved;
        const double fd = (fp - fm) / (2.0 * step);
        const double an = static_cast<double>(analytic[i]);
        const double denom = std::max(std::abs(an), std::abs(fd));
        const double err = (denom < 1e-8) ? std::abs(an - fd) : std::abs(an - fd) / denom;
        report.max_rel_error = std::max(report.max_rel_error, err);
    }
    report.pass = report.max_rel_error < tol;
    return report;
}

// ---- serialization --------------------------------------------------------------

void write_tensor(std::ostream& os, const Tensor& t) {
    std::string header = "dims:";
    for (auto d : t.shape()) header += " " + std::to_string(d);
    header += "\n";
    os.write(header.data(), static_cast<std::streamsize>(header.size()));
    const auto pos = static_cast<std::uint64_t>(os.tellp());
    const std::uint64_t pad = (8 - pos % 8) % 8;
    static const char zeros[8] = {0};
    if (pad) os.write(zeros, static_cast<std::streamsize>(pad));
    for (real v : t.data()) {
        const double dv = static_cast<double>(v);
        os.write(reinterpret_cast<const char*>(&dv), sizeof(double));
    }
    if (!os) throw std::runtime_error("write_tensor: stream failure");
}

std::uint64_t payload_checksum(const Tensor& t) {
    std::uint64_t hash = 0xcbf29ce484222325ULL;
    for (real v : t.data()) {
        unsigned char bytes[sizeof(real)];
        std::memcpy(bytes, &v, sizeof(real));
        for (unsigned char b : bytes) {
            hash ^= b;
            hash *= 0x100000001b3ULL;
        }
    }
    return hash;
}

Tensor read_tensor(std::istream& is) {
    std::string header;
    if (!std::getline(is, header)) throw std::runtime_error("read_tensor: missing header");
    if (header.rfind("dims:", 0) != 0)
        throw std::runtime_error("read_tensor: bad header '" + header + "'");
    Shape shape;
    {
        std::istringstream hs(header.substr(5));
        std::int64_t d;
        while (hs >> d) {
            if (d <= 0) throw std::runtime_error("read_tensor: non-positive extent");
            shape.push_back(d);
        }
    }
    const auto pos = static_cast<std::uint64_t>(is.tellg());
    const std::uint64_t pad = (8 - pos % 8) % 8;
    if (pad) is.ignore(static_cast<std::streamsize>(pad));
    const std::int64_t n = shape_numel(shape);
    std::vector<real> values(static_cast<std::size_t>(n));
    for (auto& v : values) {
        double dv;
        is.read(reinterpret_cast<char*>(&dv), sizeof(double));
        v = static_cast<real>(dv);
    }
    if (!is) throw std::runtime_error("read_tensor: truncated payload");
    return Tensor::from_vector(std::move(shape), std::move(values));
}

}  // namespace seqmix

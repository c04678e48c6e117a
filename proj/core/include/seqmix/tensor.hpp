#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace seqmix {

#ifdef SEQMIX_REAL_FLOAT32
using real = float;
#else
using real = double;
#endif

using Shape = std::vector<std::int64_t>;

std::string shape_to_string(const Shape& s);
std::int64_t shape_numel(const Shape& s);

/// Thrown when operand dimensions do not conform to an operation's contract.
struct ShapeError : std::invalid_argument {
    explicit ShapeError(const std::string& what) : std::invalid_argument(what) {}
};

/// Thrown when an operation produces a non-finite value.
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

/// Thrown on misuse of an API contract (nested tapes, non-scalar loss, ...).
struct ContractError : std::logic_error {
    explicit ContractError(const std::string& what) : std::logic_error(what) {}
};

/// Tracks live and peak bytes of tensor payloads charged to it.
///
/// Every thread owns one meter (see thread_meter()); tensor storage charges
/// the meter of its creating thread and credits the same meter when freed.
/// Counters are plain — a computation graph is confined to one worker at a
/// time, and cross-thread tensor hand-off transfers the whole graph.
class AllocationMeter {
  public:
    std::uint64_t live_bytes() const { return live_; }
    std::uint64_t peak_bytes() const { return peak_; }

    /// Sets peak_bytes = live_bytes.
    void reset_peak() { peak_ = live_; }

    void charge(std::uint64_t bytes) {
        live_ += bytes;
        if (live_ > peak_) peak_ = live_;
    }
    void credit(std::uint64_t bytes) { live_ -= bytes; }

    bool metering_active = false;

  private:
    std::uint64_t live_ = 0;
    std::uint64_t peak_ = 0;
};

/// The calling thread's allocation meter. Never destroyed, so payloads handed
/// to other threads can still credit it safely at end of life.
AllocationMeter& thread_meter();

/// Keeps freed payload memory in the allocator arena instead of returning it
/// to the kernel. Timed loops that allocate and free multi-megabyte tensors
/// every pass otherwise spend half their wall time on page faults.
void tune_malloc_for_large_payloads();

/// Number of scalar multiply-accumulates executed by tensor ops on this
/// thread since start. Matmul counts m*n*k, conv1d counts taps*channels,
/// elementwise multiplies count one per element; adds are free.
std::uint64_t thread_mac_count();
void thread_mac_add(std::uint64_t n);

/// Brackets a region and reports the MACs executed inside it.
class MacScope {
  public:
    MacScope() : start_(thread_mac_count()) {}
    std::uint64_t macs() const { return thread_mac_count() - start_; }

  private:
    std::uint64_t start_;
};

namespace detail {

/// Meter-charged flat payload. Fixed size after construction.
class Storage {
  public:
    explicit Storage(std::size_t n);
    Storage(Storage&& other) noexcept;
    Storage& operator=(Storage&&) = delete;
    Storage(const Storage&) = delete;
    Storage& operator=(const Storage&) = delete;
    ~Storage();

    real* data() { return data_.data(); }
    const real* data() const { return data_.data(); }
    std::size_t size() const { return data_.size(); }

  private:
    std::vector<real> data_;
    AllocationMeter* meter_;
};

struct TensorNode {
    Shape shape;
    Storage data;
    std::unique_ptr<Storage> grad;  // allocated on first accumulation
    bool requires_grad = false;

    TensorNode(Shape s, std::size_t n) : shape(std::move(s)), data(n) {}
};

}  // namespace detail

class Tape;

/// Dense row-major tensor of `real`, value-semantic handle onto a shared
/// node. Payload is immutable by convention once an op has produced it;
/// leaves expose mutable access for initialization and optimizer updates.
class Tensor {
  public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, real value, bool requires_grad = false);
    static Tensor from_vector(Shape shape, std::vector<real> values, bool requires_grad = false);
    static Tensor scalar(real value, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::int64_t dim(int i) const { return node_->shape[static_cast<std::size_t>(i)]; }
    int rank() const { return static_cast<int>(node_->shape.size()); }
    std::int64_t numel() const { return static_cast<std::int64_t>(node_->data.size()); }

    std::span<const real> data() const { return {node_->data.data(), node_->data.size()}; }
    /// Mutable payload access; intended for leaves (parameter init, optimizer
    /// steps, data staging), never for op outputs already on a tape.
    std::span<real> mutable_data() { return {node_->data.data(), node_->data.size()}; }

    real item() const;
    real at(std::initializer_list<std::int64_t> idx) const;

    bool requires_grad() const { return node_->requires_grad; }
    Tensor& set_requires_grad(bool v);

    /// Accumulated gradient; zeros if backward never reached this tensor.
    Tensor grad() const;
    bool has_grad() const { return node_->grad != nullptr; }
    void zero_grad();

    /// Deep copy with no graph history.
    Tensor clone() const;

    detail::TensorNode* node() const { return node_.get(); }

    friend class Tape;
    friend Tensor make_op_output(Shape shape, std::vector<real> values,
                                 const std::vector<Tensor>& inputs,
                                 std::function<void(const std::vector<real>&,
                                                    std::unordered_map<detail::TensorNode*, std::vector<real>>&)>
                                     backprop,
                                 const char* op_name);

  private:
    explicit Tensor(std::shared_ptr<detail::TensorNode> node) : node_(std::move(node)) {}
    std::shared_ptr<detail::TensorNode> node_;
};

using Adjoints = std::unordered_map<detail::TensorNode*, std::vector<real>>;

/// Accumulate `src` into the adjoint buffer for `node`, allocating it lazily.
void accumulate_adjoint(Adjoints& adj, detail::TensorNode* node, std::span<const real> src);

/// Ordered record of differentiable operations executed while it is active.
/// One tape may be active per thread (define-by-run; rebuilt each forward
/// pass). With no active tape, ops run purely eagerly and keep no history.
class Tape {
  public:
    Tape();
    ~Tape();
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape* active();

    /// Reverse-mode sweep from a scalar loss. Every tensor with
    /// requires_grad reachable from the loss receives dLoss/dTensor,
    /// accumulated into .grad. Repeated calls accumulate.
    void backward(const Tensor& loss);

    std::size_t size() const { return entries_.size(); }

    struct Entry {
        std::shared_ptr<detail::TensorNode> output;
        std::function<void(const std::vector<real>&, Adjoints&)> backprop;
    };
    void record(Entry e) { entries_.push_back(std::move(e)); }

  private:
    std::vector<Entry> entries_;
};

/// Runs `fn` with the calling thread's meter reset, returns its peak payload
/// bytes over the run. Nested use on one meter is a contract error.
template <typename F>
auto with_metering(F&& fn) -> std::pair<decltype(fn()), std::uint64_t> {
    AllocationMeter& m = thread_meter();
    if (m.metering_active) throw ContractError("with_metering: meter already active on this thread");
    m.metering_active = true;
    m.reset_peak();
    try {
        auto result = fn();
        const std::uint64_t peak = m.peak_bytes();
        m.metering_active = false;
        return {std::move(result), peak};
    } catch (...) {
        m.metering_active = false;
        throw;
    }
}

// ---- primitives -----------------------------------------------------------

/// (m,k)x(k,n), (B,m,k)x(B,k,n), or (B,m,k)x(k,n).
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);        // rank 2
Tensor transpose_last2(const Tensor& a);  // rank 3
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, real c);
/// x + b with b broadcast over all leading dims (b matches the last dim).
Tensor add_bias(const Tensor& x, const Tensor& b);
/// x (B,T,c) * v (B,c) with v broadcast over time.
Tensor mul_time_broadcast(const Tensor& x, const Tensor& v);

Tensor exp(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor silu(const Tensor& a);
Tensor gelu(const Tensor& a);  // exact erf form
Tensor softplus(const Tensor& a);

Tensor softmax_lastdim(const Tensor& a);
/// Normalizes the last dimension to zero mean / unit variance (eps 1e-5),
/// then applies learned scale and shift.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta);

Tensor concat_lastdim(const Tensor& a, const Tensor& b);
Tensor mean_over_time(const Tensor& x);                    // (B,T,d) -> (B,d)
Tensor repeat_over_time(const Tensor& s, std::int64_t t);  // (B,d) -> (B,T,d)
Tensor sum_all(const Tensor& x);                           // -> scalar

/// x (B,T,Cin), w (Cout,K,Cin/groups), bias (Cout). groups must be 1 or Cin.
Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& bias, std::int64_t stride,
              std::int64_t padding, std::int64_t groups);

/// table (V,d), ids shaped `id_shape` -> tensor id_shape + [d].
Tensor embedding_lookup(const Tensor& table, const std::vector<std::int64_t>& ids,
                        const Shape& id_shape);

Tensor reshape(const Tensor& x, Shape new_shape);                      // numel-preserving
Tensor slice_lastdim(const Tensor& x, std::int64_t c0, std::int64_t c1);
Tensor slice_time(const Tensor& x, std::int64_t t0, std::int64_t t1);  // rows [t0,t1)
Tensor reverse_time(const Tensor& x);                                  // flip axis 1 of (B,T,d)
Tensor slice_batch(const Tensor& x, std::int64_t b);                   // (B,T,d) -> (T,d)
Tensor stack_batch(const std::vector<Tensor>& items);                  // B x (T,d) -> (B,T,d)
Tensor split_heads(const Tensor& x, std::int64_t heads);               // (T,d) -> (H,T,d/H)
Tensor merge_heads(const Tensor& x);                                   // (H,T,dh) -> (T,H*dh)

/// Inclusive scan of h_t = a_t * h_{t-1} + b_t along axis 1, evaluated by
/// associative composition of the affine maps (a,b) in a balanced tree.
/// The sequential loop form of the same recurrence lives in mixers as the
/// reference oracle.
Tensor linear_scan(const Tensor& a, const Tensor& b);

/// exp(delta_bth * A_hn) flattened to (B,T,H*N). Errors if any delta is
/// non-finite, naming the offending step.
Tensor ssm_discretize(const Tensor& delta, const Tensor& a_diag);
/// delta_bth * b_btn * u_bth -> (B,T,H*N).
Tensor ssm_input(const Tensor& delta, const Tensor& b_proj, const Tensor& u);
/// y_bth = sum_n h_bt(h,n) * c_btn : (B,T,H*N) x (B,T,N) -> (B,T,H).
Tensor ssm_output(const Tensor& h, const Tensor& c_proj);

/// Fused selective-scan pipeline: discretization, input injection, blocked
/// associative scan, and output contraction in one streaming pass, so the
/// per-(h,n) state tensors never materialize at full length.
///   y_bth = sum_n c_btn * h_bthn,
///   h_bthn = exp(delta_bth a_hn) h_b(t-1)hn + delta_bth b_btn u_bth.
Tensor ssm_scan(const Tensor& delta, const Tensor& a_diag, const Tensor& b_proj, const Tensor& u,
                const Tensor& c_proj);

/// Mean cross-entropy over masked positions of (B,T,V) logits against
/// integer targets; unmasked positions contribute nothing. Errors when the
/// mask selects zero positions.
Tensor masked_mean_cross_entropy(const Tensor& logits, const std::vector<std::int32_t>& targets,
                                 const std::vector<std::uint8_t>& mask);

// ---- verification ----------------------------------------------------------

struct GradCheckReport {
    double max_rel_error = 0.0;
    bool pass = false;
};

/// Compares the analytic gradient of scalar-valued `f` at `x` against central
/// finite differences, elementwise. Relative error with absolute fallback
/// below 1e-8 magnitude.
GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor x, double step,
                           double tol);

// ---- serialization ---------------------------------------------------------

/// Container record: text line `dims: d1 d2 ...\n`, zero padding to the next
/// 8-byte boundary (relative to stream start), then little-endian 64-bit
/// float payload. Records can be concatenated in one file.
void write_tensor(std::ostream& os, const Tensor& t);
Tensor read_tensor(std::istream& is);

/// FNV-1a over the payload bytes; used to assert frozen parameters stay
/// bit-identical across training.
std::uint64_t payload_checksum(const Tensor& t);

}  // namespace seqmix

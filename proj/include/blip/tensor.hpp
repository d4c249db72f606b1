/**
 * Dense 64-bit tensors with reverse-mode automatic differentiation.
 *
 * Storage is contiguous row-major; shapes are immutable after creation.
 * Gradients are recorded on an explicit, single-use Tape: leaves are
 * registered with Tape::watch, operations whose inputs live on an active
 * tape record a backward closure, and backward(loss) runs the reverse
 * sweep exactly once. Tensors detached from any tape are immutable values
 * and safe to share across threads.
 *
 * Dense kernels (matrix products, vectorized elementwise math) are backed
 * by Eigen; broadcasting follows the usual align-right rule where a
 * dimension of size 1 stretches.
 */
#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "blip/rng.hpp"

namespace blip {

using Shape = std::vector<std::int64_t>;

namespace detail {

/// 64-byte aligned storage so Eigen's vectorized kernels always see the
/// same peel/body/tail split: results become independent of heap history,
/// which the bit-reproducibility guarantees rely on.
template <class T, std::size_t Align>
struct AlignedAllocator {
    using value_type = T;
    template <class U>
    struct rebind {
        using other = AlignedAllocator<U, Align>;
    };
    AlignedAllocator() = default;
    template <class U>
    AlignedAllocator(const AlignedAllocator<U, Align>&) noexcept {}
    T* allocate(std::size_t n) {
        return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t(Align)));
    }
    void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, std::align_val_t(Align)); }
    // default-initialize (leave trivials uninitialized): vector(n) must not
    // hide a memset under every scratch-buffer allocation
    template <class U>
    void construct(U* p) noexcept(noexcept(::new(static_cast<void*>(p)) U)) {
        ::new (static_cast<void*>(p)) U;
    }
    template <class U, class... Args>
    void construct(U* p, Args&&... args) {
        ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
    }
    template <class U>
    bool operator==(const AlignedAllocator<U, Align>&) const noexcept {
        return true;
    }
};

using DVec = std::vector<double, AlignedAllocator<double, 64>>;

inline std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (auto d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

struct TapeCore {
    struct BackNode {
        int out_slot;
        std::function<void(TapeCore&)> fn;
    };

    std::vector<BackNode> nodes;
    std::vector<std::int64_t> slot_sizes;
    std::vector<DVec> grads;  // allocated lazily, zero-filled
    bool consumed = false;

    int add_slot(std::int64_t size) {
        slot_sizes.push_back(size);
        grads.emplace_back();
        return static_cast<int>(slot_sizes.size()) - 1;
    }

    bool has_grad(int slot) const { return !grads[static_cast<std::size_t>(slot)].empty(); }

    DVec& grad_buf(int slot) {
        auto& g = grads[static_cast<std::size_t>(slot)];
        if (g.empty()) g.assign(static_cast<std::size_t>(slot_sizes[static_cast<std::size_t>(slot)]), 0.0);
        return g;
    }
};

}  // namespace detail

class Tape;

class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }

    static Tensor ones(Shape shape) { return Tensor(std::move(shape), 1.0); }

    static Tensor full(Shape shape, double value) { return Tensor(std::move(shape), value); }

    static Tensor scalar(double value) { return Tensor(Shape{}, value); }

    static Tensor from_data(Shape shape, std::vector<double> values) {
        if (detail::shape_numel(shape) != static_cast<std::int64_t>(values.size()))
            throw std::invalid_argument("Tensor::from_data: shape " + detail::shape_str(shape) +
                                        " does not match " + std::to_string(values.size()) + " values");
        Tensor t;
        t.shape_ = std::move(shape);
        t.data_ = std::make_shared<detail::DVec>(values.begin(), values.end());
        return t;
    }

    static Tensor from_data(Shape shape, std::initializer_list<double> values) {
        return from_data(std::move(shape), std::vector<double>(values));
    }

    /// Uninitialized storage; caller fills data() before use.
    static Tensor empty(Shape shape) {
        Tensor t;
        t.data_ = std::make_shared<detail::DVec>(static_cast<std::size_t>(detail::shape_numel(shape)));
        t.shape_ = std::move(shape);
        return t;
    }

    bool defined() const { return data_ != nullptr; }
    const Shape& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    std::int64_t dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
    std::int64_t size() const { return defined() ? static_cast<std::int64_t>(data_->size()) : 0; }

    std::int64_t rows() const { return rank() == 2 ? dim(0) : (rank() == 1 ? dim(0) : 1); }
    std::int64_t cols() const { return rank() == 2 ? dim(1) : 1; }

    const double* data() const { return data_->data(); }
    double* data() { return data_->data(); }
    std::span<const double> values() const { return {data_->data(), data_->size()}; }

    double operator[](std::int64_t i) const { return (*data_)[static_cast<std::size_t>(i)]; }
    double& operator[](std::int64_t i) { return (*data_)[static_cast<std::size_t>(i)]; }
    double operator()(std::int64_t r, std::int64_t c) const { return (*data_)[static_cast<std::size_t>(r * cols() + c)]; }
    double& operator()(std::int64_t r, std::int64_t c) { return (*data_)[static_cast<std::size_t>(r * cols() + c)]; }

    double item() const {
        if (size() != 1) throw std::invalid_argument("Tensor::item: tensor has " + std::to_string(size()) + " elements");
        return (*data_)[0];
    }

    /// Deep copy of the values, detached from any tape.
    Tensor clone() const {
        Tensor t;
        t.shape_ = shape_;
        t.data_ = std::make_shared<detail::DVec>(*data_);
        return t;
    }

    bool all_finite() const {
        for (double v : *data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    bool requires_grad() const { return requires_grad_; }
    bool on_tape() const { return !tape_.expired(); }

    // Eigen views over the (row-major) storage, mapping rank-1 as a column.
    using MatrixMap = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
    using ConstMatrixMap = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
    using ArrayMap = Eigen::Map<Eigen::Array<double, Eigen::Dynamic, 1>>;
    using ConstArrayMap = Eigen::Map<const Eigen::Array<double, Eigen::Dynamic, 1>>;

    ConstMatrixMap matrix() const { return {data(), rows(), cols()}; }
    MatrixMap matrix() { return {data(), rows(), cols()}; }
    ConstArrayMap array() const { return {data(), size()}; }
    ArrayMap array() { return {data(), size()}; }

private:
    friend class Tape;
    friend struct OpRecorder;
    friend void backward(const Tensor& loss);

    Tensor(Shape shape, double fill) {
        data_ = std::make_shared<detail::DVec>(static_cast<std::size_t>(detail::shape_numel(shape)), fill);
        shape_ = std::move(shape);
    }

    std::shared_ptr<detail::DVec> data_;
    Shape shape_;
    std::weak_ptr<detail::TapeCore> tape_;
    int slot_ = -1;
    bool requires_grad_ = false;
};

/// Explicit gradient tape. Single-use: one backward pass, then consumed.
class Tape {
public:
    Tape() : core_(std::make_shared<detail::TapeCore>()) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;
    Tape(Tape&&) = default;
    Tape& operator=(Tape&&) = default;

    /// Register a leaf whose gradient should be accumulated.
    void watch(Tensor& t) {
        if (!t.defined()) throw std::invalid_argument("Tape::watch: undefined tensor");
        auto existing = t.tape_.lock();
        if (existing == core_) return;
        if (existing && !existing->consumed)
            throw std::invalid_argument("Tape::watch: tensor already participates in another active tape");
        t.tape_ = core_;
        t.slot_ = core_->add_slot(t.size());
        t.requires_grad_ = true;
    }

    bool consumed() const { return core_->consumed; }

    /// Gradient of the backward-ed loss w.r.t. a watched/recorded tensor.
    Tensor grad(const Tensor& t) const {
        if (!core_->consumed) throw std::runtime_error("Tape::grad: backward has not run on this tape");
        if (t.tape_.lock() != core_ || t.slot_ < 0)
            throw std::invalid_argument("Tape::grad: tensor is not on this tape");
        Tensor g = Tensor::zeros(t.shape());
        if (core_->has_grad(t.slot_)) {
            const auto& buf = core_->grads[static_cast<std::size_t>(t.slot_)];
            std::copy(buf.begin(), buf.end(), g.data());
        }
        return g;
    }

    friend void backward(const Tensor& loss);
    friend struct OpRecorder;

private:
    std::shared_ptr<detail::TapeCore> core_;
};

// ---------------------------------------------------------------------------
// Op recording machinery
// ---------------------------------------------------------------------------

struct OpRecorder {
    /// The unique active tape among inputs, or nullptr if all are detached.
    static std::shared_ptr<detail::TapeCore> active_tape(std::initializer_list<const Tensor*> inputs) {
        std::shared_ptr<detail::TapeCore> found;
        for (const Tensor* t : inputs) {
            auto tc = t->tape_.lock();
            if (!tc || tc->consumed) continue;
            if (found && tc != found)
                throw std::invalid_argument("op inputs belong to two different active tapes");
            found = std::move(tc);
        }
        return found;
    }

    static int slot_on(const std::shared_ptr<detail::TapeCore>& tc, const Tensor& t) {
        return t.tape_.lock() == tc ? t.slot_ : -1;
    }

    /// Register `out` as the result of a recorded op; the caller assigns
    /// tc->nodes.back().fn with the backward closure. Returns the new slot.
    static int attach(const std::shared_ptr<detail::TapeCore>& tc, Tensor& out) {
        out.tape_ = tc;
        out.slot_ = tc->add_slot(out.size());
        out.requires_grad_ = true;
        tc->nodes.push_back({out.slot_, nullptr});
        return out.slot_;
    }
};

/// Reverse sweep from a scalar loss; populates gradients and consumes the tape.
inline void backward(const Tensor& loss) {
    if (!loss.defined()) throw std::invalid_argument("backward: undefined loss");
    if (loss.size() != 1)
        throw std::invalid_argument("backward: loss must be scalar, got shape " + detail::shape_str(loss.shape()));
    auto tc = loss.tape_.lock();
    if (!tc || loss.slot_ < 0) throw std::invalid_argument("backward: loss is not attached to a tape");
    if (tc->consumed) throw std::runtime_error("backward: tape already consumed");
    tc->grad_buf(loss.slot_)[0] = 1.0;
    for (auto it = tc->nodes.rbegin(); it != tc->nodes.rend(); ++it) {
        if (!tc->has_grad(it->out_slot)) continue;  // nothing downstream pulled on this node
        it->fn(*tc);
    }
    tc->consumed = true;
}

// ---------------------------------------------------------------------------
// Broadcasting helpers
// ---------------------------------------------------------------------------

namespace detail {

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
    Shape out(std::max(a.size(), b.size()));
    for (std::size_t i = 0; i < out.size(); ++i) {
        std::int64_t da = i < out.size() - a.size() ? 1 : a[i - (out.size() - a.size())];
        std::int64_t db = i < out.size() - b.size() ? 1 : b[i - (out.size() - b.size())];
        if (da != db && da != 1 && db != 1)
            throw std::invalid_argument("shapes not broadcastable: " + shape_str(a) + " vs " + shape_str(b));
        out[i] = std::max(da, db);
    }
    return out;
}

/// Row-major strides with 0 on stretched dimensions, aligned to out_rank.
inline std::vector<std::int64_t> broadcast_strides(const Shape& s, const Shape& out) {
    std::vector<std::int64_t> strides(out.size(), 0);
    std::int64_t acc = 1;
    for (std::size_t k = 0; k < s.size(); ++k) {
        std::size_t i = s.size() - 1 - k;          // dim index in s, right to left
        std::size_t oi = out.size() - 1 - k;       // aligned dim in out
        strides[oi] = (s[i] == 1 && out[oi] != 1) ? 0 : acc;
        acc *= s[i];
    }
    return strides;
}

/// Apply f(out_linear, a_linear, b_linear) over the broadcast index space.
template <class F>
inline void broadcast_walk(const Shape& out, const std::vector<std::int64_t>& sa,
                           const std::vector<std::int64_t>& sb, F&& f) {
    const std::size_t r = out.size();
    if (r == 0) {
        f(0, 0, 0);
        return;
    }
    std::vector<std::int64_t> idx(r, 0);
    std::int64_t ia = 0, ib = 0, io = 0;
    const std::int64_t total = shape_numel(out);
    for (std::int64_t n = 0; n < total; ++n) {
        f(io, ia, ib);
        ++io;
        for (std::size_t k = 0; k < r; ++k) {
            std::size_t d = r - 1 - k;
            ++idx[d];
            ia += sa[d];
            ib += sb[d];
            if (idx[d] < out[d]) break;
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

namespace detail {

/// Vectorized Box-Muller over one RNG stream: the first half of `out`
/// receives r*cos terms and the second half r*sin terms, so all
/// transcendentals run through Eigen's SIMD kernels.
inline void fill_gaussian_bulk(RngStream& rng, double* out, std::int64_t n) {
    if (n < 64) {  // small draws: stay scalar
        for (std::int64_t i = 0; i < n; ++i) out[i] = rng.next_gaussian();
        return;
    }
    const std::int64_t m = n / 2;
    DVec u1(static_cast<std::size_t>(m)), u2(static_cast<std::size_t>(m));
    for (std::int64_t i = 0; i < m; ++i) {
        u1[static_cast<std::size_t>(i)] = static_cast<double>((rng.next_u64() >> 11) + 1) * 0x1.0p-53;
        u2[static_cast<std::size_t>(i)] = static_cast<double>(rng.next_u64() >> 11) * 0x1.0p-53;
    }
    DVec r(static_cast<std::size_t>(m));
    Eigen::Map<Eigen::ArrayXd> R(r.data(), m);
    Eigen::Map<Eigen::ArrayXd> U1(u1.data(), m), U2(u2.data(), m);
    R = (-2.0 * U1.log()).sqrt();
    U2 *= 2.0 * std::numbers::pi;
    Eigen::Map<Eigen::ArrayXd>(out, m) = R * U2.cos();
    Eigen::Map<Eigen::ArrayXd>(out + m, m) = R * U2.sin();
    for (std::int64_t i = 2 * m; i < n; ++i) out[i] = rng.next_gaussian();
}

}  // namespace detail

/// Fused linear layer: out = x * w + bias (bias broadcast over rows).
inline Tensor affine(const Tensor& x, const Tensor& w, const Tensor& bias) {
    if (x.rank() != 2 || w.rank() != 2 || x.dim(1) != w.dim(0))
        throw std::invalid_argument("affine: incompatible shapes " + detail::shape_str(x.shape()) + " and " +
                                    detail::shape_str(w.shape()));
    const std::int64_t m = x.dim(0), n = w.dim(1);
    if (bias.size() != n) throw std::invalid_argument("affine: bias size does not match output width");
    Tensor out = Tensor::empty({m, n});
    out.matrix().noalias() = x.matrix() * w.matrix();
    out.matrix().rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bias.data(), n);

    auto tc = OpRecorder::active_tape({&x, &w, &bias});
    if (tc) {
        const int sx = OpRecorder::slot_on(tc, x), sw = OpRecorder::slot_on(tc, w), sb = OpRecorder::slot_on(tc, bias);
        Tensor xv = x, wv = w;
        const int out_slot = OpRecorder::attach(tc, out);
        tc->nodes.back().fn = [xv, wv, sx, sw, sb, m, n, out_slot](detail::TapeCore& core) {
            Tensor::ConstMatrixMap g(core.grad_buf(out_slot).data(), m, n);
            if (sx >= 0) {
                Tensor::MatrixMap gx(core.grad_buf(sx).data(), m, xv.dim(1));
                gx.noalias() += g * wv.matrix().transpose();
            }
            if (sw >= 0) {
                Tensor::MatrixMap gw(core.grad_buf(sw).data(), wv.dim(0), n);
                gw.noalias() += xv.matrix().transpose() * g;
            }
            if (sb >= 0) {
                Eigen::Map<Eigen::RowVectorXd> gb(core.grad_buf(sb).data(), n);
                gb.noalias() += g.colwise().sum();
            }
        };
    }
    return out;
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
        throw std::invalid_argument("matmul: incompatible shapes " + detail::shape_str(a.shape()) + " and " +
                                    detail::shape_str(b.shape()));
    const std::int64_t m = a.dim(0), n = b.dim(1);
    Tensor out = Tensor::empty({m, n});
    out.matrix().noalias() = a.matrix() * b.matrix();

    auto tc = OpRecorder::active_tape({&a, &b});
    if (tc) {
        const int sa = OpRecorder::slot_on(tc, a), sb = OpRecorder::slot_on(tc, b);
        Tensor av = a, bv = b;
        const int out_slot = OpRecorder::attach(tc, out);
        tc->nodes.back().fn = [av, bv, sa, sb, m, n, out_slot](detail::TapeCore& core) {
            Tensor::ConstMatrixMap g(core.grad_buf(out_slot).data(), m, n);
            if (sa >= 0) {
                Tensor::MatrixMap ga(core.grad_buf(sa).data(), m, av.dim(1));
                ga.noalias() += g * bv.matrix().transpose();
            }
            if (sb >= 0) {
                Tensor::MatrixMap gb(core.grad_buf(sb).data(), bv.dim(0), n);
                gb.noalias() += av.matrix().transpose() * g;
            }
        };
    }
    return out;
}

enum class EwKind { add, sub, mul, div };

namespace detail {

/// Broadcast layouts with vectorized kernels. `generic` falls back to the
/// strided walk; everything the models touch per step hits a fast path.
enum class BcPattern { same, scalar_b, scalar_a, row_b, row_a, col_b, col_a, generic };

inline BcPattern classify_broadcast(const Shape& a, const Shape& b) {
    if (a == b) return BcPattern::same;
    const auto numel = [](const Shape& s) { return shape_numel(s); };
    if (numel(b) == 1) return BcPattern::scalar_b;
    if (numel(a) == 1) return BcPattern::scalar_a;
    if (a.size() == 2) {
        if ((b.size() == 1 && b[0] == a[1]) || (b.size() == 2 && b[0] == 1 && b[1] == a[1])) return BcPattern::row_b;
        if (b.size() == 2 && b[0] == a[0] && b[1] == 1) return BcPattern::col_b;
    }
    if (b.size() == 2) {
        if ((a.size() == 1 && a[0] == b[1]) || (a.size() == 2 && a[0] == 1 && a[1] == b[1])) return BcPattern::row_a;
        if (a.size() == 2 && a[0] == b[0] && a[1] == 1) return BcPattern::col_a;
    }
    return BcPattern::generic;
}

using EArr = Eigen::Map<Eigen::Array<double, Eigen::Dynamic, 1>>;
using CEArr = Eigen::Map<const Eigen::Array<double, Eigen::Dynamic, 1>>;
using EArr2 = Eigen::Map<Eigen::Array<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using CEArr2 = Eigen::Map<const Eigen::Array<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

}  // namespace detail

inline Tensor elementwise(const Tensor& a, const Tensor& b, EwKind kind) {
    using detail::BcPattern;
    const Shape out_shape = detail::broadcast_shape(a.shape(), b.shape());
    const BcPattern pat = detail::classify_broadcast(a.shape(), b.shape());
    Tensor out = Tensor::empty(out_shape);

    const std::int64_t rows = out_shape.empty() ? 1 : out_shape[0];
    const std::int64_t cols = out_shape.size() == 2 ? out_shape[1] : 1;

    switch (pat) {
        case BcPattern::same:
            switch (kind) {
                case EwKind::add: out.array() = a.array() + b.array(); break;
                case EwKind::sub: out.array() = a.array() - b.array(); break;
                case EwKind::mul: out.array() = a.array() * b.array(); break;
                case EwKind::div: out.array() = a.array() / b.array(); break;
            }
            break;
        case BcPattern::scalar_b: {
            const double s = b[0];
            switch (kind) {
                case EwKind::add: out.array() = a.array() + s; break;
                case EwKind::sub: out.array() = a.array() - s; break;
                case EwKind::mul: out.array() = a.array() * s; break;
                case EwKind::div: out.array() = a.array() / s; break;
            }
            break;
        }
        case BcPattern::scalar_a: {
            const double s = a[0];
            switch (kind) {
                case EwKind::add: out.array() = s + b.array(); break;
                case EwKind::sub: out.array() = s - b.array(); break;
                case EwKind::mul: out.array() = s * b.array(); break;
                case EwKind::div: out.array() = s / b.array(); break;
            }
            break;
        }
        case BcPattern::row_b:
        case BcPattern::row_a: {
            const Tensor& m = pat == BcPattern::row_b ? a : b;
            const Tensor& v = pat == BcPattern::row_b ? b : a;
            detail::CEArr2 M(m.data(), rows, cols);
            detail::CEArr V(v.data(), cols);
            detail::EArr2 O(out.data(), rows, cols);
            const bool flip = pat == BcPattern::row_a;  // v op m instead of m op v
            switch (kind) {
                case EwKind::add: O = M.rowwise() + V.transpose(); break;
                case EwKind::sub:
                    if (flip)
                        O = (-M).rowwise() + V.transpose();
                    else
                        O = M.rowwise() - V.transpose();
                    break;
                case EwKind::mul: O = M.rowwise() * V.transpose(); break;
                case EwKind::div:
                    if (flip)
                        O = M.inverse().rowwise() * V.transpose();
                    else
                        O = M.rowwise() / V.transpose();
                    break;
            }
            break;
        }
        case BcPattern::col_b:
        case BcPattern::col_a: {
            const Tensor& m = pat == BcPattern::col_b ? a : b;
            const Tensor& v = pat == BcPattern::col_b ? b : a;
            detail::CEArr2 M(m.data(), rows, cols);
            detail::CEArr V(v.data(), rows);
            detail::EArr2 O(out.data(), rows, cols);
            const bool flip = pat == BcPattern::col_a;
            switch (kind) {
                case EwKind::add: O = M.colwise() + V; break;
                case EwKind::sub:
                    if (flip)
                        O = (-M).colwise() + V;
                    else
                        O = M.colwise() - V;
                    break;
                case EwKind::mul: O = M.colwise() * V; break;
                case EwKind::div:
                    if (flip)
                        O = M.inverse().colwise() * V;
                    else
                        O = M.colwise() / V;
                    break;
            }
            break;
        }
        case BcPattern::generic: {
            const auto sa = detail::broadcast_strides(a.shape(), out_shape);
            const auto sb = detail::broadcast_strides(b.shape(), out_shape);
            const double* pa = a.data();
            const double* pb = b.data();
            double* po = out.data();
            switch (kind) {
                case EwKind::add:
                    detail::broadcast_walk(out_shape, sa, sb, [&](auto io, auto ia, auto ib) { po[io] = pa[ia] + pb[ib]; });
                    break;
                case EwKind::sub:
                    detail::broadcast_walk(out_shape, sa, sb, [&](auto io, auto ia, auto ib) { po[io] = pa[ia] - pb[ib]; });
                    break;
                case EwKind::mul:
                    detail::broadcast_walk(out_shape, sa, sb, [&](auto io, auto ia, auto ib) { po[io] = pa[ia] * pb[ib]; });
                    break;
                case EwKind::div:
                    detail::broadcast_walk(out_shape, sa, sb, [&](auto io, auto ia, auto ib) { po[io] = pa[ia] / pb[ib]; });
                    break;
            }
            break;
        }
    }

    auto tc = OpRecorder::active_tape({&a, &b});
    if (tc) {
        const int sa_slot = OpRecorder::slot_on(tc, a), sb_slot = OpRecorder::slot_on(tc, b);
        Tensor av = a, bv = b;
        const int out_slot = OpRecorder::attach(tc, out);
        tc->nodes.back().fn = [av, bv, sa_slot, sb_slot, out_shape, pat, rows, cols, kind,
                               out_slot](detail::TapeCore& core) {
            const double* g = core.grad_buf(out_slot).data();
            const std::int64_t n = detail::shape_numel(out_shape);
            detail::CEArr G(g, n);
            switch (pat) {
                case BcPattern::same: {
                    if (sa_slot >= 0) {
                        detail::EArr GA(core.grad_buf(sa_slot).data(), n);
                        switch (kind) {
                            case EwKind::add:
                            case EwKind::sub: GA += G; break;
                            case EwKind::mul: GA += G * detail::CEArr(bv.data(), n); break;
                            case EwKind::div: GA += G / detail::CEArr(bv.data(), n); break;
                        }
                    }
                    if (sb_slot >= 0) {
                        detail::EArr GB(core.grad_buf(sb_slot).data(), n);
                        detail::CEArr A(av.data(), n), B(bv.data(), n);
                        switch (kind) {
                            case EwKind::add: GB += G; break;
                            case EwKind::sub: GB -= G; break;
                            case EwKind::mul: GB += G * A; break;
                            case EwKind::div: GB -= G * A / (B * B); break;
                        }
                    }
                    break;
                }
                case BcPattern::scalar_b: {
                    const double s = bv[0];
                    if (sa_slot >= 0) {
                        detail::EArr GA(core.grad_buf(sa_slot).data(), n);
                        switch (kind) {
                            case EwKind::add:
                            case EwKind::sub: GA += G; break;
                            case EwKind::mul: GA += G * s; break;
                            case EwKind::div: GA += G / s; break;
                        }
                    }
                    if (sb_slot >= 0) {
                        double& gb = core.grad_buf(sb_slot)[0];
                        detail::CEArr A(av.data(), n);
                        switch (kind) {
                            case EwKind::add: gb += G.sum(); break;
                            case EwKind::sub: gb -= G.sum(); break;
                            case EwKind::mul: gb += (G * A).sum(); break;
                            case EwKind::div: gb -= (G * A).sum() / (s * s); break;
                        }
                    }
                    break;
                }
                case BcPattern::scalar_a: {
                    const double s = av[0];
                    if (sa_slot >= 0) {
                        double& ga = core.grad_buf(sa_slot)[0];
                        detail::CEArr B(bv.data(), n);
                        switch (kind) {
                            case EwKind::add:
                            case EwKind::sub: ga += G.sum(); break;
                            case EwKind::mul: ga += (G * B).sum(); break;
                            case EwKind::div: ga += (G / B).sum(); break;
                        }
                    }
                    if (sb_slot >= 0) {
                        detail::EArr GB(core.grad_buf(sb_slot).data(), n);
                        detail::CEArr B(bv.data(), n);
                        switch (kind) {
                            case EwKind::add: GB += G; break;
                            case EwKind::sub: GB -= G; break;
                            case EwKind::mul: GB += G * s; break;
                            case EwKind::div: GB -= G * s / (B * B); break;
                        }
                    }
                    break;
                }
                case BcPattern::row_b:
                case BcPattern::row_a: {
                    const bool b_is_vec = pat == BcPattern::row_b;
                    const Tensor& mat = b_is_vec ? av : bv;
                    const Tensor& vec = b_is_vec ? bv : av;
                    const int mat_slot = b_is_vec ? sa_slot : sb_slot;
                    const int vec_slot = b_is_vec ? sb_slot : sa_slot;
                    detail::CEArr2 G2(g, rows, cols);
                    detail::CEArr2 M(mat.data(), rows, cols);
                    detail::CEArr V(vec.data(), cols);
                    const double msign = (kind == EwKind::sub && !b_is_vec) ? -1.0 : 1.0;  // d(v - m)/dm = -1
                    const double vsign = (kind == EwKind::sub && b_is_vec) ? -1.0 : 1.0;
                    if (mat_slot >= 0) {
                        detail::EArr2 GM(core.grad_buf(mat_slot).data(), rows, cols);
                        switch (kind) {
                            case EwKind::add: GM += G2; break;
                            case EwKind::sub: GM += msign * G2; break;
                            case EwKind::mul: GM += G2.rowwise() * V.transpose(); break;
                            case EwKind::div:
                                if (b_is_vec)
                                    GM += G2.rowwise() / V.transpose();
                                else
                                    GM += -G2 * (M.inverse().square().rowwise() * V.transpose());
                                break;
                        }
                    }
                    if (vec_slot >= 0) {
                        detail::EArr GV(core.grad_buf(vec_slot).data(), cols);
                        switch (kind) {
                            case EwKind::add: GV += G2.colwise().sum().transpose(); break;
                            case EwKind::sub: GV += vsign * G2.colwise().sum().transpose(); break;
                            case EwKind::mul: GV += (G2 * M).colwise().sum().transpose(); break;
                            case EwKind::div:
                                if (b_is_vec)
                                    GV += -((G2 * M).colwise().sum().transpose()) / (V * V);
                                else
                                    GV += (G2 / M).colwise().sum().transpose();
                                break;
                        }
                    }
                    break;
                }
                case BcPattern::col_b:
                case BcPattern::col_a: {
                    const bool b_is_vec = pat == BcPattern::col_b;
                    const Tensor& mat = b_is_vec ? av : bv;
                    const Tensor& vec = b_is_vec ? bv : av;
                    const int mat_slot = b_is_vec ? sa_slot : sb_slot;
                    const int vec_slot = b_is_vec ? sb_slot : sa_slot;
                    detail::CEArr2 G2(g, rows, cols);
                    detail::CEArr2 M(mat.data(), rows, cols);
                    detail::CEArr V(vec.data(), rows);
                    const double msign = (kind == EwKind::sub && !b_is_vec) ? -1.0 : 1.0;
                    const double vsign = (kind == EwKind::sub && b_is_vec) ? -1.0 : 1.0;
                    if (mat_slot >= 0) {
                        detail::EArr2 GM(core.grad_buf(mat_slot).data(), rows, cols);
                        switch (kind) {
                            case EwKind::add: GM += G2; break;
                            case EwKind::sub: GM += msign * G2; break;
                            case EwKind::mul: GM += G2.colwise() * V; break;
                            case EwKind::div:
                                if (b_is_vec)
                                    GM += G2.colwise() / V;
                                else
                                    GM -= (G2 * M.inverse().square()).colwise() * V;
                                break;
                        }
                    }
                    if (vec_slot >= 0) {
                        detail::EArr GV(core.grad_buf(vec_slot).data(), rows);
                        switch (kind) {
                            case EwKind::add: GV += G2.rowwise().sum(); break;
                            case EwKind::sub: GV += vsign * G2.rowwise().sum(); break;
                            case EwKind::mul: GV += (G2 * M).rowwise().sum(); break;
                            case EwKind::div:
                                if (b_is_vec)
                                    GV += -(G2 * M).rowwise().sum() / (V * V);
                                else
                                    GV += (G2 / M).rowwise().sum();
                                break;
                        }
                    }
                    break;
                }
                case BcPattern::generic: {
                    const auto sa = detail::broadcast_strides(av.shape(), out_shape);
                    const auto sb = detail::broadcast_strides(bv.shape(), out_shape);
                    const double* pa = av.data();
                    const double* pb = bv.data();
                    double* ga = sa_slot >= 0 ? core.grad_buf(sa_slot).data() : nullptr;
                    double* gb = sb_slot >= 0 ? core.grad_buf(sb_slot).data() : nullptr;
                    switch (kind) {
                        case EwKind::add:
                            detail::broadcast_walk(out_shape, sa, sb, [&](auto io, auto ia, auto ib) {
                                if (ga) ga[ia] += g[io];
                                if (gb) gb[ib] += g[io];
                            });
                            break;
                        case EwKind::sub:
                            detail::broadcast_walk(out_shape, sa, sb, [&](auto io, auto ia, auto ib) {
                                if (ga) ga[ia] += g[io];
                                if (gb) gb[ib] -= g[io];
                            });
                            break;
                        case EwKind::mul:
                            detail::broadcast_walk(out_shape, sa, sb, [&](auto io, auto ia, auto ib) {
                                if (ga) ga[ia] += g[io] * pb[ib];
                                if (gb) gb[ib] += g[io] * pa[ia];
                            });
                            break;
                        case EwKind::div:
                            detail::broadcast_walk(out_shape, sa, sb, [&](auto io, auto ia, auto ib) {
                                if (ga) ga[ia] += g[io] / pb[ib];
                                if (gb) gb[ib] -= g[io] * pa[ia] / (pb[ib] * pb[ib]);
                            });
                            break;
                    }
                    break;
                }
            }
        };
    }
    return out;
}

inline Tensor add(const Tensor& a, const Tensor& b) { return elementwise(a, b, EwKind::add); }
inline Tensor sub(const Tensor& a, const Tensor& b) { return elementwise(a, b, EwKind::sub); }
inline Tensor mul(const Tensor& a, const Tensor& b) { return elementwise(a, b, EwKind::mul); }
inline Tensor div(const Tensor& a, const Tensor& b) { return elementwise(a, b, EwKind::div); }

namespace detail {

/// Shared plumbing for unary maps: out = f(a), backward ga += g * dfn(i).
template <class Fwd, class Bwd>
inline Tensor unary_op(const Tensor& a, Fwd&& fwd, Bwd&& make_backward) {
    Tensor out = Tensor::empty(a.shape());
    fwd(a, out);
    auto tc = OpRecorder::active_tape({&a});
    if (tc) {
        const int sa = OpRecorder::slot_on(tc, a);
        const int out_slot = OpRecorder::attach(tc, out);
        tc->nodes.back().fn = make_backward(sa, out_slot);
    }
    return out;
}

}  // namespace detail

/// swish(x) = x * sigmoid(x)
inline Tensor swish(const Tensor& a) {
    // forward keeps sigmoid(x) around for the backward pass
    auto sig = std::make_shared<detail::DVec>(static_cast<std::size_t>(a.size()));
    Eigen::Map<Eigen::ArrayXd> s(sig->data(), a.size());
    s = 1.0 / (1.0 + (-a.array()).exp());
    return detail::unary_op(
        a, [&](const Tensor& in, Tensor& out) { out.array() = in.array() * s; },
        [a, sig](int sa, int out_slot) -> std::function<void(detail::TapeCore&)> {
            if (sa < 0) return [](detail::TapeCore&) {};
            return [a, sig, sa, out_slot](detail::TapeCore& core) {
                Eigen::Map<const Eigen::ArrayXd> g(core.grad_buf(out_slot).data(), a.size());
                Eigen::Map<Eigen::ArrayXd> ga(core.grad_buf(sa).data(), a.size());
                Eigen::Map<const Eigen::ArrayXd> s2(sig->data(), a.size());
                ga += g * s2 * (1.0 + a.array() * (1.0 - s2));
            };
        });
}

inline Tensor identity(const Tensor& a) {
    return detail::unary_op(
        a, [](const Tensor& in, Tensor& out) { out.array() = in.array(); },
        [a](int sa, int out_slot) -> std::function<void(detail::TapeCore&)> {
            return [a, sa, out_slot](detail::TapeCore& core) {
                if (sa < 0) return;
                Eigen::Map<const Eigen::ArrayXd> g(core.grad_buf(out_slot).data(), a.size());
                Eigen::Map<Eigen::ArrayXd> ga(core.grad_buf(sa).data(), a.size());
                ga += g;
            };
        });
}

enum class Activation { swish, identity };

inline Tensor activation(const Tensor& a, Activation kind) {
    return kind == Activation::swish ? swish(a) : identity(a);
}

inline Tensor sigmoid(const Tensor& a) {
    Tensor out = Tensor::empty(a.shape());
    out.array() = 1.0 / (1.0 + (-a.array()).exp());
    auto tc = OpRecorder::active_tape({&a});
    if (tc) {
        const int sa = OpRecorder::slot_on(tc, a);
        Tensor ov = out;
        const int out_slot = OpRecorder::attach(tc, out);
        tc->nodes.back().fn = [ov, sa, out_slot](detail::TapeCore& core) {
            if (sa < 0) return;
            Eigen::Map<const Eigen::ArrayXd> g(core.grad_buf(out_slot).data(), ov.size());
            Eigen::Map<Eigen::ArrayXd> ga(core.grad_buf(sa).data(), ov.size());
            ga += g * ov.array() * (1.0 - ov.array());
        };
    }
    return out;
}

inline Tensor log(const Tensor& a) {
    return detail::unary_op(
        a, [](const Tensor& in, Tensor& out) { out.array() = in.array().log(); },
        [a](int sa, int out_slot) -> std::function<void(detail::TapeCore&)> {
            return [a, sa, out_slot](detail::TapeCore& core) {
                if (sa < 0) return;
                Eigen::Map<const Eigen::ArrayXd> g(core.grad_buf(out_slot).data(), a.size());
                Eigen::Map<Eigen::ArrayXd> ga(core.grad_buf(sa).data(), a.size());
                ga += g / a.array();
            };
        });
}

/// Elementwise square root; the subgradient at 0 is taken as 0 so that
/// exactly-zero variances do not poison the backward pass.
inline Tensor sqrt(const Tensor& a) {
    Tensor out = Tensor::empty(a.shape());
    out.array() = a.array().sqrt();
    auto tc = OpRecorder::active_tape({&a});
    if (tc) {
        const int sa = OpRecorder::slot_on(tc, a);
        Tensor ov = out;
        const int out_slot = OpRecorder::attach(tc, out);
        tc->nodes.back().fn = [ov, sa, out_slot](detail::TapeCore& core) {
            if (sa < 0) return;
            const double* g = core.grad_buf(out_slot).data();
            double* ga = core.grad_buf(sa).data();
            const double* o = ov.data();
            for (std::int64_t i = 0; i < ov.size(); ++i)
                if (o[i] > 0.0) ga[i] += g[i] / (2.0 * o[i]);
        };
    }
    return out;
}

inline Tensor abs(const Tensor& a) {
    return detail::unary_op(
        a, [](const Tensor& in, Tensor& out) { out.array() = in.array().abs(); },
        [a](int sa, int out_slot) -> std::function<void(detail::TapeCore&)> {
            return [a, sa, out_slot](detail::TapeCore& core) {
                if (sa < 0) return;
                const double* g = core.grad_buf(out_slot).data();
                double* ga = core.grad_buf(sa).data();
                const double* x = a.data();
                for (std::int64_t i = 0; i < a.size(); ++i)
                    ga[i] += x[i] > 0.0 ? g[i] : (x[i] < 0.0 ? -g[i] : 0.0);
            };
        });
}

/// out = c * a
inline Tensor scale(const Tensor& a, double c) {
    return detail::unary_op(
        a, [c](const Tensor& in, Tensor& out) { out.array() = c * in.array(); },
        [a, c](int sa, int out_slot) -> std::function<void(detail::TapeCore&)> {
            return [a, c, sa, out_slot](detail::TapeCore& core) {
                if (sa < 0) return;
                Eigen::Map<const Eigen::ArrayXd> g(core.grad_buf(out_slot).data(), a.size());
                Eigen::Map<Eigen::ArrayXd> ga(core.grad_buf(sa).data(), a.size());
                ga += c * g;
            };
        });
}

/// out = a + c
inline Tensor add_const(const Tensor& a, double c) {
    return detail::unary_op(
        a, [c](const Tensor& in, Tensor& out) { out.array() = in.array() + c; },
        [a](int sa, int out_slot) -> std::function<void(detail::TapeCore&)> {
            return [a, sa, out_slot](detail::TapeCore& core) {
                if (sa < 0) return;
                Eigen::Map<const Eigen::ArrayXd> g(core.grad_buf(out_slot).data(), a.size());
                Eigen::Map<Eigen::ArrayXd> ga(core.grad_buf(sa).data(), a.size());
                ga += g;
            };
        });
}

enum class Reduce { sum, mean };

/// Full reduction to a scalar.
inline Tensor reduce(const Tensor& a, Reduce kind) {
    if (a.size() == 0) throw std::invalid_argument("reduce: empty tensor");
    const double s = a.array().sum();
    const double denom = kind == Reduce::mean ? static_cast<double>(a.size()) : 1.0;
    Tensor out = Tensor::from_data(Shape{}, {s / denom});
    auto tc = OpRecorder::active_tape({&a});
    if (tc) {
        const int sa = OpRecorder::slot_on(tc, a);
        const std::int64_t n = a.size();
        const int out_slot = OpRecorder::attach(tc, out);
        tc->nodes.back().fn = [sa, n, denom, out_slot](detail::TapeCore& core) {
            if (sa < 0) return;
            const double g = core.grad_buf(out_slot)[0] / denom;
            Eigen::Map<Eigen::ArrayXd> ga(core.grad_buf(sa).data(), n);
            ga += g;
        };
    }
    return out;
}

/// Reduction over one axis, keeping it as size 1 (so results broadcast back).
inline Tensor reduce(const Tensor& a, Reduce kind, int axis) {
    if (axis < 0 || axis >= a.rank())
        throw std::invalid_argument("reduce: axis " + std::to_string(axis) + " invalid for shape " +
                                    detail::shape_str(a.shape()));
    if (a.dim(axis) == 0) throw std::invalid_argument("reduce: empty slice along axis " + std::to_string(axis));

    Shape out_shape = a.shape();
    out_shape[static_cast<std::size_t>(axis)] = 1;
    // collapse to (outer, axis_len, inner)
    std::int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= a.dim(i);
    for (int i = axis + 1; i < a.rank(); ++i) inner *= a.dim(i);
    const std::int64_t len = a.dim(axis);
    const double denom = kind == Reduce::mean ? static_cast<double>(len) : 1.0;

    Tensor out = Tensor::zeros(out_shape);
    const double* pa = a.data();
    double* po = out.data();
    for (std::int64_t o = 0; o < outer; ++o)
        for (std::int64_t k = 0; k < len; ++k)
            for (std::int64_t i = 0; i < inner; ++i) po[o * inner + i] += pa[(o * len + k) * inner + i];
    if (denom != 1.0) out.array() /= denom;

    auto tc = OpRecorder::active_tape({&a});
    if (tc) {
        const int sa = OpRecorder::slot_on(tc, a);
        const int out_slot = OpRecorder::attach(tc, out);
        tc->nodes.back().fn = [sa, outer, inner, len, denom, out_slot](detail::TapeCore& core) {
            if (sa < 0) return;
            const double* g = core.grad_buf(out_slot).data();
            double* ga = core.grad_buf(sa).data();
            for (std::int64_t o = 0; o < outer; ++o)
                for (std::int64_t k = 0; k < len; ++k)
                    for (std::int64_t i = 0; i < inner; ++i) ga[(o * len + k) * inner + i] += g[o * inner + i] / denom;
        };
    }
    return out;
}

inline Tensor sum(const Tensor& a) { return reduce(a, Reduce::sum); }
inline Tensor mean(const Tensor& a) { return reduce(a, Reduce::mean); }
inline Tensor sum(const Tensor& a, int axis) { return reduce(a, Reduce::sum, axis); }
inline Tensor mean(const Tensor& a, int axis) { return reduce(a, Reduce::mean, axis); }

/// Reparameterized Gaussian: out = mean + std .* eps, eps ~ N(0, I).
/// Gradients flow through mean and std, never through eps. An exactly-zero
/// std copies the mean bit-for-bit.
inline Tensor gaussian_sample(const Tensor& mean_t, const Tensor& std_t, RngStream& rng) {
    if (mean_t.shape() != std_t.shape())
        throw std::invalid_argument("gaussian_sample: mean shape " + detail::shape_str(mean_t.shape()) +
                                    " != std shape " + detail::shape_str(std_t.shape()));
    for (std::int64_t i = 0; i < std_t.size(); ++i)
        if (std_t[i] < 0.0) throw std::invalid_argument("gaussian_sample: negative std at index " + std::to_string(i));

    auto eps = std::make_shared<detail::DVec>(static_cast<std::size_t>(mean_t.size()));
    detail::fill_gaussian_bulk(rng, eps->data(), mean_t.size());

    Tensor out = Tensor::empty(mean_t.shape());
    const double* pm = mean_t.data();
    const double* ps = std_t.data();
    double* po = out.data();
    for (std::int64_t i = 0; i < out.size(); ++i) po[i] = ps[i] == 0.0 ? pm[i] : pm[i] + ps[i] * (*eps)[static_cast<std::size_t>(i)];

    auto tc = OpRecorder::active_tape({&mean_t, &std_t});
    if (tc) {
        const int sm = OpRecorder::slot_on(tc, mean_t), ss = OpRecorder::slot_on(tc, std_t);
        const std::int64_t n = out.size();
        const int out_slot = OpRecorder::attach(tc, out);
        tc->nodes.back().fn = [eps, sm, ss, n, out_slot](detail::TapeCore& core) {
            Eigen::Map<const Eigen::ArrayXd> g(core.grad_buf(out_slot).data(), n);
            if (sm >= 0) {
                Eigen::Map<Eigen::ArrayXd> gm(core.grad_buf(sm).data(), n);
                gm += g;
            }
            if (ss >= 0) {
                Eigen::Map<Eigen::ArrayXd> gs(core.grad_buf(ss).data(), n);
                Eigen::Map<const Eigen::ArrayXd> e(eps->data(), n);
                gs += g * e;
            }
        };
    }
    return out;
}

/// Select rows of a [N x d] tensor: out[k] = a[index[k]].
inline Tensor gather_rows(const Tensor& a, const std::vector<std::int64_t>& index) {
    if (a.rank() != 2) throw std::invalid_argument("gather_rows: expected rank-2 input");
    const std::int64_t d = a.dim(1);
    Tensor out = Tensor::empty({static_cast<std::int64_t>(index.size()), d});
    const double* pa = a.data();
    double* po = out.data();
    for (std::size_t k = 0; k < index.size(); ++k) {
        const std::int64_t r = index[k];
        if (r < 0 || r >= a.dim(0)) throw std::invalid_argument("gather_rows: index out of range");
        std::copy(pa + r * d, pa + (r + 1) * d, po + static_cast<std::int64_t>(k) * d);
    }
    auto tc = OpRecorder::active_tape({&a});
    if (tc) {
        const int sa = OpRecorder::slot_on(tc, a);
        const int out_slot = OpRecorder::attach(tc, out);
        tc->nodes.back().fn = [index, sa, d, out_slot](detail::TapeCore& core) {
            if (sa < 0) return;
            const double* g = core.grad_buf(out_slot).data();
            double* ga = core.grad_buf(sa).data();
            for (std::size_t k = 0; k < index.size(); ++k) {
                const std::int64_t r = index[k];
                for (std::int64_t j = 0; j < d; ++j) ga[r * d + j] += g[static_cast<std::int64_t>(k) * d + j];
            }
        };
    }
    return out;
}

/// Sum rows of a [K x d] tensor into n_rows bins: out[index[k]] += a[k].
inline Tensor scatter_sum_rows(const Tensor& a, const std::vector<std::int64_t>& index, std::int64_t n_rows) {
    if (a.rank() != 2) throw std::invalid_argument("scatter_sum_rows: expected rank-2 input");
    if (static_cast<std::int64_t>(index.size()) != a.dim(0))
        throw std::invalid_argument("scatter_sum_rows: index length does not match rows");
    const std::int64_t d = a.dim(1);
    Tensor out = Tensor::zeros({n_rows, d});
    const double* pa = a.data();
    double* po = out.data();
    for (std::size_t k = 0; k < index.size(); ++k) {
        const std::int64_t r = index[k];
        if (r < 0 || r >= n_rows) throw std::invalid_argument("scatter_sum_rows: index out of range");
        for (std::int64_t j = 0; j < d; ++j) po[r * d + j] += pa[static_cast<std::int64_t>(k) * d + j];
    }
    auto tc = OpRecorder::active_tape({&a});
    if (tc) {
        const int sa = OpRecorder::slot_on(tc, a);
        const int out_slot = OpRecorder::attach(tc, out);
        tc->nodes.back().fn = [index, sa, d, out_slot](detail::TapeCore& core) {
            if (sa < 0) return;
            const double* g = core.grad_buf(out_slot).data();
            double* ga = core.grad_buf(sa).data();
            for (std::size_t k = 0; k < index.size(); ++k) {
                const std::int64_t r = index[k];
                for (std::int64_t j = 0; j < d; ++j) ga[static_cast<std::int64_t>(k) * d + j] += g[r * d + j];
            }
        };
    }
    return out;
}

/// Concatenate rank-2 tensors along columns.
inline Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
    const std::int64_t r = parts[0].dim(0);
    std::int64_t total = 0;
    for (const auto& p : parts) {
        if (p.rank() != 2 || p.dim(0) != r) throw std::invalid_argument("concat_cols: row counts differ");
        total += p.dim(1);
    }
    Tensor out = Tensor::empty({r, total});
    double* po = out.data();
    std::int64_t off = 0;
    for (const auto& p : parts) {
        const std::int64_t d = p.dim(1);
        const double* pp = p.data();
        for (std::int64_t i = 0; i < r; ++i) std::copy(pp + i * d, pp + (i + 1) * d, po + i * total + off);
        off += d;
    }

    std::shared_ptr<detail::TapeCore> tc;
    for (const auto& p : parts) {
        auto t = OpRecorder::active_tape({&p});
        if (t) {
            if (tc && t != tc) throw std::invalid_argument("concat_cols: inputs on different tapes");
            tc = t;
        }
    }
    if (tc) {
        std::vector<int> slots;
        std::vector<std::int64_t> widths;
        for (const auto& p : parts) {
            slots.push_back(OpRecorder::slot_on(tc, p));
            widths.push_back(p.dim(1));
        }
        const int out_slot = OpRecorder::attach(tc, out);
        tc->nodes.back().fn = [slots, widths, r, total, out_slot](detail::TapeCore& core) {
            const double* g = core.grad_buf(out_slot).data();
            std::int64_t off2 = 0;
            for (std::size_t k = 0; k < slots.size(); ++k) {
                const std::int64_t d = widths[k];
                if (slots[k] >= 0) {
                    double* ga = core.grad_buf(slots[k]).data();
                    for (std::int64_t i = 0; i < r; ++i)
                        for (std::int64_t j = 0; j < d; ++j) ga[i * d + j] += g[i * total + off2 + j];
                }
                off2 += d;
            }
        };
    }
    return out;
}

/// Same data, new shape (element count must match). Values are copied.
inline Tensor reshape(const Tensor& a, Shape shape) {
    if (detail::shape_numel(shape) != a.size())
        throw std::invalid_argument("reshape: cannot view " + detail::shape_str(a.shape()) + " as " +
                                    detail::shape_str(shape));
    Tensor out = Tensor::empty(std::move(shape));
    std::copy(a.data(), a.data() + a.size(), out.data());
    auto tc = OpRecorder::active_tape({&a});
    if (tc) {
        const int sa = OpRecorder::slot_on(tc, a);
        const std::int64_t n = a.size();
        const int out_slot = OpRecorder::attach(tc, out);
        tc->nodes.back().fn = [sa, n, out_slot](detail::TapeCore& core) {
            if (sa < 0) return;
            Eigen::Map<const Eigen::ArrayXd> g(core.grad_buf(out_slot).data(), n);
            Eigen::Map<Eigen::ArrayXd> ga(core.grad_buf(sa).data(), n);
            ga += g;
        };
    }
    return out;
}

}  // namespace blip

#include "transnetr/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace transnetr {

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

std::int64_t shape_numel(const Shape& shape) {
    std::int64_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

namespace {

void check_shape_positive(const Shape& shape, const char* where) {
    for (auto d : shape) {
        if (d <= 0) {
            throw std::invalid_argument(std::string(where) + ": dimensions must be positive, got " +
                                        shape_str(shape));
        }
    }
}

}  // namespace

// ------------------------------------------------------------------ TensorNode

template <class T>
void TensorNode<T>::accumulate(const T* g, std::size_t n) {
    if (!requires_grad) return;
    if (n != data.size()) {
        throw std::runtime_error("gradient size mismatch: got " + std::to_string(n) + " for tensor " +
                                 shape_str(shape));
    }
    if (grad.empty()) grad.assign(data.size(), T(0));
    for (std::size_t i = 0; i < n; ++i) grad[i] += g[i];
}

// ------------------------------------------------------------------ TensorT

template <class T>
TensorT<T> TensorT<T>::zeros(Shape shape, bool requires_grad) {
    return full(std::move(shape), T(0), requires_grad);
}

template <class T>
TensorT<T> TensorT<T>::full(Shape shape, T value, bool requires_grad) {
    check_shape_positive(shape, "Tensor::full");
    auto node = std::make_shared<TensorNode<T>>();
    node->data.assign(static_cast<std::size_t>(shape_numel(shape)), value);
    node->shape = std::move(shape);
    node->requires_grad = requires_grad;
    return TensorT(std::move(node));
}

template <class T>
TensorT<T> TensorT<T>::from_vector(Shape shape, std::vector<T> values, bool requires_grad) {
    check_shape_positive(shape, "Tensor::from_vector");
    if (shape_numel(shape) != static_cast<std::int64_t>(values.size())) {
        throw std::invalid_argument("Tensor::from_vector: shape " + shape_str(shape) + " needs " +
                                    std::to_string(shape_numel(shape)) + " values, got " +
                                    std::to_string(values.size()));
    }
    auto node = std::make_shared<TensorNode<T>>();
    node->shape = std::move(shape);
    node->data = std::move(values);
    node->requires_grad = requires_grad;
    return TensorT(std::move(node));
}

template <class T>
TensorT<T> TensorT<T>::scalar(T value, bool requires_grad) {
    return from_vector({1}, {value}, requires_grad);
}

template <class T>
const Shape& TensorT<T>::shape() const {
    if (!node_) throw std::runtime_error("use of undefined tensor");
    return node_->shape;
}

template <class T>
std::int64_t TensorT<T>::dim(std::size_t axis) const {
    const Shape& s = shape();
    if (axis >= s.size()) {
        throw std::invalid_argument("Tensor::dim: axis " + std::to_string(axis) + " out of range for " +
                                    shape_str(s));
    }
    return s[axis];
}

template <class T>
std::int64_t TensorT<T>::numel() const {
    if (!node_) throw std::runtime_error("use of undefined tensor");
    return node_->numel();
}

template <class T>
const std::vector<T>& TensorT<T>::values() const {
    if (!node_) throw std::runtime_error("use of undefined tensor");
    return node_->data;
}

template <class T>
std::vector<T>& TensorT<T>::values() {
    if (!node_) throw std::runtime_error("use of undefined tensor");
    return node_->data;
}

template <class T>
bool TensorT<T>::requires_grad() const {
    return node_ && node_->requires_grad;
}

template <class T>
void TensorT<T>::set_requires_grad(bool flag) {
    if (!node_) throw std::runtime_error("use of undefined tensor");
    node_->requires_grad = flag;
    if (!flag) node_->grad.clear();
}

template <class T>
bool TensorT<T>::has_grad() const {
    return node_ && node_->has_grad();
}

template <class T>
const std::vector<T>& TensorT<T>::grad() const {
    if (!has_grad()) {
        throw std::runtime_error("tensor " + (node_ ? shape_str(node_->shape) : std::string("<undefined>")) +
                                 " has no gradient");
    }
    return node_->grad;
}

template <class T>
void TensorT<T>::zero_grad() {
    if (node_) node_->grad.clear();
}

template <class T>
T TensorT<T>::item() const {
    if (numel() != 1) {
        throw std::runtime_error("item(): tensor " + shape_str(shape()) + " is not a scalar");
    }
    return node_->data[0];
}

template <class T>
T TensorT<T>::at(std::initializer_list<std::int64_t> index) const {
    const Shape& s = shape();
    if (index.size() != s.size()) {
        throw std::invalid_argument("at(): rank mismatch for " + shape_str(s));
    }
    std::int64_t flat = 0;
    std::size_t k = 0;
    for (auto i : index) {
        if (i < 0 || i >= s[k]) throw std::out_of_range("at(): index out of bounds for " + shape_str(s));
        flat = flat * s[k] + i;
        ++k;
    }
    return node_->data[static_cast<std::size_t>(flat)];
}

template <class T>
TensorT<T> TensorT<T>::detached_copy() const {
    if (!node_) return {};
    return from_vector(node_->shape, node_->data, false);
}

// ------------------------------------------------------------------ TapeT

namespace {
template <class T>
TapeT<T>*& tape_slot() {
    thread_local TapeT<T>* current = nullptr;
    return current;
}
}  // namespace

template <class T>
TapeT<T>::TapeT() {
    prev_ = tape_slot<T>();
    tape_slot<T>() = this;
}

template <class T>
TapeT<T>::~TapeT() {
    tape_slot<T>() = prev_;
}

template <class T>
TapeT<T>* TapeT<T>::current() {
    return tape_slot<T>();
}

template <class T>
void TapeT<T>::record(std::shared_ptr<TensorNode<T>> out,
                      std::function<void(const std::vector<T>&)> backward_fn) {
    steps_.push_back(Step{std::move(out), std::move(backward_fn)});
}

template <class T>
void TapeT<T>::backward(const TensorT<T>& loss) {
    if (!loss.defined() || loss.numel() != 1) {
        throw std::invalid_argument("backward: loss must be a scalar, got " +
                                    (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
    }
    const auto& loss_node = loss.node();
    bool produced_here = false;
    for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) {
        if (it->out == loss_node) {
            produced_here = true;
            break;
        }
    }
    if (!produced_here) {
        throw std::invalid_argument("backward: loss is not the output of any operation recorded on this graph");
    }
    loss_node->grad.assign(1, T(1));
    for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) {
        if (it->out->has_grad()) {
            it->backward_fn(it->out->grad);
        }
    }
}

// ------------------------------------------------------------------ op helpers

template <class T>
void ensure_finite(const char* op, const std::vector<T>& data) {
    for (const T& v : data) {
        if (!std::isfinite(v)) {
            throw std::runtime_error(std::string(op) + ": produced a non-finite value");
        }
    }
}

namespace {

template <class T>
bool grad_needed(std::initializer_list<const TensorT<T>*> inputs) {
    for (const auto* t : inputs) {
        if (t->defined() && t->requires_grad()) return true;
    }
    return false;
}

template <class T>
TensorT<T> make_result(const char* op, Shape shape, std::vector<T> data, bool requires_grad) {
    ensure_finite(op, data);
    auto out = TensorT<T>::from_vector(std::move(shape), std::move(data), requires_grad);
    return out;
}

template <class T, class Fn>
void record_if_needed(const TensorT<T>& out, Fn&& fn) {
    if (out.requires_grad()) {
        if (auto* tape = TapeT<T>::current()) {
            tape->record(out.node(), std::forward<Fn>(fn));
        }
    }
}

template <class T>
void check_same_shape(const char* op, const TensorT<T>& a, const TensorT<T>& b) {
    if (a.shape() != b.shape()) {
        throw std::invalid_argument(std::string(op) + ": shape mismatch, " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));
    }
}

}  // namespace

// ------------------------------------------------------------------ element-wise ops

template <class T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
    check_same_shape("add", a, b);
    const auto& av = a.values();
    const auto& bv = b.values();
    std::vector<T> out(av.size());
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] + bv[i];
    auto r = make_result("add", a.shape(), std::move(out), grad_needed<T>({&a, &b}));
    record_if_needed(r, [an = a.node(), bn = b.node()](const std::vector<T>& go) {
        an->accumulate(go.data(), go.size());
        bn->accumulate(go.data(), go.size());
    });
    return r;
}

template <class T>
TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b) {
    check_same_shape("sub", a, b);
    const auto& av = a.values();
    const auto& bv = b.values();
    std::vector<T> out(av.size());
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] - bv[i];
    auto r = make_result("sub", a.shape(), std::move(out), grad_needed<T>({&a, &b}));
    record_if_needed(r, [an = a.node(), bn = b.node()](const std::vector<T>& go) {
        an->accumulate(go.data(), go.size());
        if (bn->requires_grad) {
            std::vector<T> neg(go.size());
            for (std::size_t i = 0; i < go.size(); ++i) neg[i] = -go[i];
            bn->accumulate(neg.data(), neg.size());
        }
    });
    return r;
}

template <class T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) {
    check_same_shape("mul", a, b);
    const auto& av = a.values();
    const auto& bv = b.values();
    std::vector<T> out(av.size());
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * bv[i];
    auto r = make_result("mul", a.shape(), std::move(out), grad_needed<T>({&a, &b}));
    record_if_needed(r, [an = a.node(), bn = b.node()](const std::vector<T>& go) {
        if (an->requires_grad) {
            std::vector<T> g(go.size());
            for (std::size_t i = 0; i < go.size(); ++i) g[i] = go[i] * bn->data[i];
            an->accumulate(g.data(), g.size());
        }
        if (bn->requires_grad) {
            std::vector<T> g(go.size());
            for (std::size_t i = 0; i < go.size(); ++i) g[i] = go[i] * an->data[i];
            bn->accumulate(g.data(), g.size());
        }
    });
    return r;
}

template <class T>
TensorT<T> divide(const TensorT<T>& a, const TensorT<T>& b) {
    check_same_shape("divide", a, b);
    const auto& av = a.values();
    const auto& bv = b.values();
    std::vector<T> out(av.size());
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] / bv[i];
    auto r = make_result("divide", a.shape(), std::move(out), grad_needed<T>({&a, &b}));
    record_if_needed(r, [an = a.node(), bn = b.node()](const std::vector<T>& go) {
        if (an->requires_grad) {
            std::vector<T> g(go.size());
            for (std::size_t i = 0; i < go.size(); ++i) g[i] = go[i] / bn->data[i];
            an->accumulate(g.data(), g.size());
        }
        if (bn->requires_grad) {
            std::vector<T> g(go.size());
            for (std::size_t i = 0; i < go.size(); ++i) {
                g[i] = -go[i] * an->data[i] / (bn->data[i] * bn->data[i]);
            }
            bn->accumulate(g.data(), g.size());
        }
    });
    return r;
}

template <class T>
TensorT<T> scale(const TensorT<T>& a, T factor) {
    const auto& av = a.values();
    std::vector<T> out(av.size());
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * factor;
    auto r = make_result("scale", a.shape(), std::move(out), a.requires_grad());
    record_if_needed(r, [an = a.node(), factor](const std::vector<T>& go) {
        std::vector<T> g(go.size());
        for (std::size_t i = 0; i < go.size(); ++i) g[i] = go[i] * factor;
        an->accumulate(g.data(), g.size());
    });
    return r;
}

template <class T>
TensorT<T> offset(const TensorT<T>& a, T constant) {
    const auto& av = a.values();
    std::vector<T> out(av.size());
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] + constant;
    auto r = make_result("offset", a.shape(), std::move(out), a.requires_grad());
    record_if_needed(r, [an = a.node()](const std::vector<T>& go) {
        an->accumulate(go.data(), go.size());
    });
    return r;
}

template <class T>
TensorT<T> log_elem(const TensorT<T>& a) {
    const auto& av = a.values();
    std::vector<T> out(av.size());
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = std::log(av[i]);
    auto r = make_result("log", a.shape(), std::move(out), a.requires_grad());
    record_if_needed(r, [an = a.node()](const std::vector<T>& go) {
        std::vector<T> g(go.size());
        for (std::size_t i = 0; i < go.size(); ++i) g[i] = go[i] / an->data[i];
        an->accumulate(g.data(), g.size());
    });
    return r;
}

template <class T>
TensorT<T> clamp(const TensorT<T>& a, T lo, T hi) {
    if (!(lo <= hi)) throw std::invalid_argument("clamp: lo must be <= hi");
    const auto& av = a.values();
    std::vector<T> out(av.size());
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = std::min(hi, std::max(lo, av[i]));
    auto r = make_result("clamp", a.shape(), std::move(out), a.requires_grad());
    record_if_needed(r, [an = a.node(), lo, hi](const std::vector<T>& go) {
        std::vector<T> g(go.size());
        for (std::size_t i = 0; i < go.size(); ++i) {
            const T x = an->data[i];
            g[i] = (x >= lo && x <= hi) ? go[i] : T(0);
        }
        an->accumulate(g.data(), g.size());
    });
    return r;
}

// ------------------------------------------------------------------ reductions

template <class T>
TensorT<T> sum_all(const TensorT<T>& a) {
    const auto& av = a.values();
    T acc = 0;
    for (const T& v : av) acc += v;
    auto r = make_result("sum", Shape{1}, std::vector<T>{acc}, a.requires_grad());
    record_if_needed(r, [an = a.node()](const std::vector<T>& go) {
        std::vector<T> g(an->data.size(), go[0]);
        an->accumulate(g.data(), g.size());
    });
    return r;
}

template <class T>
TensorT<T> mean_all(const TensorT<T>& a) {
    const auto& av = a.values();
    T acc = 0;
    for (const T& v : av) acc += v;
    const T inv = T(1) / static_cast<T>(av.size());
    auto r = make_result("mean", Shape{1}, std::vector<T>{acc * inv}, a.requires_grad());
    record_if_needed(r, [an = a.node(), inv](const std::vector<T>& go) {
        std::vector<T> g(an->data.size(), go[0] * inv);
        an->accumulate(g.data(), g.size());
    });
    return r;
}

template <class T>
TensorT<T> sum_per_image(const TensorT<T>& a) {
    if (a.rank() < 1) throw std::invalid_argument("sum_per_image: rank must be >= 1");
    const std::int64_t n = a.dim(0);
    const std::int64_t block = a.numel() / n;
    const auto& av = a.values();
    std::vector<T> out(static_cast<std::size_t>(n), T(0));
    for (std::int64_t i = 0; i < n; ++i) {
        T acc = 0;
        const T* p = av.data() + i * block;
        for (std::int64_t j = 0; j < block; ++j) acc += p[j];
        out[static_cast<std::size_t>(i)] = acc;
    }
    auto r = make_result("sum_per_image", Shape{n}, std::move(out), a.requires_grad());
    record_if_needed(r, [an = a.node(), n, block](const std::vector<T>& go) {
        std::vector<T> g(an->data.size());
        for (std::int64_t i = 0; i < n; ++i) {
            std::fill_n(g.begin() + i * block, block, go[static_cast<std::size_t>(i)]);
        }
        an->accumulate(g.data(), g.size());
    });
    return r;
}

// ------------------------------------------------------------------ shape ops

template <class T>
TensorT<T> reshape(const TensorT<T>& a, Shape shape) {
    if (shape_numel(shape) != a.numel()) {
        throw std::invalid_argument("reshape: cannot view " + shape_str(a.shape()) + " as " +
                                    shape_str(shape));
    }
    auto r = make_result("reshape", std::move(shape), a.values(), a.requires_grad());
    record_if_needed(r, [an = a.node()](const std::vector<T>& go) {
        an->accumulate(go.data(), go.size());
    });
    return r;
}

namespace {

// Raw permute of row-major data; used by both directions of the op.
template <class T>
std::vector<T> permute_raw(const std::vector<T>& data, const Shape& shape,
                           const std::vector<std::size_t>& dims, Shape& out_shape) {
    const std::size_t rank = shape.size();
    out_shape.resize(rank);
    for (std::size_t i = 0; i < rank; ++i) out_shape[i] = shape[dims[i]];

    std::vector<std::int64_t> in_strides(rank, 1);
    for (std::size_t i = rank - 1; i > 0; --i) in_strides[i - 1] = in_strides[i] * shape[i];

    std::vector<std::int64_t> gather_strides(rank);
    for (std::size_t i = 0; i < rank; ++i) gather_strides[i] = in_strides[dims[i]];

    std::vector<T> out(data.size());
    std::vector<std::int64_t> idx(rank, 0);
    for (std::size_t flat = 0; flat < data.size(); ++flat) {
        std::int64_t src = 0;
        for (std::size_t i = 0; i < rank; ++i) src += idx[i] * gather_strides[i];
        out[flat] = data[static_cast<std::size_t>(src)];
        for (std::size_t i = rank; i-- > 0;) {
            if (++idx[i] < out_shape[i]) break;
            idx[i] = 0;
        }
    }
    return out;
}

}  // namespace

template <class T>
TensorT<T> permute(const TensorT<T>& a, const std::vector<std::size_t>& dims) {
    const std::size_t rank = a.rank();
    if (dims.size() != rank) throw std::invalid_argument("permute: dims rank mismatch");
    std::vector<bool> seen(rank, false);
    for (std::size_t d : dims) {
        if (d >= rank || seen[d]) throw std::invalid_argument("permute: dims must be a permutation");
        seen[d] = true;
    }
    Shape out_shape;
    auto out = permute_raw(a.values(), a.shape(), dims, out_shape);
    auto r = make_result("permute", std::move(out_shape), std::move(out), a.requires_grad());
    record_if_needed(r, [an = a.node(), dims, rshape = r.shape()](const std::vector<T>& go) {
        std::vector<std::size_t> inverse(dims.size());
        for (std::size_t i = 0; i < dims.size(); ++i) inverse[dims[i]] = i;
        Shape back_shape;
        auto g = permute_raw(go, rshape, inverse, back_shape);
        an->accumulate(g.data(), g.size());
    });
    return r;
}

// Matmul kernel lives in nn_ops.cpp (shared with linear); declared here.
template <class T>
void matmul_accumulate(const T* a, const T* b, T* c, std::int64_t m, std::int64_t k, std::int64_t p,
                       bool transpose_a, bool transpose_b);

template <class T>
TensorT<T> batched_matmul(const TensorT<T>& a, const TensorT<T>& b) {
    if (a.rank() < 2 || b.rank() < 2 || a.rank() != b.rank()) {
        throw std::invalid_argument("batched_matmul: ranks must match and be >= 2, got " +
                                    shape_str(a.shape()) + " and " + shape_str(b.shape()));
    }
    const std::size_t rank = a.rank();
    std::int64_t batch = 1;
    for (std::size_t i = 0; i + 2 < rank; ++i) {
        if (a.shape()[i] != b.shape()[i]) {
            throw std::invalid_argument("batched_matmul: batch dims differ, " + shape_str(a.shape()) +
                                        " vs " + shape_str(b.shape()));
        }
        batch *= a.shape()[i];
    }
    const std::int64_t m = a.shape()[rank - 2];
    const std::int64_t k = a.shape()[rank - 1];
    const std::int64_t p = b.shape()[rank - 1];
    if (b.shape()[rank - 2] != k) {
        throw std::invalid_argument("batched_matmul: inner dims differ, " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));
    }
    Shape out_shape = a.shape();
    out_shape[rank - 1] = p;
    std::vector<T> out(static_cast<std::size_t>(batch * m * p), T(0));
    const auto& av = a.values();
    const auto& bv = b.values();
    for (std::int64_t i = 0; i < batch; ++i) {
        matmul_accumulate(av.data() + i * m * k, bv.data() + i * k * p, out.data() + i * m * p, m, k, p,
                          false, false);
    }
    auto r = make_result("batched_matmul", std::move(out_shape), std::move(out),
                         grad_needed<T>({&a, &b}));
    record_if_needed(r, [an = a.node(), bn = b.node(), batch, m, k, p](const std::vector<T>& go) {
        if (an->requires_grad) {
            std::vector<T> g(an->data.size(), T(0));
            for (std::int64_t i = 0; i < batch; ++i) {
                // dA = go . B^T
                matmul_accumulate(go.data() + i * m * p, bn->data.data() + i * k * p, g.data() + i * m * k,
                                  m, p, k, false, true);
            }
            an->accumulate(g.data(), g.size());
        }
        if (bn->requires_grad) {
            std::vector<T> g(bn->data.size(), T(0));
            for (std::int64_t i = 0; i < batch; ++i) {
                // dB = A^T . go
                matmul_accumulate(an->data.data() + i * m * k, go.data() + i * m * p, g.data() + i * k * p,
                                  k, m, p, true, false);
            }
            bn->accumulate(g.data(), g.size());
        }
    });
    return r;
}

// ------------------------------------------------------------------ instantiations

#define TRANSNETR_INSTANTIATE_TENSOR(T)                                                        \
    template struct TensorNode<T>;                                                             \
    template class TensorT<T>;                                                                 \
    template class TapeT<T>;                                                                   \
    template void ensure_finite<T>(const char*, const std::vector<T>&);                        \
    template TensorT<T> add<T>(const TensorT<T>&, const TensorT<T>&);                          \
    template TensorT<T> sub<T>(const TensorT<T>&, const TensorT<T>&);                          \
    template TensorT<T> mul<T>(const TensorT<T>&, const TensorT<T>&);                          \
    template TensorT<T> divide<T>(const TensorT<T>&, const TensorT<T>&);                       \
    template TensorT<T> scale<T>(const TensorT<T>&, T);                                        \
    template TensorT<T> offset<T>(const TensorT<T>&, T);                                       \
    template TensorT<T> log_elem<T>(const TensorT<T>&);                                        \
    template TensorT<T> clamp<T>(const TensorT<T>&, T, T);                                     \
    template TensorT<T> sum_all<T>(const TensorT<T>&);                                         \
    template TensorT<T> mean_all<T>(const TensorT<T>&);                                        \
    template TensorT<T> sum_per_image<T>(const TensorT<T>&);                                   \
    template TensorT<T> reshape<T>(const TensorT<T>&, Shape);                                  \
    template TensorT<T> permute<T>(const TensorT<T>&, const std::vector<std::size_t>&);        \
    template TensorT<T> batched_matmul<T>(const TensorT<T>&, const TensorT<T>&);

TRANSNETR_INSTANTIATE_TENSOR(float)
TRANSNETR_INSTANTIATE_TENSOR(double)

#undef TRANSNETR_INSTANTIATE_TENSOR

}  // namespace transnetr

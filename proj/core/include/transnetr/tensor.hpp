#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace transnetr {

using Shape = std::vector<std::int64_t>;

std::string shape_str(const Shape& shape);
std::int64_t shape_numel(const Shape& shape);

// Dense n-d array node. Data is row-major; grad is empty until something
// accumulates into it during backward.
template <class T>
struct TensorNode {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;
    bool requires_grad = false;

    std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
    bool has_grad() const { return !grad.empty(); }
    void accumulate(const T* g, std::size_t n);
};

// Value handle over a shared node. Copies are cheap and alias the same
// storage; op outputs are treated as immutable once produced.
template <class T>
class TensorT {
public:
    TensorT() = default;

    static TensorT zeros(Shape shape, bool requires_grad = false);
    static TensorT full(Shape shape, T value, bool requires_grad = false);
    static TensorT from_vector(Shape shape, std::vector<T> values, bool requires_grad = false);
    static TensorT scalar(T value, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const;
    std::size_t rank() const { return shape().size(); }
    std::int64_t dim(std::size_t axis) const;
    std::int64_t numel() const;

    const std::vector<T>& values() const;
    std::vector<T>& values();  // in-place mutation; reserved for init, optimizers and buffers

    bool requires_grad() const;
    void set_requires_grad(bool flag);
    bool has_grad() const;
    const std::vector<T>& grad() const;
    void zero_grad();

    T item() const;
    T at(std::initializer_list<std::int64_t> index) const;

    TensorT detached_copy() const;

    const std::shared_ptr<TensorNode<T>>& node() const { return node_; }
    static TensorT wrap(std::shared_ptr<TensorNode<T>> node) { return TensorT(std::move(node)); }

private:
    explicit TensorT(std::shared_ptr<TensorNode<T>> node) : node_(std::move(node)) {}
    std::shared_ptr<TensorNode<T>> node_;
};

// Define-by-run gradient tape. Constructing one makes it the active graph
// for the current thread (they nest); ops executed while it is active append
// their backward rules in execution order. Graphs are one-shot: run forward,
// call backward once, destroy.
template <class T>
class TapeT {
public:
    TapeT();
    ~TapeT();
    TapeT(const TapeT&) = delete;
    TapeT& operator=(const TapeT&) = delete;

    std::size_t size() const { return steps_.size(); }

    // Seeds d(loss)/d(loss) = 1 and walks the recorded steps in reverse,
    // accumulating into the grad of every requires_grad ancestor.
    void backward(const TensorT<T>& loss);

    static TapeT* current();

    void record(std::shared_ptr<TensorNode<T>> out,
                std::function<void(const std::vector<T>&)> backward_fn);

private:
    struct Step {
        std::shared_ptr<TensorNode<T>> out;
        std::function<void(const std::vector<T>&)> backward_fn;
    };
    std::vector<Step> steps_;
    TapeT* prev_ = nullptr;
};

using Tensor = TensorT<float>;
using Tape = TapeT<float>;

// ----------------------------------------------------------------- element-wise
template <class T> TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b);
template <class T> TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b);
template <class T> TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b);
template <class T> TensorT<T> divide(const TensorT<T>& a, const TensorT<T>& b);
template <class T> TensorT<T> scale(const TensorT<T>& a, T factor);
template <class T> TensorT<T> offset(const TensorT<T>& a, T constant);
template <class T> TensorT<T> log_elem(const TensorT<T>& a);
template <class T> TensorT<T> clamp(const TensorT<T>& a, T lo, T hi);

// ----------------------------------------------------------------- reductions
template <class T> TensorT<T> sum_all(const TensorT<T>& a);
template <class T> TensorT<T> mean_all(const TensorT<T>& a);
// N x ... -> N; sums everything but the leading axis.
template <class T> TensorT<T> sum_per_image(const TensorT<T>& a);

// ----------------------------------------------------------------- shape
template <class T> TensorT<T> reshape(const TensorT<T>& a, Shape shape);
template <class T> TensorT<T> permute(const TensorT<T>& a, const std::vector<std::size_t>& dims);
// [B..., M, K] x [B..., K, P] -> [B..., M, P]; leading dims must match.
template <class T> TensorT<T> batched_matmul(const TensorT<T>& a, const TensorT<T>& b);

// Throws if any element is NaN/Inf; every op calls this on its output so a
// non-finite value surfaces at the op that produced it.
template <class T> void ensure_finite(const char* op, const std::vector<T>& data);

}  // namespace transnetr

#include "transnetr/gradcheck.hpp"

#include <cmath>
#include <stdexcept>

namespace transnetr {

template <class T>
T finite_diff_check(const std::function<TensorT<T>(const TensorT<T>&)>& f, const TensorT<T>& x, T eps) {
    if (!(eps > T(0))) throw std::invalid_argument("finite_diff_check: eps must be > 0");

    TensorT<T> probe = x.detached_copy();
    probe.set_requires_grad(true);
    std::vector<T> analytic;
    {
        TapeT<T> tape;
        TensorT<T> y = f(probe);
        if (y.numel() != 1) {
            throw std::invalid_argument("finite_diff_check: f must be scalar-valued, got " +
                                        shape_str(y.shape()));
        }
        tape.backward(y);
        analytic = probe.has_grad() ? probe.grad() : std::vector<T>(probe.values().size(), T(0));
    }

    TensorT<T> work = x.detached_copy();
    auto& wv = work.values();
    T max_rel = 0;
    for (std::size_t i = 0; i < wv.size(); ++i) {
        const T saved = wv[i];
        wv[i] = saved + eps;
        const T up = f(work).item();
        wv[i] = saved - eps;
        const T down = f(work).item();
        wv[i] = saved;
        const T numeric = (up - down) / (2 * eps);
        const T a = analytic[i];
        const T denom = std::max({std::abs(a), std::abs(numeric), T(1e-8)});
        max_rel = std::max(max_rel, std::abs(a - numeric) / denom);
    }
    return max_rel;
}

template float finite_diff_check<float>(const std::function<TensorT<float>(const TensorT<float>&)>&,
                                        const TensorT<float>&, float);
template double finite_diff_check<double>(const std::function<TensorT<double>(const TensorT<double>&)>&,
                                          const TensorT<double>&, double);

}  // namespace transnetr

#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

namespace radq {

// Dense (channels, height, width) tensor, row-major, w fastest.
template <class T>
struct Tensor3 {
    int c = 0, h = 0, w = 0;
    std::vector<T> v;

    Tensor3() = default;
    Tensor3(int c_, int h_, int w_, T fill = T{})
        : c(c_), h(h_), w(w_), v(static_cast<std::size_t>(c_) * h_ * w_, fill) {}

    std::size_t size() const { return v.size(); }
    std::size_t idx(int ci, int y, int x) const {
        return (static_cast<std::size_t>(ci) * h + y) * w + x;
    }
    T& at(int ci, int y, int x) { return v[idx(ci, y, x)]; }
    const T& at(int ci, int y, int x) const { return v[idx(ci, y, x)]; }
    T* channel(int ci) { return v.data() + static_cast<std::size_t>(ci) * h * w; }
    const T* channel(int ci) const { return v.data() + static_cast<std::size_t>(ci) * h * w; }

    void fill(T value) { v.assign(v.size(), value); }

    bool all_finite() const {
        for (const T& x : v)
            if (!std::isfinite(static_cast<double>(x))) return false;
        return true;
    }

    template <class U>
    Tensor3<U> cast() const {
        Tensor3<U> out(c, h, w);
        for (std::size_t i = 0; i < v.size(); ++i) out.v[i] = static_cast<U>(v[i]);
        return out;
    }

    bool operator==(const Tensor3&) const = default;
};

using Tensor3f = Tensor3<float>;
using Tensor3d = Tensor3<double>;

// Mirror an index into [0, n): symmetric reflection that repeats the edge
// sample (-1 -> 0, n -> n-1). Shared by patch extraction, rotation padding
// and median pooling so every boundary uses one convention.
inline int reflect_index(int i, int n) {
    if (n == 1) return 0;
    while (i < 0 || i >= n) {
        if (i < 0) i = -i - 1;
        if (i >= n) i = 2 * n - 1 - i;
    }
    return i;
}

} // namespace radq

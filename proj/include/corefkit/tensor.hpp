#pragma once

#include <cstddef>
#include <vector>

namespace corefkit {

// Row-major dense matrix of 64-bit floats.
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}

    double* row(std::size_t r) { return data.data() + r * cols; }
    const double* row(std::size_t r) const { return data.data() + r * cols; }

    double& at(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    double at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

    void zero() { data.assign(data.size(), 0.0); }
};

// out[0..out_dim) = W.row-block * x + b, with W shaped (out_dim, in_dim).
inline void affine(const Matrix& w, const double* bias, const double* x, double* out) {
    for (std::size_t o = 0; o < w.rows; ++o) {
        const double* wrow = w.row(o);
        double acc = bias != nullptr ? bias[o] : 0.0;
        for (std::size_t i = 0; i < w.cols; ++i) {
            acc += wrow[i] * x[i];
        }
        out[o] = acc;
    }
}

} // namespace corefkit

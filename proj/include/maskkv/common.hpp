// Copyright 2026 The maskkv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace maskkv {

/// Base of every error raised by the library. The CLI maps subclasses onto
/// exit codes, so new failure kinds should derive from one of them.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

/// Decoding-loop contract violation (state/step/logit coverage).
class ProtocolError : public Error {
public:
    using Error::Error;
};

class CacheError : public Error {
public:
    using Error::Error;
};

class NumericError : public Error {
public:
    using Error::Error;
};

class ComparisonError : public Error {
public:
    using Error::Error;
};

/// A file could not be opened, read or written.
class InputError : public Error {
public:
    using Error::Error;
};

class ParseError : public Error {
public:
    ParseError(std::size_t offset, const std::string& what)
        : Error("parse error at offset " + std::to_string(offset) + ": " + what), offset_(offset) {}

    std::size_t offset() const noexcept { return offset_; }

private:
    std::size_t offset_;
};

/// Collects non-fatal notes (degenerate inputs that were resolved by a
/// documented fallback). Passing nullptr where a RunLog* is accepted drops them.
struct RunLog {
    std::vector<std::string> entries;

    void note(std::string msg) { entries.push_back(std::move(msg)); }
    bool empty() const noexcept { return entries.empty(); }
};

inline void log_note(RunLog* log, std::string msg) {
    if (log != nullptr) {
        log->note(std::move(msg));
    }
}

/// Dense row-major matrix of doubles.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    bool empty() const noexcept { return data_.empty(); }

    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

    std::vector<double>& data() noexcept { return data_; }
    const std::vector<double>& data() const noexcept { return data_; }

    bool operator==(const Matrix&) const = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

inline double dot(std::span<const double> a, std::span<const double> b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        acc += a[i] * b[i];
    }
    return acc;
}

inline double l2_norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

/// Cosine similarity, or `fallback` when either vector has zero norm.
inline double cosine_or(std::span<const double> a, std::span<const double> b, double fallback, bool* degenerate = nullptr) {
    const double na = l2_norm(a);
    const double nb = l2_norm(b);
    if (na == 0.0 || nb == 0.0) {
        if (degenerate != nullptr) {
            *degenerate = true;
        }
        return fallback;
    }
    // Rounding can push the ratio just outside [-1, 1].
    return std::clamp(dot(a, b) / (na * nb), -1.0, 1.0);
}

/// Numerically stable in-place softmax with a fixed left-to-right reduction.
inline void softmax_inplace(std::span<double> v) {
    if (v.empty()) {
        return;
    }
    double mx = v[0];
    for (double x : v) {
        mx = x > mx ? x : mx;
    }
    double sum = 0.0;
    for (double& x : v) {
        x = std::exp(x - mx);
        sum += x;
    }
    for (double& x : v) {
        x /= sum;
    }
}

/// floor() that forgives representation error just below an integer, so
/// 44.99999999999999 (meant as 45) floors to 45.
inline long long robust_floor(double x) {
    const double eps = 1e-9 * (std::abs(x) > 1.0 ? std::abs(x) : 1.0);
    return static_cast<long long>(std::floor(x + eps));
}

/// Formats a double with printf-style `%.<digits>g`.
inline std::string format_g(double v, int digits) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.*g", digits, v);
    return buf;
}

inline std::string format_fixed(double v, int decimals) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.*f", decimals, v);
    return buf;
}

}  // namespace maskkv

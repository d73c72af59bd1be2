#pragma once

// Shared error types, shape helpers and small utilities used across tevlab.

#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <cmath>
#include <numeric>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace tevlab {

using Shape = std::vector<std::size_t>;

// ----------------------------------------------------------------------
// Error hierarchy. Every failure mode surfaces as a typed exception with
// a message naming the offending value; nothing is reported silently.
// ----------------------------------------------------------------------

struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Shape / dimension mismatch between tensors.
struct DimensionError : Error {
    using Error::Error;
};

/// Argument outside the mathematical domain of an operation.
struct DomainError : Error {
    using Error::Error;
};

/// Out-of-range index (token ids, tensor indices).
struct IndexError : Error {
    using Error::Error;
};

/// API contract violation (wrong variant, root not scalar, ...).
struct ContractError : Error {
    using Error::Error;
};

/// Invalid model or training configuration; message names the violated invariant.
struct ConfigError : Error {
    using Error::Error;
};

/// Input data unusable (corpus too short, ...).
struct DataError : Error {
    using Error::Error;
};

/// File I/O failure (missing file, short write).
struct IoError : Error {
    using Error::Error;
};

/// Structured parse failure; carries the byte position of the defect when known.
struct ParseError : Error {
    std::size_t byte_pos;
    ParseError(const std::string& msg, std::size_t pos = 0)
        : Error(msg), byte_pos(pos) {}
};

/// A training step produced a non-finite value; carries the first offending
/// parameter name. Divergence is a recorded outcome, not a crash.
struct DivergedError : Error {
    std::string param_name;
    explicit DivergedError(const std::string& param)
        : Error("non-finite gradient in parameter '" + param + "'"),
          param_name(param) {}
};

// ----------------------------------------------------------------------
// Shape helpers
// ----------------------------------------------------------------------

inline std::size_t shape_numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1},
                           std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << ", ";
        os << s[i];
    }
    os << "]";
    return os.str();
}

// ----------------------------------------------------------------------
// Numeric formatting: 17 significant digits round-trips any 64-bit float.
// ----------------------------------------------------------------------

inline std::string format_g17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

template <typename Real>
inline bool all_finite(const std::vector<Real>& v) {
    for (Real x : v) {
        if (!std::isfinite(static_cast<double>(x))) return false;
    }
    return true;
}

// Index of the first non-finite entry, if any.
template <typename Real>
inline std::optional<std::size_t> first_nonfinite(const std::vector<Real>& v) {
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (!std::isfinite(static_cast<double>(v[i]))) return i;
    }
    return std::nullopt;
}

// ----------------------------------------------------------------------
// Thread budget for matmul row-partitioning. One logical thread of control
// per run; results are bit-identical for any thread count because each
// output row keeps a fixed accumulation order.
// ----------------------------------------------------------------------

inline int& num_threads_ref() {
    static int n = 1;
    return n;
}

inline void set_num_threads(int n) { num_threads_ref() = n < 1 ? 1 : n; }
inline int num_threads() { return num_threads_ref(); }

}  // namespace tevlab

#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace fave {

#ifdef FAVE_REAL32
using real = float;
#else
using real = double;
#endif

using i64 = std::int64_t;
using u32 = std::uint32_t;
using u64 = std::uint64_t;

// Base for everything thrown by the library; subcategories let callers
// distinguish bad input data from numeric blowups and bad files.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

struct ShapeError : Error {
    explicit ShapeError(const std::string& msg) : Error("shape: " + msg) {}
};

struct NumericError : Error {
    explicit NumericError(const std::string& msg) : Error("numeric: " + msg) {}
};

struct DataError : Error {
    explicit DataError(const std::string& msg) : Error("data: " + msg) {}
};

struct ConfigError : Error {
    explicit ConfigError(const std::string& msg) : Error("config: " + msg) {}
};

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw Error(msg);
}

}  // namespace fave

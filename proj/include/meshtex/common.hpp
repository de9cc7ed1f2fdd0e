#pragma once

#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>

namespace meshtex {

struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

struct NumericalError : std::runtime_error {
    explicit NumericalError(const std::string& msg) : std::runtime_error(msg) {}
};

struct TopologyError : std::runtime_error {
    explicit TopologyError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

struct DivergenceError : std::runtime_error {
    explicit DivergenceError(const std::string& msg) : std::runtime_error(msg) {}
};

namespace detail {
inline void format_into(std::ostringstream&) {}
template <typename A, typename... Rest>
void format_into(std::ostringstream& os, const A& a, const Rest&... rest) {
    os << a;
    format_into(os, rest...);
}
}  // namespace detail

template <typename... Args>
std::string cat(const Args&... args) {
    std::ostringstream os;
    detail::format_into(os, args...);
    return os.str();
}

}  // namespace meshtex

#define MESHTEX_CHECK(cond, ExceptionType, ...)                      \
    do {                                                             \
        if (!(cond)) throw ExceptionType(::meshtex::cat(__VA_ARGS__)); \
    } while (0)

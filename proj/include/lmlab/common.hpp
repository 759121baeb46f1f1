#pragma once

#include <stdexcept>
#include <string>

namespace lmlab {

// Error taxonomy, mapped to process exit codes by the CLI:
//   ConfigError -> 2, NumericalFailure -> 3, GuardRefusal -> 4.
// ContractViolation signals a broken precondition inside library code.

struct ContractViolation : std::runtime_error {
    explicit ContractViolation(const std::string& msg) : std::runtime_error(msg) {}
};

struct NumericalFailure : std::runtime_error {
    explicit NumericalFailure(const std::string& msg) : std::runtime_error(msg) {}
};

struct GuardRefusal : std::runtime_error {
    explicit GuardRefusal(const std::string& msg) : std::runtime_error(msg) {}
};

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// const char* overload keeps the passing path free of string construction
inline void require(bool cond, const char* msg) {
    if (!cond) {
        throw ContractViolation(msg);
    }
}

inline void require(bool cond, const std::string& msg) {
    if (!cond) {
        throw ContractViolation(msg);
    }
}

}  // namespace lmlab

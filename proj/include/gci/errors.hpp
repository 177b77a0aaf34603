#ifndef GCI_ERRORS_HPP_
#define GCI_ERRORS_HPP_

#include <stdexcept>
#include <string>

namespace gci {

// Bad run configuration, dataset spec, or CLI usage. CLI maps this to exit code 2.
class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Filesystem / serialization failures. CLI maps this to exit code 3.
class IoError : public std::runtime_error {
public:
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

// Numerical error states: non-finite values, SVD non-convergence, undefined ratios.
// CLI maps this to exit code 1.
class NumericError : public std::runtime_error {
public:
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace gci

#endif  // GCI_ERRORS_HPP_

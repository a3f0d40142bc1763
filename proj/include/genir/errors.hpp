#pragma once

#include <stdexcept>

namespace genir {

/// Invalid user input: parameters, files, plans. Maps to CLI exit code 2.
class ValidationError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Non-finite loss or parameters during optimization. Maps to CLI exit code 3.
class DivergenceError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace genir

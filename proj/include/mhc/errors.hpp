#pragma once

#include <stdexcept>
#include <string>

namespace mhc {

// Thrown when a file cannot be read or written.
struct io_error : std::runtime_error {
    explicit io_error(const std::string& msg) : std::runtime_error(msg) {}
};

// Thrown when a config / experiment spec fails validation.
struct config_error : std::runtime_error {
    explicit config_error(const std::string& msg) : std::runtime_error(msg) {}
};

// Thrown when a non-finite value is detected in a numeric result.
struct numeric_error : std::runtime_error {
    explicit numeric_error(const std::string& msg) : std::runtime_error(msg) {}
};

// Thrown when a similarity index is undefined (zero-variance features).
struct undefined_similarity_error : std::domain_error {
    explicit undefined_similarity_error(const std::string& msg) : std::domain_error(msg) {}
};

}  // namespace mhc

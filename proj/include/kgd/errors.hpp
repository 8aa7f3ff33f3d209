#pragma once

#include <stdexcept>
#include <string>

namespace kgd {

// Precondition / configuration violations. The CLI maps these to exit
// code 1; every other exception maps to exit code 2.
class ValidationError : public std::runtime_error {
public:
    explicit ValidationError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace kgd

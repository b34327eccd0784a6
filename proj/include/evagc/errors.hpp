#ifndef EVAGC_ERRORS_HPP
#define EVAGC_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace evagc {

// Malformed input file content. Messages name the line (text formats)
// or byte offset (binary formats).
class ParseError : public std::runtime_error {
public:
    explicit ParseError(const std::string& msg) : std::runtime_error(msg) {}
};

// Structurally well-formed data that violates a domain invariant
// (out-of-bounds coordinate, bad polarity, label >= num_classes, ...).
class ValidationError : public std::runtime_error {
public:
    explicit ValidationError(const std::string& msg) : std::runtime_error(msg) {}
};

class IoError : public std::runtime_error {
public:
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

// Non-finite loss, failed gradient check, and similar numeric failures.
class NumericalError : public std::runtime_error {
public:
    explicit NumericalError(const std::string& msg) : std::runtime_error(msg) {}
};

} // namespace evagc

#endif

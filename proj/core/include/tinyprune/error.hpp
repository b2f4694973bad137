#pragma once

#include <stdexcept>
#include <string>

namespace tinyprune {

struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Model-spec / config text could not be parsed. Message carries the line number.
struct ParseError : Error {
    using Error::Error;
};

// Graph violates a structural invariant (shapes, connectivity, ...).
struct GraphError : Error {
    using Error::Error;
};

// Memory planner refused the instance (node cap / state-space overflow).
struct PlanError : Error {
    using Error::Error;
};

}  // namespace tinyprune

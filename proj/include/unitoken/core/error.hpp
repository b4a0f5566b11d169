#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace unitoken {

// Caller violated a documented precondition (bad shape, id out of range, ...).
class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A sequence did not match the multimodal format. `position` is the index of
// the first slot that violates it.
class ParseError : public std::runtime_error {
 public:
  ParseError(std::size_t position, const std::string& what)
      : std::runtime_error("slot " + std::to_string(position) + ": " + what),
        position_(position) {}

  std::size_t position() const noexcept { return position_; }

 private:
  std::size_t position_;
};

// A broken internal invariant, e.g. NaN gradients or a sampled id outside the
// constrained range.
class InternalError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

}  // namespace unitoken

#pragma once

#include <stdexcept>
#include <string>

namespace treecoder {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Incompatible array shapes.
struct DimensionError : Error {
  using Error::Error;
};

// Invalid model, training or tokenizer configuration.
struct ConfigError : Error {
  using Error::Error;
};

// Malformed user input: out-of-range token ids, unreadable files, empty data.
struct InputError : Error {
  using Error::Error;
};

// NaN/Inf encountered where finite values are required.
struct NumericError : Error {
  using Error::Error;
};

}  // namespace treecoder

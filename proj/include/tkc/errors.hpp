// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace tkc {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ShapeError : Error {
  using Error::Error;
};

/// Bad argument that is not a shape problem (negative temperature, k too big...).
struct ValueError : Error {
  using Error::Error;
};

/// Temporal targets requested before the history bank holds h complete epochs.
struct WarmupIncomplete : Error {
  using Error::Error;
};

struct AutodiffError : Error {
  using Error::Error;
};

struct FormatError : Error {
  using Error::Error;
};

struct TruncatedPayload : FormatError {
  using FormatError::FormatError;
};

struct ConfigError : Error {
  using Error::Error;
};

struct IoError : Error {
  using Error::Error;
};

struct NumericDivergence : Error {
  using Error::Error;
};

}  // namespace tkc

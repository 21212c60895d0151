#pragma once

#include <stdexcept>
#include <string>

namespace deepclust {

/// Base class for every error raised by the library.
class Error : public std::runtime_error
{
public:
  using std::runtime_error::runtime_error;
};

/// Tensor or layer shapes do not line up.
class DimensionError : public Error
{
public:
  using Error::Error;
};

/// A value violates a precondition (out-of-range label, non-finite entry, bad config).
class ValueError : public Error
{
public:
  using Error::Error;
};

/// Filesystem or codec failure (dataset, CSV, PNG).
class IoError : public Error
{
public:
  using Error::Error;
};

/// Checkpoint decoding failure: bad magic, version, truncation or checksum.
class FormatError : public Error
{
public:
  using Error::Error;
};

/// Wraps an error raised inside one stage of the training loop.
class StageError : public Error
{
public:
  StageError(std::string stage, const std::string &what)
    : Error("[" + stage + "] " + what)
    , stage_(std::move(stage))
  {}

  const std::string &stage() const noexcept
  {
    return stage_;
  }

private:
  std::string stage_;
};

}  // namespace deepclust

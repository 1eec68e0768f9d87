#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace sfr {

// Root of every error raised by the library. Callers that only care about
// "something in sfr failed" catch this; tests match the concrete types.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidArgument : public Error {
 public:
  using Error::Error;
};

class ShapeMismatch : public Error {
 public:
  using Error::Error;
};

class MaskMismatch : public Error {
 public:
  using Error::Error;
};

class IncompatibleSignal : public Error {
 public:
  using Error::Error;
};

class DegenerateReference : public Error {
 public:
  using Error::Error;
};

class GeometryError : public Error {
 public:
  using Error::Error;
};

class InvalidRoom : public Error {
 public:
  using Error::Error;
};

class IncompatibleAdapter : public Error {
 public:
  using Error::Error;
};

class UnknownLayer : public Error {
 public:
  using Error::Error;
};

// A checkpoint whose architecture differs from the one a run expects.
class IncompatibleCheckpoint : public Error {
 public:
  using Error::Error;
};

class TrainingDiverged : public Error {
 public:
  TrainingDiverged(int iteration, const std::string& what)
      : Error(what), iteration_(iteration) {}
  int iteration() const noexcept { return iteration_; }

 private:
  int iteration_;
};

// data_io
class IoError : public Error {
 public:
  using Error::Error;
};

class FormatVersionMismatch : public IoError {
 public:
  using IoError::IoError;
};

class TruncatedPayload : public IoError {
 public:
  TruncatedPayload(std::size_t expected, std::size_t actual)
      : IoError("truncated payload: expected " + std::to_string(expected) +
                " bytes, found " + std::to_string(actual)),
        expected_(expected),
        actual_(actual) {}
  std::size_t expected() const noexcept { return expected_; }
  std::size_t actual() const noexcept { return actual_; }

 private:
  std::size_t expected_;
  std::size_t actual_;
};

class NonFinitePayload : public IoError {
 public:
  using IoError::IoError;
};

class CorruptFile : public IoError {
 public:
  using IoError::IoError;
};

class MissingFingerprint : public CorruptFile {
 public:
  using CorruptFile::CorruptFile;
};

class OffsetOverlap : public CorruptFile {
 public:
  using CorruptFile::CorruptFile;
};

}  // namespace sfr

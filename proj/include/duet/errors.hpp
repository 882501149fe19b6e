#pragma once

#include <stdexcept>
#include <string>

namespace duet {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// A caller passed a value outside the documented domain (temperature <= 0,
// top_p out of (0,1], bad config field, ...).
struct InvalidArgument : Error {
  using Error::Error;
};

// A token id that is not valid for the model's vocabulary.
struct InvalidToken : Error {
  using Error::Error;
};

// A table model was asked about a context it has no row (and no default) for.
struct UnknownContext : Error {
  using Error::Error;
};

// A remote backend could not be reached or answered with a transport error.
struct BackendUnavailable : Error {
  using Error::Error;
};

// A verifier sentence is missing its divergence marker.
struct MissingMarker : Error {
  using Error::Error;
};

// A verifier response did not match the expected answer grammar.
struct UnparseableResponse : Error {
  using Error::Error;
};

// An oracle verifier was handed sequences outside its world.
struct UnknownSequencePair : Error {
  using Error::Error;
};

// Tensor/input dimensions do not line up.
struct ShapeMismatch : Error {
  using Error::Error;
};

// A persisted file carries an unknown schema or format version.
struct SchemaMismatch : Error {
  using Error::Error;
};

// A file could not be opened or read.
struct FileError : Error {
  using Error::Error;
};

// Training produced a non-finite loss.
struct TrainingDiverged : Error {
  using Error::Error;
};

// No threshold on the calibration grid satisfies the requested target.
struct TargetUnachievable : Error {
  using Error::Error;
};

}  // namespace duet

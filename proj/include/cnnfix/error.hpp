#ifndef CNNFIX_ERROR_HPP_
#define CNNFIX_ERROR_HPP_

#include <stdexcept>
#include <string>

namespace cnnfix {

// Shapes or dimensions that do not agree.
class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Coordinate or index outside the valid range of a tensor / layer grid.
class IndexError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

// Malformed manifest, missing blob, invalid graph structure.
class ModelError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad file contents outside the model (images, annotations, point files).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Raised by backtracking when a layer yields no positive evidence and the
// configuration forbids the argmax fallback.
class EmptyEvidenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace cnnfix

#endif  // CNNFIX_ERROR_HPP_

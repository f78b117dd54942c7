#pragma once
#include <stdexcept>

namespace mars {

// Shape/format/usage problems map to CLI exit 2; mapping and simulation
// constraint violations (index overflow, accumulator overflow, tiling
// limits, degenerate groups under --strict) map to exit 3.
struct ShapeError : std::runtime_error { using std::runtime_error::runtime_error; };
struct FormatError : std::runtime_error { using std::runtime_error::runtime_error; };
struct MappingError : std::runtime_error { using std::runtime_error::runtime_error; };
struct SimError : std::runtime_error { using std::runtime_error::runtime_error; };
struct TrainError : std::runtime_error { using std::runtime_error::runtime_error; };

}  // namespace mars

#pragma once

#include <stdexcept>
#include <string>

namespace indexnet {

// Error taxonomy shared by all modules. The CLI maps these onto distinct
// exit codes, so keep the hierarchy flat and the categories stable.

struct DimensionError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct GeometryError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct StateError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace indexnet

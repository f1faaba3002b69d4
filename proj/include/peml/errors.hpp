#pragma once

#include <stdexcept>
#include <string>

namespace peml {

// Error taxonomy. Everything derives from Error so callers can catch
// coarsely; the CLI maps these onto exit codes.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct DimensionError : Error {
    using Error::Error;
};
struct NumericError : Error {
    using Error::Error;
};
struct ContractError : Error {
    using Error::Error;
};
struct ConfigError : Error {
    using Error::Error;
};
struct DataError : Error {
    using Error::Error;
};
struct ParseError : Error {
    using Error::Error;
};
struct StateError : Error {
    using Error::Error;
};
struct TaskError : Error {
    using Error::Error;
};
struct ParameterError : Error {
    using Error::Error;
};
struct HpoError : Error {
    using Error::Error;
};

}  // namespace peml

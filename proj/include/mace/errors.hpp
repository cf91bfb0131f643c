#pragma once

#include <stdexcept>
#include <string>

namespace mace {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct DimensionMismatch : Error {
    using Error::Error;
};

struct NotPositiveDefinite : Error {
    using Error::Error;
};

struct TimestepOutOfRange : Error {
    using Error::Error;
};

struct UnknownToken : Error {
    using Error::Error;
};

struct SpanOutOfRange : Error {
    using Error::Error;
};

struct WeightsNotNormalized : Error {
    using Error::Error;
};

struct DidNotConverge : Error {
    using Error::Error;
};

struct DidNotImprove : Error {
    using Error::Error;
};

struct UndefinedMean : Error {
    using Error::Error;
};

struct ClassifierGateFailed : Error {
    using Error::Error;
};

struct ConfigError : Error {
    using Error::Error;
};

struct IoError : Error {
    using Error::Error;
};

} // namespace mace

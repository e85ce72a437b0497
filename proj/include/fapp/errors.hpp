#pragma once

#include <stdexcept>
#include <string>

namespace fapp {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Commanded specific thrust is too small to define a body z-axis.
class DegenerateThrust : public Error {
public:
    using Error::Error;
};

/// Required attitude tilt reaches or exceeds pi/2.
class TiltLimit : public Error {
public:
    using Error::Error;
};

/// Path parameter outside [0, 1] or derivative order out of range.
class DomainError : public Error {
public:
    using Error::Error;
};

/// Path with coincident endpoints or a vanishing hodograph.
class DegeneratePath : public Error {
public:
    using Error::Error;
};

class DimensionMismatch : public Error {
public:
    using Error::Error;
};

/// Factorization failure inside the QP solver.
class NumericalBreakdown : public Error {
public:
    using Error::Error;
};

/// The condensed QP returned no certified optimum.
class QpInfeasible : public Error {
public:
    using Error::Error;
};

class NonFiniteState : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class MissingEpisode : public Error {
public:
    using Error::Error;
};

}  // namespace fapp

#pragma once

#include <stdexcept>
#include <string>

namespace stcast {

#ifdef STCAST_REAL32
using Real = float;
#else
using Real = double;
#endif

// Error taxonomy. The CLI maps these onto exit codes: config/data -> 2,
// training -> 3. Everything derives from Error so callers can catch broadly.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

class ShapeError : public Error {
public:
    explicit ShapeError(const std::string& msg) : Error(msg) {}
};

class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& msg) : Error(msg) {}
};

class DataError : public Error {
public:
    explicit DataError(const std::string& msg) : Error(msg) {}
};

class TrainError : public Error {
public:
    explicit TrainError(const std::string& msg) : Error(msg) {}
};

}  // namespace stcast

#pragma once

#include <stdexcept>
#include <string>

namespace difflare {

enum class ErrorKind {
    config,      // bad config / parameter / dimension
    dependency,  // missing upstream artifact
    training,    // divergence, unmet training contract
    io,          // file / corpus problems
    integrity,   // frozen-weight hash mismatch
    sampling,    // NaN mid-trajectory
};

class Error : public std::runtime_error {
  public:
    Error(ErrorKind kind, const std::string& msg) : std::runtime_error(msg), kind_(kind) {}
    ErrorKind kind() const { return kind_; }

    // CLI exit code mapping
    int exit_code() const {
        switch (kind_) {
            case ErrorKind::config: return 2;
            case ErrorKind::dependency: return 3;
            case ErrorKind::training: return 4;
            case ErrorKind::io: return 5;
            case ErrorKind::integrity: return 4;
            case ErrorKind::sampling: return 4;
        }
        return 1;
    }

  private:
    ErrorKind kind_;
};

struct ConfigError : Error {
    explicit ConfigError(const std::string& m) : Error(ErrorKind::config, m) {}
};
struct DimensionError : Error {
    explicit DimensionError(const std::string& m) : Error(ErrorKind::config, m) {}
};
struct ParameterError : Error {
    explicit ParameterError(const std::string& m) : Error(ErrorKind::config, m) {}
};
struct DependencyError : Error {
    explicit DependencyError(const std::string& m) : Error(ErrorKind::dependency, m) {}
};
struct TrainingError : Error {
    explicit TrainingError(const std::string& m) : Error(ErrorKind::training, m) {}
};
struct IoError : Error {
    explicit IoError(const std::string& m) : Error(ErrorKind::io, m) {}
};
struct IntegrityError : Error {
    explicit IntegrityError(const std::string& m) : Error(ErrorKind::integrity, m) {}
};
struct SamplingError : Error {
    explicit SamplingError(const std::string& m) : Error(ErrorKind::sampling, m) {}
};
struct AssetError : Error {
    explicit AssetError(const std::string& m) : Error(ErrorKind::io, m) {}
};
struct CorpusError : Error {
    explicit CorpusError(const std::string& m) : Error(ErrorKind::io, m) {}
};

}  // namespace difflare

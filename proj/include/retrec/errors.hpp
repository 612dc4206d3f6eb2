#pragma once

#include <stdexcept>
#include <string>

namespace retrec {

// Exit-code mapping in the CLI: ConfigError -> 2, DataError -> 3,
// TrainingError -> 4.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct TrainingError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace retrec

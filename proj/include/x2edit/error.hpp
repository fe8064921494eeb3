#pragma once

#include <stdexcept>
#include <string>

namespace x2edit {

// Shape disagreement between operands (matmul inner dims, attention head
// split, gate input width, ...).
struct DimensionError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Input outside the operation's numeric domain, e.g. a row with norm < eps
// handed to l2_normalize.
struct DegenerateInputError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Task label outside [0, num_tasks).
struct LabelError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Invalid hyperparameter (tau <= 0, lambda < 0, ...).
struct ParameterError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Empty or malformed shard in the simulated multi-worker loss.
struct ShardError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Cross-layer inputs that must agree (labels, batch size) but do not.
struct ConsistencyError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Non-finite values where the contract requires finiteness.
struct NumericalError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Non-finite training loss, reported with step context.
struct DivergenceError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Malformed checkpoint or table file; message carries the byte offset.
struct FormatError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Checkpoint version not understood by this build.
struct VersionError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Unknown synthetic task id or invalid task spec.
struct TaskSpecError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Invalid run configuration (CLI / config file validation).
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace x2edit

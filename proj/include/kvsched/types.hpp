#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace kvsched {

using TokenId = int32_t;
using TokenSeq = std::vector<TokenId>;
using GpuId = int32_t;
using RequestId = int64_t;
using NodeId = uint64_t;

// Simulated time in milliseconds. Doubles are safe here: every timestamp is a
// sum of model-coefficient products, and the determinism gate only requires
// identical runs to produce identical bits, not platform independence.
using SimTime = double;

constexpr GpuId kNoGpu = -1;

struct Request {
  RequestId id = 0;
  SimTime arrival_ms = 0;
  TokenSeq prompt;
  int64_t output_len = 0;
};

// Raised for invalid user-supplied configuration (bad JSON values, a prompt
// larger than every GPU's KV capacity, unknown policy names, ...).
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Raised for malformed corpus/trace input files; message carries the line number.
struct ParseError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Raised when a simulation invariant is violated (KV over capacity, a request
// finishing twice, token conservation failure). Always a bug or a pathological
// config, never control flow.
struct SimError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Raised by report comparison when inputs are not comparable (different
// workload fingerprints or seeds, or no reports given).
struct MismatchError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace kvsched

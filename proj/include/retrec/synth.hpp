#pragma once

#include <string>
#include <vector>

#include "retrec/config.hpp"
#include "retrec/dataset.hpp"

namespace retrec {

// Synthetic corpus from a latent-topic Markov model shared between user
// sequences and browsing sessions. Items partition into topics; each topic
// carries a successor permutation that walks tend to follow, so browsing
// sessions contain predictive signal for user targets. A configurable
// fraction of user sequences additionally re-traces a browsing session's
// realized path with per-item noise, planting cross-corpus signal.
struct SynthOutput {
    Corpus corpus;
    std::vector<std::string> vocab_keys;
};

SynthOutput generate_synthetic(const ExperimentConfig& cfg);

}  // namespace retrec

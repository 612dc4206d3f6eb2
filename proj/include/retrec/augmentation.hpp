#pragma once

#include "retrec/dataset.hpp"
#include "retrec/rng.hpp"

namespace retrec {

// Stochastic sequence views for contrastive learning.
struct AugmentationConfig {
    double gamma = 0.3;  // mask probability
    double eta = 0.6;    // crop length ratio
    double mu = 0.3;     // reorder window ratio

    void validate() const;  // all ratios strictly inside (0, 1)
};

// Replaces each item independently with mask_id with probability gamma.
ItemSequence mask(const ItemSequence& seq, double gamma, int32_t mask_id, Rng& rng);

// Contiguous subsequence of length max(1, floor(eta*len)) at a uniform offset.
ItemSequence crop(const ItemSequence& seq, double eta, Rng& rng);

// Uniformly permutes a contiguous window of length max(1, floor(mu*len)).
ItemSequence reorder(const ItemSequence& seq, double mu, Rng& rng);

// Applies exactly one operator chosen uniformly from {mask, crop, reorder}.
ItemSequence sample_view(const ItemSequence& seq, const AugmentationConfig& cfg,
                         int32_t mask_id, Rng& rng);

}  // namespace retrec

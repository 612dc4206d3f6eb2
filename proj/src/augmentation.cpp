#include "retrec/augmentation.hpp"

#include <algorithm>
#include <cmath>

#include "retrec/errors.hpp"

namespace retrec {

void AugmentationConfig::validate() const {
    auto in_unit = [](double v) { return v > 0.0 && v < 1.0; };
    if (!in_unit(gamma) || !in_unit(eta) || !in_unit(mu))
        throw ConfigError("augmentation ratios must lie strictly inside (0,1)");
}

namespace {

void check_nonempty(const ItemSequence& seq) {
    if (seq.empty()) throw DataError("augmentation requires a nonempty sequence");
}

int window_len(double ratio, int len) {
    return std::max(1, static_cast<int>(std::floor(ratio * len)));
}

}  // namespace

ItemSequence mask(const ItemSequence& seq, double gamma, int32_t mask_id, Rng& rng) {
    check_nonempty(seq);
    ItemSequence out = seq;
    for (auto& id : out.items)
        if (rng.uniform() < gamma) id = mask_id;
    return out;
}

ItemSequence crop(const ItemSequence& seq, double eta, Rng& rng) {
    check_nonempty(seq);
    const int len = seq.length();
    const int lc = window_len(eta, len);
    const int offset = static_cast<int>(rng.uniform_int(len - lc + 1));
    ItemSequence out;
    out.items.assign(seq.items.begin() + offset, seq.items.begin() + offset + lc);
    return out;
}

ItemSequence reorder(const ItemSequence& seq, double mu, Rng& rng) {
    check_nonempty(seq);
    const int len = seq.length();
    const int lr = window_len(mu, len);
    const int offset = static_cast<int>(rng.uniform_int(len - lr + 1));
    ItemSequence out = seq;
    // Fisher-Yates inside the window.
    for (int i = lr - 1; i > 0; --i) {
        const int j = static_cast<int>(rng.uniform_int(i + 1));
        std::swap(out.items[offset + i], out.items[offset + j]);
    }
    return out;
}

ItemSequence sample_view(const ItemSequence& seq, const AugmentationConfig& cfg,
                         int32_t mask_id, Rng& rng) {
    check_nonempty(seq);
    switch (rng.uniform_int(3)) {
        case 0: return mask(seq, cfg.gamma, mask_id, rng);
        case 1: return crop(seq, cfg.eta, rng);
        default: return reorder(seq, cfg.mu, rng);
    }
}

}  // namespace retrec

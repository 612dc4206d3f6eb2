#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <vector>

#include "retrec/augmentation.hpp"
#include "retrec/errors.hpp"

using namespace retrec;

namespace {

constexpr int32_t kVocab = 100;
constexpr int32_t kMaskId = kVocab;

ItemSequence make_seq(int len, Rng& rng) {
    ItemSequence seq;
    seq.items.resize(len);
    for (auto& id : seq.items) id = static_cast<int32_t>(rng.uniform_int(kVocab));
    return seq;
}

std::vector<int32_t> sorted_copy(const std::vector<int32_t>& v) {
    auto out = v;
    std::sort(out.begin(), out.end());
    return out;
}

}  // namespace

TEST_CASE("config validation: ratios strictly inside (0,1)") {
    AugmentationConfig ok;
    CHECK_NOTHROW(ok.validate());
    for (double bad : {0.0, 1.0, -0.2, 1.5}) {
        AugmentationConfig cfg;
        cfg.gamma = bad;
        CHECK_THROWS_AS(cfg.validate(), ConfigError);
    }
}

TEST_CASE("mask: tiny gamma leaves input unchanged, length always preserved") {
    Rng rng(3);
    const ItemSequence seq = make_seq(20, rng);
    Rng op_rng(4);
    const ItemSequence out = mask(seq, 1e-12, kMaskId, op_rng);
    CHECK(out.items == seq.items);

    Rng heavy_rng(5);
    const ItemSequence all = mask(seq, 0.999999, kMaskId, heavy_rng);
    CHECK(all.length() == seq.length());
}

TEST_CASE("mask: binomial count bound at gamma=0.5 on length 1000") {
    Rng rng(7);
    const ItemSequence seq = make_seq(1000, rng);
    Rng op_rng(8);
    const ItemSequence out = mask(seq, 0.5, kMaskId, op_rng);
    int masked = 0;
    for (size_t i = 0; i < out.items.size(); ++i)
        if (out.items[i] == kMaskId && seq.items[i] != kMaskId) ++masked;
    CHECK(masked >= 400);
    CHECK(masked <= 600);
}

TEST_CASE("crop: floor rule and contiguity") {
    Rng rng(9);
    const ItemSequence seq = make_seq(8, rng);
    for (int trial = 0; trial < 50; ++trial) {
        Rng op_rng(100 + trial);
        const ItemSequence out = crop(seq, 0.5, op_rng);
        REQUIRE(out.length() == 4);
        // Output must be a contiguous substring.
        bool found = false;
        for (int c = 0; c + 4 <= 8; ++c)
            if (std::equal(out.items.begin(), out.items.end(),
                           seq.items.begin() + c))
                found = true;
        CHECK(found);
    }

    ItemSequence one;
    one.items = {42};
    Rng op_rng(1);
    CHECK(crop(one, 0.5, op_rng).items == one.items);
}

TEST_CASE("reorder: multiset preserved, changes confined to one window") {
    Rng rng(11);
    for (int trial = 0; trial < 100; ++trial) {
        const int len = 6;
        ItemSequence seq;
        seq.items.resize(len);
        // Distinct items so we can localize the window.
        for (int i = 0; i < len; ++i) seq.items[i] = i;
        Rng op_rng(200 + trial);
        const ItemSequence out = reorder(seq, 0.5, op_rng);
        REQUIRE(out.length() == len);
        CHECK(sorted_copy(out.items) == sorted_copy(seq.items));
        // Window length is floor(0.5*6)=3: differing positions span < 3.
        int first = len, last = -1;
        for (int i = 0; i < len; ++i)
            if (out.items[i] != seq.items[i]) {
                first = std::min(first, i);
                last = std::max(last, i);
            }
        if (last >= 0) CHECK(last - first < 3);
    }

    Rng op_rng(13);
    const ItemSequence seq = make_seq(10, rng);
    const ItemSequence out = reorder(seq, 0.05, op_rng);  // window clamps to 1
    CHECK(out.items == seq.items);
}

TEST_CASE("sample_view: operator choice is uniform and reproducible") {
    Rng rng(17);
    const ItemSequence seq = make_seq(9, rng);
    AugmentationConfig cfg;

    int mask_n = 0, crop_n = 0, reorder_n = 0;
    Rng op_rng(18);
    for (int i = 0; i < 3000; ++i) {
        // Re-draw the operator the same way sample_view does to count it.
        Rng probe = op_rng;
        const uint64_t op = probe.uniform_int(3);
        const ItemSequence out = sample_view(seq, cfg, kMaskId, op_rng);
        if (op == 0) ++mask_n;
        if (op == 1) {
            ++crop_n;
            CHECK(out.length() == 5);  // floor(0.6*9)
        }
        if (op == 2) ++reorder_n;
        CHECK(out.length() <= seq.length());
        CHECK(out.length() >= 1);
        for (int32_t id : out.items) {
            CHECK(id >= 0);
            CHECK(id <= kVocab);
        }
    }
    for (int count : {mask_n, crop_n, reorder_n}) {
        CHECK(count >= 900);
        CHECK(count <= 1100);
    }

    Rng a(55), b(55);
    CHECK(sample_view(seq, cfg, kMaskId, a).items ==
          sample_view(seq, cfg, kMaskId, b).items);
}

TEST_CASE("operators reject empty sequences") {
    ItemSequence empty;
    Rng rng(1);
    AugmentationConfig cfg;
    CHECK_THROWS_AS(mask(empty, 0.5, kMaskId, rng), DataError);
    CHECK_THROWS_AS(crop(empty, 0.5, rng), DataError);
    CHECK_THROWS_AS(reorder(empty, 0.5, rng), DataError);
    CHECK_THROWS_AS(sample_view(empty, cfg, kMaskId, rng), DataError);
}

TEST_CASE("property: views never emit out-of-range ids or empty output") {
    Rng rng(19);
    AugmentationConfig cfg;
    for (int trial = 0; trial < 300; ++trial) {
        const int len = 1 + static_cast<int>(rng.uniform_int(30));
        const ItemSequence seq = make_seq(len, rng);
        const ItemSequence out = sample_view(seq, cfg, kMaskId, rng);
        REQUIRE(out.length() >= 1);
        for (int32_t id : out.items) {
            CHECK(id >= 0);
            CHECK(id <= kMaskId);
        }
    }
}

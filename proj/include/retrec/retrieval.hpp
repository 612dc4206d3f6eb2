#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "retrec/encoder.hpp"
#include "retrec/matrix.hpp"

namespace retrec {

enum class IndexMode { exact, clustered };

struct SearchHit {
    int64_t session_id = -1;
    double score = 0.0;
};

struct RetrievalResult {
    std::vector<SearchHit> hits;  // scores non-increasing, ties by lower id
};

// Immutable store of unit-norm browsing-session embeddings answering top-k
// inner-product queries. Exact mode scans every row; clustered mode probes
// spherical k-means inverted lists. Searches are read-only and freely
// concurrent once the index is built.
class RetrievalIndex {
public:
    RetrievalIndex() = default;

    static RetrievalIndex build(const std::vector<ItemSequence>& sessions,
                                const EncoderParams& key_encoder, IndexMode mode,
                                int nlist = 0, uint64_t seed = 0x5eed);

    // Test/tooling path: index raw vectors (rows are L2-normalized).
    // Item lists are empty.
    static RetrievalIndex from_vectors(const Matrix& rows, IndexMode mode,
                                       int nlist = 0, uint64_t seed = 0x5eed);

    void save(const std::string& path) const;
    static RetrievalIndex load(const std::string& path);  // memory-mapped

    int64_t size() const { return m_; }
    int dim() const { return dim_; }
    IndexMode mode() const { return mode_; }
    int nlist() const { return nlist_; }
    int default_nprobe() const { return default_nprobe_; }

    const float* vector(int64_t row) const { return vectors_ + row * dim_; }
    int64_t session_id(int64_t row) const { return session_ids_[row]; }
    ItemSequence session_sequence(int64_t row) const;

    // Top-k by inner product. Exact mode is exhaustive; clustered mode scans
    // nprobe inverted lists (0 = the stored default). k > size() returns
    // size() hits.
    RetrievalResult search(const double* query, int k, int nprobe = 0) const;
    // Exhaustive scan regardless of mode (the correctness oracle).
    RetrievalResult search_exact(const double* query, int k) const;
    std::vector<RetrievalResult> batch_search(const Matrix& queries, int k,
                                              int nprobe = 0) const;

private:
    void build_clustered_lists(int nlist, uint64_t seed);

    IndexMode mode_ = IndexMode::exact;
    int64_t m_ = 0;
    int dim_ = 0;
    std::vector<float> owned_vectors_;
    const float* vectors_ = nullptr;
    std::vector<int64_t> session_ids_;
    std::vector<uint64_t> item_offsets_;
    std::vector<int32_t> item_ids_;
    int nlist_ = 0;
    int default_nprobe_ = 0;
    std::vector<float> centroids_;         // nlist×dim
    std::vector<uint64_t> list_offsets_;   // nlist+1
    std::vector<uint32_t> list_rows_;      // m
    std::shared_ptr<void> mapping_;        // keeps the mmap alive for loads
};

}  // namespace retrec

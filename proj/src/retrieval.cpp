#include "retrec/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <type_traits>

#include <fcntl.h>
#include <sys/mman.h>
#include <sys/stat.h>
#include <unistd.h>

#include "retrec/errors.hpp"
#include "retrec/kernels.hpp"
#include "retrec/rng.hpp"

namespace retrec {

namespace {

constexpr char kMagic[4] = {'R', 'I', 'X', '1'};
constexpr uint32_t kVersion = 1;

struct Header {
    uint32_t version = kVersion;
    uint32_t mode = 0;
    uint64_t m = 0;
    uint32_t dim = 0;
    uint32_t nlist = 0;
    uint32_t nprobe = 0;
    uint32_t reserved = 0;
};

bool hit_better(double score_a, int64_t id_a, double score_b, int64_t id_b) {
    if (score_a != score_b) return score_a > score_b;
    return id_a < id_b;
}

}  // namespace

RetrievalIndex RetrievalIndex::build(const std::vector<ItemSequence>& sessions,
                                     const EncoderParams& key_encoder,
                                     IndexMode mode, int nlist, uint64_t seed) {
    RetrievalIndex index;
    index.mode_ = mode;
    index.dim_ = key_encoder.cfg.dim;
    index.m_ = static_cast<int64_t>(sessions.size());
    index.owned_vectors_.assign(index.m_ * index.dim_, 0.0f);
    index.session_ids_.resize(index.m_);
    index.item_offsets_.assign(index.m_ + 1, 0);

    std::vector<ItemSequence> bounded(sessions.size());
    for (size_t i = 0; i < sessions.size(); ++i)
        bounded[i] = truncate_recent(sessions[i], key_encoder.cfg.max_len);
    const auto encodings = encode_batch(key_encoder, bounded);

    std::vector<double> unit(index.dim_);
    for (int64_t i = 0; i < index.m_; ++i) {
        kernels::l2_normalize(encodings[i].pooled.row(0), unit.data(), index.dim_);
        float* dst = index.owned_vectors_.data() + i * index.dim_;
        for (int j = 0; j < index.dim_; ++j) dst[j] = static_cast<float>(unit[j]);
        index.session_ids_[i] = i;
        index.item_offsets_[i + 1] =
            index.item_offsets_[i] + bounded[i].items.size();
    }
    index.item_ids_.reserve(index.item_offsets_[index.m_]);
    for (const auto& s : bounded)
        index.item_ids_.insert(index.item_ids_.end(), s.items.begin(), s.items.end());
    index.vectors_ = index.owned_vectors_.data();

    if (mode == IndexMode::clustered && index.m_ > 0)
        index.build_clustered_lists(nlist, seed);
    return index;
}

RetrievalIndex RetrievalIndex::from_vectors(const Matrix& rows, IndexMode mode,
                                            int nlist, uint64_t seed) {
    RetrievalIndex index;
    index.mode_ = mode;
    index.dim_ = rows.cols();
    index.m_ = rows.rows();
    index.owned_vectors_.assign(index.m_ * index.dim_, 0.0f);
    index.session_ids_.resize(index.m_);
    index.item_offsets_.assign(index.m_ + 1, 0);
    std::vector<double> unit(index.dim_);
    for (int64_t i = 0; i < index.m_; ++i) {
        kernels::l2_normalize(rows.row(i), unit.data(), index.dim_);
        float* dst = index.owned_vectors_.data() + i * index.dim_;
        for (int j = 0; j < index.dim_; ++j) dst[j] = static_cast<float>(unit[j]);
        index.session_ids_[i] = i;
    }
    index.vectors_ = index.owned_vectors_.data();
    if (mode == IndexMode::clustered && index.m_ > 0)
        index.build_clustered_lists(nlist, seed);
    return index;
}

void RetrievalIndex::build_clustered_lists(int nlist, uint64_t seed) {
    nlist_ = nlist > 0 ? nlist
                       : std::max<int>(1, static_cast<int>(std::lround(
                                              std::sqrt(static_cast<double>(m_)))));
    nlist_ = std::min<int64_t>(nlist_, m_);
    // Conservative default: unstructured (near-random) vectors need a large
    // probe fraction to hold recall@10 >= 0.95.
    default_nprobe_ = std::max(1, (4 * nlist_) / 5);

    // Seed centroids with distinct rows.
    Rng rng(Rng::derive(seed, 0xc1u));
    std::vector<int64_t> perm(m_);
    std::iota(perm.begin(), perm.end(), 0);
    for (int i = 0; i < nlist_; ++i) {
        const int64_t j = i + static_cast<int64_t>(rng.uniform_int(m_ - i));
        std::swap(perm[i], perm[j]);
    }
    centroids_.assign(static_cast<size_t>(nlist_) * dim_, 0.0f);
    for (int c = 0; c < nlist_; ++c)
        std::copy(vectors_ + perm[c] * dim_, vectors_ + (perm[c] + 1) * dim_,
                  centroids_.data() + static_cast<size_t>(c) * dim_);

    // Spherical k-means: assign by inner product, renormalize means.
    std::vector<uint32_t> assign(m_, 0);
    constexpr int kIters = 10;
    for (int iter = 0; iter < kIters; ++iter) {
        for (int64_t i = 0; i < m_; ++i) {
            const float* row = vectors_ + i * dim_;
            double best = -2.0;
            uint32_t best_c = 0;
            for (int c = 0; c < nlist_; ++c) {
                const float* cent = centroids_.data() + static_cast<size_t>(c) * dim_;
                double s = 0.0;
                for (int j = 0; j < dim_; ++j)
                    s += static_cast<double>(row[j]) * cent[j];
                if (s > best) {
                    best = s;
                    best_c = static_cast<uint32_t>(c);
                }
            }
            assign[i] = best_c;
        }
        std::vector<double> sums(static_cast<size_t>(nlist_) * dim_, 0.0);
        std::vector<int64_t> counts(nlist_, 0);
        for (int64_t i = 0; i < m_; ++i) {
            const float* row = vectors_ + i * dim_;
            double* dst = sums.data() + static_cast<size_t>(assign[i]) * dim_;
            for (int j = 0; j < dim_; ++j) dst[j] += row[j];
            ++counts[assign[i]];
        }
        for (int c = 0; c < nlist_; ++c) {
            if (counts[c] == 0) continue;  // keep previous centroid
            double* src = sums.data() + static_cast<size_t>(c) * dim_;
            const double norm = kernels::l2_norm(src, dim_);
            float* dst = centroids_.data() + static_cast<size_t>(c) * dim_;
            if (norm > 0.0)
                for (int j = 0; j < dim_; ++j)
                    dst[j] = static_cast<float>(src[j] / norm);
        }
    }

    list_offsets_.assign(nlist_ + 1, 0);
    for (int64_t i = 0; i < m_; ++i) ++list_offsets_[assign[i] + 1];
    for (int c = 0; c < nlist_; ++c) list_offsets_[c + 1] += list_offsets_[c];
    list_rows_.resize(m_);
    std::vector<uint64_t> cursor(list_offsets_.begin(), list_offsets_.end() - 1);
    for (int64_t i = 0; i < m_; ++i) list_rows_[cursor[assign[i]]++] = static_cast<uint32_t>(i);
}

ItemSequence RetrievalIndex::session_sequence(int64_t row) const {
    ItemSequence seq;
    if (item_offsets_.empty()) return seq;
    const uint64_t begin = item_offsets_[row], end = item_offsets_[row + 1];
    seq.items.assign(item_ids_.begin() + begin, item_ids_.begin() + end);
    return seq;
}

RetrievalResult RetrievalIndex::search_exact(const double* query, int k) const {
    if (k < 1) throw ConfigError("search: k must be >= 1");
    RetrievalResult res;
    if (m_ == 0) return res;
    const auto top = kernels::topk_inner_product(vectors_, m_, dim_, query, k);
    res.hits.reserve(top.size());
    for (const auto& [score, row] : top)
        res.hits.push_back({session_ids_[row], score});
    return res;
}

RetrievalResult RetrievalIndex::search(const double* query, int k, int nprobe) const {
    if (mode_ == IndexMode::exact) return search_exact(query, k);
    if (k < 1) throw ConfigError("search: k must be >= 1");
    RetrievalResult res;
    if (m_ == 0) return res;

    const int probes = std::min(nlist_, nprobe > 0 ? nprobe : default_nprobe_);
    // Rank centroids by inner product with the query.
    std::vector<std::pair<double, int>> cscores(nlist_);
    for (int c = 0; c < nlist_; ++c) {
        const float* cent = centroids_.data() + static_cast<size_t>(c) * dim_;
        double s = 0.0;
        for (int j = 0; j < dim_; ++j) s += static_cast<double>(cent[j]) * query[j];
        cscores[c] = {s, c};
    }
    std::partial_sort(cscores.begin(), cscores.begin() + probes, cscores.end(),
                      [](const auto& a, const auto& b) {
                          if (a.first != b.first) return a.first > b.first;
                          return a.second < b.second;
                      });

    // Scan the probed lists with the usual top-k heap.
    auto better = [&](const SearchHit& a, const SearchHit& b) {
        return hit_better(a.score, a.session_id, b.score, b.session_id);
    };
    std::vector<SearchHit> heap;
    heap.reserve(k);
    for (int p = 0; p < probes; ++p) {
        const int c = cscores[p].second;
        for (uint64_t it = list_offsets_[c]; it < list_offsets_[c + 1]; ++it) {
            const int64_t row = list_rows_[it];
            const float* v = vectors_ + row * dim_;
            double s = 0.0;
            for (int j = 0; j < dim_; ++j) s += static_cast<double>(v[j]) * query[j];
            SearchHit cand{session_ids_[row], s};
            if (static_cast<int>(heap.size()) < k) {
                heap.push_back(cand);
                std::push_heap(heap.begin(), heap.end(), better);
            } else if (better(cand, heap.front())) {
                std::pop_heap(heap.begin(), heap.end(), better);
                heap.back() = cand;
                std::push_heap(heap.begin(), heap.end(), better);
            }
        }
    }
    std::sort(heap.begin(), heap.end(), better);
    res.hits = std::move(heap);
    return res;
}

std::vector<RetrievalResult> RetrievalIndex::batch_search(const Matrix& queries,
                                                          int k, int nprobe) const {
    std::vector<RetrievalResult> out(queries.rows());
    const int n = queries.rows();
#pragma omp parallel for schedule(static) if (n > 1)
    for (int i = 0; i < n; ++i) out[i] = search(queries.row(i), k, nprobe);
    return out;
}

void RetrievalIndex::save(const std::string& path) const {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("cannot open index for write: " + path);
    os.write(kMagic, 4);
    Header h;
    h.mode = mode_ == IndexMode::clustered ? 1 : 0;
    h.m = static_cast<uint64_t>(m_);
    h.dim = static_cast<uint32_t>(dim_);
    h.nlist = static_cast<uint32_t>(nlist_);
    h.nprobe = static_cast<uint32_t>(default_nprobe_);
    os.write(reinterpret_cast<const char*>(&h), sizeof(h));
    auto write_block = [&](const void* data, size_t bytes) {
        os.write(reinterpret_cast<const char*>(data),
                 static_cast<std::streamsize>(bytes));
    };
    write_block(vectors_, sizeof(float) * m_ * dim_);
    write_block(session_ids_.data(), sizeof(int64_t) * session_ids_.size());
    write_block(item_offsets_.data(), sizeof(uint64_t) * item_offsets_.size());
    write_block(item_ids_.data(), sizeof(int32_t) * item_ids_.size());
    if (mode_ == IndexMode::clustered) {
        write_block(centroids_.data(), sizeof(float) * centroids_.size());
        write_block(list_offsets_.data(), sizeof(uint64_t) * list_offsets_.size());
        write_block(list_rows_.data(), sizeof(uint32_t) * list_rows_.size());
    }
    if (!os) throw DataError("index write failed: " + path);
}

RetrievalIndex RetrievalIndex::load(const std::string& path) {
    const int fd = ::open(path.c_str(), O_RDONLY);
    if (fd < 0) throw DataError("cannot open index: " + path);
    struct stat st {};
    if (::fstat(fd, &st) != 0) {
        ::close(fd);
        throw DataError("cannot stat index: " + path);
    }
    const size_t file_size = static_cast<size_t>(st.st_size);
    void* map = ::mmap(nullptr, file_size, PROT_READ, MAP_PRIVATE, fd, 0);
    ::close(fd);
    if (map == MAP_FAILED) throw DataError("mmap failed for index: " + path);
    auto mapping = std::shared_ptr<void>(
        map, [file_size](void* p) { ::munmap(p, file_size); });

    const char* base = static_cast<const char*>(map);
    size_t off = 0;
    auto need = [&](size_t bytes) {
        if (off + bytes > file_size) throw DataError("truncated index file: " + path);
        const char* p = base + off;
        off += bytes;
        return p;
    };
    if (std::memcmp(need(4), kMagic, 4) != 0)
        throw DataError("bad index magic in " + path);
    Header h;
    std::memcpy(&h, need(sizeof(h)), sizeof(h));
    if (h.version != kVersion)
        throw DataError("unsupported index version in " + path);

    RetrievalIndex index;
    index.mode_ = h.mode == 1 ? IndexMode::clustered : IndexMode::exact;
    index.m_ = static_cast<int64_t>(h.m);
    index.dim_ = static_cast<int>(h.dim);
    index.nlist_ = static_cast<int>(h.nlist);
    index.default_nprobe_ = static_cast<int>(h.nprobe);

    // The vector block is served straight from the mapping.
    index.vectors_ = reinterpret_cast<const float*>(
        need(sizeof(float) * index.m_ * index.dim_));
    index.mapping_ = std::move(mapping);

    auto copy_block = [&](auto& vec, size_t count) {
        vec.resize(count);
        using T = typename std::remove_reference_t<decltype(vec)>::value_type;
        if (count > 0) std::memcpy(vec.data(), need(sizeof(T) * count), sizeof(T) * count);
    };
    copy_block(index.session_ids_, index.m_);
    copy_block(index.item_offsets_, index.m_ + 1);
    copy_block(index.item_ids_, index.item_offsets_.back());
    if (index.mode_ == IndexMode::clustered) {
        copy_block(index.centroids_, static_cast<size_t>(index.nlist_) * index.dim_);
        copy_block(index.list_offsets_, index.nlist_ + 1);
        copy_block(index.list_rows_, index.m_);
    }
    return index;
}

}  // namespace retrec

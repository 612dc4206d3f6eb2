// Compares the OpenMP kernels against the serial reference implementations
// on the shapes that dominate training and search. Usage:
//   bench_kernels [threads]

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <string>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "retrec/encoder.hpp"
#include "retrec/kernels.hpp"
#include "retrec/matrix.hpp"
#include "retrec/rng.hpp"

using namespace retrec;

namespace {

double time_ms(const std::function<void()>& fn, int reps) {
    fn();  // warm up
    const auto start = std::chrono::steady_clock::now();
    for (int i = 0; i < reps; ++i) fn();
    const auto end = std::chrono::steady_clock::now();
    return std::chrono::duration<double, std::milli>(end - start).count() / reps;
}

void report(const char* name, double serial_ms, double parallel_ms) {
    std::printf("%-28s serial %9.3f ms   parallel %9.3f ms   speedup %5.2fx\n",
                name, serial_ms, parallel_ms, serial_ms / parallel_ms);
}

}  // namespace

int main(int argc, char** argv) {
    int threads = 0;
    if (argc > 1) threads = std::atoi(argv[1]);
#ifdef _OPENMP
    if (threads > 0) omp_set_num_threads(threads);
    std::printf("OpenMP enabled, max threads %d\n", omp_get_max_threads());
#else
    std::printf("OpenMP disabled; both columns run serially\n");
#endif

    Rng rng(42);

    {
        const int n = 256;
        Matrix a(n, n), b(n, n), c(n, n);
        a.randn(rng, 1.0);
        b.randn(rng, 1.0);
        const double serial = time_ms([&] { kernels::ref::matmul(a, b, c); }, 5);
        const double parallel = time_ms([&] { kernels::matmul(a, b, c); }, 5);
        report("matmul 256x256", serial, parallel);
    }

    {
        const int m = 20000, d = 128, k = 10;
        std::vector<float> vectors(static_cast<size_t>(m) * d);
        for (auto& v : vectors) v = static_cast<float>(rng.normal());
        std::vector<double> query(d);
        for (auto& v : query) v = rng.normal();
        const double serial = time_ms(
            [&] { kernels::ref::topk_inner_product(vectors.data(), m, d, query.data(), k); },
            5);
        const double parallel = time_ms(
            [&] { kernels::topk_inner_product(vectors.data(), m, d, query.data(), k); },
            5);
        report("top-10 scan 20k x 128", serial, parallel);
    }

    {
        EncoderConfig cfg;
        cfg.vocab_size = 1000;
        cfg.dim = 64;
        cfg.n_layers = 2;
        cfg.n_heads = 2;
        cfg.max_len = 50;
        cfg.dropout = 0.0;
        EncoderParams params(cfg);
        params.init_random(rng);
        std::vector<ItemSequence> batch(64);
        for (auto& seq : batch) {
            seq.items.resize(40);
            for (auto& id : seq.items)
                id = static_cast<int32_t>(rng.uniform_int(cfg.vocab_size));
        }
        // encode_batch parallelizes over sequences; one sequence is the
        // serial baseline scaled up.
        const double serial = time_ms(
            [&] {
                for (const auto& seq : batch) encode(params, seq);
            },
            3);
        const double parallel = time_ms([&] { encode_batch(params, batch); }, 3);
        report("encode batch 64 x len 40", serial, parallel);
    }

    return 0;
}

// Copyright Contributors to the splatfield project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdlib>
#include <string>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace splatfield {

/// Number of worker threads used by parallel loops.
inline int thread_count() {
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

/// Sets the worker count; values < 1 fall back to SPLATFIELD_THREADS, then to the hardware count.
inline void set_thread_count(int threads) {
    if (threads < 1) {
        if (const char *env = std::getenv("SPLATFIELD_THREADS")) {
            try {
                threads = std::stoi(env);
            } catch (...) {
                threads = 0;
            }
        }
    }
#ifdef _OPENMP
    if (threads < 1) {
        threads = omp_get_num_procs();
    }
    omp_set_num_threads(std::max(threads, 1));
#else
    (void)threads;
#endif
}

/// Runs fn(i) for i in [begin, end). Iterations must touch disjoint state.
template <typename Fn>
void parallel_for(std::ptrdiff_t begin, std::ptrdiff_t end, Fn &&fn, bool dynamic = false) {
    if (dynamic) {
#pragma omp parallel for schedule(dynamic, 1)
        for (std::ptrdiff_t i = begin; i < end; ++i) {
            fn(i);
        }
    } else {
#pragma omp parallel for schedule(static)
        for (std::ptrdiff_t i = begin; i < end; ++i) {
            fn(i);
        }
    }
}

} // namespace splatfield

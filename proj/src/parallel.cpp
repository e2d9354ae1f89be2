#include "dipp/parallel.hpp"

#include <cstdlib>
#include <string>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace dipp::parallel {

namespace {

int g_threads = -1;

int available() {
#ifdef _OPENMP
  return omp_get_num_procs();
#else
  return 1;
#endif
}

void apply(int n) {
  g_threads = n < 0 ? 0 : n;
#ifdef _OPENMP
  if (g_threads > 0) omp_set_num_threads(g_threads);
#endif
}

}  // namespace

void init_from_env() {
  const char* env = std::getenv("DIPP_THREADS");
  if (env == nullptr || *env == '\0') {
    apply(available());
    return;
  }
  try {
    apply(std::stoi(env));
  } catch (const std::exception&) {
    apply(available());
  }
}

int threads() {
  if (g_threads < 0) init_from_env();
  return g_threads;
}

void set_threads(int n) { apply(n); }

}  // namespace dipp::parallel

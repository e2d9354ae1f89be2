#pragma once

namespace dipp::parallel {

// Effective worker count for the OpenMP kernels. 0 selects the serial
// reference kernels. Initialized from DIPP_THREADS on first use.
int threads();
void set_threads(int n);
inline bool serial_mode() { return threads() == 0; }

// Re-reads DIPP_THREADS (unset means "all available cores").
void init_from_env();

}  // namespace dipp::parallel

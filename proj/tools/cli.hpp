#pragma once

// qkdsim command dispatch. Kept out of main() so tests drive it in-process.

#include <iosfwd>
#include <string>
#include <vector>

namespace qkd::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitRuntime = 2;

inline constexpr const char* kRatesCsvHeader = "distance_km,q_mu,e_mu,r_pp,r_finite,r_bps";
inline constexpr const char* kTcnLossCsvHeader = "epoch,loss";
inline constexpr const char* kTcnEvalCsvHeader = "initial_loss,final_loss";

/// `args` excludes the program name. Returns the process exit code:
/// 0 success, 1 usage error, 2 runtime or divergence error.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Worker threads: hardware concurrency, capped by OPTIQKD_THREADS when set.
int worker_threads();

}  // namespace qkd::cli

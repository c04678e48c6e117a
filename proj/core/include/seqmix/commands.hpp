#pragma once

#include <iosfwd>

#include "seqmix/runconfig.hpp"

namespace seqmix::cli {

// exit codes: 0 success, 1 runtime failure, 2 usage error (the tool maps
// argument-parse failures to 2 before these run)

/// Parameter-matched scaling sweep; writes <out>/scaling.csv and prints a
/// per-kind summary (fitted exponents, deltas vs MHSA).
int cmd_bench(const RunConfig& config, std::ostream& log);

/// Desk-scale masked pre-training loop over bucketed batches; writes
/// <out>/loss_log.csv and <out>/checkpoint.bin.
int cmd_pretrain(const RunConfig& config, std::ostream& log);

/// Full property suite; prints a pass/fail table, exit 0 iff all pass.
int cmd_verify(const RunConfig& config, std::ostream& log);

}  // namespace seqmix::cli

#pragma once

#include <string>
#include <vector>

#include "seqmix/tensor.hpp"

namespace seqmix::verify {

struct CheckResult {
    std::string name;
    bool pass = false;
    std::string detail;
};

struct VerifyOptions {
    std::string only_filter;  // substring match on check names; empty = all
    /// Test-harness hook: added to the first analytic gradient component in
    /// every gradient check. Nonzero values must make those checks fail.
    double inject_gradient_fault = 0.0;
    std::uint64_t seed = 123;
};

/// Gradient checks per mixer, scan-vs-recurrence, quantizer invariances,
/// permutation equivariance, parameter matching.
std::vector<CheckResult> run_property_suite(const VerifyOptions& options);

bool all_passed(const std::vector<CheckResult>& results);

}  // namespace seqmix::verify

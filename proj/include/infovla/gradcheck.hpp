#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace infovla {

struct GradCheckEntry {
    std::string op;
    double max_rel_err = 0.0;
    int coordinates_checked = 0;
    bool pass = false;
};

// Central finite-difference sweep (step 1e-4, dims <= 8) over every autodiff
// primitive and every loss, `instances` random instances each. Coordinates
// where |analytic| < 1e-8 are skipped; pass threshold is 1e-4 relative error.
// `include_corrupt_fixture` appends a deliberately wrong-gradient entry that
// must fail, proving the harness can reject.
std::vector<GradCheckEntry> run_gradient_suite(int instances, std::uint64_t seed,
                                               bool include_corrupt_fixture = false);

bool gradient_suite_ok(const std::vector<GradCheckEntry>& entries);
std::string gradient_suite_report(const std::vector<GradCheckEntry>& entries);

}  // namespace infovla

#pragma once

// Acceptance property suite shared by the acceptance binary and `voxtts check`.
// This header is precision-neutral: the gradient families are compiled against
// the double build, everything else against the float build.

#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

namespace voxcheck {

struct Result {
    int id = 0;
    std::string name;
    bool pass = false;
    std::string detail;
    double seconds = 0;
};

struct Criterion {
    int id;
    std::string name;
    std::function<Result()> run;
};

const std::vector<Criterion> & criteria();

// Runs the selected criteria (all when empty); prints one line per criterion
// to `out` as soon as it finishes. A criterion that throws fails.
std::vector<Result> run_criteria(const std::vector<int> & ids, std::ostream * out);
std::string format_line(const Result & r);

// Finite-difference families over the model losses (double build).
struct GradFamily {
    std::string name;
    double worst_rel = 0;
    int seeds = 0;
    size_t checked = 0;
    size_t kinks = 0;  // stencils straddling a non-differentiable point
};
const std::vector<std::string> & gradient_families();
GradFamily gradient_family(const std::string & name, int seeds);

}  // namespace voxcheck

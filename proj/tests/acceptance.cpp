// Runs every acceptance criterion and prints one PASS/FAIL line each.
#include "checks.h"

#include <iostream>
#include <string>

int main(int argc, char ** argv) {
    std::vector<int> ids;
    for (int i = 1; i < argc; ++i) ids.push_back(std::stoi(argv[i]));
    auto results = voxcheck::run_criteria(ids, &std::cout);
    size_t failed = 0;
    for (const auto & r : results) failed += !r.pass;
    std::cout << results.size() - failed << "/" << results.size() << " criteria passed" << std::endl;
    return failed ? 1 : 0;
}

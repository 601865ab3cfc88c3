#include <benchmark/benchmark.h>

#include "lmk/parallel.hpp"

int main(int argc, char** argv) {
    lmk::retain_freed_memory();
    benchmark::Initialize(&argc, argv);
    if (benchmark::ReportUnrecognizedArguments(argc, argv)) return 1;
    benchmark::RunSpecifiedBenchmarks();
    benchmark::Shutdown();
    return 0;
}

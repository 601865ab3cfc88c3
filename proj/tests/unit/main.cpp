#define DOCTEST_CONFIG_IMPLEMENT
#include <doctest.h>

#include "lmk/parallel.hpp"

int main(int argc, char** argv) {
    lmk::retain_freed_memory();
    doctest::Context ctx(argc, argv);
    return ctx.run();
}

#include "cli.hpp"

int main(int argc, char** argv) { return lmk::cli::run(argc, argv); }

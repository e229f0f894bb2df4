#include "avasr/cli.hpp"

int main(int argc, char** argv) { return avasr::cli_run(argc, argv); }

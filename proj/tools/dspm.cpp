#include "dspm/cli.hpp"

int main(int argc, char** argv) { return dspm::cli::run(argc, argv); }

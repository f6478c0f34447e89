#include "dspert/cli.hpp"

int main(int argc, char** argv) { return dspert::cli::run(argc, argv); }

#include "fairrank/cli.hpp"

int main(int argc, char** argv) { return fairrank::cli::main(argc, argv); }

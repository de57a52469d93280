#include "cli.hpp"

int main(int argc, char** argv) { return qesr::cli::run_cli(argc, argv); }

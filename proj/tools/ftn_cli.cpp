#include "ftn/cli.hpp"

int main(int argc, char** argv) { return ftn::run_cli(argc, argv); }

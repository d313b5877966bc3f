#include "nanonet/cli.hpp"

int main(int argc, char** argv) { return nanonet::run_cli(argc, argv); }

#include "fixed_dg/cli.hpp"

int main(int argc, char** argv) { return fixed_dg::run_cli(argc, argv); }

#include "ecn/cli.hpp"

int main(int argc, char** argv) { return ecn::cli::run(argc, argv); }

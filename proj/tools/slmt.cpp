#include "slmt/cli.hpp"

int main(int argc, char** argv) { return slmt::cli::run(argc, argv); }

#include "fsmt/cli.hpp"

int main(int argc, char** argv) { return fsmt::cli::run(argc, argv); }

#include "pnemb/cli.hpp"

int main(int argc, char** argv) { return pnemb::cli::run(argc, argv); }

#include "ndm/cli.hpp"

int main(int argc, char** argv) { return ndm::cli::run(argc, argv); }

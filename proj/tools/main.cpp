#include "cli.hpp"

int main(int argc, char** argv) { return diffem::cli::cli_main(argc, argv); }

#include "puuma/cli.hpp"

int main(int argc, char** argv) { return puuma::cli::run(argc, argv); }

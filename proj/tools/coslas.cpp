#include "coslas/cli.hpp"

int main(int argc, char** argv) { return coslas::cli::run(argc, argv); }

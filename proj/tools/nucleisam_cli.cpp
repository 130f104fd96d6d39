#include "nucleisam/cli.hpp"

int main(int argc, char** argv) { return nucleisam::cli::run(argc, argv); }

#include "surf2ct/cli.hpp"

int main(int argc, char** argv) { return surf2ct::cli::run(argc, argv); }

#include "mambaseg/cli.hpp"

int main(int argc, char** argv) { return mambaseg::cli::dispatch(argc, argv); }

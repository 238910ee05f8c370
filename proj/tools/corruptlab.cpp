#include "corruptlab/cli.hpp"

int main(int argc, char** argv) { return corruptlab::cli_dispatch(argc, argv); }

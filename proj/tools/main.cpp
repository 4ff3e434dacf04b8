#include "metaseg/cli.hpp"

int main(int argc, char** argv) { return metaseg::run_cli(argc, argv); }

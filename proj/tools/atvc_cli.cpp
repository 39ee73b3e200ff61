#include "atvc/harness.hpp"

int main(int argc, char** argv) { return atvc::cli_main(argc, argv); }

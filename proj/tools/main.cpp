#include "mera/harness.hpp"

int main(int argc, char** argv) { return mera::cli_main(argc, argv); }

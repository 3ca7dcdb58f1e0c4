#include "ksc/harness.hpp"

int main(int argc, char** argv) { return ksc::run_cli(argc, argv); }

#include "gradmerge/harness.hpp"

int main(int argc, char** argv) { return gradmerge::harness::run_cli(argc, argv); }

#include "mcqc/cli.hpp"

int main(int argc, char** argv) { return mcqc::cli::run(argc, argv); }

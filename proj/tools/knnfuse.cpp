#include "knnfuse/cli.hpp"

int main(int argc, char** argv) { return knnfuse::run_cli(argc, argv); }

#include <iostream>

#include "rforge/cli.hpp"

int main(int argc, char** argv) { return rforge::dispatch(argc, argv, std::cout, std::cerr); }

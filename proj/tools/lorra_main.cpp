#include <iostream>

#include "lorra/cli.hpp"

int main(int argc, char** argv) {
    return lorra::run_cli(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}

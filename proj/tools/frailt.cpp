#include <iostream>
#include <string>
#include <vector>

#include "frailt/cli.hpp"

int main(int argc, char** argv) {
    return frailt::cli::run(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}

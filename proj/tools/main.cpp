#include <string>
#include <vector>

#include "kwsbias/cli.hpp"

int main(int argc, char** argv) {
    return kwsbias::cli::run_cli(std::vector<std::string>(argv + 1, argv + argc));
}

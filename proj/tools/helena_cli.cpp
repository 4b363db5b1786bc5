#include <string>
#include <vector>

#include "helena/cli.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return helena::cli::run(args);
}

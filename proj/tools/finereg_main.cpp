#include <vector>

#include "finereg/cli_main.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return finereg::cli::cli_run(std::move(args));
}

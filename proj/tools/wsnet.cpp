#include <vector>

#include "wsnet/cli.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return wsnet::cli::run(std::move(args));
}

#include <CLI11.hpp>

#include <cstdio>

int main(int argc, char** argv) {
    CLI::App app{"object-centric latent action pipeline"};
    app.require_subcommand(0, 1);
    CLI11_PARSE(app, argc, argv);
    std::puts("oclapo: no subcommand given (see --help)");
    return 0;
}

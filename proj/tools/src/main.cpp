#include "tabret_cli/commands.hpp"

int main(int argc, char** argv) { return tabret::cli::run(argc, argv); }

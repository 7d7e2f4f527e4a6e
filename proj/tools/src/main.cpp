#include "rpcss/cli/commands.hpp"

int main(int argc, char** argv) { return rpcss::cli::run_cli(argc, argv); }

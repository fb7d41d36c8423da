#include "cli_app.hpp"

int main(int argc, char** argv) { return msmv::cli::run_cli(argc, argv); }

#include "convt/cli.hpp"

int main(int argc, char** argv) { return convt::cli::dispatch(argc, argv); }

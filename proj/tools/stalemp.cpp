#include "stalemp/cli.hpp"

int main(int argc, char** argv) { return stalemp::app::run_cli(argc, argv); }

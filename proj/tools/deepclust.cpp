#include "cli.hpp"

int main(int argc, char **argv)
{
  return deepclust::cli::run_cli(argc, argv);
}

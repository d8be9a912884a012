#include <cstring>
#include <iostream>

#include "hydra/cli.hpp"
#include "hydra/monitor.hpp"

int main(int argc, char** argv) {
  if (argc >= 2 && std::strcmp(argv[1], hydra::kMonitorSubcommand) == 0) {
    if (argc != 3) return 2;
    try {
      return hydra::monitor_main(hydra::boot_args_from_json(hydra::json::parse(argv[2])));
    } catch (const std::exception& e) {
      std::cerr << "monitor: " << e.what() << std::endl;
      return 2;
    }
  }
  return hydra::cli_main(argc, argv);
}

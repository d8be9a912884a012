#pragma once

// The `hydra` command line.

#include "hydra/model.hpp"

namespace hydra {

// Exit status: 0 success, 1 user error, 2 daemon or transport failure;
// foreground `run`, `attach` and `exec` mirror the process's status.
int cli_main(int argc, char** argv);

// Exit status for a failure carrying `code`.
int exit_status_for(ErrorCode code);

}  // namespace hydra

#pragma once

namespace nanonet {

// Entry point of the `nanonet` tool. Subcommands: train, eval, param-report,
// cka, split, gen-toy. Returns 0 on success, 1 on runtime failure and 2 on
// usage errors.
int run_cli(int argc, char** argv);

}  // namespace nanonet

// Placeholder entry point; subcommands land together with the pipeline.
#include <cstdio>

int main() {
  std::puts("dyvo: run|eval|map|synth (not wired up yet)");
  return 1;
}

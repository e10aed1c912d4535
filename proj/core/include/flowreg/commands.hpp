#pragma once

#include "flowreg/metrics.hpp"
#include "flowreg/run_config.hpp"

namespace flowreg {

// CLI entry points. Each echoes the effective configuration into the output
// directory, returns 0 on success, 2 on configuration/usage errors and 1 on
// runtime failures; partial failures list the offending case ids on stderr.

int cmd_synth(const RunConfig& cfg);
int cmd_train(const RunConfig& cfg);
int cmd_register(const RunConfig& cfg);
int cmd_evaluate(const RunConfig& cfg);

/// Loads the case directories (case_0000, case_0001, ...) under a dataset
/// root, sorted by index.
std::vector<PhantomCase> load_dataset(const std::filesystem::path& root);

/// Builds (fixed, moving) training samples for a task direction.
std::vector<TrainSample> to_samples(const std::vector<PhantomCase>& cases, TaskDirection dir,
                                    int begin, int end);

}  // namespace flowreg

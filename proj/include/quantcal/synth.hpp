#pragma once

#include <cstdint>
#include <string>

namespace quantcal {

struct SynthArtifacts {
    std::string model_manifest;
    std::string cal_manifest;
    std::string eval_manifest;
};

// Writes a teacher model plus calibration and eval sets under out_dir.
// regression_heavytail: an MLP whose input carries rare spikes at roughly
// 100x the signal body (forwarded by one weakly-read hidden channel, so
// clipping them is nearly free while keeping them in range wrecks coarse
// quantization), and whose signal rides a redundant low-rank code so that
// fine-grid rounding noise averages out downstream. Targets are noisy
// teacher outputs. classification_toy: a Conv1d/ReLU stack with one-hot
// argmax labels. Identical seeds produce byte-identical files.
SynthArtifacts synth_regression_heavytail(std::uint64_t seed, const std::string& out_dir,
                                          int n_cal = 100, int n_eval = 200);
SynthArtifacts synth_classification_toy(std::uint64_t seed, const std::string& out_dir,
                                        int n_cal = 100, int n_eval = 200);

SynthArtifacts synth_task(const std::string& task, std::uint64_t seed,
                          const std::string& out_dir, int n_cal = 100,
                          int n_eval = 200);

} // namespace quantcal

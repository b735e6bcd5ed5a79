#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "magic/eval.hpp"
#include "magic/sampler.hpp"

namespace magic {

using Metadata = std::map<std::string, std::string>;

/// Backbone weights, architecture, schedule and optional optimizer state.
void save_backbone(const std::string& path, const Denoiser<float>& net, const NoiseSchedule& sched,
                   const Adam* adam = nullptr, const Metadata& extra = {});
std::unique_ptr<Denoiser<float>> load_backbone(const Checkpoint& ckpt);

/// Encoder checkpoints record the digest of the backbone they were trained
/// against; loading against any other backbone is rejected.
void save_encoder(const std::string& path, const GuidanceEncoder<float>& enc, const Denoiser<float>& backbone,
                  const Adam* adam = nullptr, const Metadata& extra = {});
GuidanceEncoder<float> load_encoder(const Checkpoint& ckpt, const Denoiser<float>& backbone);

void save_extractor(const std::string& path, const FeatureExtractor& fx, double accuracy);
/// Returns the extractor and its recorded held-out accuracy.
std::pair<std::unique_ptr<FeatureExtractor>, double> load_extractor(const std::string& path);

/// Test-split cases for consecutive scene seeds.
std::vector<CompletionCase> scene_cases(std::uint64_t first, int count, const WorldConfig& world);

}  // namespace magic

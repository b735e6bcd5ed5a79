#include "magic/pipeline.hpp"

#include <sstream>
#include <stdexcept>

namespace magic {

namespace {

std::string int_list(const std::vector<int>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

std::vector<int> parse_ints(const std::string& s) {
  std::vector<int> out;
  std::istringstream is(s);
  std::string item;
  while (std::getline(is, item, ',')) out.push_back(std::stoi(item));
  return out;
}

}  // namespace

void save_backbone(const std::string& path, const Denoiser<float>& net, const NoiseSchedule& sched, const Adam* adam,
                   const Metadata& extra) {
  Checkpoint ck;
  ck.put_parameters(net.parameters());
  put_unet_config(ck, net.config());
  put_schedule(ck, sched);
  if (adam) adam->save(ck);
  ck.metadata["kind"] = "backbone";
  ck.metadata["param_digest"] = net.parameters().digest();
  for (const auto& [k, v] : extra) ck.metadata[k] = v;
  save_checkpoint(ck, path);
}

std::unique_ptr<Denoiser<float>> load_backbone(const Checkpoint& ckpt) {
  if (ckpt.meta_or("kind", "") != "backbone") throw std::runtime_error("checkpoint does not hold a backbone");
  auto net = std::make_unique<Denoiser<float>>(unet_config_from(ckpt), 0);
  ckpt.load_parameters(net->parameters());
  return net;
}

void save_encoder(const std::string& path, const GuidanceEncoder<float>& enc, const Denoiser<float>& backbone,
                  const Adam* adam, const Metadata& extra) {
  Checkpoint ck;
  ck.put_parameters(enc.parameters());
  put_unet_config(ck, backbone.config());
  if (adam) adam->save(ck);
  const auto& cfg = enc.config();
  ck.metadata["kind"] = "encoder";
  ck.metadata["encoder.modality"] = std::string(modality_name(cfg.modality));
  ck.metadata["encoder.in_channels"] = std::to_string(cfg.in_channels);
  ck.metadata["encoder.block_channels"] = int_list(cfg.block_channels);
  ck.metadata["backbone_digest"] = backbone.parameters().digest();
  for (const auto& [k, v] : extra) ck.metadata[k] = v;
  save_checkpoint(ck, path);
}

GuidanceEncoder<float> load_encoder(const Checkpoint& ckpt, const Denoiser<float>& backbone) {
  if (ckpt.meta_or("kind", "") != "encoder") throw std::runtime_error("checkpoint does not hold a guidance encoder");
  const std::string want = backbone.parameters().digest();
  const std::string have = ckpt.meta("backbone_digest");
  if (have != want) {
    throw std::runtime_error("encoder was trained against backbone " + have + ", but the loaded backbone is " + want);
  }
  GuidanceEncoderConfig cfg;
  cfg.modality = parse_modality(ckpt.meta("encoder.modality"));
  cfg.in_channels = std::stoi(ckpt.meta("encoder.in_channels"));
  cfg.block_channels = parse_ints(ckpt.meta("encoder.block_channels"));
  GuidanceEncoder<float> enc(cfg, 0);
  ckpt.load_parameters(enc.parameters());
  return enc;
}

void save_extractor(const std::string& path, const FeatureExtractor& fx, double accuracy) {
  Checkpoint ck;
  ck.put_parameters(fx.parameters());
  ck.metadata["kind"] = "extractor";
  ck.metadata["accuracy"] = format_double(accuracy);
  save_checkpoint(ck, path);
}

std::pair<std::unique_ptr<FeatureExtractor>, double> load_extractor(const std::string& path) {
  const Checkpoint ck = load_checkpoint(path);
  if (ck.meta_or("kind", "") != "extractor") throw std::runtime_error(path + " does not hold a feature extractor");
  auto fx = std::make_unique<FeatureExtractor>(0);
  ck.load_parameters(fx->parameters());
  return {std::move(fx), std::stod(ck.meta("accuracy"))};
}

std::vector<CompletionCase> scene_cases(std::uint64_t first, int count, const WorldConfig& world) {
  std::vector<CompletionCase> cases;
  cases.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) cases.push_back(make_case(first + static_cast<std::uint64_t>(i), world));
  return cases;
}

}  // namespace magic

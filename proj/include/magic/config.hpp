#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "magic/sampler.hpp"
#include "magic/toyworld.hpp"
#include "magic/unet.hpp"

namespace magic {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Parsed INI text: ordered sections of `key = value` lines. Full-line `#`
/// comments and trailing ` #` comments are dropped.
struct IniFile {
  struct Entry {
    std::string key, value;
    int line = 0;
  };
  struct Section {
    std::string name;
    int line = 0;
    std::vector<Entry> entries;
  };
  std::vector<Section> sections;

  static IniFile parse(const std::string& text);
};

struct OptimConfig {
  double lr = 2e-4;
  int batch = 32;
  int steps = 20000;
  bool fixed_batch = false;
  std::string checkpoint;  // trained weights used by later commands
  std::string resume;      // checkpoint to continue training from
};

struct McuSection {
  OptimConfig optim;
};

enum class CompleteMode { unguided, single, cmb, fla };
CompleteMode parse_complete_mode(const std::string& s);
std::string complete_mode_name(CompleteMode m);

struct CompleteConfig {
  CompleteMode mode = CompleteMode::unguided;
  std::vector<Modality> modalities;
  std::uint64_t scene_first = 11000;
  int count = 8;
  int samples_per_input = 1;
  int fla_steps = 50;
  int chunk = 16;
  // external input instead of scene seeds
  std::string image;
  std::string mask;
  std::map<Modality, std::string> guidance;
};

enum class SweepAxis { P, Q, gamma, modality_subsets };
SweepAxis parse_sweep_axis(const std::string& s);
std::string sweep_axis_name(SweepAxis a);

struct SweepConfig {
  SweepAxis axis = SweepAxis::P;
  std::vector<std::string> values;  // subsets are written like seg+depth
};

struct EvalConfig {
  std::string extractor;  // checkpoint; trained on the fly when empty
  int extractor_steps = 3000;
  int extractor_batch = 32;
  double extractor_lr = 1e-3;
  int gate_count = 1000;  // held-out scenes for the accuracy gate
  std::vector<std::string> runs;
  bool paired = false;
  int bootstrap = 2000;
  double level = 0.95;
};

struct RunConfig {
  WorldConfig world;
  std::uint64_t seed_first = 0;
  std::int64_t seed_last = 11999;  // inclusive; below seed_first means none
  std::vector<Split> splits{Split::train, Split::val, Split::test};

  int train_steps = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  int sample_steps = 50;
  double eta = 0.0;

  UNetConfig unet;
  OptimConfig backbone;
  double class_dropout = 0.5;
  std::map<Modality, McuSection> mcu;

  CMBConfig cmb;
  CompleteConfig complete;
  SweepConfig sweep;
  EvalConfig eval;

  std::uint64_t seed = 0;
  std::string out;

  NoiseSchedule schedule() const;
  /// Seed for a named component, derived from the run seed.
  std::uint64_t component_seed(const std::string& tag) const;
  /// Every key with its resolved value, in INI form.
  std::string echo() const;
  /// Hex digest of the echo, leaving out the output directory.
  std::string digest() const;
  void validate() const;
};

/// Unknown sections or keys, duplicates and malformed values are rejected.
RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::string& path);

std::vector<std::string> split_list(const std::string& s, char sep = ',');
std::string trim(const std::string& s);
std::string fnv_digest(const std::string& bytes);

}  // namespace magic

#include "magic/config.hpp"

#include <charconv>
#include <fstream>
#include <set>
#include <sstream>

#include "magic/checkpoint.hpp"

namespace magic {

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

std::vector<std::string> split_list(const std::string& s, char sep) {
  std::vector<std::string> out;
  if (trim(s).empty()) return out;
  std::string item;
  std::istringstream is(s);
  while (std::getline(is, item, sep)) out.push_back(trim(item));
  return out;
}

std::string fnv_digest(const std::string& bytes) { return hex64(fnv1a(bytes.data(), bytes.size())); }

IniFile IniFile::parse(const std::string& text) {
  IniFile ini;
  std::istringstream is(text);
  std::string raw;
  int line = 0;
  while (std::getline(is, raw)) {
    ++line;
    std::string s = raw;
    if (line == 1 && s.rfind("\xEF\xBB\xBF", 0) == 0) s = s.substr(3);
    const auto hash = s.find(" #");
    if (hash != std::string::npos) s = s.substr(0, hash);
    s = trim(s);
    if (s.empty() || s[0] == '#') continue;
    if (s.front() == '[') {
      if (s.back() != ']') throw ConfigError("config line " + std::to_string(line) + ": unterminated section header");
      const std::string name = trim(s.substr(1, s.size() - 2));
      for (const auto& sec : ini.sections) {
        if (sec.name == name) throw ConfigError("config line " + std::to_string(line) + ": duplicate section [" + name + "]");
      }
      ini.sections.push_back({name, line, {}});
      continue;
    }
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(line) + ": expected key = value");
    if (ini.sections.empty()) throw ConfigError("config line " + std::to_string(line) + ": key outside any section");
    const std::string key = trim(s.substr(0, eq));
    if (key.empty()) throw ConfigError("config line " + std::to_string(line) + ": empty key");
    auto& sec = ini.sections.back();
    for (const auto& e : sec.entries) {
      if (e.key == key) throw ConfigError("config line " + std::to_string(line) + ": duplicate key " + key);
    }
    sec.entries.push_back({key, trim(s.substr(eq + 1)), line});
  }
  return ini;
}

namespace {

// Pulls typed values out of one section and remembers what was consumed.
class SectionReader {
 public:
  explicit SectionReader(const IniFile::Section& sec) : sec_(sec) {}

  const IniFile::Entry* find(const std::string& key) {
    for (const auto& e : sec_.entries) {
      if (e.key == key) {
        used_.insert(key);
        return &e;
      }
    }
    return nullptr;
  }

  template <typename T>
  void num(const std::string& key, T& out) {
    const auto* e = find(key);
    if (!e) return;
    T v{};
    const char* first = e->value.data();
    const char* last = first + e->value.size();
    auto [p, ec] = std::from_chars(first, last, v);
    if (ec != std::errc() || p != last) fail(*e, "not a number");
    out = v;
  }

  void flag(const std::string& key, bool& out) {
    const auto* e = find(key);
    if (!e) return;
    if (e->value == "true" || e->value == "1") {
      out = true;
    } else if (e->value == "false" || e->value == "0") {
      out = false;
    } else {
      fail(*e, "expected true or false");
    }
  }

  void str(const std::string& key, std::string& out) {
    if (const auto* e = find(key)) out = e->value;
  }

  template <typename Fn>
  void parsed(const std::string& key, Fn&& fn) {
    const auto* e = find(key);
    if (!e) return;
    try {
      fn(e->value);
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception& ex) {
      fail(*e, ex.what());
    }
  }

  // Keys with a given prefix, e.g. delta.<modality>.
  std::vector<const IniFile::Entry*> prefixed(const std::string& prefix) {
    std::vector<const IniFile::Entry*> out;
    for (const auto& e : sec_.entries) {
      if (e.key.rfind(prefix, 0) == 0) {
        used_.insert(e.key);
        out.push_back(&e);
      }
    }
    return out;
  }

  void finish() const {
    for (const auto& e : sec_.entries) {
      if (!used_.count(e.key)) {
        throw ConfigError("config line " + std::to_string(e.line) + ": unknown key '" + e.key + "' in [" + sec_.name +
                          "]");
      }
    }
  }

  [[noreturn]] void fail(const IniFile::Entry& e, const std::string& why) const {
    throw ConfigError("config line " + std::to_string(e.line) + ": [" + sec_.name + "] " + e.key + " = '" + e.value +
                      "': " + why);
  }

 private:
  const IniFile::Section& sec_;
  std::set<std::string> used_;
};

std::vector<int> int_list(const std::string& s) {
  std::vector<int> out;
  for (const auto& item : split_list(s)) {
    int v = 0;
    auto [p, ec] = std::from_chars(item.data(), item.data() + item.size(), v);
    if (ec != std::errc() || p != item.data() + item.size()) throw ConfigError("bad integer '" + item + "'");
    out.push_back(v);
  }
  return out;
}

Modality spatial_modality(const std::string& s) {
  const Modality m = parse_modality(s);
  if (m == Modality::class_label) throw ConfigError("class_label has no map or encoder section");
  return m;
}

void read_optim(SectionReader& r, OptimConfig& o) {
  r.num("lr", o.lr);
  r.num("batch", o.batch);
  r.num("steps", o.steps);
  r.flag("fixed_batch", o.fixed_batch);
  r.str("checkpoint", o.checkpoint);
  r.str("resume", o.resume);
}

std::string join(const std::vector<std::string>& items, const std::string& sep = ",") {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) out += (i ? sep : "") + items[i];
  return out;
}

void write_optim(std::ostream& os, const OptimConfig& o) {
  os << "lr = " << format_double(o.lr) << "\nbatch = " << o.batch << "\nsteps = " << o.steps
     << "\nfixed_batch = " << (o.fixed_batch ? "true" : "false") << "\ncheckpoint = " << o.checkpoint
     << "\nresume = " << o.resume << '\n';
}

}  // namespace

CompleteMode parse_complete_mode(const std::string& s) {
  if (s == "unguided") return CompleteMode::unguided;
  if (s == "single") return CompleteMode::single;
  if (s == "cmb") return CompleteMode::cmb;
  if (s == "fla") return CompleteMode::fla;
  throw ConfigError("unknown completion mode: " + s);
}

std::string complete_mode_name(CompleteMode m) {
  switch (m) {
    case CompleteMode::unguided: return "unguided";
    case CompleteMode::single: return "single";
    case CompleteMode::cmb: return "cmb";
    case CompleteMode::fla: return "fla";
  }
  return "unknown";
}

SweepAxis parse_sweep_axis(const std::string& s) {
  if (s == "P") return SweepAxis::P;
  if (s == "Q") return SweepAxis::Q;
  if (s == "gamma") return SweepAxis::gamma;
  if (s == "modality_subsets") return SweepAxis::modality_subsets;
  throw ConfigError("unknown sweep axis: " + s);
}

std::string sweep_axis_name(SweepAxis a) {
  switch (a) {
    case SweepAxis::P: return "P";
    case SweepAxis::Q: return "Q";
    case SweepAxis::gamma: return "gamma";
    case SweepAxis::modality_subsets: return "modality_subsets";
  }
  return "unknown";
}

NoiseSchedule RunConfig::schedule() const {
  return make_schedule(ScheduleKind::linear, train_steps, beta_start, beta_end, sample_steps);
}

std::uint64_t RunConfig::component_seed(const std::string& tag) const {
  std::uint64_t h = 0;
  for (unsigned char c : tag) h = h * 131 + c;
  return mix_seed(seed, h);
}

void RunConfig::validate() const {
  world.validate();
  unet.validate();
  if (unet.image_size != world.size) throw ConfigError("backbone image size must equal data size");
  if (train_steps < 1 || sample_steps < 1 || sample_steps > train_steps) {
    throw ConfigError("schedule: need 1 <= sample_steps <= train_steps");
  }
  if (!(beta_start > 0.0) || !(beta_end >= beta_start) || !(beta_end < 1.0)) {
    throw ConfigError("schedule: need 0 < beta_start <= beta_end < 1");
  }
  if (eta < 0.0) throw ConfigError("schedule: eta must be >= 0");
  if (!(class_dropout >= 0.0 && class_dropout <= 1.0)) throw ConfigError("backbone: class_dropout outside [0,1]");
  auto check_optim = [](const std::string& where, const OptimConfig& o) {
    if (o.steps < 0 || o.batch < 1 || !(o.lr > 0.0)) {
      throw ConfigError(where + ": need steps >= 0, batch >= 1, lr > 0");
    }
  };
  check_optim("backbone", backbone);
  for (const auto& [m, s] : mcu) check_optim("mcu." + std::string(modality_name(m)), s.optim);
  try {
    cmb.validate(sample_steps);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (complete.count < 0 || complete.samples_per_input < 1 || complete.chunk < 1) {
    throw ConfigError("complete: need count >= 0, samples_per_input >= 1, chunk >= 1");
  }
  if (complete.fla_steps < 0 || complete.fla_steps > sample_steps) {
    throw ConfigError("complete: fla_steps outside [0, sample_steps]");
  }
  if (eval.extractor_steps < 0 || eval.extractor_batch < 1 || eval.bootstrap < 1 || !(eval.level > 0 && eval.level < 1)) {
    throw ConfigError("eval: bad extractor or bootstrap settings");
  }
}

RunConfig parse_run_config(const std::string& text) {
  const IniFile ini = IniFile::parse(text);
  RunConfig c;
  c.unet.cond_embed_classes = 4;
  std::string sweep_values;
  for (const auto& sec : ini.sections) {
    SectionReader r(sec);
    if (sec.name == "data") {
      r.num("size", c.world.size);
      r.num("seed_first", c.seed_first);
      r.num("seed_last", c.seed_last);
      r.parsed("splits", [&](const std::string& v) {
        c.splits.clear();
        for (const auto& s : split_list(v)) c.splits.push_back(parse_split(s));
      });
      r.num("min_shapes", c.world.min_shapes);
      r.num("max_shapes", c.world.max_shapes);
      r.num("background_level", c.world.background_level);
      r.num("background_amplitude", c.world.background_amplitude);
      r.num("edge_threshold", c.world.edge_threshold);
      r.num("sketch_sigma", c.world.sketch_sigma);
      r.num("placement_retries", c.world.placement_retries);
    } else if (sec.name == "schedule") {
      r.parsed("kind", [](const std::string& v) {
        if (v != "linear") throw ConfigError("only the linear schedule is available");
      });
      r.num("train_steps", c.train_steps);
      r.num("beta_start", c.beta_start);
      r.num("beta_end", c.beta_end);
      r.num("sample_steps", c.sample_steps);
      r.num("eta", c.eta);
    } else if (sec.name == "backbone") {
      r.num("base_channels", c.unet.base_channels);
      r.parsed("channel_mults", [&](const std::string& v) { c.unet.channel_mults = int_list(v); });
      r.num("blocks_per_scale", c.unet.blocks_per_scale);
      r.num("time_embed_dim", c.unet.time_embed_dim);
      r.num("classes", c.unet.cond_embed_classes);
      r.num("class_dropout", c.class_dropout);
      read_optim(r, c.backbone);
    } else if (sec.name.rfind("mcu.", 0) == 0) {
      Modality m{};
      try {
        m = spatial_modality(sec.name.substr(4));
      } catch (const std::exception& e) {
        throw ConfigError("config line " + std::to_string(sec.line) + ": [" + sec.name + "]: " + e.what());
      }
      if (c.mcu.count(m)) throw ConfigError("config line " + std::to_string(sec.line) + ": modality repeated");
      read_optim(r, c.mcu[m].optim);
    } else if (sec.name == "cmb") {
      r.num("P", c.cmb.P);
      r.num("Q", c.cmb.Q);
      r.num("gamma", c.cmb.gamma);
      r.num("eta", c.cmb.eta);
      r.parsed("q_mode", [&](const std::string& v) { c.cmb.q_mode = parse_q_mode(v); });
      r.flag("normalize_grad", c.cmb.normalize_grad);
      for (const auto* e : r.prefixed("delta.")) {
        try {
          const Modality m = spatial_modality(e->key.substr(6));
          if (c.cmb.delta.count(m)) r.fail(*e, "modality repeated");
          double v = 0;
          auto [p, ec] = std::from_chars(e->value.data(), e->value.data() + e->value.size(), v);
          if (ec != std::errc() || p != e->value.data() + e->value.size()) r.fail(*e, "not a number");
          c.cmb.delta[m] = v;
        } catch (const ConfigError&) {
          throw;
        } catch (const std::exception& ex) {
          r.fail(*e, ex.what());
        }
      }
    } else if (sec.name == "complete") {
      r.parsed("mode", [&](const std::string& v) { c.complete.mode = parse_complete_mode(v); });
      r.parsed("modalities", [&](const std::string& v) {
        c.complete.modalities.clear();
        for (const auto& s : split_list(v)) c.complete.modalities.push_back(parse_modality(s));
      });
      r.num("scene_first", c.complete.scene_first);
      r.num("count", c.complete.count);
      r.num("samples_per_input", c.complete.samples_per_input);
      r.num("fla_steps", c.complete.fla_steps);
      r.num("chunk", c.complete.chunk);
      r.str("image", c.complete.image);
      r.str("mask", c.complete.mask);
      for (const auto* e : r.prefixed("guidance.")) {
        try {
          c.complete.guidance[spatial_modality(e->key.substr(9))] = e->value;
        } catch (const std::exception& ex) {
          r.fail(*e, ex.what());
        }
      }
    } else if (sec.name == "sweep") {
      r.parsed("axis", [&](const std::string& v) { c.sweep.axis = parse_sweep_axis(v); });
      r.str("values", sweep_values);
    } else if (sec.name == "eval") {
      r.str("extractor", c.eval.extractor);
      r.num("extractor_steps", c.eval.extractor_steps);
      r.num("extractor_batch", c.eval.extractor_batch);
      r.num("extractor_lr", c.eval.extractor_lr);
      r.num("gate_count", c.eval.gate_count);
      r.parsed("runs", [&](const std::string& v) { c.eval.runs = split_list(v); });
      r.flag("paired", c.eval.paired);
      r.num("bootstrap", c.eval.bootstrap);
      r.num("level", c.eval.level);
    } else if (sec.name == "run") {
      r.num("seed", c.seed);
      r.str("out", c.out);
    } else {
      throw ConfigError("config line " + std::to_string(sec.line) + ": unknown section [" + sec.name + "]");
    }
    r.finish();
  }
  // subsets hold commas themselves, so they are separated by ';'
  c.sweep.values = split_list(sweep_values, c.sweep.axis == SweepAxis::modality_subsets ? ';' : ',');
  c.unet.image_size = c.world.size;
  c.validate();
  return c;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read config " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str());
}

std::string RunConfig::echo() const {
  std::ostringstream os;
  std::vector<std::string> split_names;
  for (Split s : splits) split_names.push_back(split_name(s));
  os << "[data]\nsize = " << world.size << "\nseed_first = " << seed_first << "\nseed_last = " << seed_last
     << "\nsplits = " << join(split_names) << "\nmin_shapes = " << world.min_shapes << "\nmax_shapes = " << world.max_shapes
     << "\nbackground_level = " << format_double(world.background_level)
     << "\nbackground_amplitude = " << format_double(world.background_amplitude)
     << "\nedge_threshold = " << format_double(world.edge_threshold)
     << "\nsketch_sigma = " << format_double(world.sketch_sigma) << "\nplacement_retries = " << world.placement_retries
     << "\n\n";
  os << "[schedule]\nkind = linear\ntrain_steps = " << train_steps << "\nbeta_start = " << format_double(beta_start)
     << "\nbeta_end = " << format_double(beta_end) << "\nsample_steps = " << sample_steps
     << "\neta = " << format_double(eta) << "\n\n";
  std::vector<std::string> mults;
  for (int m : unet.channel_mults) mults.push_back(std::to_string(m));
  os << "[backbone]\nbase_channels = " << unet.base_channels << "\nchannel_mults = " << join(mults)
     << "\nblocks_per_scale = " << unet.blocks_per_scale << "\ntime_embed_dim = " << unet.time_embed_dim
     << "\nclasses = " << unet.cond_embed_classes << "\nclass_dropout = " << format_double(class_dropout) << '\n';
  write_optim(os, backbone);
  os << '\n';
  for (const auto& [m, s] : mcu) {
    os << "[mcu." << modality_name(m) << "]\n";
    write_optim(os, s.optim);
    os << '\n';
  }
  os << "[cmb]\nP = " << cmb.P << "\nQ = " << cmb.Q << "\ngamma = " << format_double(cmb.gamma)
     << "\neta = " << format_double(cmb.eta) << "\nq_mode = " << q_mode_name(cmb.q_mode)
     << "\nnormalize_grad = " << (cmb.normalize_grad ? "true" : "false") << '\n';
  for (const auto& [m, d] : cmb.delta) os << "delta." << modality_name(m) << " = " << format_double(d) << '\n';
  std::vector<std::string> mods;
  for (Modality m : complete.modalities) mods.push_back(std::string(modality_name(m)));
  os << "\n[complete]\nmode = " << complete_mode_name(complete.mode) << "\nmodalities = " << join(mods)
     << "\nscene_first = " << complete.scene_first << "\ncount = " << complete.count
     << "\nsamples_per_input = " << complete.samples_per_input << "\nfla_steps = " << complete.fla_steps
     << "\nchunk = " << complete.chunk << "\nimage = " << complete.image << "\nmask = " << complete.mask << '\n';
  for (const auto& [m, p] : complete.guidance) os << "guidance." << modality_name(m) << " = " << p << '\n';
  os << "\n[sweep]\naxis = " << sweep_axis_name(sweep.axis)
     << "\nvalues = " << join(sweep.values, sweep.axis == SweepAxis::modality_subsets ? ";" : ",") << "\n\n";
  os << "[eval]\nextractor = " << eval.extractor << "\nextractor_steps = " << eval.extractor_steps
     << "\nextractor_batch = " << eval.extractor_batch << "\nextractor_lr = " << format_double(eval.extractor_lr)
     << "\ngate_count = " << eval.gate_count << "\nruns = " << join(eval.runs)
     << "\npaired = " << (eval.paired ? "true" : "false") << "\nbootstrap = " << eval.bootstrap
     << "\nlevel = " << format_double(eval.level) << "\n\n";
  os << "[run]\nseed = " << seed << "\nout = " << out << '\n';
  return os.str();
}

// The output directory is not a setting; runs that differ only there share a digest.
std::string RunConfig::digest() const {
  RunConfig c = *this;
  c.out.clear();
  return fnv_digest(c.echo());
}

}  // namespace magic

// magic: dataset export, training, completion, sweeps and evaluation.

#include <CLI11.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <sstream>

#include "magic/config.hpp"
#include "magic/image_io.hpp"
#include "magic/pipeline.hpp"

namespace fs = std::filesystem;
using namespace magic;

namespace {

struct CommandError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string num(double v) { return format_double(v); }

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw CommandError("cannot write " + p.string());
  out << text;
  if (!out) throw CommandError("write failed: " + p.string());
}

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw CommandError("cannot read " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

bool inside(const fs::path& child, const fs::path& dir) {
  const auto c = fs::weakly_canonical(child), d = fs::weakly_canonical(dir);
  auto [a, b] = std::mismatch(d.begin(), d.end(), c.begin(), c.end());
  return a == d.end();
}

// A fresh run directory. An existing non-empty one is only replaced with
// --force, only when it is a previous run, and never when it holds inputs.
fs::path make_run_dir(const RunConfig& cfg, bool force, const std::vector<std::string>& inputs) {
  if (cfg.out.empty()) throw CommandError("no output directory: pass --out or set [run] out");
  const fs::path root(cfg.out);
  if (fs::exists(root)) {
    if (!fs::is_directory(root)) throw CommandError(root.string() + " exists and is not a directory");
    if (!fs::is_empty(root)) {
      if (!force) throw CommandError(root.string() + " exists and is not empty (use --force to replace it)");
      if (!fs::exists(root / "config.echo")) {
        throw CommandError("refusing to replace " + root.string() + ": it is not a run directory");
      }
      for (const auto& in : inputs) {
        if (!in.empty() && inside(in, root)) throw CommandError("refusing to replace " + root.string() + ": it holds input " + in);
      }
      fs::remove_all(root);
    }
  }
  for (const char* sub : {"checkpoints", "samples", "traces"}) fs::create_directories(root / sub);
  write_text(root / "config.echo", cfg.echo());
  return root;
}

// ---------------------------------------------------------------- dataset

std::optional<Split> split_of(std::uint64_t seed) {
  for (Split s : {Split::train, Split::val, Split::test}) {
    const auto r = split_range(s);
    if (seed >= r.first && seed < r.first + r.count) return s;
  }
  return std::nullopt;
}

Tensor<float> seg_image(const Scene& scene) {
  static const float palette[kSegClasses][3] = {{0, 0, 0}, {1, 0.2f, 0.2f}, {0.2f, 1, 0.2f}, {0.2f, 0.4f, 1}};
  const int S = scene.size;
  Tensor<float> rgb({3, S, S});
  for (int i = 0; i < S * S; ++i)
    for (int c = 0; c < 3; ++c) rgb[c * S * S + i] = palette[scene.seg[static_cast<std::size_t>(i)]][c];
  return rgb;
}

int cmd_dataset(const RunConfig& cfg, bool force) {
  const fs::path root = make_run_dir(cfg, force, {});
  std::ostringstream manifest;
  int scenes = 0;
  for (std::int64_t s = static_cast<std::int64_t>(cfg.seed_first); s <= cfg.seed_last; ++s) {
    const auto seed = static_cast<std::uint64_t>(s);
    const auto split = split_of(seed);
    if (!split) throw CommandError("seed " + std::to_string(seed) + " is outside every split");
    if (std::find(cfg.splits.begin(), cfg.splits.end(), *split) == cfg.splits.end()) continue;
    const CompletionCase c = make_case(seed, cfg.world);
    const std::string stem = (root / "samples" / std::to_string(seed)).string();
    write_pgm(stem + "_image.pgm", c.scene.image);
    write_pgm(stem + "_mask.pgm", c.mask);
    write_pgm(stem + "_edge.pgm", extract_modality(c.scene, Modality::edge, cfg.world));
    write_pgm(stem + "_sketch.pgm", extract_modality(c.scene, Modality::sketch, cfg.world));
    write_pgm(stem + "_depth.pgm", c.scene.depth);
    write_ppm(stem + "_seg.ppm", seg_image(c.scene));
    manifest << seed << ',' << split_name(*split) << '\n';
    ++scenes;
  }
  write_text(root / "manifest.txt", manifest.str());
  std::cout << "dataset: " << scenes << " scenes in " << root.string() << '\n';
  return 0;
}

// --------------------------------------------------------------- training

TrainConfig train_config(const OptimConfig& o, std::uint64_t data_seed, double class_dropout) {
  TrainConfig tc;
  tc.steps = o.steps;
  tc.batch = o.batch;
  tc.adam.lr = o.lr;
  tc.fixed_batch = o.fixed_batch;
  tc.seed = data_seed;
  tc.class_dropout = class_dropout;
  return tc;
}

void check_same_schedule(const NoiseSchedule& a, const NoiseSchedule& b, const std::string& where) {
  if (a.train_steps != b.train_steps || a.beta_start != b.beta_start || a.beta_end != b.beta_end) {
    throw CommandError(where + ": noise schedule differs from the configured one");
  }
}

int cmd_train_backbone(const RunConfig& cfg, bool force) {
  const fs::path root = make_run_dir(cfg, force, {cfg.backbone.resume});
  const NoiseSchedule sched = cfg.schedule();
  Denoiser<float> net(cfg.unet, cfg.component_seed("backbone.init"));
  TrainConfig tc = train_config(cfg.backbone, cfg.component_seed("backbone.data"), cfg.class_dropout);
  Adam adam(net.parameters(), tc.adam);
  if (!cfg.backbone.resume.empty()) {
    const Checkpoint ck = load_checkpoint(cfg.backbone.resume);
    Checkpoint probe;
    put_unet_config(probe, cfg.unet);
    for (const auto& [k, v] : probe.metadata) {
      if (ck.meta_or(k, "") != v) throw CommandError("resume: architecture differs at " + k);
    }
    check_same_schedule(schedule_from(ck), sched, "resume");
    ck.load_parameters(net.parameters());
    adam.load(ck);
    tc.seed = std::stoull(ck.meta("data_seed"));
    if (adam.steps_taken() > tc.steps) {
      throw CommandError("resume: checkpoint is at step " + std::to_string(adam.steps_taken()) + ", past steps = " +
                         std::to_string(tc.steps));
    }
  }
  std::ofstream csv(root / "traces" / "loss.csv", std::ios::binary);
  csv << "step,loss\n";
  double last = std::nan("");
  train_backbone(net, adam, sched, cfg.world, tc, [&](int step, double loss) {
    csv << step << ',' << num(loss) << '\n';
    last = loss;
  });
  save_backbone((root / "checkpoints" / "backbone.mgk").string(), net, sched, &adam,
                {{"seed", std::to_string(cfg.seed)},
                 {"data_seed", std::to_string(tc.seed)},
                 {"steps", std::to_string(adam.steps_taken())},
                 {"final_loss", num(last)},
                 {"config_digest", cfg.digest()}});
  std::cout << "train-backbone: " << adam.steps_taken() << " steps, final loss " << num(last) << '\n';
  return 0;
}

std::pair<std::unique_ptr<Denoiser<float>>, NoiseSchedule> open_backbone(const RunConfig& cfg) {
  if (cfg.backbone.checkpoint.empty()) throw CommandError("no backbone checkpoint: set [backbone] checkpoint");
  if (!fs::exists(cfg.backbone.checkpoint)) throw CommandError("backbone checkpoint not found: " + cfg.backbone.checkpoint);
  const Checkpoint ck = load_checkpoint(cfg.backbone.checkpoint);
  auto net = load_backbone(ck);
  NoiseSchedule sched = schedule_from(ck);
  check_same_schedule(sched, cfg.schedule(), cfg.backbone.checkpoint);
  // sampling length comes from the config
  sched = cfg.schedule();
  net->parameters().set_trainable(false);
  return {std::move(net), sched};
}

int cmd_train_mcu(const RunConfig& cfg, bool force) {
  if (cfg.mcu.empty()) throw CommandError("train-mcu: no [mcu.<modality>] section in the config");
  std::vector<std::string> inputs{cfg.backbone.checkpoint};
  for (const auto& [m, s] : cfg.mcu) inputs.push_back(s.optim.resume);
  auto [backbone, sched] = open_backbone(cfg);
  const fs::path root = make_run_dir(cfg, force, inputs);
  const std::string frozen = backbone->parameters().digest();
  for (const auto& [m, sec] : cfg.mcu) {
    const std::string name(modality_name(m));
    GuidanceEncoder<float> enc(GuidanceEncoderConfig::for_backbone(m, backbone->config(), kSegClasses),
                               cfg.component_seed("mcu." + name + ".init"));
    std::optional<Checkpoint> resume;
    if (!sec.optim.resume.empty()) {
      resume = load_checkpoint(sec.optim.resume);
      enc = load_encoder(*resume, *backbone);
      if (enc.config().modality != m) throw CommandError("resume checkpoint for " + name + " holds another modality");
    }
    MCUNet<float> net(*backbone, std::move(enc));
    TrainConfig tc = train_config(sec.optim, cfg.component_seed("mcu." + name + ".data"), cfg.class_dropout);
    Adam adam(net.encoder().parameters(), tc.adam);
    if (resume) {
      adam.load(*resume);
      tc.seed = std::stoull(resume->meta("data_seed"));
      if (adam.steps_taken() > tc.steps) throw CommandError("resume: checkpoint for " + name + " is past steps");
    }
    std::ofstream csv(root / "traces" / ("loss." + name + ".csv"), std::ios::binary);
    csv << "step,loss\n";
    double last = std::nan("");
    train_mcu(net, adam, sched, cfg.world, tc, [&](int step, double loss) {
      csv << step << ',' << num(loss) << '\n';
      last = loss;
    });
    if (backbone->parameters().digest() != frozen) throw std::logic_error("train-mcu modified the backbone");
    save_encoder((root / "checkpoints" / ("mcu." + name + ".mgk")).string(), net.encoder(), *backbone, &adam,
                 {{"seed", std::to_string(cfg.seed)},
                  {"data_seed", std::to_string(tc.seed)},
                  {"steps", std::to_string(adam.steps_taken())},
                  {"final_loss", num(last)},
                  {"config_digest", cfg.digest()}});
    std::cout << "train-mcu " << name << ": " << adam.steps_taken() << " steps, final loss " << num(last) << '\n';
  }
  return 0;
}

// ------------------------------------------------------------- completion

struct Models {
  std::unique_ptr<Denoiser<float>> backbone;
  NoiseSchedule sched;
  std::map<Modality, std::unique_ptr<MCUNet<float>>> nets;

  std::vector<const MCUNet<float>*> select(const std::vector<Modality>& mods) const {
    std::vector<const MCUNet<float>*> out;
    for (Modality m : mods) {
      if (m == Modality::class_label) continue;
      out.push_back(nets.at(m).get());
    }
    return out;
  }
};

Models open_models(const RunConfig& cfg, const std::vector<Modality>& mods) {
  Models md;
  std::tie(md.backbone, md.sched) = open_backbone(cfg);
  for (Modality m : mods) {
    if (m == Modality::class_label) {
      if (md.backbone->config().cond_embed_classes == 0) throw CommandError("the backbone has no class-label pathway");
      continue;
    }
    if (md.nets.count(m)) continue;
    const auto it = cfg.mcu.find(m);
    if (it == cfg.mcu.end() || it->second.optim.checkpoint.empty()) {
      throw CommandError("no encoder checkpoint for " + std::string(modality_name(m)) + ": set [mcu." +
                         std::string(modality_name(m)) + "] checkpoint");
    }
    const Checkpoint ck = load_checkpoint(it->second.optim.checkpoint);
    auto enc = load_encoder(ck, *md.backbone);
    if (enc.config().modality != m) throw CommandError(it->second.optim.checkpoint + " holds another modality");
    md.nets[m] = std::make_unique<MCUNet<float>>(*md.backbone, std::move(enc));
  }
  return md;
}

// Inputs of a completion run; sample j of input i sits at row i * per_input + j.
struct Inputs {
  std::vector<CompletionCase> cases;  // one per row; empty for an external image
  CompletionBatch batch;
  int inputs = 0;
  int per_input = 1;
};

Tensor<float> read_map(const std::string& path, int S) {
  Tensor<float> t = read_pgm(path);
  if (t.dim(1) != S || t.dim(2) != S) throw CommandError(path + ": expected " + std::to_string(S) + "x" + std::to_string(S));
  return t;
}

Inputs make_inputs(const RunConfig& cfg, const std::vector<Modality>& mods) {
  Inputs in;
  in.per_input = cfg.complete.samples_per_input;
  const int S = cfg.world.size;
  std::vector<std::uint64_t> seeds;
  if (!cfg.complete.image.empty()) {
    if (cfg.complete.mask.empty()) throw CommandError("[complete] image needs a mask");
    in.inputs = 1;
    const Tensor<float> image = read_map(cfg.complete.image, S);
    Tensor<float> mask = read_map(cfg.complete.mask, S);
    for (auto& v : mask.data()) v = v >= 0.5f ? 1.0f : 0.0f;
    const Tensor<float> lat = to_latent(image);
    Tensor<float> masked(lat.shape());
    for (std::int64_t i = 0; i < lat.numel(); ++i) masked[i] = mask[i] != 0.0f ? 0.0f : lat[i];
    std::vector<Tensor<float>> known, masks, masked_l;
    std::map<Modality, std::vector<Tensor<float>>> conds;
    for (int j = 0; j < in.per_input; ++j) {
      known.push_back(image);
      masks.push_back(mask);
      masked_l.push_back(masked);
      seeds.push_back(mix_seed(cfg.seed, 0, static_cast<std::uint64_t>(j)));
      for (Modality m : mods) {
        if (m == Modality::class_label) throw CommandError("class_label guidance needs scene inputs");
        const auto it = cfg.complete.guidance.find(m);
        if (it == cfg.complete.guidance.end()) {
          throw CommandError("no guidance map for " + std::string(modality_name(m)) + ": set [complete] guidance." +
                             std::string(modality_name(m)));
        }
        Tensor<float> g = read_map(it->second, S);
        if (m == Modality::segmentation) {
          // class ids stored as raw grey levels 0..3
          Tensor<float> onehot({kSegClasses, S, S});
          for (int p = 0; p < S * S; ++p) {
            const int id = static_cast<int>(std::lround(g[p] * 255.0f));
            if (id < 0 || id >= kSegClasses) throw CommandError(it->second + ": segmentation ids must be 0..3");
            onehot[id * S * S + p] = 1.0f;
          }
          g = onehot;
        }
        conds[m].push_back(g);
      }
    }
    auto stack = [](const std::vector<Tensor<float>>& v) {
      return stack_batch<float>(std::span<const Tensor<float>>(v.data(), v.size()));
    };
    in.batch.known_image = stack(known);
    in.batch.mask = stack(masks);
    in.batch.masked_latent = stack(masked_l);
    for (auto& [m, v] : conds) in.batch.conds[m] = stack(v);
    in.batch.seeds = seeds;
    return in;
  }
  in.inputs = cfg.complete.count;
  if (in.inputs < 1) throw CommandError("[complete] count must be at least 1");
  const auto base = scene_cases(cfg.complete.scene_first, in.inputs, cfg.world);
  for (int i = 0; i < in.inputs; ++i)
    for (int j = 0; j < in.per_input; ++j) {
      in.cases.push_back(base[static_cast<std::size_t>(i)]);
      seeds.push_back(mix_seed(cfg.seed, static_cast<std::uint64_t>(i), static_cast<std::uint64_t>(j)));
    }
  in.batch = make_completion_batch(in.cases, mods, cfg.world, seeds);
  return in;
}

void check_mode(CompleteMode mode, const std::vector<Modality>& mods) {
  int spatial = 0;
  for (Modality m : mods) spatial += m != Modality::class_label;
  switch (mode) {
    case CompleteMode::unguided: break;
    case CompleteMode::single:
      if (spatial != 1) throw CommandError("mode single needs exactly one spatial modality");
      break;
    case CompleteMode::cmb:
    case CompleteMode::fla:
      if (mods.empty()) throw CommandError("mode " + complete_mode_name(mode) + " needs at least one modality");
      break;
  }
}

SampleResult sample(const RunConfig& cfg, const Models& md, CompleteMode mode, const std::vector<Modality>& mods,
                    const CompletionBatch& batch) {
  SampleOptions opts;
  opts.chunk = cfg.complete.chunk;
  const auto nets = md.select(mods);
  switch (mode) {
    case CompleteMode::unguided: return sample_unguided(*md.backbone, batch, md.sched, cfg.eta, opts);
    case CompleteMode::single: return sample_single(*nets.front(), batch, md.sched, cfg.eta, opts);
    case CompleteMode::fla: return sample_fla(*md.backbone, nets, batch, cfg.complete.fla_steps, md.sched, cfg.eta, opts);
    case CompleteMode::cmb: {
      CMBConfig c = cfg.cmb;
      c.plain_eta = cfg.eta;
      return sample_cmb(*md.backbone, nets, batch, c, md.sched, opts);
    }
  }
  throw std::logic_error("unreachable");
}

struct Extractor {
  std::unique_ptr<FeatureExtractor> fx;
  double accuracy = 0.0;
  bool valid() const { return accuracy >= 0.9; }
};

Extractor open_extractor(const RunConfig& cfg, const fs::path& root) {
  Extractor e;
  if (!cfg.eval.extractor.empty()) {
    std::tie(e.fx, e.accuracy) = load_extractor(cfg.eval.extractor);
    return e;
  }
  e.fx = std::make_unique<FeatureExtractor>(cfg.component_seed("extractor.init"));
  ExtractorTrainConfig tc;
  tc.steps = cfg.eval.extractor_steps;
  tc.batch = cfg.eval.extractor_batch;
  tc.adam.lr = cfg.eval.extractor_lr;
  tc.seed = cfg.component_seed("extractor.data");
  Adam adam(e.fx->parameters(), tc.adam);
  train_extractor(*e.fx, adam, cfg.world, tc);
  e.accuracy = extractor_accuracy(*e.fx, cfg.world, Split::val, cfg.eval.gate_count);
  save_extractor((root / "checkpoints" / "extractor.mgk").string(), *e.fx, e.accuracy);
  return e;
}

MetricReport report_for(const Tensor<float>& completed, const std::vector<CompletionCase>& cases, const Extractor& ex,
                        const RunConfig& cfg, const std::string& run) {
  std::vector<Scene> originals;
  for (const auto& c : cases) originals.push_back(c.scene);
  const Eigen::MatrixXd reference = ex.fx->embed(scene_images(originals));
  MetricReport r = evaluate_outputs(completed, cases, *ex.fx, ex.valid(), reference, cfg.world);
  r.run = run;
  r.config_digest = cfg.digest();
  return r;
}

struct Spread {
  double mean = 0.0, std = 0.0;
  int n = 0;
};

Spread spread(const std::vector<double>& v) {
  Spread s;
  s.n = static_cast<int>(v.size());
  if (v.empty()) return s;
  for (double x : v) s.mean += x;
  s.mean /= s.n;
  if (s.n > 1) {
    for (double x : v) s.std += (x - s.mean) * (x - s.mean);
    s.std = std::sqrt(s.std / (s.n - 1));
  }
  return s;
}

// Row `r` of a batch without its batch axis.
Tensor<float> row_of(const Tensor<float>& batched, std::int64_t r) {
  Tensor<float> t = batch_slice(batched, r);
  Shape s(t.shape().begin() + 1, t.shape().end());
  return t.reshaped(s);
}

std::string opt(const std::optional<double>& v) { return v ? num(*v) : ""; }

void write_trace_csv(const fs::path& p, const SampleResult& res) {
  std::ofstream csv(p, std::ios::binary);
  csv << "sample,seed,step,t,t_prev,sigma,guided,loss_before,loss_after,grad_norm,warning\n";
  for (std::size_t s = 0; s < res.traces.size(); ++s) {
    const auto& tr = res.traces[s];
    for (std::size_t k = 0; k < tr.steps.size(); ++k) {
      const auto& r = tr.steps[k];
      csv << s << ',' << tr.seed << ',' << k << ',' << r.t << ',' << r.t_prev << ',' << num(r.sigma) << ','
          << (r.guided ? 1 : 0) << ',' << num(r.loss_before) << ',' << num(r.loss_after) << ',' << num(r.grad_norm)
          << ',' << r.warning << '\n';
    }
  }
}

std::vector<std::string> metric_names() { return {"edge_f1", "seg_iou", "depth_mae"}; }

std::optional<double> metric_of(const Fidelity& f, const std::string& name) {
  if (name == "edge_f1") return f.edge_f1;
  if (name == "seg_iou") return f.seg_iou;
  return f.depth_mae;
}

// Writes samples, traces and metrics of one completion into `dir` (samples)
// and `trace` (trace CSV); returns the report when scene inputs allow scoring.
std::optional<MetricReport> store_completion(const RunConfig& cfg, const Inputs& in, const SampleResult& res,
                                             const std::vector<Modality>& mods, CompleteMode mode,
                                             const fs::path& dir, const fs::path& trace, const Extractor* ex,
                                             const std::string& run) {
  fs::create_directories(dir);
  const std::int64_t rows = in.batch.size();
  const int S = cfg.world.size;
  const Tensor<float> decoded = from_latent(res.latent);
  for (int i = 0; i < in.inputs; ++i) {
    const std::string stem = (dir / ("input" + std::to_string(i))).string();
    const std::int64_t first = static_cast<std::int64_t>(i) * in.per_input;
    write_pgm(stem + "_mask.pgm", row_of(in.batch.mask, first));
    write_pgm(stem + "_known.pgm", row_of(in.batch.known_image, first));
    for (const auto& [m, c] : in.batch.conds) {
      Tensor<float> g = row_of(c, first);
      if (m == Modality::segmentation) {
        // argmax ids as grey levels 0..3
        Tensor<float> ids({1, S, S});
        for (int p = 0; p < S * S; ++p)
          for (int k = 0; k < kSegClasses; ++k)
            if (g[k * S * S + p] > 0.5f) ids[p] = static_cast<float>(k) / 255.0f;
        g = ids;
      }
      write_pgm(stem + "_guide_" + std::string(modality_name(m)) + ".pgm", g);
    }
    for (int j = 0; j < in.per_input; ++j) {
      const std::int64_t row = first + j;
      const std::string s = stem + "_sample" + std::to_string(j);
      write_pgm(s + ".pgm", row_of(decoded, row));
      write_pgm(s + "_completed.pgm", row_of(res.completed, row));
    }
  }
  Checkpoint out;
  out.put("completed", res.completed);
  out.put("latent", res.latent);
  out.metadata["kind"] = "completion";
  out.metadata["mode"] = complete_mode_name(mode);
  std::vector<std::string> mod_names;
  for (Modality m : mods) mod_names.push_back(std::string(modality_name(m)));
  std::string joined;
  for (std::size_t i = 0; i < mod_names.size(); ++i) joined += (i ? "," : "") + mod_names[i];
  out.metadata["modalities"] = joined;
  out.metadata["inputs"] = std::to_string(in.inputs);
  out.metadata["per_input"] = std::to_string(in.per_input);
  out.metadata["scene_first"] = in.cases.empty() ? "" : std::to_string(cfg.complete.scene_first);
  save_checkpoint(out, (dir / "outputs.mgk").string());
  write_trace_csv(trace, res);
  if (in.cases.empty() || !ex) return std::nullopt;

  MetricReport rep = report_for(res.completed, in.cases, *ex, cfg, run);
  std::ofstream ps(dir / "per_sample.csv", std::ios::binary);
  ps << "row,input,sample,scene_seed,noise_seed,edge_f1,seg_iou,depth_mae\n";
  for (std::int64_t r = 0; r < rows; ++r) {
    const auto& f = rep.per_sample[static_cast<std::size_t>(r)];
    ps << r << ',' << r / in.per_input << ',' << r % in.per_input << ',' << in.cases[static_cast<std::size_t>(r)].scene.seed
       << ',' << in.batch.seeds[static_cast<std::size_t>(r)] << ',' << opt(f.edge_f1) << ',' << opt(f.seg_iou) << ','
       << opt(f.depth_mae) << '\n';
  }
  return rep;
}

std::string spread_summary(const MetricReport& rep) {
  std::ostringstream os;
  for (const auto& name : metric_names()) {
    std::vector<double> v;
    for (const auto& f : rep.per_sample)
      if (auto x = metric_of(f, name)) v.push_back(*x);
    const Spread s = spread(v);
    os << name << "_mean = " << num(s.mean) << '\n' << name << "_std = " << num(s.std) << '\n';
  }
  return os.str();
}

int cmd_complete(const RunConfig& cfg, bool force) {
  const auto& mods = cfg.complete.modalities;
  check_mode(cfg.complete.mode, mods);
  std::vector<std::string> inputs{cfg.backbone.checkpoint, cfg.eval.extractor, cfg.complete.image, cfg.complete.mask};
  for (const auto& [m, s] : cfg.mcu) inputs.push_back(s.optim.checkpoint);
  for (const auto& [m, p] : cfg.complete.guidance) inputs.push_back(p);
  const Models md = open_models(cfg, mods);
  const Inputs in = make_inputs(cfg, mods);
  const fs::path root = make_run_dir(cfg, force, inputs);
  const SampleResult res = sample(cfg, md, cfg.complete.mode, mods, in.batch);
  std::optional<Extractor> ex;
  if (!in.cases.empty()) ex = open_extractor(cfg, root);
  const auto rep = store_completion(cfg, in, res, mods, cfg.complete.mode, root / "samples", root / "traces" / "trace.csv",
                                    ex ? &*ex : nullptr, root.filename().string());
  if (rep) {
    write_text(root / "metrics.csv", metric_csv_header() + "\n" + metric_csv_row(*rep) + "\n");
    write_text(root / "metrics.txt", metric_summary(*rep) + "extractor_accuracy = " + num(ex->accuracy) + "\n" +
                                         spread_summary(*rep));
    std::cout << metric_summary(*rep) << spread_summary(*rep);
  }
  std::cout << "complete: " << in.batch.size() << " samples in " << root.string() << '\n';
  return 0;
}

// ------------------------------------------------------------------ sweep

std::vector<Modality> parse_subset(const std::string& s) {
  std::vector<Modality> out;
  for (const auto& name : split_list(s, '+')) out.push_back(parse_modality(name));
  if (out.empty()) throw CommandError("empty modality subset");
  return out;
}

int cmd_sweep(const RunConfig& cfg, bool force) {
  if (cfg.sweep.values.empty()) throw CommandError("sweep: [sweep] values is empty");
  std::vector<Modality> all = cfg.complete.modalities;
  if (cfg.sweep.axis == SweepAxis::modality_subsets) {
    for (const auto& v : cfg.sweep.values)
      for (Modality m : parse_subset(v))
        if (std::find(all.begin(), all.end(), m) == all.end()) all.push_back(m);
  }
  std::vector<std::string> inputs{cfg.backbone.checkpoint, cfg.eval.extractor};
  for (const auto& [m, s] : cfg.mcu) inputs.push_back(s.optim.checkpoint);
  const Models md = open_models(cfg, all);
  const fs::path root = make_run_dir(cfg, force, inputs);
  const Extractor ex = open_extractor(cfg, root);
  std::ofstream table(root / "sweep.csv", std::ios::binary);
  table << "axis,value,status,n_samples,toy_fid,fid_valid,edge_f1,seg_iou,depth_mae,fidelity,preservation_exact,error\n";
  std::ostringstream metrics;
  metrics << metric_csv_header() << '\n';
  int failures = 0;
  for (std::size_t g = 0; g < cfg.sweep.values.size(); ++g) {
    const std::string& value = cfg.sweep.values[g];
    const std::string label = "point" + std::to_string(g);
    try {
      RunConfig point = cfg;
      std::vector<Modality> mods = cfg.complete.modalities;
      switch (cfg.sweep.axis) {
        case SweepAxis::P: point.cmb.P = std::stoi(value); break;
        case SweepAxis::Q: point.cmb.Q = std::stoi(value); break;
        case SweepAxis::gamma: point.cmb.gamma = std::stod(value); break;
        case SweepAxis::modality_subsets: mods = parse_subset(value); break;
      }
      check_mode(CompleteMode::cmb, mods);
      point.cmb.validate(md.sched.sample_count());
      const Inputs in = make_inputs(point, mods);
      const SampleResult res = sample(point, md, CompleteMode::cmb, mods, in.batch);
      const auto rep = store_completion(point, in, res, mods, CompleteMode::cmb, root / "samples" / label,
                                        root / "traces" / (label + ".csv"), &ex, label);
      if (!rep) throw CommandError("sweep needs scene inputs");
      table << sweep_axis_name(cfg.sweep.axis) << ',' << value << ",ok," << rep->n_samples << ',' << num(rep->toy_fid)
            << ',' << (rep->fid_valid ? 1 : 0) << ',' << num(rep->edge_f1) << ',' << num(rep->seg_iou) << ','
            << num(rep->depth_mae) << ',' << num((rep->edge_f1 + rep->seg_iou) / 2) << ','
            << (rep->preservation_exact ? 1 : 0) << ",\n";
      metrics << metric_csv_row(*rep) << '\n';
    } catch (const std::exception& e) {
      ++failures;
      std::string msg = e.what();
      std::replace(msg.begin(), msg.end(), ',', ';');
      std::replace(msg.begin(), msg.end(), '\n', ' ');
      table << sweep_axis_name(cfg.sweep.axis) << ',' << value << ",failed,,,,,,,,," << msg << '\n';
      std::cerr << "sweep: " << label << " (" << value << ") failed: " << e.what() << '\n';
    }
    table.flush();
  }
  write_text(root / "metrics.csv", metrics.str());
  std::cout << "sweep: " << cfg.sweep.values.size() - static_cast<std::size_t>(failures) << " of "
            << cfg.sweep.values.size() << " points in " << root.string() << '\n';
  return failures ? 3 : 0;
}

// ------------------------------------------------------------------- eval

struct StoredRun {
  std::string name;
  Tensor<float> completed;
  std::vector<CompletionCase> cases;
  RunConfig cfg;
};

StoredRun open_run(const std::string& dir) {
  const fs::path root(dir);
  if (!fs::exists(root / "config.echo") || !fs::exists(root / "samples" / "outputs.mgk")) {
    throw CommandError(dir + " is not a completion run directory");
  }
  StoredRun r;
  r.name = dir;
  r.cfg = parse_run_config(read_text(root / "config.echo"));
  const Checkpoint ck = load_checkpoint((root / "samples" / "outputs.mgk").string());
  r.completed = ck.get<float>("completed");
  if (ck.meta("scene_first").empty()) throw CommandError(dir + " was completed from an image file; nothing to score against");
  const auto base = scene_cases(std::stoull(ck.meta("scene_first")), std::stoi(ck.meta("inputs")), r.cfg.world);
  const int per = std::stoi(ck.meta("per_input"));
  for (const auto& c : base)
    for (int j = 0; j < per; ++j) r.cases.push_back(c);
  return r;
}

int cmd_eval(const RunConfig& cfg, bool force) {
  if (cfg.eval.runs.empty()) throw CommandError("eval: [eval] runs is empty");
  if (cfg.eval.paired && cfg.eval.runs.size() != 2) throw CommandError("eval: paired mode takes exactly two runs");
  std::vector<StoredRun> runs;
  for (const auto& d : cfg.eval.runs) runs.push_back(open_run(d));
  if (cfg.eval.paired) {
    if (runs[0].cases.size() != runs[1].cases.size()) {
      throw CommandError("eval: paired runs hold " + std::to_string(runs[0].cases.size()) + " and " +
                         std::to_string(runs[1].cases.size()) + " samples");
    }
    for (std::size_t i = 0; i < runs[0].cases.size(); ++i) {
      if (runs[0].cases[i].scene.seed != runs[1].cases[i].scene.seed) throw CommandError("eval: paired runs use different scenes");
    }
  }
  std::vector<std::string> inputs{cfg.eval.extractor};
  for (const auto& d : cfg.eval.runs) inputs.push_back(d);
  const fs::path root = make_run_dir(cfg, force, inputs);
  const Extractor ex = open_extractor(cfg, root);
  std::vector<MetricReport> reps;
  std::ostringstream metrics, summary;
  metrics << metric_csv_header() << '\n';
  for (const auto& r : runs) {
    MetricReport rep = report_for(r.completed, r.cases, ex, cfg, r.name);
    rep.config_digest = r.cfg.digest();
    metrics << metric_csv_row(rep) << '\n';
    summary << metric_summary(rep) << spread_summary(rep) << '\n';
    reps.push_back(std::move(rep));
  }
  summary << "extractor_accuracy = " << num(ex.accuracy) << '\n';
  if (cfg.eval.paired) {
    std::ofstream deltas(root / "deltas.csv", std::ios::binary);
    deltas << "row,scene_seed,edge_f1_delta,seg_iou_delta,depth_mae_delta\n";
    std::map<std::string, std::vector<double>> d;
    for (std::size_t i = 0; i < runs[0].cases.size(); ++i) {
      deltas << i << ',' << runs[0].cases[i].scene.seed;
      for (const auto& name : metric_names()) {
        const auto a = metric_of(reps[0].per_sample[i], name), b = metric_of(reps[1].per_sample[i], name);
        deltas << ',';
        if (a && b) {
          deltas << num(*b - *a);
          d[name].push_back(*b - *a);
        }
      }
      deltas << '\n';
    }
    summary << "paired = " << runs[1].name << " minus " << runs[0].name << '\n';
    for (const auto& name : metric_names()) {
      const auto& v = d[name];
      summary << name << "_delta_n = " << v.size() << '\n';
      if (v.empty()) continue;
      const Interval iv = bootstrap_mean(v, cfg.eval.level, cfg.eval.bootstrap, cfg.component_seed("eval.bootstrap"));
      summary << name << "_delta_mean = " << num(iv.estimate) << '\n'
              << name << "_delta_lo = " << num(iv.lo) << '\n'
              << name << "_delta_hi = " << num(iv.hi) << '\n';
    }
  }
  write_text(root / "metrics.csv", metrics.str());
  write_text(root / "metrics.txt", summary.str());
  std::cout << summary.str();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"magic: multi-modality guided image completion on a synthetic toy world"};
  app.require_subcommand(1);
  std::string config_path, out_dir;
  std::optional<std::uint64_t> seed;
  bool force = false;
  const std::vector<std::pair<std::string, std::string>> commands{
      {"dataset", "export scenes, modality maps and masks"},
      {"train-backbone", "train the masked denoiser"},
      {"train-mcu", "train guidance encoders against a frozen backbone"},
      {"complete", "complete masked images"},
      {"sweep", "guided completion over a grid of settings"},
      {"eval", "score completion runs"}};
  for (const auto& [name, help] : commands) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("--config", config_path, "INI config file")->required();
    sub->add_option("--out", out_dir, "run directory (overrides [run] out)");
    sub->add_option("--seed", seed, "run seed (overrides [run] seed)");
    sub->add_flag("--force", force, "replace an existing run directory");
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }
  const std::string cmd = app.get_subcommands().front()->get_name();
  try {
    RunConfig cfg = load_run_config(config_path);
    if (!out_dir.empty()) cfg.out = out_dir;
    if (seed) cfg.seed = *seed;
    if (cmd == "dataset") return cmd_dataset(cfg, force);
    if (cmd == "train-backbone") return cmd_train_backbone(cfg, force);
    if (cmd == "train-mcu") return cmd_train_mcu(cfg, force);
    if (cmd == "complete") return cmd_complete(cfg, force);
    if (cmd == "sweep") return cmd_sweep(cfg, force);
    return cmd_eval(cfg, force);
  } catch (const std::exception& e) {
    std::cerr << "magic " << cmd << ": " << e.what() << '\n';
    return 2;
  }
}

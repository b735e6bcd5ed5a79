#include "magic/checkpoint.hpp"

#include <bit>
#include <charconv>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace magic {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr std::uint32_t kVersion = 1;

class Writer {
 public:
  template <typename U>
  void pod(U v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    out_.insert(out_.end(), p, p + sizeof(U));
  }
  void bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    out_.insert(out_.end(), p, p + n);
  }
  void str(const std::string& s) {
    pod(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  std::vector<std::uint8_t>& out() { return out_; }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& in) : in_(in) {}
  template <typename U>
  U pod() {
    U v;
    take(&v, sizeof(U));
    return v;
  }
  void take(void* dst, std::size_t n) {
    if (n > in_.size() - pos_) throw std::runtime_error("checkpoint: truncated data");
    std::memcpy(dst, in_.data() + pos_, n);
    pos_ += n;
  }
  std::string str() {
    const auto n = pod<std::uint32_t>();
    std::string s(n, '\0');
    take(s.data(), n);
    return s;
  }
  bool done() const { return pos_ == in_.size(); }

 private:
  const std::vector<std::uint8_t>& in_;
  std::size_t pos_ = 0;
};

template <typename T>
void write_tensor(Writer& w, const std::string& name, const Tensor<T>& t) {
  w.str(name);
  w.pod(static_cast<std::uint8_t>(std::is_same_v<T, float> ? 0 : 1));
  w.pod(static_cast<std::uint32_t>(t.rank()));
  for (auto e : t.shape()) w.pod(static_cast<std::uint64_t>(e));
  w.bytes(t.ptr(), static_cast<std::size_t>(t.numel()) * sizeof(T));
}

void write_tensors(Writer& w, const Checkpoint& ckpt) {
  w.pod(static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& e : ckpt.tensors) {
    std::visit([&](const auto& t) { write_tensor(w, e.name, t); }, e.value);
  }
}

template <typename T>
Tensor<T> read_values(Reader& r, Shape shape) {
  Tensor<T> t(std::move(shape));
  r.take(t.ptr(), static_cast<std::size_t>(t.numel()) * sizeof(T));
  return t;
}

int parse_int(const std::string& s) {
  int v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) throw std::runtime_error("checkpoint: bad integer '" + s + "'");
  return v;
}

double parse_double(const std::string& s) {
  double v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) throw std::runtime_error("checkpoint: bad number '" + s + "'");
  return v;
}

}  // namespace

std::string format_double(double v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, p);
}

template <typename T>
void Checkpoint::put(const std::string& name, Tensor<T> value) {
  for (auto& e : tensors) {
    if (e.name == name) {
      e.value = std::move(value);
      return;
    }
  }
  tensors.push_back(Entry{name, std::move(value)});
}

template <typename T>
const Tensor<T>& Checkpoint::get(const std::string& name) const {
  for (const auto& e : tensors) {
    if (e.name != name) continue;
    if (const auto* t = std::get_if<Tensor<T>>(&e.value)) return *t;
    throw std::runtime_error("checkpoint: tensor '" + name + "' has a different dtype");
  }
  throw std::runtime_error("checkpoint: missing tensor '" + name + "'");
}

bool Checkpoint::has(const std::string& name) const {
  for (const auto& e : tensors)
    if (e.name == name) return true;
  return false;
}

template <typename T>
void Checkpoint::put_parameters(const ParameterSet<T>& params, const std::string& prefix) {
  for (const auto& [name, var] : params) put(prefix + name, var.value());
}

template <typename T>
void Checkpoint::load_parameters(ParameterSet<T>& params, const std::string& prefix) const {
  std::vector<std::pair<std::string, Tensor<T>>> values;
  for (const auto& [name, var] : params) values.emplace_back(name, get<T>(prefix + name));
  params.load(values);
}

const std::string& Checkpoint::meta(const std::string& key) const {
  auto it = metadata.find(key);
  if (it == metadata.end()) throw std::runtime_error("checkpoint: missing metadata '" + key + "'");
  return it->second;
}

std::string Checkpoint::meta_or(const std::string& key, const std::string& fallback) const {
  auto it = metadata.find(key);
  return it == metadata.end() ? fallback : it->second;
}

std::string Checkpoint::tensor_digest() const {
  Writer w;
  write_tensors(w, *this);
  return hex64(fnv1a(w.out().data(), w.out().size()));
}

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt) {
  Writer w;
  w.bytes("MGK1", 4);
  w.pod(kVersion);
  write_tensors(w, ckpt);
  w.pod(static_cast<std::uint32_t>(ckpt.metadata.size()));
  for (const auto& [k, v] : ckpt.metadata) {
    w.str(k);
    w.str(v);
  }
  return std::move(w.out());
}

Checkpoint deserialize_checkpoint(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  char magic[4];
  r.take(magic, 4);
  if (std::memcmp(magic, "MGK1", 4) != 0) throw std::runtime_error("checkpoint: bad magic bytes");
  const auto version = r.pod<std::uint32_t>();
  if (version != kVersion) throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
  Checkpoint ckpt;
  const auto count = r.pod<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.str();
    const auto dtype = r.pod<std::uint8_t>();
    const auto rank = r.pod<std::uint32_t>();
    if (rank > 8) throw std::runtime_error("checkpoint: implausible rank for '" + name + "'");
    Shape shape;
    for (std::uint32_t d = 0; d < rank; ++d) shape.push_back(static_cast<std::int64_t>(r.pod<std::uint64_t>()));
    if (dtype == 0) {
      ckpt.tensors.push_back({std::move(name), read_values<float>(r, std::move(shape))});
    } else if (dtype == 1) {
      ckpt.tensors.push_back({std::move(name), read_values<double>(r, std::move(shape))});
    } else {
      throw std::runtime_error("checkpoint: unknown dtype tag " + std::to_string(dtype));
    }
  }
  const auto meta_count = r.pod<std::uint32_t>();
  for (std::uint32_t i = 0; i < meta_count; ++i) {
    std::string k = r.str();
    ckpt.metadata[k] = r.str();
  }
  if (!r.done()) throw std::runtime_error("checkpoint: trailing bytes");
  return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  const auto bytes = serialize_checkpoint(ckpt);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write checkpoint " + path);
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw std::runtime_error("short write on checkpoint " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

void put_unet_config(Checkpoint& ckpt, const UNetConfig& cfg) {
  auto& m = ckpt.metadata;
  m["unet.image_size"] = std::to_string(cfg.image_size);
  m["unet.latent_channels"] = std::to_string(cfg.latent_channels);
  m["unet.base_channels"] = std::to_string(cfg.base_channels);
  std::string mults;
  for (std::size_t i = 0; i < cfg.channel_mults.size(); ++i) mults += (i ? "," : "") + std::to_string(cfg.channel_mults[i]);
  m["unet.channel_mults"] = mults;
  m["unet.blocks_per_scale"] = std::to_string(cfg.blocks_per_scale);
  m["unet.time_embed_dim"] = std::to_string(cfg.time_embed_dim);
  m["unet.cond_embed_classes"] = std::to_string(cfg.cond_embed_classes);
}

UNetConfig unet_config_from(const Checkpoint& ckpt) {
  UNetConfig cfg;
  cfg.image_size = parse_int(ckpt.meta("unet.image_size"));
  cfg.latent_channels = parse_int(ckpt.meta("unet.latent_channels"));
  cfg.base_channels = parse_int(ckpt.meta("unet.base_channels"));
  cfg.channel_mults.clear();
  std::stringstream ss(ckpt.meta("unet.channel_mults"));
  for (std::string item; std::getline(ss, item, ',');) cfg.channel_mults.push_back(parse_int(item));
  cfg.blocks_per_scale = parse_int(ckpt.meta("unet.blocks_per_scale"));
  cfg.time_embed_dim = parse_int(ckpt.meta("unet.time_embed_dim"));
  cfg.cond_embed_classes = parse_int(ckpt.meta("unet.cond_embed_classes"));
  cfg.validate();
  return cfg;
}

void put_schedule(Checkpoint& ckpt, const NoiseSchedule& sched) {
  auto& m = ckpt.metadata;
  m["schedule.kind"] = "linear";
  m["schedule.train_steps"] = std::to_string(sched.train_steps);
  m["schedule.beta_start"] = format_double(sched.beta_start);
  m["schedule.beta_end"] = format_double(sched.beta_end);
  m["schedule.sample_steps"] = std::to_string(sched.sample_count());
}

NoiseSchedule schedule_from(const Checkpoint& ckpt) {
  if (ckpt.meta("schedule.kind") != "linear") throw std::runtime_error("checkpoint: unknown schedule kind");
  return make_schedule(ScheduleKind::linear, parse_int(ckpt.meta("schedule.train_steps")),
                       parse_double(ckpt.meta("schedule.beta_start")), parse_double(ckpt.meta("schedule.beta_end")),
                       parse_int(ckpt.meta("schedule.sample_steps")));
}

template void Checkpoint::put(const std::string&, Tensor<float>);
template void Checkpoint::put(const std::string&, Tensor<double>);
template const Tensor<float>& Checkpoint::get(const std::string&) const;
template const Tensor<double>& Checkpoint::get(const std::string&) const;
template void Checkpoint::put_parameters(const ParameterSet<float>&, const std::string&);
template void Checkpoint::put_parameters(const ParameterSet<double>&, const std::string&);
template void Checkpoint::load_parameters(ParameterSet<float>&, const std::string&) const;
template void Checkpoint::load_parameters(ParameterSet<double>&, const std::string&) const;

}  // namespace magic

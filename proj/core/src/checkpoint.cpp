#include "gfprune/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "gfprune/error.hpp"

namespace gfprune::harness {

namespace {

constexpr char kMagic[8] = {'G', 'F', 'P', 'C', 'K', 'P', 'T', '\0'};

static_assert(std::endian::native == std::endian::little,
              "the container writer assumes a little-endian host");

class Writer {
 public:
  template <typename T>
  void put(T v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    bytes.insert(bytes.end(), p, p + sizeof(T));
  }
  void put_bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    bytes.insert(bytes.end(), b, b + n);
  }
  std::vector<std::uint8_t> bytes;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> b) : bytes_(b) {}
  template <typename T>
  T get() {
    T v;
    std::memcpy(&v, take(sizeof(T)), sizeof(T));
    return v;
  }
  const std::uint8_t* take(std::size_t n) {
    if (n > bytes_.size() - pos_) throw IoError("truncated tensor container");
    const auto* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::size_t pos() const { return pos_; }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

Tensor u64_tensor(std::uint64_t v) {
  std::vector<double> chunks(4);
  for (std::size_t i = 0; i < 4; ++i) chunks[i] = static_cast<double>((v >> (16 * i)) & 0xFFFF);
  return Tensor::vector(std::move(chunks));
}

std::uint64_t tensor_u64(const Tensor& t) {
  if (t.size() != 4) throw IoError("malformed integer metadata");
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < 4; ++i) v |= static_cast<std::uint64_t>(t[i]) << (16 * i);
  return v;
}

Tensor string_tensor(const std::string& s) {
  std::vector<double> c(s.begin(), s.end());
  c.push_back(0.0);  // keeps empty strings representable
  return Tensor::vector(std::move(c));
}

std::string tensor_string(const Tensor& t) {
  std::string s;
  for (std::size_t i = 0; i + 1 < t.size(); ++i) s.push_back(static_cast<char>(t[i]));
  return s;
}

const Tensor& need(const NamedTensors& m, const std::string& name) {
  auto it = m.find(name);
  if (it == m.end()) throw IoError("checkpoint lacks tensor '" + name + "'");
  return it->second;
}

}  // namespace

std::vector<std::uint8_t> encode_tensors(const NamedTensors& tensors) {
  Writer w;
  w.put_bytes(kMagic, sizeof kMagic);
  w.put<std::uint32_t>(kContainerVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    if (name.size() > 0xFFFF) throw IoError("tensor name too long: " + name.substr(0, 32));
    if (t.rank() == 0 || t.rank() > 255) throw IoError("cannot store tensor '" + name + "'");
    w.put<std::uint16_t>(static_cast<std::uint16_t>(name.size()));
    w.put_bytes(name.data(), name.size());
    w.put<std::uint8_t>(0);
    w.put<std::uint8_t>(static_cast<std::uint8_t>(t.rank()));
    for (std::size_t d : t.shape()) w.put<std::uint64_t>(d);
    w.put_bytes(t.data().data(), t.size() * sizeof(double));
  }
  w.put<std::uint64_t>(fnv1a64(w.bytes));
  return std::move(w.bytes);
}

NamedTensors decode_tensors(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < sizeof kMagic + 8 + 8) throw IoError("tensor container too short");
  const auto body = bytes.first(bytes.size() - 8);
  std::uint64_t stored = 0;
  std::memcpy(&stored, bytes.data() + body.size(), 8);
  if (fnv1a64(body) != stored) throw IoError("tensor container checksum mismatch");

  Reader r(body);
  if (std::memcmp(r.take(sizeof kMagic), kMagic, sizeof kMagic) != 0) {
    throw IoError("not a tensor container (bad magic)");
  }
  const auto version = r.get<std::uint32_t>();
  if (version != kContainerVersion) {
    throw IoError("unsupported container version " + std::to_string(version));
  }
  const auto count = r.get<std::uint32_t>();
  NamedTensors out;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = r.get<std::uint16_t>();
    const auto* np = r.take(len);
    std::string name(reinterpret_cast<const char*>(np), len);
    const auto dtype = r.get<std::uint8_t>();
    if (dtype != 0) throw IoError("unsupported dtype " + std::to_string(dtype) + " for '" + name + "'");
    const auto rank = r.get<std::uint8_t>();
    if (rank == 0) throw IoError("rank-0 tensor '" + name + "'");
    Shape shape(rank);
    std::size_t n = 1;
    for (auto& d : shape) {
      d = r.get<std::uint64_t>();
      if (d == 0 || n > (std::size_t{1} << 40) / d) throw IoError("bad extent for '" + name + "'");
      n *= d;
    }
    std::vector<double> data(n);
    std::memcpy(data.data(), r.take(n * sizeof(double)), n * sizeof(double));
    out.insert_or_assign(std::move(name), Tensor(std::move(shape), std::move(data)));
  }
  if (r.pos() != body.size()) throw IoError("trailing bytes in tensor container");
  return out;
}

void save_tensors(const std::filesystem::path& path, const NamedTensors& tensors) {
  const auto bytes = encode_tensors(tensors);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  // Write to a sibling file first so a crash never leaves a torn checkpoint.
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write '" + tmp.string() + "'");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed for '" + tmp.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

NamedTensors load_tensors(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("missing checkpoint '" + path.string() + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_tensors(bytes);
}

NamedTensors checkpoint_tensors(const Checkpoint& ckpt) {
  NamedTensors out;
  const auto& spec = ckpt.model.spec();
  out["__meta.config_hash"] = u64_tensor(ckpt.config_hash);
  out["__meta.stage"] = string_tensor(ckpt.stage);
  out["__meta.iteration"] = u64_tensor(ckpt.iteration);
  out["__meta.data_dim"] = u64_tensor(spec.data_dim);
  out["__meta.temb_dim"] = u64_tensor(spec.temb_dim);
  out["__meta.activation"] = Tensor::scalar(spec.activation == ad::Activation::kSiLU ? 0.0 : 1.0);
  std::vector<double> hidden(spec.hidden.begin(), spec.hidden.end());
  hidden.insert(hidden.begin(), static_cast<double>(hidden.size()));
  out["__meta.hidden"] = Tensor::vector(std::move(hidden));

  for (const auto& w : ckpt.model.weights()) {
    out[w.name] = w.weights;
    out[w.name + ".mask"] = w.mask;
  }
  for (const auto& [name, b] : ckpt.model.biases()) out[name] = b;
  if (ckpt.optimizer) {
    for (const auto& [name, t] : ckpt.optimizer->m) out["adam.m." + name] = t;
    for (const auto& [name, t] : ckpt.optimizer->v) out["adam.v." + name] = t;
    out["adam.step"] = u64_tensor(ckpt.optimizer->step);
  }
  return out;
}

Checkpoint checkpoint_from_tensors(const NamedTensors& tensors) {
  Checkpoint c;
  c.config_hash = tensor_u64(need(tensors, "__meta.config_hash"));
  c.stage = tensor_string(need(tensors, "__meta.stage"));
  c.iteration = tensor_u64(need(tensors, "__meta.iteration"));

  diffusion::ModelSpec spec;
  spec.data_dim = tensor_u64(need(tensors, "__meta.data_dim"));
  spec.temb_dim = tensor_u64(need(tensors, "__meta.temb_dim"));
  spec.activation =
      need(tensors, "__meta.activation").item() == 0.0 ? ad::Activation::kSiLU : ad::Activation::kTanh;
  const Tensor& h = need(tensors, "__meta.hidden");
  spec.hidden.clear();
  for (std::size_t i = 1; i < h.size(); ++i) spec.hidden.push_back(static_cast<std::size_t>(h[i]));
  if (spec.hidden.size() != static_cast<std::size_t>(h[0])) throw IoError("malformed model spec");

  c.model = diffusion::NoisePredictor(spec, 0);
  auto assign = [](Tensor& dst, const Tensor& src, const std::string& name) {
    if (!dst.same_shape(src)) {
      throw IoError("checkpoint tensor '" + name + "' has shape " + shape_string(src.shape()) +
                    ", expected " + shape_string(dst.shape()));
    }
    dst = src;
  };
  for (auto& w : c.model.weights()) {
    assign(w.weights, need(tensors, w.name), w.name);
    assign(w.mask, need(tensors, w.name + ".mask"), w.name + ".mask");
  }
  for (auto& [name, b] : c.model.biases()) assign(b, need(tensors, name), name);

  if (tensors.contains("adam.step")) {
    diffusion::AdamState st;
    st.step = tensor_u64(tensors.at("adam.step"));
    for (const auto& name : c.model.param_names()) {
      if (auto it = tensors.find("adam.m." + name); it != tensors.end()) st.m[name] = it->second;
      if (auto it = tensors.find("adam.v." + name); it != tensors.end()) st.v[name] = it->second;
    }
    c.optimizer = std::move(st);
  }
  return c;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  save_tensors(path, checkpoint_tensors(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return checkpoint_from_tensors(load_tensors(path));
}

}  // namespace gfprune::harness

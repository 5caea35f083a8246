#include "s2gr/numerics/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "s2gr/io.hpp"

namespace s2gr::nx {

const NamedTensor* Checkpoint::find(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return &t;
  return nullptr;
}

std::string Checkpoint::meta_value(const std::string& key, const std::string& fallback) const {
  for (const auto& [k, v] : meta)
    if (k == key) return v;
  return fallback;
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write checkpoint " + path.string());
  out.write(Checkpoint::kMagic, 8);
  io::write_u32(out, Checkpoint::kVersion);
  io::write_u32(out, static_cast<std::uint32_t>(ckpt.meta.size()));
  for (const auto& [k, v] : ckpt.meta) {
    io::write_u32(out, static_cast<std::uint32_t>(k.size()));
    io::write_bytes(out, k);
    io::write_u32(out, static_cast<std::uint32_t>(v.size()));
    io::write_bytes(out, v);
  }
  io::write_u32(out, static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& t : ckpt.tensors) {
    io::write_u32(out, static_cast<std::uint32_t>(t.name.size()));
    io::write_bytes(out, t.name);
    io::write_u32(out, static_cast<std::uint32_t>(t.value.shape.size()));
    for (auto e : t.value.shape) io::write_u32(out, static_cast<std::uint32_t>(e));
    for (float x : t.value.data) io::write_f32(out, x);
  }
  if (!out) throw Error("short write on checkpoint " + path.string());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open checkpoint " + path.string());
  const std::string magic = io::read_bytes(in, 8);
  if (std::memcmp(magic.data(), Checkpoint::kMagic, 8) != 0)
    throw ParseError("bad checkpoint magic in " + path.string());
  const std::uint32_t version = io::read_u32(in);
  if (version != Checkpoint::kVersion)
    throw ParseError("unsupported checkpoint version " + std::to_string(version));
  Checkpoint ckpt;
  const std::uint32_t n_meta = io::read_u32(in);
  for (std::uint32_t i = 0; i < n_meta; ++i) {
    std::string k = io::read_bytes(in, io::read_u32(in));
    std::string v = io::read_bytes(in, io::read_u32(in));
    ckpt.meta.emplace_back(std::move(k), std::move(v));
  }
  const std::uint32_t n = io::read_u32(in);
  for (std::uint32_t i = 0; i < n; ++i) {
    NamedTensor t;
    t.name = io::read_bytes(in, io::read_u32(in));
    const std::uint32_t rank = io::read_u32(in);
    std::vector<std::size_t> shape;
    for (std::uint32_t r = 0; r < rank; ++r) shape.push_back(io::read_u32(in));
    std::vector<float> data(Tensor<float>::numel_of(shape));
    for (auto& x : data) x = io::read_f32(in);
    t.value = Tensor<float>(std::move(shape), std::move(data));
    ckpt.tensors.push_back(std::move(t));
  }
  return ckpt;
}

template <typename T>
void append_parameters(Checkpoint& ckpt, const ParameterStore<T>& store, const std::string& prefix) {
  for (std::size_t i = 0; i < store.size(); ++i)
    ckpt.tensors.push_back({prefix + store[i].name, store[i].value.template cast<float>()});
}

template <typename T>
void load_parameters(const Checkpoint& ckpt, ParameterStore<T>& store, const std::string& prefix) {
  for (std::size_t i = 0; i < store.size(); ++i) {
    auto& p = store[i];
    const NamedTensor* t = ckpt.find(prefix + p.name);
    if (t == nullptr) throw ShapeError("checkpoint lacks tensor " + prefix + p.name);
    if (t->value.shape != p.value.shape)
      throw ShapeError("checkpoint tensor " + t->name + " has shape " + t->value.shape_str() +
                       ", expected " + p.value.shape_str());
    p.value = t->value.template cast<T>();
  }
}

template void append_parameters<float>(Checkpoint&, const ParameterStore<float>&, const std::string&);
template void append_parameters<double>(Checkpoint&, const ParameterStore<double>&, const std::string&);
template void load_parameters<float>(const Checkpoint&, ParameterStore<float>&, const std::string&);
template void load_parameters<double>(const Checkpoint&, ParameterStore<double>&, const std::string&);

}  // namespace s2gr::nx

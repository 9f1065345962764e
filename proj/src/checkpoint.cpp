#include "camforge/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "camforge/json_util.hpp"

namespace camforge {

const Tensor* Checkpoint::find(const std::string& name) const {
  for (const auto& [n, t] : tensors) {
    if (n == name) return &t;
  }
  return nullptr;
}

Checkpoint snapshot(const Model& model, std::uint64_t seed, int epoch) {
  Checkpoint c;
  c.spec = model.spec();
  c.seed = seed;
  c.epoch = epoch;
  for (const auto& [name, t] : model.state()) c.tensors.emplace_back(name, t.clone());
  return c;
}

void restore(Model& model, const Checkpoint& ckpt) {
  if (!model.spec().same_architecture(ckpt.spec)) {
    throw std::invalid_argument("checkpoint architecture " + to_json(ckpt.spec).dump() +
                                " does not match model " + to_json(model.spec()).dump());
  }
  for (auto& [name, t] : model.state()) {
    const Tensor* src = ckpt.find(name);
    if (!src) throw std::invalid_argument("checkpoint lacks tensor '" + name + "'");
    if (src->shape() != t.shape()) {
      throw std::invalid_argument("checkpoint tensor '" + name + "' has shape " + shape_str(src->shape()) +
                                  ", model expects " + shape_str(t.shape()));
    }
    auto dst = t.mutable_data();
    auto from = src->data();
    std::copy(from.begin(), from.end(), dst.begin());
  }
}

Model model_from_checkpoint(const Checkpoint& ckpt) {
  Rng rng(ckpt.seed);
  Model m = Model::build(ckpt.spec, rng);
  restore(m, ckpt);
  m.set_mode(Mode::eval);
  return m;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  nlohmann::json table = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& [name, t] : ckpt.tensors) {
    table.push_back({{"name", name}, {"offset", offset}, {"shape", t.shape()}});
    offset += t.numel() * sizeof(double);
  }
  const nlohmann::json header{{"spec", to_json(ckpt.spec)},
                              {"tensors", table},
                              {"seed", ckpt.seed},
                              {"epoch", ckpt.epoch},
                              {"extra", ckpt.extra}};

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic) - 1);
  const std::string h = header.dump();
  out.write(h.data(), static_cast<std::streamsize>(h.size()));
  out.put('\n');
  unsigned char bytes[8];
  for (const auto& [name, t] : ckpt.tensors) {
    for (double v : t.data()) {
      const auto bits = std::bit_cast<std::uint64_t>(v);
      for (int i = 0; i < 8; ++i) bytes[i] = static_cast<unsigned char>(bits >> (8 * i));
      out.write(reinterpret_cast<const char*>(bytes), 8);
    }
  }
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  char magic[sizeof(kCheckpointMagic) - 1];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) {
    throw std::runtime_error(path.string() + " is not a CAMF1 checkpoint");
  }
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error(path.string() + ": truncated header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(path.string() + ": corrupt header: " + e.what());
  }

  Checkpoint c;
  c.spec = model_spec_from_json(header.at("spec"), "spec");
  c.seed = header.at("seed").get<std::uint64_t>();
  c.epoch = header.at("epoch").get<int>();
  c.extra = header.value("extra", nlohmann::json::object());

  std::vector<char> payload((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  for (const auto& entry : header.at("tensors")) {
    const auto shape = entry.at("shape").get<Shape>();
    const auto offset = entry.at("offset").get<std::size_t>();
    const std::size_t n = shape_numel(shape);
    if (offset + n * 8 > payload.size()) {
      throw std::runtime_error(path.string() + ": payload too short for '" +
                               entry.at("name").get<std::string>() + "'");
    }
    std::vector<double> values(n);
    for (std::size_t i = 0; i < n; ++i) {
      std::uint64_t bits = 0;
      for (int b = 0; b < 8; ++b) {
        bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(payload[offset + i * 8 + b])) << (8 * b);
      }
      values[i] = std::bit_cast<double>(bits);
    }
    c.tensors.emplace_back(entry.at("name").get<std::string>(), Tensor(shape, std::move(values)));
  }
  return c;
}

}  // namespace camforge

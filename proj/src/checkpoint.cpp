#include "mafenn/checkpoint.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace mafenn {

namespace {

constexpr std::uint32_t kCheckpointVersion = 1;
constexpr char kCheckpointMagic[4] = {'M', 'A', 'F', 'W'};

template <typename T>
void put(std::ofstream& f, const T& v) {
  f.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::ifstream& f) {
  T v{};
  f.read(reinterpret_cast<char*>(&v), sizeof(T));
  return v;
}

}  // namespace

void save_checkpoint(
    const std::string& path,
    const std::vector<std::pair<std::string, Tensor>>& items) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("save_checkpoint: cannot open " + path);
  f.write(kCheckpointMagic, 4);
  put(f, kCheckpointVersion);
  for (const auto& [name, t] : items) {
    if (name.size() > 0xffff)
      throw std::invalid_argument("save_checkpoint: name too long");
    put(f, static_cast<std::uint16_t>(name.size()));
    f.write(name.data(), static_cast<std::streamsize>(name.size()));
    put(f, static_cast<std::uint8_t>(t.rank()));
    for (int d : t.shape) put(f, static_cast<std::uint32_t>(d));
    f.write(reinterpret_cast<const char*>(t.ptr()),
            static_cast<std::streamsize>(t.numel() * sizeof(double)));
  }
  if (!f) throw std::runtime_error("save_checkpoint: write failed: " + path);
}

std::vector<std::pair<std::string, Tensor>> load_checkpoint(
    const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("load_checkpoint: cannot open " + path);
  char magic[4];
  f.read(magic, 4);
  if (!f || std::memcmp(magic, kCheckpointMagic, 4) != 0)
    throw std::runtime_error("load_checkpoint: bad magic in " + path);
  if (get<std::uint32_t>(f) != kCheckpointVersion)
    throw std::runtime_error("load_checkpoint: unsupported version");
  std::vector<std::pair<std::string, Tensor>> items;
  while (true) {
    const auto name_len = get<std::uint16_t>(f);
    if (f.eof()) break;
    std::string name(name_len, '\0');
    f.read(name.data(), name_len);
    const auto rank = get<std::uint8_t>(f);
    std::vector<int> shape(rank);
    for (auto& d : shape) d = static_cast<int>(get<std::uint32_t>(f));
    Tensor t(shape);
    f.read(reinterpret_cast<char*>(t.ptr()),
           static_cast<std::streamsize>(t.numel() * sizeof(double)));
    if (!f) throw std::runtime_error("load_checkpoint: truncated " + path);
    items.emplace_back(std::move(name), std::move(t));
  }
  return items;
}

void append_checkpoint_items(
    std::vector<std::pair<std::string, Tensor>>& items,
    const std::string& prefix, const ParamSet& params) {
  for (std::size_t i = 0; i < params.size(); ++i)
    items.emplace_back(prefix + "." + params.names[i], params.values[i]);
}

void restore_params(const std::vector<std::pair<std::string, Tensor>>& items,
                    const std::string& prefix, ParamSet& params) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    const std::string want = prefix + "." + params.names[i];
    bool found = false;
    for (const auto& [name, t] : items) {
      if (name != want) continue;
      if (t.shape != params.values[i].shape)
        throw std::runtime_error("restore_params: shape mismatch for " + want);
      params.values[i] = t;
      found = true;
      break;
    }
    if (!found)
      throw std::runtime_error("restore_params: missing tensor " + want);
  }
}

}  // namespace mafenn

#include "bandmoe/tensor_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <json.hpp>

namespace bandmoe {

using nlohmann::json;

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

namespace {

std::uint64_t to_little(std::uint64_t v) {
  if constexpr (std::endian::native == std::endian::big) {
    std::uint64_t r = 0;
    for (int i = 0; i < 8; ++i) r |= ((v >> (8 * i)) & 0xffu) << (8 * (7 - i));
    return r;
  }
  return v;
}

std::string file_name_for(const std::string& name) {
  std::string out = name;
  for (auto& ch : out) {
    if (ch == '/' || ch == '.' || ch == '\\') ch = '_';
  }
  return out + ".tensor";
}

}  // namespace

void write_tensor(std::ostream& os, const Tensor& t) {
  json header = {{"shape", t.shape()}, {"dtype", "f64"}};
  os << header.dump() << '\n';
  for (double v : t.data()) {
    std::uint64_t bits = to_little(std::bit_cast<std::uint64_t>(v));
    char buf[8];
    std::memcpy(buf, &bits, 8);
    os.write(buf, 8);
  }
  if (!os) throw InputError("write_tensor: stream failure");
}

Tensor read_tensor(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw InputError("read_tensor: missing header line");
  json header;
  try {
    header = json::parse(line);
  } catch (const json::exception& e) {
    throw InputError(std::string("read_tensor: bad header: ") + e.what());
  }
  if (!header.contains("dtype") || header["dtype"] != "f64") throw InputError("read_tensor: dtype must be f64");
  if (!header.contains("shape") || !header["shape"].is_array()) throw InputError("read_tensor: missing shape");
  Shape shape = header["shape"].get<Shape>();
  std::vector<double> values(numel(shape));
  for (auto& v : values) {
    char buf[8];
    if (!is.read(buf, 8)) throw InputError("read_tensor: truncated payload");
    std::uint64_t bits;
    std::memcpy(&bits, buf, 8);
    v = std::bit_cast<double>(to_little(bits));
  }
  return Tensor::from(shape, std::move(values));
}

void save_tensor(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw InputError("save_tensor: cannot open " + path.string());
  write_tensor(os, t);
}

Tensor load_tensor(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw InputError("load_tensor: cannot open " + path.string());
  return read_tensor(is);
}

void save_bundle(const std::filesystem::path& dir, const NamedTensors& tensors, const std::string& extra_json) {
  std::filesystem::create_directories(dir);
  json manifest = json::parse(extra_json);
  if (!manifest.is_object()) throw UsageError("save_bundle: extra manifest must be a JSON object");
  json list = json::array();
  for (const auto& [name, t] : tensors) {
    const std::string file = file_name_for(name);
    save_tensor(dir / file, t);
    list.push_back({{"name", name}, {"file", file}, {"shape", t.shape()}});
  }
  manifest["tensors"] = list;
  std::ofstream os(dir / "manifest.json");
  os << manifest.dump(2) << '\n';
  if (!os) throw InputError("save_bundle: cannot write manifest in " + dir.string());
}

const Tensor& Bundle::at(const std::string& name) const {
  for (const auto& [n, t] : tensors) {
    if (n == name) return t;
  }
  throw InputError("bundle: no tensor named '" + name + "'");
}

Bundle load_bundle(const std::filesystem::path& dir) {
  std::ifstream is(dir / "manifest.json");
  if (!is) throw InputError("load_bundle: no manifest.json in " + dir.string());
  json manifest;
  try {
    manifest = json::parse(is);
  } catch (const json::exception& e) {
    throw InputError(std::string("load_bundle: bad manifest: ") + e.what());
  }
  Bundle b;
  for (const auto& entry : manifest.at("tensors")) {
    Tensor t = load_tensor(dir / entry.at("file").get<std::string>());
    if (t.shape() != entry.at("shape").get<Shape>()) {
      throw ShapeError("load_bundle: " + entry.at("name").get<std::string>(), t.shape(), entry.at("shape").get<Shape>());
    }
    b.tensors.emplace_back(entry.at("name").get<std::string>(), std::move(t));
  }
  manifest.erase("tensors");
  b.extra_json = manifest.dump();
  return b;
}

}  // namespace bandmoe

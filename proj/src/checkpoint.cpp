#include "sv4d/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace sv4d {

using nlohmann::json;

namespace {
constexpr char kMagic[8] = {'S', 'V', '4', 'D', 'B', 'L', 'O', 'B'};
}

void save_blob(const std::filesystem::path& path, const std::string& kind, const json& config,
               const nn::ParamStore& store, const json& extra) {
  json header;
  header["version"] = 1;
  header["kind"] = kind;
  header["config"] = config;
  header["extra"] = extra;
  json tensors = json::array();
  uint64_t offset = 0;
  for (const auto& e : store.entries()) {
    tensors.push_back({{"name", e.name},
                       {"rows", e.value.rows()},
                       {"cols", e.value.cols()},
                       {"dtype", "f64"},
                       {"offset", offset}});
    offset += static_cast<uint64_t>(e.value.size()) * sizeof(double);
  }
  header["tensors"] = std::move(tensors);
  const std::string header_str = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError("save_blob: cannot open " + path.string());
  out.write(kMagic, sizeof kMagic);
  const uint64_t len = header_str.size();
  out.write(reinterpret_cast<const char*>(&len), sizeof len);
  out.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));
  for (const auto& e : store.entries())
    out.write(reinterpret_cast<const char*>(e.value.data()),
              static_cast<std::streamsize>(e.value.size() * sizeof(double)));
  if (!out) throw CheckpointError("save_blob: write failed for " + path.string());
}

namespace {

BlobHeader parse_header(std::ifstream& in, const std::filesystem::path& path,
                        uint64_t* payload_start) {
  char magic[8];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kMagic, sizeof magic) != 0)
    throw CheckpointError("checkpoint: bad magic in " + path.string());
  uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof len);
  if (!in || len == 0 || len > (1ull << 30))
    throw CheckpointError("checkpoint: bad header length in " + path.string());
  std::string header_str(len, '\0');
  in.read(header_str.data(), static_cast<std::streamsize>(len));
  if (!in) throw CheckpointError("checkpoint: truncated header in " + path.string());

  BlobHeader h;
  try {
    json j = json::parse(header_str);
    h.version = j.at("version").get<int>();
    h.kind = j.at("kind").get<std::string>();
    h.config = j.at("config");
    h.extra = j.value("extra", json::object());
    for (const auto& t : j.at("tensors")) {
      TensorInfo info;
      info.name = t.at("name").get<std::string>();
      info.rows = t.at("rows").get<long>();
      info.cols = t.at("cols").get<long>();
      info.offset = t.at("offset").get<uint64_t>();
      if (t.at("dtype").get<std::string>() != "f64")
        throw CheckpointError("checkpoint: unsupported dtype in " + path.string());
      h.tensors.push_back(std::move(info));
    }
  } catch (const json::exception& e) {
    throw CheckpointError("checkpoint: malformed header in " + path.string() + ": " + e.what());
  }
  *payload_start = sizeof kMagic + sizeof len + len;
  return h;
}

}  // namespace

BlobHeader read_blob_header(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("checkpoint: cannot open " + path.string());
  uint64_t start = 0;
  return parse_header(in, path, &start);
}

void load_blob_tensors(const std::filesystem::path& path, nn::ParamStore& store,
                       const std::vector<std::string>& partial_manifest) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("checkpoint: cannot open " + path.string());
  uint64_t payload_start = 0;
  const BlobHeader header = parse_header(in, path, &payload_start);

  const bool partial = !partial_manifest.empty();
  auto wanted = [&](const std::string& name) {
    if (!partial) return true;
    for (const auto& w : partial_manifest)
      if (name == w || (w.size() && w.back() == '*' &&
                        name.compare(0, w.size() - 1, w, 0, w.size() - 1) == 0))
        return true;
    return false;
  };

  size_t loaded = 0;
  for (const auto& info : header.tensors) {
    if (!wanted(info.name)) continue;
    const int id = store.find(info.name);
    if (id < 0) {
      if (partial) continue;
      throw CheckpointError("checkpoint: unknown tensor " + info.name + " in " + path.string());
    }
    nn::ParamStore::Entry& e = store.entry(id);
    if (e.value.rows() != info.rows || e.value.cols() != info.cols)
      throw CheckpointError("checkpoint: shape mismatch for " + info.name + " in " +
                            path.string());
    in.seekg(static_cast<std::streamoff>(payload_start + info.offset));
    in.read(reinterpret_cast<char*>(e.value.data()),
            static_cast<std::streamsize>(e.value.size() * sizeof(double)));
    if (!in) throw CheckpointError("checkpoint: truncated payload in " + path.string());
    ++loaded;
  }
  if (!partial && loaded != store.count())
    throw CheckpointError("checkpoint: missing tensors in " + path.string());
}

}  // namespace sv4d

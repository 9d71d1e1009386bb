#include "cotlab/checkpoint.hpp"

#include <fstream>

namespace cotlab {

using nlohmann::ordered_json;

namespace {

constexpr const char* kFormat = "cotlab-bundle-v1";
constexpr const char* kDtype = "f64-le";

}  // namespace

void save_array_bundle(const std::filesystem::path& dir, const std::string& kind,
                       ordered_json extra,
                       const std::vector<std::pair<std::string, const Tensor*>>& arrays) {
  std::filesystem::create_directories(dir);
  ordered_json manifest;
  manifest["format"] = kFormat;
  manifest["kind"] = kind;
  manifest["dtype"] = kDtype;
  for (auto& [k, v] : extra.items()) manifest[k] = v;

  ordered_json table = ordered_json::array();
  size_t offset = 0;
  for (auto& [name, t] : arrays) {
    ordered_json entry;
    entry["name"] = name;
    entry["shape"] = t->shape;
    entry["offset"] = offset;
    table.push_back(entry);
    offset += t->numel();
  }
  manifest["arrays"] = table;
  manifest["total_values"] = offset;
  write_text_file(dir / "manifest.json", manifest.dump(2) + "\n");

  std::ofstream bin(dir / "params.bin", std::ios::binary);
  if (!bin) throw validation_error("checkpoint: cannot write " + (dir / "params.bin").string());
  for (auto& [name, t] : arrays)
    bin.write(reinterpret_cast<const char*>(t->ptr()),
              (std::streamsize)(t->numel() * sizeof(double)));
}

ordered_json read_bundle_manifest(const std::filesystem::path& dir,
                                  const std::string& kind) {
  const auto mpath = dir / "manifest.json";
  if (!std::filesystem::exists(mpath))
    throw prerequisite_error("checkpoint: missing " + mpath.string());
  ordered_json manifest = ordered_json::parse(read_text_file(mpath));
  if (manifest.value("format", "") != kFormat)
    throw validation_error("checkpoint: unsupported format in " + mpath.string());
  if (manifest.value("dtype", "") != kDtype)
    throw validation_error("checkpoint: unsupported dtype in " + mpath.string());
  if (manifest.value("kind", "") != kind)
    throw validation_error("checkpoint: expected kind '" + kind + "' in " + mpath.string());
  return manifest;
}

void load_array_bundle(const std::filesystem::path& dir, const std::string& kind,
                       const std::vector<std::pair<std::string, Tensor*>>& arrays) {
  ordered_json manifest = read_bundle_manifest(dir, kind);
  const auto bpath = dir / "params.bin";
  if (!std::filesystem::exists(bpath))
    throw prerequisite_error("checkpoint: missing " + bpath.string());

  std::map<std::string, std::pair<std::vector<int>, size_t>> table;
  for (auto& entry : manifest["arrays"])
    table[entry["name"]] = {entry["shape"].get<std::vector<int>>(),
                            entry["offset"].get<size_t>()};
  if (table.size() != arrays.size())
    throw validation_error("checkpoint: array count mismatch in " + dir.string());

  const size_t total = manifest["total_values"].get<size_t>();
  if (std::filesystem::file_size(bpath) != total * sizeof(double))
    throw validation_error("checkpoint: params.bin size mismatch in " + dir.string());

  std::ifstream bin(bpath, std::ios::binary);
  for (auto& [name, t] : arrays) {
    auto it = table.find(name);
    if (it == table.end())
      throw validation_error("checkpoint: array '" + name + "' missing from manifest");
    if (it->second.first != t->shape)
      throw validation_error("checkpoint: shape mismatch for array '" + name + "'");
    bin.seekg((std::streamoff)(it->second.second * sizeof(double)));
    bin.read(reinterpret_cast<char*>(t->ptr()),
             (std::streamsize)(t->numel() * sizeof(double)));
    if (!bin) throw validation_error("checkpoint: short read for array '" + name + "'");
  }
}

void save_model_checkpoint(const std::filesystem::path& dir, const Model& m,
                           const std::string& config_echo, uint64_t seed) {
  ordered_json extra;
  extra["seed"] = seed;
  extra["config_echo"] = config_echo;
  extra["model"] = {{"n_layers", m.cfg.n_layers},   {"n_heads", m.cfg.n_heads},
                    {"d_model", m.cfg.d_model},     {"d_ff", m.cfg.d_ff},
                    {"vocab_size", m.cfg.vocab_size}, {"context_len", m.cfg.context_len},
                    {"ln_eps", m.cfg.ln_eps}};
  save_array_bundle(dir, "model", extra, m.named_params());
}

Model load_model_checkpoint(const std::filesystem::path& dir) {
  ordered_json manifest = read_bundle_manifest(dir, "model");
  if (!manifest.contains("model"))
    throw validation_error("checkpoint: manifest lacks model dimensions");
  const auto& md = manifest["model"];
  TransformerConfig cfg;
  cfg.n_layers = md["n_layers"].get<int>();
  cfg.n_heads = md["n_heads"].get<int>();
  cfg.d_model = md["d_model"].get<int>();
  cfg.d_ff = md["d_ff"].get<int>();
  cfg.vocab_size = md["vocab_size"].get<int>();
  cfg.context_len = md["context_len"].get<int>();
  cfg.ln_eps = md["ln_eps"].get<double>();
  rng r(0);
  Model m(cfg, r);
  std::vector<std::pair<std::string, Tensor*>> arrays;
  for (auto& [name, t] : m.named_params()) arrays.emplace_back(name, t);
  load_array_bundle(dir, "model", arrays);
  return m;
}

}  // namespace cotlab

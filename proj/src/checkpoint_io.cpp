#include <bit>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iterator>

#include <json.hpp>

#include "gradmerge/errors.hpp"
#include "gradmerge/param_space.hpp"

namespace gradmerge {

using nlohmann::json;

std::filesystem::path meta_path(const std::filesystem::path& stem) {
  return std::filesystem::path(stem.string() + ".meta.json");
}

std::filesystem::path blob_path(const std::filesystem::path& stem) {
  return std::filesystem::path(stem.string() + ".f64le");
}

namespace {

void append_le(std::string& out, std::span<const double> values) {
  for (double v : values) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    for (int byte = 0; byte < 8; ++byte) out.push_back(static_cast<char>((bits >> (8 * byte)) & 0xffu));
  }
}

double read_le(const std::string& blob, std::size_t index) {
  std::uint64_t bits = 0;
  for (int byte = 0; byte < 8; ++byte) {
    bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(blob[index * 8 + byte])) << (8 * byte);
  }
  return std::bit_cast<double>(bits);
}

void write_file(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing " + path.string());
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& stem) {
  json layout = json::array();
  for (const auto& e : ckpt.layout().entries()) layout.push_back(json::array({e.name, e.shape}));

  json doc;
  doc["layout"] = std::move(layout);
  doc["anchor_id"] = ckpt.anchor_id() ? json(*ckpt.anchor_id()) : json(nullptr);
  doc["has_curvature"] = ckpt.curvature().has_value();
  doc["meta"] = ckpt.meta();

  std::string blob;
  blob.reserve(ckpt.params().size() * 16);
  append_le(blob, ckpt.params().values());
  if (ckpt.curvature()) append_le(blob, ckpt.curvature()->values());

  write_file(meta_path(stem), doc.dump(2) + "\n");
  write_file(blob_path(stem), blob);
}

Checkpoint load_checkpoint(const std::filesystem::path& stem) {
  const std::string meta_text = read_file(meta_path(stem));
  const std::string blob = read_file(blob_path(stem));

  json doc;
  try {
    doc = json::parse(meta_text);
  } catch (const json::parse_error& e) {
    throw CorruptCheckpointError(meta_path(stem).string() + ": " + e.what());
  }
  if (!doc.is_object() || !doc.contains("layout")) {
    throw CorruptCheckpointError(meta_path(stem).string() + " has no layout key");
  }

  LayoutPtr layout;
  bool has_curvature = false;
  std::optional<std::string> anchor_id;
  std::map<std::string, std::string> meta;
  try {
    std::vector<LayoutEntry> entries;
    for (const auto& item : doc.at("layout")) {
      entries.push_back({item.at(0).get<std::string>(), item.at(1).get<std::vector<std::size_t>>()});
    }
    layout = make_layout(std::move(entries));
    has_curvature = doc.value("has_curvature", false);
    if (doc.contains("anchor_id") && !doc["anchor_id"].is_null()) {
      anchor_id = doc["anchor_id"].get<std::string>();
    }
    if (doc.contains("meta")) meta = doc["meta"].get<std::map<std::string, std::string>>();
  } catch (const json::exception& e) {
    throw CorruptCheckpointError(meta_path(stem).string() + ": " + e.what());
  } catch (const LayoutError& e) {
    throw CorruptCheckpointError(meta_path(stem).string() + ": " + e.what());
  }

  const std::size_t n = layout->total_len();
  const std::size_t expected = n * 8 * (has_curvature ? 2 : 1);
  if (blob.size() != expected) {
    throw CorruptCheckpointError(blob_path(stem).string() + " holds " + std::to_string(blob.size()) +
                                 " bytes, metadata implies " + std::to_string(expected));
  }

  std::vector<double> params(n);
  for (std::size_t i = 0; i < n; ++i) params[i] = read_le(blob, i);
  std::optional<DiagCurvature> curvature;
  if (has_curvature) {
    std::vector<double> curv(n);
    for (std::size_t i = 0; i < n; ++i) curv[i] = read_le(blob, n + i);
    curvature.emplace(layout, std::move(curv));
  }
  return Checkpoint(ParamVector(layout, std::move(params)), std::move(curvature),
                    std::move(anchor_id), std::move(meta));
}

}  // namespace gradmerge

#pragma once

// On-disk formats.
//
//   episodes.manifest  text: header, one `object` line per object (id + 8
//                      latents), one `episode` line per episode (id, object,
//                      grasp, float offset into the blob)
//   episodes.bin       little-endian float32; per episode visual, finger_a,
//                      finger_b, each [3, R, R] row-major
//   *.csv pairs        tactile_episode_id,visual_episode_id,label
//   split.manifest     text: seed, train ids, test ids
//   <name>.header/.bin tensor archive: text header (attributes + tensor
//                      layout) and little-endian float64 blob
//
// Every file is written to a temporary sibling and renamed into place.

#include <bit>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "touchmatch/dataset.hpp"
#include "touchmatch/error.hpp"
#include "touchmatch/tensor.hpp"

namespace touchmatch::io {

namespace fs = std::filesystem;

/// Shortest decimal form that round-trips exactly.
inline std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline double parse_double(std::string_view s, std::string_view what) {
  double v = 0.0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size()) {
    throw IoError("cannot parse number '" + std::string(s) + "' for " + std::string(what));
  }
  return v;
}

template <class Int>
Int parse_int(std::string_view s, std::string_view what) {
  Int v{};
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size()) {
    throw IoError("cannot parse integer '" + std::string(s) + "' for " + std::string(what));
  }
  return v;
}

inline void write_file_atomic(const fs::path& path, std::string_view bytes) {
  if (path.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
    if (ec) throw IoError("cannot create directory " + path.parent_path().string() + ": " + ec.message());
  }
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed for " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

inline std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingPrerequisite("missing file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void require_file(const fs::path& path, std::string_view produced_by) {
  if (!fs::exists(path)) {
    throw MissingPrerequisite("missing " + path.string() + " (run `" + std::string(produced_by) + "` first)");
  }
}

inline std::vector<std::string> split_ws(const std::string& line) {
  std::istringstream is(line);
  std::vector<std::string> out;
  for (std::string tok; is >> tok;) out.push_back(tok);
  return out;
}

inline std::vector<std::string> lines_of(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream is(text);
  for (std::string line; std::getline(is, line);) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    out.push_back(line);
  }
  return out;
}

template <class T>
void append_le(std::string& out, T value) {
  using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  auto bits = std::bit_cast<U>(value);
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
}

template <class T>
T read_le(const std::string& bytes, std::size_t offset) {
  using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  U bits = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    bits |= static_cast<U>(static_cast<unsigned char>(bytes[offset + i])) << (8 * i);
  }
  return std::bit_cast<T>(bits);
}

// ---------------------------------------------------------------- episodes

inline void save_store(const EpisodeStore& store, const fs::path& manifest_path, const fs::path& blob_path) {
  const std::size_t r = store.size() ? store.episode(0).visual.image.dim(1) : 0;
  const std::size_t per_image = 3 * r * r;
  std::string blob;
  blob.reserve(store.size() * 3 * per_image * 4);
  std::ostringstream m;
  m << "touchmatch-episodes 1\n";
  m << "resolution " << r << "\n";
  m << "objects " << store.object_count() << "\n";
  m << "episodes " << store.size() << "\n";
  m << "floats_per_episode " << 3 * per_image << "\n";
  for (std::int64_t id : store.object_ids()) {
    const ObjectSpec& s = store.object(id);
    m << "object " << id;
    for (double v : s.latent) m << ' ' << format_double(v);
    m << '\n';
  }
  for (const Episode& ep : store.episodes()) {
    const std::size_t offset = blob.size() / 4;
    for (const Tensor* t : {&ep.visual.image, &ep.tactile.finger_a, &ep.tactile.finger_b}) {
      if (t->size() != per_image) throw DimensionError("save_store: inconsistent observation resolution");
      for (double v : t->data()) append_le(blob, static_cast<float>(v));
    }
    m << "episode " << ep.episode_id << ' ' << ep.object_id << ' ' << format_double(ep.grasp.contact_x) << ' '
      << format_double(ep.grasp.contact_y) << ' ' << format_double(ep.grasp.force) << ' ' << offset << '\n';
  }
  write_file_atomic(blob_path, blob);
  write_file_atomic(manifest_path, m.str());
}

inline EpisodeStore load_store(const fs::path& manifest_path, const fs::path& blob_path) {
  const std::string text = read_file(manifest_path);
  const std::string blob = read_file(blob_path);
  const auto lines = lines_of(text);
  if (lines.empty() || lines[0] != "touchmatch-episodes 1") {
    throw IoError(manifest_path.string() + ": not an episode manifest");
  }
  std::size_t r = 0, declared_episodes = 0, floats_per_episode = 0;
  EpisodeStore store;
  for (std::size_t li = 1; li < lines.size(); ++li) {
    const auto tok = split_ws(lines[li]);
    if (tok.empty()) continue;
    if (tok[0] == "resolution") {
      r = parse_int<std::size_t>(tok.at(1), "resolution");
    } else if (tok[0] == "episodes") {
      declared_episodes = parse_int<std::size_t>(tok.at(1), "episodes");
    } else if (tok[0] == "floats_per_episode") {
      floats_per_episode = parse_int<std::size_t>(tok.at(1), "floats_per_episode");
    } else if (tok[0] == "objects") {
      continue;
    } else if (tok[0] == "object") {
      if (tok.size() != 2 + kLatentDims) throw IoError("malformed object line " + std::to_string(li + 1));
      ObjectSpec s;
      s.object_id = parse_int<std::int64_t>(tok[1], "object id");
      for (std::size_t k = 0; k < kLatentDims; ++k) s.latent[k] = parse_double(tok[2 + k], "latent");
      store.add_object(s);
    } else if (tok[0] == "episode") {
      if (tok.size() != 7) throw IoError("malformed episode line " + std::to_string(li + 1));
      Episode ep;
      ep.episode_id = parse_int<std::int64_t>(tok[1], "episode id");
      ep.object_id = parse_int<std::int64_t>(tok[2], "object id");
      ep.grasp = {parse_double(tok[3], "contact_x"), parse_double(tok[4], "contact_y"),
                  parse_double(tok[5], "force")};
      ep.success = true;
      const auto offset = parse_int<std::size_t>(tok[6], "offset");
      const std::size_t per_image = 3 * r * r;
      if ((offset + 3 * per_image) * 4 > blob.size()) {
        throw IoError("episode " + std::to_string(ep.episode_id) + " offset beyond end of " + blob_path.string());
      }
      Tensor* dst[3] = {&ep.visual.image, &ep.tactile.finger_a, &ep.tactile.finger_b};
      for (std::size_t k = 0; k < 3; ++k) {
        *dst[k] = Tensor({3, r, r});
        for (std::size_t i = 0; i < per_image; ++i) {
          (*dst[k])[i] = static_cast<double>(read_le<float>(blob, 4 * (offset + k * per_image + i)));
        }
      }
      store.add_episode(std::move(ep));
    } else {
      throw IoError("unknown manifest record '" + tok[0] + "' on line " + std::to_string(li + 1));
    }
  }
  if (store.size() != declared_episodes) {
    throw IoError("manifest declares " + std::to_string(declared_episodes) + " episodes but lists " +
                  std::to_string(store.size()));
  }
  if (floats_per_episode != 9 * r * r || blob.size() != 4 * floats_per_episode * store.size()) {
    throw IoError(blob_path.string() + " size does not match the manifest");
  }
  return store;
}

// ---------------------------------------------------------------- pairs

inline std::string pairs_to_csv(const std::vector<PairExample>& pairs) {
  std::string out = "tactile_episode_id,visual_episode_id,label\n";
  for (const auto& p : pairs) {
    out += std::to_string(p.tactile_episode_id) + ',' + std::to_string(p.visual_episode_id) + ',' +
           std::to_string(p.label) + '\n';
  }
  return out;
}

inline void save_pairs(const std::vector<PairExample>& pairs, const fs::path& path) {
  write_file_atomic(path, pairs_to_csv(pairs));
}

/// Object ids are resolved through the store; labels are checked against them.
inline std::vector<PairExample> load_pairs(const fs::path& path, const EpisodeStore& store) {
  const auto lines = lines_of(read_file(path));
  if (lines.empty() || lines[0] != "tactile_episode_id,visual_episode_id,label") {
    throw IoError(path.string() + ": unexpected CSV header");
  }
  std::vector<PairExample> pairs;
  for (std::size_t li = 1; li < lines.size(); ++li) {
    if (lines[li].empty()) continue;
    std::vector<std::string> cols;
    std::istringstream is(lines[li]);
    for (std::string c; std::getline(is, c, ',');) cols.push_back(c);
    if (cols.size() != 3) throw IoError(path.string() + ": malformed row " + std::to_string(li + 1));
    PairExample p;
    p.tactile_episode_id = parse_int<std::int64_t>(cols[0], "tactile_episode_id");
    p.visual_episode_id = parse_int<std::int64_t>(cols[1], "visual_episode_id");
    p.label = parse_int<int>(cols[2], "label");
    p.tactile_object_id = store.episode(p.tactile_episode_id).object_id;
    p.visual_object_id = store.episode(p.visual_episode_id).object_id;
    if (p.label != static_cast<int>(p.tactile_object_id == p.visual_object_id)) {
      throw DatasetError(path.string() + ": label on row " + std::to_string(li + 1) +
                         " disagrees with episode object ids");
    }
    pairs.push_back(p);
  }
  return pairs;
}

// ---------------------------------------------------------------- split

inline void save_split(const SplitManifest& m, const fs::path& path) {
  std::ostringstream os;
  os << "touchmatch-split 1\nseed " << m.seed << "\ntrain";
  for (auto id : m.train_object_ids) os << ' ' << id;
  os << "\ntest";
  for (auto id : m.test_object_ids) os << ' ' << id;
  os << '\n';
  write_file_atomic(path, os.str());
}

inline SplitManifest load_split(const fs::path& path) {
  const auto lines = lines_of(read_file(path));
  if (lines.empty() || lines[0] != "touchmatch-split 1") throw IoError(path.string() + ": not a split manifest");
  SplitManifest m;
  for (std::size_t li = 1; li < lines.size(); ++li) {
    const auto tok = split_ws(lines[li]);
    if (tok.empty()) continue;
    if (tok[0] == "seed") {
      m.seed = parse_int<std::uint64_t>(tok.at(1), "seed");
    } else if (tok[0] == "train" || tok[0] == "test") {
      auto& set = tok[0] == "train" ? m.train_object_ids : m.test_object_ids;
      for (std::size_t k = 1; k < tok.size(); ++k) set.insert(parse_int<std::int64_t>(tok[k], "object id"));
    } else {
      throw IoError(path.string() + ": unknown record '" + tok[0] + "'");
    }
  }
  return m;
}

// ---------------------------------------------------------------- tensor archive

/// Named tensors plus string attributes; used for model checkpoints and the
/// fitted CCA baseline.
struct TensorArchive {
  std::string kind;
  std::map<std::string, std::string> attributes;
  std::vector<std::pair<std::string, Tensor>> tensors;

  const Tensor& tensor(const std::string& name) const {
    for (const auto& [n, t] : tensors)
      if (n == name) return t;
    throw IoError("archive '" + kind + "' has no tensor '" + name + "'");
  }

  const std::string& attribute(const std::string& name) const {
    auto it = attributes.find(name);
    if (it == attributes.end()) throw IoError("archive '" + kind + "' has no attribute '" + name + "'");
    return it->second;
  }
};

inline void save_archive(const TensorArchive& a, const fs::path& header_path, const fs::path& blob_path) {
  std::ostringstream h;
  h << "touchmatch-archive 1\nkind " << a.kind << '\n';
  for (const auto& [k, v] : a.attributes) h << "attr " << k << ' ' << v << '\n';
  std::string blob;
  for (const auto& [name, t] : a.tensors) {
    h << "tensor " << name << ' ' << blob.size() / 8 << ' ' << t.rank();
    for (std::size_t d : t.shape()) h << ' ' << d;
    h << '\n';
    for (double v : t.data()) append_le(blob, v);
  }
  write_file_atomic(blob_path, blob);
  write_file_atomic(header_path, h.str());
}

inline TensorArchive load_archive(const fs::path& header_path, const fs::path& blob_path) {
  const auto lines = lines_of(read_file(header_path));
  const std::string blob = read_file(blob_path);
  if (lines.empty() || lines[0] != "touchmatch-archive 1") throw IoError(header_path.string() + ": not an archive");
  TensorArchive a;
  for (std::size_t li = 1; li < lines.size(); ++li) {
    const auto tok = split_ws(lines[li]);
    if (tok.empty()) continue;
    if (tok[0] == "kind") {
      a.kind = tok.at(1);
    } else if (tok[0] == "attr") {
      const std::string& line = lines[li];
      const std::size_t key_end = line.find(' ', 5);
      a.attributes[tok.at(1)] = key_end == std::string::npos ? "" : line.substr(key_end + 1);
    } else if (tok[0] == "tensor") {
      const auto offset = parse_int<std::size_t>(tok.at(2), "offset");
      const auto rank = parse_int<std::size_t>(tok.at(3), "rank");
      if (tok.size() != 4 + rank) throw IoError(header_path.string() + ": malformed tensor line");
      Shape shape;
      for (std::size_t k = 0; k < rank; ++k) shape.push_back(parse_int<std::size_t>(tok[4 + k], "dim"));
      Tensor t(shape);
      if ((offset + t.size()) * 8 > blob.size()) throw IoError(blob_path.string() + ": truncated tensor data");
      for (std::size_t i = 0; i < t.size(); ++i) t[i] = read_le<double>(blob, 8 * (offset + i));
      a.tensors.emplace_back(tok[1], std::move(t));
    } else {
      throw IoError(header_path.string() + ": unknown record '" + tok[0] + "'");
    }
  }
  return a;
}

}  // namespace touchmatch::io

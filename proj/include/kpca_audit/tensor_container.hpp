// ATD1 attention-dump container: reader, writer, and DumpSet directories.
//
// Layout:
//   bytes 0..3   magic "ATD1"
//   bytes 4..7   uint32 little-endian header length L
//   bytes 8..8+L UTF-8 JSON header
//   payload      Q, K, V[, H] as float64 little-endian row-major, no padding
#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <optional>
#include <string>
#include <tuple>
#include <vector>

#include <nlohmann/json.hpp>

#include "matrix.hpp"

namespace kpca_audit {

/// Malformed container bytes (magic, version, truncation, header/payload mismatch).
class FormatError : public Error {
 public:
  using Error::Error;
};

struct AttentionDump {
  std::string model_id;
  std::string sample_id;
  int layer = 0;
  int head = 0;
  std::size_t n_tokens = 0;
  std::size_t d_q = 0;
  std::size_t d_v = 0;
  Matrix Q, K, V;
  std::optional<Matrix> H;

  friend bool operator==(const AttentionDump&, const AttentionDump&) = default;
};

/// Ordering key for reductions: (model, sample, layer, head).
inline auto dump_key(const AttentionDump& d) {
  return std::tie(d.model_id, d.sample_id, d.layer, d.head);
}

inline std::string dump_label(const AttentionDump& d) {
  return d.model_id + "/" + d.sample_id + "/L" + std::to_string(d.layer) + "/H" +
         std::to_string(d.head);
}

struct LayerHeadCount {
  int num_layers = 0;
  int num_heads = 0;
  friend bool operator==(const LayerHeadCount&, const LayerHeadCount&) = default;
};

struct DumpSet {
  std::vector<AttentionDump> dumps;
  std::map<std::string, LayerHeadCount> manifest;
};

namespace detail {

inline void check_shape(const Matrix& m, std::size_t rows, std::size_t cols, const char* name) {
  if (m.rows() != rows || m.cols() != cols)
    throw ValidationError(std::string(name) + " shape " + std::to_string(m.rows()) + "x" +
                          std::to_string(m.cols()) + " does not match declared " +
                          std::to_string(rows) + "x" + std::to_string(cols));
  if (!m.all_finite()) throw ValidationError(std::string(name) + " not finite");
}

}  // namespace detail

/// Throws ValidationError naming the first offending field.
inline void validate(const AttentionDump& d) {
  if (d.layer < 0) throw ValidationError("layer must be >= 0");
  if (d.head < 0) throw ValidationError("head must be >= 0");
  if (d.n_tokens < 2) throw ValidationError("n_tokens must be >= 2");
  if (d.d_q < 1) throw ValidationError("d_q must be >= 1");
  if (d.d_v < 1) throw ValidationError("d_v must be >= 1");
  if (d.d_v > d.n_tokens) throw ValidationError("d_v exceeds n_tokens");
  detail::check_shape(d.Q, d.n_tokens, d.d_q, "Q");
  detail::check_shape(d.K, d.n_tokens, d.d_q, "K");
  detail::check_shape(d.V, d.n_tokens, d.d_v, "V");
  if (d.H) detail::check_shape(*d.H, d.n_tokens, d.d_v, "H");
}

inline void validate(const DumpSet& set) {
  std::vector<std::tuple<std::string, std::string, int, int>> keys;
  keys.reserve(set.dumps.size());
  for (const auto& d : set.dumps) {
    validate(d);
    keys.emplace_back(dump_key(d));
  }
  std::sort(keys.begin(), keys.end());
  if (std::adjacent_find(keys.begin(), keys.end()) != keys.end())
    throw ValidationError("duplicate (model_id, sample_id, layer, head) key in DumpSet");
}

namespace detail {

constexpr std::array<char, 4> kMagic = {'A', 'T', 'D', '1'};

inline void append_u32_le(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xffu));
}

inline std::uint32_t read_u32_le(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

inline void append_f64_le(std::vector<unsigned char>& out, double x) {
  std::uint64_t bits = std::bit_cast<std::uint64_t>(x);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<unsigned char>((bits >> (8 * i)) & 0xffu));
}

inline double read_f64_le(const unsigned char* p) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return std::bit_cast<double>(bits);
}

inline void append_matrix(std::vector<unsigned char>& out, const Matrix& m) {
  for (double x : m.data()) append_f64_le(out, x);
}

template <typename T>
T header_uint(const nlohmann::json& h, const char* key) {
  if (!h.contains(key) || !h[key].is_number_integer())
    throw FormatError(std::string("header field '") + key + "' missing or not an integer");
  const auto v = h[key].get<std::int64_t>();
  if (v < 0) throw FormatError(std::string("header field '") + key + "' is negative");
  return static_cast<T>(v);
}

inline std::string header_string(const nlohmann::json& h, const char* key) {
  if (!h.contains(key) || !h[key].is_string())
    throw FormatError(std::string("header field '") + key + "' missing or not a string");
  return h[key].get<std::string>();
}

}  // namespace detail

/// Serializes a validated dump to ATD1 bytes.
inline std::vector<unsigned char> encode_dump(const AttentionDump& dump) {
  validate(dump);
  nlohmann::json header = {
      {"model_id", dump.model_id}, {"sample_id", dump.sample_id}, {"layer", dump.layer},
      {"head", dump.head},         {"n_tokens", dump.n_tokens},   {"d_q", dump.d_q},
      {"d_v", dump.d_v},
  };
  header["arrays"] = dump.H ? nlohmann::json{"Q", "K", "V", "H"} : nlohmann::json{"Q", "K", "V"};
  const std::string text = header.dump();

  std::vector<unsigned char> out(detail::kMagic.begin(), detail::kMagic.end());
  detail::append_u32_le(out, static_cast<std::uint32_t>(text.size()));
  out.insert(out.end(), text.begin(), text.end());
  detail::append_matrix(out, dump.Q);
  detail::append_matrix(out, dump.K);
  detail::append_matrix(out, dump.V);
  if (dump.H) detail::append_matrix(out, *dump.H);
  return out;
}

/// Parses ATD1 bytes. The payload length is checked against the header before
/// any matrix storage is allocated.
inline AttentionDump decode_dump(std::span<const unsigned char> bytes) {
  if (bytes.size() < 4 || !std::equal(detail::kMagic.begin(), detail::kMagic.begin() + 3, bytes.begin()))
    throw FormatError("not an ATD container");
  if (bytes[3] != static_cast<unsigned char>(detail::kMagic[3]))
    throw FormatError("ATD version mismatch: expected 1, found byte " +
                      std::to_string(static_cast<unsigned>(bytes[3])));
  if (bytes.size() < 8) throw FormatError("truncated ATD container: missing header length");
  const std::uint64_t header_len = detail::read_u32_le(bytes.data() + 4);
  if (8 + header_len > bytes.size()) throw FormatError("truncated ATD container: header");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + 8, bytes.begin() + 8 + static_cast<std::ptrdiff_t>(header_len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("ATD header is not valid JSON: ") + e.what());
  }
  if (!header.is_object()) throw FormatError("ATD header is not a JSON object");

  AttentionDump d;
  d.model_id = detail::header_string(header, "model_id");
  d.sample_id = detail::header_string(header, "sample_id");
  d.layer = detail::header_uint<int>(header, "layer");
  d.head = detail::header_uint<int>(header, "head");
  d.n_tokens = detail::header_uint<std::size_t>(header, "n_tokens");
  d.d_q = detail::header_uint<std::size_t>(header, "d_q");
  d.d_v = detail::header_uint<std::size_t>(header, "d_v");

  if (!header.contains("arrays") || !header["arrays"].is_array())
    throw FormatError("header field 'arrays' missing or not an array");
  std::vector<std::string> arrays;
  for (const auto& a : header["arrays"]) {
    if (!a.is_string()) throw FormatError("header 'arrays' entries must be strings");
    arrays.push_back(a.get<std::string>());
  }
  const bool has_h = arrays.size() == 4;
  const std::vector<std::string> expected =
      has_h ? std::vector<std::string>{"Q", "K", "V", "H"} : std::vector<std::string>{"Q", "K", "V"};
  if (arrays != expected) throw FormatError("header 'arrays' must be [Q,K,V] or [Q,K,V,H]");

  // Guard the size arithmetic itself against absurd header values.
  constexpr std::size_t kMaxDim = std::size_t{1} << 24;
  if (d.n_tokens > kMaxDim || d.d_q > kMaxDim || d.d_v > kMaxDim)
    throw FormatError("header dimension out of range");
  const std::size_t n = d.n_tokens;
  const std::size_t shapes[4][2] = {{n, d.d_q}, {n, d.d_q}, {n, d.d_v}, {n, d.d_v}};
  std::size_t payload_doubles = 0;
  for (std::size_t i = 0; i < arrays.size(); ++i) payload_doubles += shapes[i][0] * shapes[i][1];

  const std::size_t available = bytes.size() - 8 - header_len;
  if (available < payload_doubles * 8)
    throw FormatError("truncated ATD container: payload has " + std::to_string(available) +
                      " bytes, header declares " + std::to_string(payload_doubles * 8));
  if (available > payload_doubles * 8)
    throw FormatError("ATD container has " + std::to_string(available - payload_doubles * 8) +
                      " trailing bytes beyond the declared payload");

  const unsigned char* p = bytes.data() + 8 + header_len;
  auto read_matrix = [&](std::size_t rows, std::size_t cols) {
    Matrix m(rows, cols);
    for (double& x : m.data()) {
      x = detail::read_f64_le(p);
      p += 8;
    }
    return m;
  };
  d.Q = read_matrix(shapes[0][0], shapes[0][1]);
  d.K = read_matrix(shapes[1][0], shapes[1][1]);
  d.V = read_matrix(shapes[2][0], shapes[2][1]);
  if (has_h) d.H = read_matrix(shapes[3][0], shapes[3][1]);
  validate(d);
  return d;
}

inline void write_dump(const AttentionDump& dump, const std::filesystem::path& path) {
  const auto bytes = encode_dump(dump);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write failed: " + path.string());
}

inline AttentionDump read_dump(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return decode_dump(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path.filename().string() + ": " + e.what());
  }
}

/// Deterministic file name for a dump inside a DumpSet directory.
inline std::string dump_filename(const AttentionDump& d) {
  auto clean = [](std::string s) {
    for (char& c : s)
      if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' || c == '.')) c = '_';
    return s;
  };
  return clean(d.model_id) + "__" + clean(d.sample_id) + "__L" + std::to_string(d.layer) + "_H" +
         std::to_string(d.head) + ".atd";
}

inline void sort_dumps(std::vector<AttentionDump>& dumps) {
  std::stable_sort(dumps.begin(), dumps.end(),
                   [](const AttentionDump& a, const AttentionDump& b) { return dump_key(a) < dump_key(b); });
}

/// Writes every dump plus manifest.json into `dir` (created if missing).
inline void write_dumpset(const DumpSet& set, const std::filesystem::path& dir) {
  validate(set);
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["format"] = "ATD1";
  manifest["models"] = nlohmann::json::object();
  for (const auto& [model, count] : set.manifest)
    manifest["models"][model] = {{"num_layers", count.num_layers}, {"num_heads", count.num_heads}};
  manifest["files"] = nlohmann::json::array();
  for (const auto& d : set.dumps) {
    const auto name = dump_filename(d);
    write_dump(d, dir / name);
    manifest["files"].push_back(name);
  }
  std::ofstream out(dir / "manifest.json", std::ios::trunc);
  if (!out) throw Error("cannot write manifest in " + dir.string());
  out << manifest.dump(2) << "\n";
}

/// Reads a DumpSet directory. Files come from manifest.json when it lists them,
/// otherwise every *.atd in the directory. Dumps are returned key-sorted.
inline DumpSet read_dumpset(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw Error("not a directory: " + dir.string());
  DumpSet set;
  std::vector<std::filesystem::path> files;
  const auto manifest_path = dir / "manifest.json";
  if (std::filesystem::exists(manifest_path)) {
    std::ifstream in(manifest_path);
    nlohmann::json manifest;
    try {
      manifest = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("manifest.json: " + std::string(e.what()));
    }
    if (manifest.contains("models") && manifest["models"].is_object())
      for (const auto& [model, entry] : manifest["models"].items())
        set.manifest[model] = {entry.value("num_layers", 0), entry.value("num_heads", 0)};
    if (manifest.contains("files") && manifest["files"].is_array())
      for (const auto& f : manifest["files"]) files.push_back(dir / f.get<std::string>());
  }
  if (files.empty()) {
    for (const auto& entry : std::filesystem::directory_iterator(dir))
      if (entry.is_regular_file() && entry.path().extension() == ".atd") files.push_back(entry.path());
    std::sort(files.begin(), files.end());
  }
  for (const auto& f : files) set.dumps.push_back(read_dump(f));
  sort_dumps(set.dumps);
  validate(set);
  return set;
}

}  // namespace kpca_audit

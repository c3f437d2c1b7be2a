#include "sarnet/io.hpp"

#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

#include "json.hpp"

namespace sarnet {

namespace {

constexpr std::size_t kHeader = 8;

std::size_t dtype_size(NtfDtype d) { return d == NtfDtype::f32 ? 4 : 8; }

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint64_t get_u64(const std::uint8_t* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

template <typename T>
struct Bits;
template <>
struct Bits<float> {
  using U = std::uint32_t;
  static constexpr NtfDtype dtype = NtfDtype::f32;
};
template <>
struct Bits<double> {
  using U = std::uint64_t;
  static constexpr NtfDtype dtype = NtfDtype::f64;
};

template <typename T>
void put_values(std::vector<std::uint8_t>& out, std::span<const T> values) {
  using U = typename Bits<T>::U;
  out.reserve(out.size() + values.size() * sizeof(U));
  for (T v : values) {
    U u = std::bit_cast<U>(v);
    for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<std::uint8_t>(u >> (8 * i)));
  }
}

template <typename T>
T get_value(const std::uint8_t* p) {
  using U = typename Bits<T>::U;
  U u = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) u |= static_cast<U>(p[i]) << (8 * i);
  return std::bit_cast<T>(u);
}

std::string text_of(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << text;
  if (!out) throw std::runtime_error("write failed for " + path);
}

double number_at(const nlohmann::json& row, std::size_t k, long line, std::size_t b) {
  if (!row[k].is_number())
    throw FormatError("line " + std::to_string(line) + " box " + std::to_string(b) + ": field " + std::to_string(k) +
                          " is not a number",
                      line);
  return row[k].get<double>();
}

int class_at(const nlohmann::json& row, std::size_t k, long line, std::size_t b) {
  if (!row[k].is_number_integer())
    throw FormatError("line " + std::to_string(line) + " box " + std::to_string(b) + ": class id is not an integer",
                      line);
  return row[k].get<int>();
}

// Parses each nonblank line as a JSON object with "image" and "boxes" arrays of `width` entries.
template <typename Fn>
void for_each_record(const std::string& text, std::size_t width, Fn&& fn) {
  std::istringstream in(text);
  std::string raw;
  long line = 0;
  while (std::getline(in, raw)) {
    ++line;
    if (raw.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(raw);
    } catch (const nlohmann::json::parse_error& e) {
      throw FormatError("line " + std::to_string(line) + ": " + e.what(), line);
    }
    if (!j.is_object() || !j.contains("image") || !j["image"].is_string() || !j.contains("boxes") ||
        !j["boxes"].is_array())
      throw FormatError("line " + std::to_string(line) + ": expected {\"image\": str, \"boxes\": [...]}", line);
    const auto& boxes = j["boxes"];
    for (std::size_t b = 0; b < boxes.size(); ++b)
      if (!boxes[b].is_array() || boxes[b].size() != width)
        throw FormatError("line " + std::to_string(line) + " box " + std::to_string(b) + ": expected " +
                              std::to_string(width) + " fields",
                          line);
    fn(j, line);
  }
}

nlohmann::json box_row(const Box& b) { return nlohmann::json::array({b.x1, b.y1, b.x2, b.y2}); }

}  // namespace

std::uint64_t NtfArray::numel() const {
  std::uint64_t n = 1;
  for (auto d : dims) n *= d;
  return n;
}

std::vector<std::uint8_t> ntf_encode(const NtfArray& a) {
  if (a.dims.empty() || a.dims.size() > 4) throw ContractError("ntf rank must be in [1,4], got " + std::to_string(a.dims.size()));
  if (a.payload.size() != a.numel() * dtype_size(a.dtype))
    throw ContractError("ntf payload length " + std::to_string(a.payload.size()) + " does not match dims");
  std::vector<std::uint8_t> out{'N', 'T', 'E', 'N', 1, static_cast<std::uint8_t>(a.dtype),
                                static_cast<std::uint8_t>(a.dims.size()), 0};
  for (auto d : a.dims) put_u64(out, d);
  out.insert(out.end(), a.payload.begin(), a.payload.end());
  return out;
}

NtfArray ntf_decode(const std::vector<std::uint8_t>& bytes) {
  const long long size = static_cast<long long>(bytes.size());
  if (size < static_cast<long long>(kHeader)) throw FormatError("ntf header truncated", size);
  if (std::memcmp(bytes.data(), "NTEN", 4) != 0) throw FormatError("ntf bad magic", 0);
  if (bytes[4] != 1) throw FormatError("ntf unsupported version " + std::to_string(bytes[4]), 4);
  if (bytes[5] != 1 && bytes[5] != 2) throw FormatError("ntf unknown dtype " + std::to_string(bytes[5]), 5);
  const std::size_t rank = bytes[6];
  if (rank < 1 || rank > 4) throw FormatError("ntf rank " + std::to_string(rank) + " outside [1,4]", 6);
  if (bytes[7] != 0) throw FormatError("ntf reserved byte is nonzero", 7);

  NtfArray a;
  a.dtype = static_cast<NtfDtype>(bytes[5]);
  const std::size_t dims_end = kHeader + 8 * rank;
  if (bytes.size() < dims_end) throw FormatError("ntf dims truncated: need " + std::to_string(dims_end) + " bytes", size);
  for (std::size_t i = 0; i < rank; ++i) {
    a.dims.push_back(get_u64(bytes.data() + kHeader + 8 * i));
    if (a.dims.back() == 0) throw FormatError("ntf zero dim", static_cast<long long>(kHeader + 8 * i));
  }
  const std::uint64_t want = dims_end + a.numel() * dtype_size(a.dtype);
  if (bytes.size() < want)
    throw FormatError("ntf payload truncated: expected " + std::to_string(want) + " bytes, have " + std::to_string(size),
                      size);
  if (bytes.size() > want)
    throw FormatError("ntf trailing bytes: expected " + std::to_string(want) + " bytes, have " + std::to_string(size),
                      static_cast<long long>(want));
  a.payload.assign(bytes.begin() + static_cast<std::ptrdiff_t>(dims_end), bytes.end());
  return a;
}

std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file_bytes(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed for " + path);
}

template <typename T>
void ntf_write(const Tensor<T>& t, const std::string& path, int rank) {
  if (rank < 1 || rank > 4) throw ContractError("ntf rank must be in [1,4], got " + std::to_string(rank));
  NtfArray a;
  a.dtype = Bits<T>::dtype;
  for (int axis = 0; axis < 4 - rank; ++axis)
    if (t.dim(axis) != 1)
      throw ShapeError("cannot write " + t.shape().str() + " at rank " + std::to_string(rank) + ": axis " +
                       axis_name(axis) + " is not 1");
  for (int axis = 4 - rank; axis < 4; ++axis) a.dims.push_back(static_cast<std::uint64_t>(t.dim(axis)));
  put_values<T>(a.payload, t.data());
  write_file_bytes(path, ntf_encode(a));
}

template <typename T>
Tensor<T> ntf_read(const std::string& path) {
  NtfArray a = ntf_decode(read_file_bytes(path));
  Shape s;
  for (std::size_t i = 0; i < a.dims.size(); ++i) s.dims[4 - a.dims.size() + i] = static_cast<Index>(a.dims[i]);
  std::vector<T> v(a.numel());
  const std::uint8_t* p = a.payload.data();
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (a.dtype == NtfDtype::f32)
      v[i] = static_cast<T>(get_value<float>(p + 4 * i));
    else
      v[i] = static_cast<T>(get_value<double>(p + 8 * i));
  }
  return Tensor<T>(s, std::move(v));
}

template void ntf_write<float>(const Tensor<float>&, const std::string&, int);
template void ntf_write<double>(const Tensor<double>&, const std::string&, int);
template Tensor<float> ntf_read<float>(const std::string&);
template Tensor<double> ntf_read<double>(const std::string&);

AnnotationLoad parse_annotations(const std::string& text, int num_classes) {
  AnnotationLoad out;
  for_each_record(text, 5, [&](const nlohmann::json& j, long line) {
    AnnotationRecord r;
    r.image = j["image"].get<std::string>();
    for (const char* key : {"width", "height"})
      if (j.contains(key) && !(j[key].is_number() && j[key].get<double>() > 0))
        throw FormatError("line " + std::to_string(line) + ": " + key + " must be a positive number", line);
    r.width = j.value("width", 0.0);
    r.height = j.value("height", 0.0);
    const auto& boxes = j["boxes"];
    for (std::size_t b = 0; b < boxes.size(); ++b) {
      const auto& row = boxes[b];
      GtBox g{{number_at(row, 0, line, b), number_at(row, 1, line, b), number_at(row, 2, line, b),
               number_at(row, 3, line, b)},
              class_at(row, 4, line, b)};
      const std::string where = "line " + std::to_string(line) + " box " + std::to_string(b);
      if (!(g.box.x2 > g.box.x1)) throw FormatError(where + ": x2 <= x1", line);
      if (!(g.box.y2 > g.box.y1)) throw FormatError(where + ": y2 <= y1", line);
      if (g.cls < 0 || (num_classes >= 0 && g.cls >= num_classes))
        throw FormatError(where + ": class " + std::to_string(g.cls) + " out of range", line);
      if (r.width > 0 && r.height > 0) {
        Box c{std::clamp(g.box.x1, 0.0, r.width), std::clamp(g.box.y1, 0.0, r.height), std::clamp(g.box.x2, 0.0, r.width),
              std::clamp(g.box.y2, 0.0, r.height)};
        if (!(c == g.box)) {
          if (c.area() <= 0) throw FormatError(where + ": box lies outside the image", line);
          g.box = c;
          ++out.clamped;
        }
      }
      r.boxes.push_back(g);
    }
    out.records.push_back(std::move(r));
  });
  return out;
}

AnnotationLoad load_annotations(const std::string& path, int num_classes) {
  return parse_annotations(text_of(path), num_classes);
}

std::string format_annotations(const std::vector<AnnotationRecord>& records) {
  std::string out;
  for (const auto& r : records) {
    nlohmann::json j{{"image", r.image}, {"boxes", nlohmann::json::array()}};
    if (r.width > 0) j["width"] = r.width;
    if (r.height > 0) j["height"] = r.height;
    for (const auto& g : r.boxes) {
      auto row = box_row(g.box);
      row.push_back(g.cls);
      j["boxes"].push_back(row);
    }
    out += j.dump() + "\n";
  }
  return out;
}

void save_annotations(const std::string& path, const std::vector<AnnotationRecord>& records) {
  write_text(path, format_annotations(records));
}

std::vector<ImageDetections> parse_detections(const std::string& text) {
  std::vector<ImageDetections> out;
  for_each_record(text, 6, [&](const nlohmann::json& j, long line) {
    ImageDetections d{j["image"].get<std::string>(), {}};
    const auto& boxes = j["boxes"];
    for (std::size_t b = 0; b < boxes.size(); ++b) {
      const auto& row = boxes[b];
      d.boxes.push_back({{number_at(row, 0, line, b), number_at(row, 1, line, b), number_at(row, 2, line, b),
                          number_at(row, 3, line, b)},
                         number_at(row, 5, line, b),
                         class_at(row, 4, line, b)});
    }
    out.push_back(std::move(d));
  });
  return out;
}

std::vector<ImageDetections> load_detections(const std::string& path) { return parse_detections(text_of(path)); }

void save_detections(const std::string& path, const std::vector<ImageDetections>& dets) {
  std::string out;
  for (const auto& d : dets) {
    nlohmann::json j{{"image", d.image}, {"boxes", nlohmann::json::array()}};
    for (const auto& b : d.boxes) {
      auto row = box_row(b.box);
      row.push_back(b.cls);
      row.push_back(b.score);
      j["boxes"].push_back(row);
    }
    out += j.dump() + "\n";
  }
  write_text(path, out);
}

std::vector<ImageAnnotations> to_image_annotations(const std::vector<AnnotationRecord>& records) {
  std::vector<ImageAnnotations> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back({r.image, r.boxes});
  return out;
}

Tensor<float> read_pgm(const std::string& path) {
  const auto bytes = read_file_bytes(path);
  std::size_t pos = 0;
  // Header tokens separated by whitespace, with '#' comments.
  auto token = [&]() -> std::string {
    for (;;) {
      while (pos < bytes.size() && std::isspace(bytes[pos])) ++pos;
      if (pos < bytes.size() && bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
        continue;
      }
      break;
    }
    std::string t;
    while (pos < bytes.size() && !std::isspace(bytes[pos])) t.push_back(static_cast<char>(bytes[pos++]));
    if (t.empty()) throw FormatError("pgm header truncated", static_cast<long long>(pos));
    return t;
  };
  auto integer = [&](const char* what) {
    const long long at = static_cast<long long>(pos);
    const std::string t = token();
    if (t.find_first_not_of("0123456789") != std::string::npos || t.size() > 9)
      throw FormatError(std::string("pgm bad ") + what + " '" + t + "'", at);
    return std::stol(t);
  };
  if (token() != "P5") throw FormatError("pgm magic is not P5", 0);
  const long w = integer("width"), h = integer("height"), maxval = integer("maxval");
  if (w < 1 || h < 1) throw FormatError("pgm empty image", static_cast<long long>(pos));
  if (maxval < 1 || maxval > 255) throw FormatError("pgm maxval must be in [1,255]", static_cast<long long>(pos));
  ++pos;  // single whitespace byte before the raster
  const std::size_t want = pos + static_cast<std::size_t>(w * h);
  if (bytes.size() < want)
    throw FormatError("pgm raster truncated: expected " + std::to_string(want) + " bytes", static_cast<long long>(bytes.size()));
  std::vector<float> v(static_cast<std::size_t>(w * h));
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<float>(bytes[pos + i]) / static_cast<float>(maxval);
  return Tensor<float>(Shape(1, 1, h, w), std::move(v));
}

void write_pgm(const Tensor<float>& image, const std::string& path) {
  if (image.dim(0) != 1 || image.dim(1) != 1) throw ShapeError("pgm needs a (1,1,H,W) image, got " + image.shape().str());
  const std::string header = "P5\n" + std::to_string(image.dim(3)) + " " + std::to_string(image.dim(2)) + "\n255\n";
  std::vector<std::uint8_t> bytes(header.begin(), header.end());
  for (float v : image.data())
    bytes.push_back(static_cast<std::uint8_t>(std::lround(255.0 * std::clamp(static_cast<double>(v), 0.0, 1.0))));
  write_file_bytes(path, bytes);
}

Tensor<float> load_image(const std::string& path) {
  auto ends = [&](const char* ext) {
    const std::string e(ext);
    return path.size() >= e.size() && path.compare(path.size() - e.size(), e.size(), e) == 0;
  };
  Tensor<float> img;
  if (ends(".ntf"))
    img = ntf_read<float>(path);
  else if (ends(".pgm"))
    img = read_pgm(path);
  else
    throw ConfigError("unsupported image extension: " + path);
  if (img.dim(0) != 1 || img.dim(1) != 1) throw ShapeError("image must be single-channel, got " + img.shape().str());
  return img;
}

}  // namespace sarnet

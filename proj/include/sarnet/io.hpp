#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sarnet/boxes.hpp"
#include "sarnet/metrics.hpp"
#include "sarnet/tensor.hpp"

namespace sarnet {

// NTF: "NTEN" | u8 version=1 | u8 dtype (1=f32, 2=f64) | u8 rank | u8 0 |
// rank x u64 LE dims | row-major LE payload.
// File length is exactly 8 + 8*rank + numel*sizeof(dtype).

enum class NtfDtype : std::uint8_t { f32 = 1, f64 = 2 };

/// Decoded NTF contents before conversion to a rank-4 tensor.
struct NtfArray {
  NtfDtype dtype = NtfDtype::f32;
  std::vector<std::uint64_t> dims;
  std::vector<std::uint8_t> payload;  // little-endian bytes as stored

  std::uint64_t numel() const;
};

std::vector<std::uint8_t> ntf_encode(const NtfArray& a);
/// Throws FormatError with the byte offset where validation failed.
NtfArray ntf_decode(const std::vector<std::uint8_t>& bytes);

/// Writes the tensor's trailing `rank` dims; the leading ones must be 1.
template <typename T>
void ntf_write(const Tensor<T>& t, const std::string& path, int rank = 4);

/// Reads any rank, left-padding dims with 1. A stored dtype different from T
/// is converted by value.
template <typename T>
Tensor<T> ntf_read(const std::string& path);

std::vector<std::uint8_t> read_file_bytes(const std::string& path);
void write_file_bytes(const std::string& path, const std::vector<std::uint8_t>& bytes);

// Annotations and detections (JSONL, one image per line).

struct AnnotationRecord {
  std::string image;
  std::vector<GtBox> boxes;
  /// Image bounds used for clamping; 0 when unknown.
  double width = 0, height = 0;
};

struct AnnotationLoad {
  std::vector<AnnotationRecord> records;
  long clamped = 0;  // boxes pulled back inside the image bounds
};

/// Lines: {"image": str, "boxes": [[x1,y1,x2,y2,cls], ...], "width"?: w, "height"?: h}.
/// Blank lines are skipped. FormatError carries the 1-based line number.
/// num_classes < 0 disables the class-range check.
AnnotationLoad parse_annotations(const std::string& text, int num_classes = -1);
AnnotationLoad load_annotations(const std::string& path, int num_classes = -1);
std::string format_annotations(const std::vector<AnnotationRecord>& records);
void save_annotations(const std::string& path, const std::vector<AnnotationRecord>& records);

/// Lines: {"image": str, "boxes": [[x1,y1,x2,y2,cls,score], ...]}.
std::vector<ImageDetections> parse_detections(const std::string& text);
std::vector<ImageDetections> load_detections(const std::string& path);
void save_detections(const std::string& path, const std::vector<ImageDetections>& dets);

std::vector<ImageAnnotations> to_image_annotations(const std::vector<AnnotationRecord>& records);

/// Binary PGM (P5). Values scaled by 1/maxval into (1,1,H,W).
Tensor<float> read_pgm(const std::string& path);
/// Values clamped to [0,1] and quantized to maxval 255.
void write_pgm(const Tensor<float>& image, const std::string& path);

/// .ntf or .pgm by extension, as a (1,1,H,W) image.
Tensor<float> load_image(const std::string& path);

}  // namespace sarnet

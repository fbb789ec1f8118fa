#pragma once

// File formats: SMFD feature streams, SMCK checkpoints (named f32 tensors
// plus meta.* scalars for the model configuration), CSV traces, and flat
// key = value config files. Binary formats are little-endian.

#include "smamba/common.hpp"
#include "smamba/model.hpp"

#include <cstdio>
#include <map>
#include <string>
#include <vector>

namespace smamba {

struct IoError : std::runtime_error {
  explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

/// SMFD: magic "SMFD", version u32, T u32, D u32, C u32, flags u32
/// (bit 0: labels+mask present), then T*D f32 row-major features,
/// then T u16 labels and T u8 mask when flagged.
struct FeatureFile {
  Mat<float> features;           // T x D
  std::vector<std::uint16_t> labels;
  std::vector<std::uint8_t> mask;
  std::uint32_t n_classes = 0;
  bool has_labels = false;
};

void write_smfd(const std::string& path, const FeatureFile& f);
FeatureFile read_smfd(const std::string& path);

/// SMCK: magic "SMCK", version u32, then named tensors until EOF:
/// name length u16, UTF-8 name, rank u8, dims u32 each, f32 data row-major.
/// Model configuration is stored as meta.* rank-0 tensors.
void save_checkpoint(const std::string& path, const Weights<float>& w);
Weights<float> load_checkpoint(const std::string& path);

std::map<std::string, std::string> read_kv_config(const std::string& path);

/// '.' decimal, ',' separator, LF line endings, mandatory header.
class CsvWriter {
 public:
  CsvWriter(const std::string& path, const std::vector<std::string>& header);
  ~CsvWriter();
  CsvWriter(const CsvWriter&) = delete;
  CsvWriter& operator=(const CsvWriter&) = delete;

  void field(double v);
  void field(long long v);
  void field(const std::string& v);
  void end_row();

 private:
  std::FILE* f_ = nullptr;
  std::string path_;
  bool row_open_ = false;
  void sep();
};

}  // namespace smamba

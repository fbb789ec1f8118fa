#include "smamba/io.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <sstream>

namespace smamba {

namespace {

// On-disk formats are little-endian; raw writes assume a little-endian host.
void put_u32(std::ostream& os, std::uint32_t v) { os.write(reinterpret_cast<char*>(&v), 4); }
void put_u16(std::ostream& os, std::uint16_t v) { os.write(reinterpret_cast<char*>(&v), 2); }
void put_u8(std::ostream& os, std::uint8_t v) { os.write(reinterpret_cast<char*>(&v), 1); }
void put_f32(std::ostream& os, float v) { os.write(reinterpret_cast<char*>(&v), 4); }

std::uint32_t get_u32(std::istream& is) {
  std::uint32_t v;
  is.read(reinterpret_cast<char*>(&v), 4);
  return v;
}
std::uint16_t get_u16(std::istream& is) {
  std::uint16_t v;
  is.read(reinterpret_cast<char*>(&v), 2);
  return v;
}
std::uint8_t get_u8(std::istream& is) {
  std::uint8_t v;
  is.read(reinterpret_cast<char*>(&v), 1);
  return v;
}
float get_f32(std::istream& is) {
  float v;
  is.read(reinterpret_cast<char*>(&v), 4);
  return v;
}

void check_stream(const std::ios& s, const std::string& path, const char* what) {
  if (!s.good()) throw IoError(std::string(what) + ": " + path);
}

constexpr std::uint32_t kSmfdVersion = 1;
constexpr std::uint32_t kSmckVersion = 1;

}  // namespace

void write_smfd(const std::string& path, const FeatureFile& f) {
  std::ofstream os(path, std::ios::binary);
  check_stream(os, path, "cannot open for writing");
  const auto T = std::uint32_t(f.features.rows()), D = std::uint32_t(f.features.cols());
  if (f.has_labels)
    require(f.labels.size() == T && f.mask.size() == T, "write_smfd: label/mask length != T");
  os.write("SMFD", 4);
  put_u32(os, kSmfdVersion);
  put_u32(os, T);
  put_u32(os, D);
  put_u32(os, f.n_classes);
  put_u32(os, f.has_labels ? 1u : 0u);
  for (std::uint32_t t = 0; t < T; ++t)
    for (std::uint32_t d = 0; d < D; ++d) put_f32(os, f.features(t, d));
  if (f.has_labels) {
    for (auto v : f.labels) put_u16(os, v);
    for (auto v : f.mask) put_u8(os, v);
  }
  check_stream(os, path, "write failed");
}

FeatureFile read_smfd(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  check_stream(is, path, "cannot open");
  char magic[4];
  is.read(magic, 4);
  if (!is.good() || std::memcmp(magic, "SMFD", 4) != 0)
    throw IoError("not an SMFD file: " + path);
  const auto version = get_u32(is);
  if (version != kSmfdVersion) throw IoError("unsupported SMFD version in " + path);
  const auto T = get_u32(is), D = get_u32(is);
  FeatureFile f;
  f.n_classes = get_u32(is);
  f.has_labels = (get_u32(is) & 1u) != 0;
  f.features.resize(T, D);
  for (std::uint32_t t = 0; t < T; ++t)
    for (std::uint32_t d = 0; d < D; ++d) f.features(t, d) = get_f32(is);
  if (f.has_labels) {
    f.labels.resize(T);
    f.mask.resize(T);
    for (auto& v : f.labels) v = get_u16(is);
    for (auto& v : f.mask) v = get_u8(is);
  }
  check_stream(is, path, "truncated SMFD file");
  return f;
}

namespace {

void put_tensor(std::ostream& os, const std::string& name, const Mat<float>& m) {
  put_u16(os, std::uint16_t(name.size()));
  os.write(name.data(), std::streamsize(name.size()));
  const bool scalar = m.rows() == 1 && m.cols() == 1;
  const bool vector = m.rows() == 1 && m.cols() > 1;
  put_u8(os, scalar ? 0 : (vector ? 1 : 2));
  if (vector) put_u32(os, std::uint32_t(m.cols()));
  if (!scalar && !vector) {
    put_u32(os, std::uint32_t(m.rows()));
    put_u32(os, std::uint32_t(m.cols()));
  }
  for (Index i = 0; i < m.rows(); ++i)
    for (Index j = 0; j < m.cols(); ++j) put_f32(os, m(i, j));
}

const char* kMetaKeys[] = {"meta.d_feat",   "meta.d_model",  "meta.d_inner",
                           "meta.n_heads",  "meta.d_state",  "meta.d_conv",
                           "meta.chunk",    "meta.rank",     "meta.n_blocks",
                           "meta.n_classes", "meta.clip_len", "meta.ffn_mult",
                           "meta.use_dskip", "meta.use_intensity", "meta.use_regram"};

std::vector<int*> config_fields(ModelConfig& c, std::vector<int>& boolbuf) {
  boolbuf = {c.use_dskip ? 1 : 0, c.use_intensity ? 1 : 0, c.use_regram ? 1 : 0};
  return {&c.d_feat,   &c.d_model,  &c.d_inner, &c.n_heads,   &c.d_state,
          &c.d_conv,   &c.chunk,    &c.rank,    &c.n_blocks,  &c.n_classes,
          &c.clip_len, &c.ffn_mult, &boolbuf[0], &boolbuf[1], &boolbuf[2]};
}

}  // namespace

void save_checkpoint(const std::string& path, const Weights<float>& w) {
  std::ofstream os(path, std::ios::binary);
  check_stream(os, path, "cannot open for writing");
  os.write("SMCK", 4);
  put_u32(os, kSmckVersion);

  ModelConfig cfg = w.cfg;
  std::vector<int> boolbuf;
  auto fields = config_fields(cfg, boolbuf);
  for (size_t i = 0; i < fields.size(); ++i)
    put_tensor(os, kMetaKeys[i], Mat<float>::Constant(1, 1, float(*fields[i])));
  for (const auto& [name, m] : w.tensors) put_tensor(os, name, m);
  check_stream(os, path, "write failed");
}

Weights<float> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  check_stream(is, path, "cannot open");
  char magic[4];
  is.read(magic, 4);
  if (!is.good() || std::memcmp(magic, "SMCK", 4) != 0)
    throw IoError("not an SMCK checkpoint: " + path);
  if (get_u32(is) != kSmckVersion) throw IoError("unsupported SMCK version in " + path);

  std::map<std::string, Mat<float>> tensors;
  while (true) {
    std::uint16_t nlen;
    is.read(reinterpret_cast<char*>(&nlen), 2);
    if (is.eof()) break;
    check_stream(is, path, "truncated checkpoint");
    std::string name(nlen, '\0');
    is.read(name.data(), nlen);
    const auto rank = get_u8(is);
    if (rank > 2) throw IoError("unsupported tensor rank in " + path);
    Index rows = 1, cols = 1;
    if (rank == 1) cols = get_u32(is);
    if (rank == 2) {
      rows = get_u32(is);
      cols = get_u32(is);
    }
    Mat<float> m(rows, cols);
    for (Index i = 0; i < rows; ++i)
      for (Index j = 0; j < cols; ++j) m(i, j) = get_f32(is);
    check_stream(is, path, "truncated checkpoint");
    tensors.emplace(std::move(name), std::move(m));
  }

  Weights<float> w;
  std::vector<int> boolbuf;
  auto fields = config_fields(w.cfg, boolbuf);
  for (size_t i = 0; i < fields.size(); ++i) {
    auto it = tensors.find(kMetaKeys[i]);
    if (it == tensors.end()) throw IoError(std::string("checkpoint missing ") + kMetaKeys[i]);
    *fields[i] = int(it->second(0, 0));
    tensors.erase(it);
  }
  w.cfg.use_dskip = boolbuf[0] != 0;
  w.cfg.use_intensity = boolbuf[1] != 0;
  w.cfg.use_regram = boolbuf[2] != 0;
  w.tensors = std::move(tensors);
  w.cfg.validate();
  w.validate_shapes();
  return w;
}

std::map<std::string, std::string> read_kv_config(const std::string& path) {
  std::ifstream is(path);
  if (!is.good()) throw IoError("cannot open config: " + path);
  std::map<std::string, std::string> kv;
  std::string line;
  auto trim = [](std::string s) {
    const auto a = s.find_first_not_of(" \t\r");
    const auto b = s.find_last_not_of(" \t\r");
    return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
  };
  while (std::getline(is, line)) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    const std::string key = trim(line.substr(0, eq));
    const std::string val = trim(line.substr(eq + 1));
    if (!key.empty()) kv[key] = val;
  }
  return kv;
}

CsvWriter::CsvWriter(const std::string& path, const std::vector<std::string>& header)
    : path_(path) {
  f_ = std::fopen(path.c_str(), "wb");
  if (!f_) throw IoError("cannot open for writing: " + path);
  for (size_t i = 0; i < header.size(); ++i)
    std::fprintf(f_, "%s%s", i ? "," : "", header[i].c_str());
  std::fputc('\n', f_);
}

CsvWriter::~CsvWriter() {
  if (f_) std::fclose(f_);
}

void CsvWriter::sep() {
  if (row_open_) std::fputc(',', f_);
  row_open_ = true;
}

void CsvWriter::field(double v) {
  sep();
  std::fprintf(f_, "%.9g", v);
}

void CsvWriter::field(long long v) {
  sep();
  std::fprintf(f_, "%lld", v);
}

void CsvWriter::field(const std::string& v) {
  sep();
  std::fputs(v.c_str(), f_);
}

void CsvWriter::end_row() {
  std::fputc('\n', f_);
  row_open_ = false;
  if (std::ferror(f_)) throw IoError("write failed: " + path_);
}

}  // namespace smamba

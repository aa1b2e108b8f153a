#include "spcl/dataio.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

#include "spcl/config.hpp"
#include "spcl/error.hpp"
#include "spcl/probes.hpp"
#include "spcl/rng.hpp"

namespace spcl {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Files

std::string read_file(const fs::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw FormatError("cannot open " + file.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) throw FormatError("read error on " + file.string());
  return ss.str();
}

void write_file(const fs::path& file, const std::string& bytes) {
  if (file.has_parent_path()) fs::create_directories(file.parent_path());
  fs::path tmp = file;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot open " + tmp.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw FormatError("write error on " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, file, ec);
  if (ec) throw FormatError("cannot rename " + tmp.string() + " to " + file.string() + ": " + ec.message());
}

// ---------------------------------------------------------------------------
// Manifest

void Manifest::validate() const {
  std::set<std::string> paths;
  for (const auto& r : records) {
    if (r.path.empty()) throw FormatError("manifest: empty path");
    if (!paths.insert(r.path).second) throw FormatError("manifest: duplicate path '" + r.path + "'");
    if (r.label < 0) throw FormatError("manifest: negative label for '" + r.path + "'");
  }
}

Manifest parse_manifest(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw FormatError("manifest: missing header");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "path\tlabel\tsplit") {
    throw FormatError("manifest: header must be 'path<TAB>label<TAB>split', got '" + line + "'");
  }
  Manifest m;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> cols;
    std::size_t start = 0;
    for (;;) {
      const auto tab = line.find('\t', start);
      cols.push_back(line.substr(start, tab == std::string::npos ? std::string::npos : tab - start));
      if (tab == std::string::npos) break;
      start = tab + 1;
    }
    if (cols.size() < 2 || cols.size() > 3) {
      throw FormatError("manifest line " + std::to_string(line_no) + ": expected 2 or 3 columns");
    }
    ManifestRecord r;
    r.path = cols[0];
    try {
      std::size_t used = 0;
      r.label = std::stoi(cols[1], &used);
      if (used != cols[1].size()) throw std::invalid_argument("trailing");
    } catch (const std::exception&) {
      throw FormatError("manifest line " + std::to_string(line_no) + ": bad label '" + cols[1] + "'");
    }
    if (cols.size() == 3) r.split = cols[2];
    m.records.push_back(std::move(r));
  }
  m.validate();
  return m;
}

Manifest read_manifest(const fs::path& file) { return parse_manifest(read_file(file)); }

void write_manifest(const fs::path& file, const Manifest& m) {
  m.validate();
  std::string out = "path\tlabel\tsplit\n";
  for (const auto& r : m.records) out += r.path + "\t" + std::to_string(r.label) + "\t" + r.split + "\n";
  write_file(file, out);
}

// ---------------------------------------------------------------------------
// PGM

namespace {

class PgmHeader {
 public:
  PgmHeader(const std::string& bytes, const std::string& source) : b_(bytes), src_(source) {}

  std::size_t number(const char* field) {
    skip_space_and_comments();
    std::size_t v = 0;
    std::size_t digits = 0;
    while (pos_ < b_.size() && std::isdigit(static_cast<unsigned char>(b_[pos_]))) {
      v = v * 10 + static_cast<std::size_t>(b_[pos_] - '0');
      if (v > (1u << 24)) throw FormatError(src_ + ": PGM " + field + " is too large");
      ++pos_;
      ++digits;
    }
    if (digits == 0) throw FormatError(src_ + ": PGM header field '" + field + "' missing or malformed");
    return v;
  }

  // Exactly one whitespace byte separates the header from the raster.
  std::size_t raster_offset(const char* field) {
    if (pos_ >= b_.size() || !std::isspace(static_cast<unsigned char>(b_[pos_]))) {
      throw FormatError(src_ + ": PGM header field '" + field + "' not followed by whitespace");
    }
    return pos_ + 1;
  }

 private:
  void skip_space_and_comments() {
    while (pos_ < b_.size()) {
      if (std::isspace(static_cast<unsigned char>(b_[pos_]))) {
        ++pos_;
      } else if (b_[pos_] == '#') {
        while (pos_ < b_.size() && b_[pos_] != '\n') ++pos_;
      } else {
        break;
      }
    }
  }

  const std::string& b_;
  const std::string& src_;

 public:
  std::size_t pos_ = 2;
};

}  // namespace

ImageGray parse_pgm(const std::string& bytes, const std::string& source) {
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '5') {
    const std::string magic = bytes.substr(0, std::min<std::size_t>(2, bytes.size()));
    throw FormatError(source + ": PGM magic must be 'P5' (binary graymap), got '" + magic + "'");
  }
  PgmHeader h(bytes, source);
  const std::size_t width = h.number("width");
  const std::size_t height = h.number("height");
  const std::size_t maxval = h.number("maxval");
  if (width == 0 || height == 0) throw FormatError(source + ": PGM width/height must be positive");
  if (maxval != 255) {
    throw FormatError(source + ": PGM maxval must be 255 (8-bit), got " + std::to_string(maxval));
  }
  const std::size_t offset = h.raster_offset("maxval");
  const std::size_t need = width * height;
  if (bytes.size() < offset + need) {
    throw FormatError(source + ": PGM payload truncated: expected " + std::to_string(need) +
                      " bytes, found " + std::to_string(bytes.size() - std::min(bytes.size(), offset)));
  }
  std::vector<float> px(need);
  for (std::size_t i = 0; i < need; ++i) {
    px[i] = static_cast<float>(static_cast<unsigned char>(bytes[offset + i])) / 255.0f;
  }
  return ImageGray(height, width, std::move(px));
}

ImageGray load_pgm(const fs::path& file) { return parse_pgm(read_file(file), file.string()); }

std::string encode_pgm(const ImageGray& img) {
  std::string out = "P5\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  out.reserve(out.size() + img.pixels.size());
  for (float v : img.pixels) {
    const float c = std::clamp(v, 0.0f, 1.0f);
    out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(c * 255.0f))));
  }
  return out;
}

void save_pgm(const fs::path& file, const ImageGray& img) { write_file(file, encode_pgm(img)); }

LabeledImages load_dataset(const fs::path& dir, const std::optional<std::string>& split) {
  const Manifest m = read_manifest(dir / kManifestName);
  LabeledImages out;
  for (const auto& r : m.records) {
    if (split && r.split != *split) continue;
    out.images.push_back(load_pgm(dir / r.path));
    out.labels.push_back(r.label);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic data

namespace {

// Compactly supported bump: (1 − (d/r)²)² inside radius r, 0 outside.
double bump(double d, double r) {
  if (d >= r) return 0.0;
  const double t = 1.0 - (d / r) * (d / r);
  return t * t;
}

double smoothstep_inside(double ellipse_dist) {
  // 1 well inside the ellipse, 0 outside, smooth across the boundary.
  return 1.0 / (1.0 + std::exp((ellipse_dist - 1.0) * 12.0));
}

}  // namespace

ImageGray synthetic_image(const SyntheticConfig& cfg, std::size_t index, int label) {
  if (cfg.classes < 2) throw ConfigError("synthetic data needs at least 2 classes");
  if (label < 0) throw ConfigError("synthetic label must be non-negative");
  const std::size_t H = cfg.height, W = cfg.width;
  CounterRng rng = make_stream(cfg.seed, Stream::synthetic, index);

  const int quadrant = label % 4;
  const double qx = (quadrant % 2 == 0) ? 0.25 : 0.75;
  const double qy = (quadrant / 2 == 0) ? 0.25 : 0.75;
  const double radius = 0.16 + 0.02 * static_cast<double>(label / 4);
  const double jitter = 0.06;
  const double cx = qx + jitter * (2.0 * rng.uniform() - 1.0);
  const double cy = qy + jitter * (2.0 * rng.uniform() - 1.0);

  std::vector<float> px(H * W);
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x) {
      const double u = (static_cast<double>(x) + 0.5) / static_cast<double>(W);
      const double v = (static_cast<double>(y) + 0.5) / static_cast<double>(H);
      double val = 0.30 + 0.06 * std::sin(std::numbers::pi * u) * std::cos(std::numbers::pi * (v - 0.2));
      for (double lx : {0.30, 0.70}) {
        const double du = (u - lx) / 0.14, dv = (v - 0.52) / 0.32;
        val += 0.22 * smoothstep_inside(std::sqrt(du * du + dv * dv));
      }
      const double d = std::hypot(u - cx, v - cy);
      val += 0.30 * bump(d, radius);
      if (cfg.noise_std > 0.0) val += cfg.noise_std * rng.normal();
      px[y * W + x] = static_cast<float>(std::clamp(val, 0.0, 1.0));
    }
  }
  return ImageGray(H, W, std::move(px));
}

Manifest gen_synthetic(const fs::path& dir, std::size_t count, const SyntheticConfig& cfg,
                       double test_fraction) {
  if (count == 0) throw ConfigError("gen_synthetic: count must be positive");
  if (!(test_fraction >= 0.0 && test_fraction < 1.0)) throw ConfigError("gen_synthetic: test fraction must lie in [0, 1)");
  const auto test_count = static_cast<std::size_t>(std::floor(static_cast<double>(count) * test_fraction));
  Manifest m;
  fs::create_directories(dir);
  for (std::size_t i = 0; i < count; ++i) {
    const int label = synthetic_label(cfg, i);
    char name[32];
    std::snprintf(name, sizeof name, "img_%06zu.pgm", i);
    save_pgm(dir / name, synthetic_image(cfg, i, label));
    m.records.push_back({name, label, i >= count - test_count ? "test" : "train"});
  }
  write_manifest(dir / kManifestName, m);
  return m;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kMagic[4] = {'S', 'P', 'C', 'L'};
constexpr char kEndMarker[4] = {'E', 'N', 'D', 'S'};

std::uint64_t fnv1a(const char* data, std::size_t n) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= static_cast<unsigned char>(data[i]);
    h *= 0x100000001b3ULL;
  }
  return h;
}

class Writer {
 public:
  void raw(const char* p, std::size_t n) { out_.append(p, n); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void str(const std::string& s) {
    u64(s.size());
    raw(s.data(), s.size());
  }
  void tensor(const std::string& name, const Tensor& t) {
    str(name);
    u32(static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) u64(d);
    const std::size_t start = out_.size() + 8;
    u64(t.size() * 4);
    for (float v : t.data()) u32(std::bit_cast<std::uint32_t>(v));
    u64(fnv1a(out_.data() + start, t.size() * 4));
  }
  std::string take() { return std::move(out_); }

 private:
  std::string out_;
};

class Reader {
 public:
  Reader(const std::string& bytes, const std::string& source) : b_(bytes), src_(source) {}

  void need(std::size_t n, const char* what) {
    if (pos_ + n > b_.size()) throw FormatError(src_ + ": checkpoint truncated while reading " + what);
  }
  const char* raw(std::size_t n, const char* what) {
    need(n, what);
    const char* p = b_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::uint32_t u32(const char* what) {
    const auto* p = reinterpret_cast<const unsigned char*>(raw(4, what));
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
    return v;
  }
  std::uint64_t u64(const char* what) {
    const auto* p = reinterpret_cast<const unsigned char*>(raw(8, what));
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    return v;
  }
  double f64(const char* what) { return std::bit_cast<double>(u64(what)); }
  std::string str(const char* what) {
    const std::uint64_t n = u64(what);
    if (n > b_.size() - pos_) throw FormatError(src_ + ": checkpoint truncated while reading " + what + " (string length exceeds remaining bytes)");
    return std::string(raw(n, what), n);
  }
  std::pair<std::string, Tensor> tensor() {
    std::string name = str("tensor name");
    const std::uint32_t rank = u32("tensor rank");
    if (rank < 1 || rank > 2) throw FormatError(src_ + ": tensor '" + name + "' has invalid rank " + std::to_string(rank));
    Shape shape;
    std::uint64_t count = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
      const std::uint64_t d = u64("tensor shape");
      if (d == 0 || d > (std::uint64_t{1} << 32)) throw FormatError(src_ + ": tensor '" + name + "' has invalid dimension");
      shape.push_back(static_cast<std::size_t>(d));
      count *= d;
    }
    const std::uint64_t bytes = u64("tensor payload length");
    if (bytes != count * 4) {
      throw FormatError(src_ + ": tensor table integrity error: '" + name + "' declares " +
                        std::to_string(bytes) + " payload bytes for shape " + to_string(shape));
    }
    need(bytes + 8, "tensor payload");
    const char* payload = raw(bytes, "tensor payload");
    const std::uint64_t checksum = u64("tensor checksum");
    if (checksum != fnv1a(payload, bytes)) {
      throw FormatError(src_ + ": tensor table integrity error: checksum mismatch for '" + name + "'");
    }
    std::vector<float> data(count);
    for (std::uint64_t i = 0; i < count; ++i) {
      std::uint32_t v = 0;
      for (int k = 0; k < 4; ++k) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(payload[4 * i + k])) << (8 * k);
      data[i] = std::bit_cast<float>(v);
    }
    return {std::move(name), Tensor(std::move(shape), std::move(data))};
  }
  bool at_end() const { return pos_ == b_.size(); }

 private:
  const std::string& b_;
  const std::string& src_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string encode_checkpoint(const TrainState& s) {
  Writer w;
  w.raw(kMagic, 4);
  w.u32(kCheckpointVersion);
  w.str(format_key_values(to_key_values(RunConfig{s.encoder, s.train})));
  w.f64(s.loss.kappa);
  w.f64(s.loss.theta_tau);
  w.f64(s.loss.tau_min);
  w.f64(s.loss.tau_max);
  w.u64(s.step);
  w.u64(s.opt.step);
  w.u32(static_cast<std::uint32_t>(s.streams.size()));
  for (const auto& st : s.streams) {
    w.str(st.name);
    w.u64(st.key);
    w.u64(st.counter);
  }
  const auto refs = s.params.refs();
  if (s.opt.m.size() != refs.size() + 1 || s.opt.v.size() != refs.size() + 1) {
    throw DimensionError("checkpoint: optimizer state does not match parameters");
  }
  w.u32(static_cast<std::uint32_t>(3 * refs.size() + 2));
  for (const auto& r : refs) w.tensor("param." + r.name, *r.tensor);
  for (std::size_t k = 0; k < refs.size(); ++k) {
    w.tensor("opt.m." + refs[k].name, s.opt.m[k]);
    w.tensor("opt.v." + refs[k].name, s.opt.v[k]);
  }
  w.tensor("opt.m.theta_tau", s.opt.m.back());
  w.tensor("opt.v.theta_tau", s.opt.v.back());
  w.raw(kEndMarker, 4);
  return w.take();
}

TrainState decode_checkpoint(const std::string& bytes, const std::string& source) {
  Reader r(bytes, source);
  const char* magic = r.raw(4, "magic");
  if (std::memcmp(magic, kMagic, 4) != 0) throw FormatError(source + ": not a checkpoint (magic mismatch)");
  const std::uint32_t version = r.u32("version");
  if (version != kCheckpointVersion) {
    throw FormatError(source + ": unsupported checkpoint version " + std::to_string(version) +
                      " (this build reads version " + std::to_string(kCheckpointVersion) + ")");
  }
  RunConfig cfg;
  try {
    apply_key_values(cfg, parse_key_values(r.str("config"), source));
    cfg.encoder.validate();
  } catch (const ConfigError& e) {
    throw FormatError(source + ": invalid embedded config: " + e.what());
  }
  TrainState s;
  s.encoder = cfg.encoder;
  s.train = cfg.train;
  s.loss.kappa = r.f64("kappa");
  s.loss.theta_tau = r.f64("theta_tau");
  s.loss.tau_min = r.f64("tau_min");
  s.loss.tau_max = r.f64("tau_max");
  s.step = r.u64("step");
  s.opt.step = r.u64("optimizer step");
  const std::uint32_t streams = r.u32("stream count");
  if (streams > 64) throw FormatError(source + ": implausible stream count");
  for (std::uint32_t i = 0; i < streams; ++i) {
    StreamState st;
    st.name = r.str("stream name");
    st.key = r.u64("stream key");
    st.counter = r.u64("stream counter");
    s.streams.push_back(std::move(st));
  }

  CounterRng scratch(0);
  s.params = init_params(s.encoder, scratch);
  auto refs = s.params.refs();
  const std::uint32_t count = r.u32("tensor count");
  if (count != 3 * refs.size() + 2) {
    throw FormatError(source + ": tensor table integrity error: expected " +
                      std::to_string(3 * refs.size() + 2) + " tensors, found " + std::to_string(count));
  }
  std::vector<std::pair<std::string, Tensor>> table;
  for (std::uint32_t i = 0; i < count; ++i) table.push_back(r.tensor());

  auto take = [&](std::size_t i, const std::string& expected_name, const Shape& shape) {
    if (table[i].first != expected_name) {
      throw FormatError(source + ": tensor table integrity error: expected '" + expected_name +
                        "', found '" + table[i].first + "'");
    }
    if (table[i].second.shape() != shape) {
      throw FormatError(source + ": tensor table integrity error: '" + expected_name + "' has shape " +
                        to_string(table[i].second.shape()) + ", config implies " + to_string(shape));
    }
    return std::move(table[i].second);
  };
  std::size_t at = 0;
  for (auto& ref : refs) {
    *ref.tensor = take(at, "param." + ref.name, ref.tensor->shape());
    ++at;
  }
  for (auto& ref : refs) {
    s.opt.m.push_back(take(at++, "opt.m." + ref.name, ref.tensor->shape()));
    s.opt.v.push_back(take(at++, "opt.v." + ref.name, ref.tensor->shape()));
  }
  s.opt.m.push_back(take(at++, "opt.m.theta_tau", Shape{1}));
  s.opt.v.push_back(take(at++, "opt.v.theta_tau", Shape{1}));

  const char* end = r.raw(4, "end marker");
  if (std::memcmp(end, kEndMarker, 4) != 0 || !r.at_end()) {
    throw FormatError(source + ": checkpoint has a bad end marker or trailing bytes");
  }
  return s;
}

void save_checkpoint(const fs::path& file, const TrainState& state) {
  write_file(file, encode_checkpoint(state));
}

TrainState load_checkpoint(const fs::path& file) {
  return decode_checkpoint(read_file(file), file.string());
}

// ---------------------------------------------------------------------------
// Embeddings

std::string format_embeddings(const LabeledEmbeddings& e) {
  e.validate();
  std::string out = "label";
  for (std::size_t d = 0; d < e.dim(); ++d) out += "\td" + std::to_string(d);
  out += "\n";
  char buf[32];
  for (std::size_t i = 0; i < e.size(); ++i) {
    out += std::to_string(e.labels[i]);
    for (float v : e.embeddings.row(i)) {
      std::snprintf(buf, sizeof buf, "\t%.9g", static_cast<double>(v));
      out += buf;
    }
    out += "\n";
  }
  return out;
}

void export_embeddings(const fs::path& file, const LabeledEmbeddings& e) {
  write_file(file, format_embeddings(e));
}

LabeledEmbeddings parse_embeddings(const std::string& text, const std::string& source) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line.rfind("label\td0", 0) != 0) {
    throw FormatError(source + ": embedding file must start with header 'label<TAB>d0...'");
  }
  const std::size_t D = static_cast<std::size_t>(std::count(line.begin(), line.end(), '\t'));
  std::vector<float> data;
  std::vector<int> labels;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(row, cell, '\t')) cells.push_back(cell);
    if (cells.size() != D + 1) {
      throw FormatError(source + ":" + std::to_string(line_no) + ": expected " + std::to_string(D + 1) + " columns");
    }
    try {
      labels.push_back(std::stoi(cells[0]));
      for (std::size_t d = 0; d < D; ++d) data.push_back(std::stof(cells[d + 1]));
    } catch (const std::exception&) {
      throw FormatError(source + ":" + std::to_string(line_no) + ": unparsable value");
    }
  }
  if (labels.empty()) throw FormatError(source + ": no embedding rows");
  LabeledEmbeddings e;
  e.embeddings = Tensor(Shape{labels.size(), D}, std::move(data));
  e.labels = std::move(labels);
  e.validate();
  return e;
}

LabeledEmbeddings import_embeddings(const fs::path& file) {
  return parse_embeddings(read_file(file), file.string());
}

}  // namespace spcl

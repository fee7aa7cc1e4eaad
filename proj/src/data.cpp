#include "dirnet/data.hpp"

#include <png.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>

namespace dirnet {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Decoding

namespace {

std::vector<std::uint8_t> read_bytes(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(is), {});
}

class PnmReader {
 public:
  explicit PnmReader(const std::vector<std::uint8_t>& b) : b_(b) {}

  std::size_t number() {
    skip_space();
    if (pos_ >= b_.size() || !std::isdigit(b_[pos_])) throw DataError("malformed PNM header");
    std::size_t v = 0;
    while (pos_ < b_.size() && std::isdigit(b_[pos_])) {
      v = v * 10 + (b_[pos_++] - '0');
      if (v > (1u << 24)) throw DataError("PNM value out of range");
    }
    return v;
  }
  void single_space() {
    if (pos_ >= b_.size() || !std::isspace(b_[pos_])) throw DataError("malformed PNM header");
    ++pos_;
  }
  std::size_t pos() const { return pos_; }
  void advance(std::size_t n) { pos_ += n; }

 private:
  void skip_space() {
    while (pos_ < b_.size()) {
      if (b_[pos_] == '#') {
        while (pos_ < b_.size() && b_[pos_] != '\n') ++pos_;
      } else if (std::isspace(b_[pos_])) {
        ++pos_;
      } else {
        break;
      }
    }
  }
  const std::vector<std::uint8_t>& b_;
  std::size_t pos_ = 2;
};

RgbImage decode_png(const std::vector<std::uint8_t>& bytes) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&image, bytes.data(), bytes.size())) {
    throw DataError(std::string("PNG decode failed: ") + image.message);
  }
  image.format = PNG_FORMAT_RGB;
  RgbImage out(image.width, image.height);
  if (!png_image_finish_read(&image, nullptr, out.rgb.data(), 0, nullptr)) {
    const std::string msg = image.message;
    png_image_free(&image);
    throw DataError("PNG decode failed: " + msg);
  }
  return out;
}

}  // namespace

RgbImage decode_pnm(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 2 || bytes[0] != 'P') throw DataError("not a PNM file");
  const char kind = static_cast<char>(bytes[1]);
  if (kind != '3' && kind != '5' && kind != '6') {
    throw DataError(std::string("unsupported PNM variant P") + kind);
  }
  PnmReader r(bytes);
  const std::size_t w = r.number();
  const std::size_t h = r.number();
  const std::size_t maxval = r.number();
  if (w == 0 || h == 0) throw DataError("PNM image has zero extent");
  if (maxval == 0 || maxval > 65535) throw DataError("PNM maxval out of range");
  const std::size_t channels = kind == '5' ? 1 : 3;
  RgbImage img(w, h);
  auto scale = [&](std::size_t v) {
    return static_cast<std::uint8_t>(std::min<std::size_t>(255, (v * 255 + maxval / 2) / maxval));
  };
  std::vector<std::uint8_t> values(w * h * channels);
  if (kind == '3') {
    for (auto& v : values) v = scale(r.number());
  } else {
    r.single_space();
    const std::size_t bps = maxval > 255 ? 2 : 1;
    if (bytes.size() < r.pos() + values.size() * bps) throw DataError("PNM pixel data truncated");
    const std::uint8_t* p = bytes.data() + r.pos();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const std::size_t v = bps == 2 ? (static_cast<std::size_t>(p[2 * i]) << 8) | p[2 * i + 1] : p[i];
      values[i] = scale(v);
    }
  }
  for (std::size_t i = 0; i < w * h; ++i) {
    for (std::size_t ch = 0; ch < 3; ++ch) {
      img.rgb[i * 3 + ch] = values[i * channels + (channels == 1 ? 0 : ch)];
    }
  }
  return img;
}

RgbImage decode_image(const fs::path& path) {
  const std::vector<std::uint8_t> bytes = read_bytes(path);
  static constexpr std::uint8_t kPng[8] = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
  if (bytes.size() >= 8 && std::equal(kPng, kPng + 8, bytes.begin())) return decode_png(bytes);
  if (bytes.size() >= 2 && bytes[0] == 'P') return decode_pnm(bytes);
  throw DataError("unrecognised image format");
}

void write_ppm(const RgbImage& img, const fs::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot write " + path.string());
  os << "P6\n" << img.width << ' ' << img.height << "\n255\n";
  os.write(reinterpret_cast<const char*>(img.rgb.data()), static_cast<std::streamsize>(img.rgb.size()));
}

RgbImage crop(const RgbImage& img, const Roi& roi) {
  const std::size_t x1 = std::min(roi.x1, img.width - 1);
  const std::size_t y1 = std::min(roi.y1, img.height - 1);
  const std::size_t x2 = std::clamp(roi.x2, x1, img.width - 1);
  const std::size_t y2 = std::clamp(roi.y2, y1, img.height - 1);
  RgbImage out(x2 - x1 + 1, y2 - y1 + 1);
  for (std::size_t y = 0; y < out.height; ++y)
    for (std::size_t x = 0; x < out.width; ++x)
      for (std::size_t ch = 0; ch < 3; ++ch) out.at(x, y, ch) = img.at(x1 + x, y1 + y, ch);
  return out;
}

Tensor<float> to_input_tensor(const RgbImage& img) {
  if (img.width == 0 || img.height == 0 || img.rgb.size() != img.width * img.height * 3) {
    throw DataError("image is empty or not RGB");
  }
  constexpr std::size_t side = kInputExtent;
  Tensor<float> t({1, 3, side, side});
  auto norm = [](float v01) { return (v01 - kNormMean) / kNormScale; };
  if (img.width == side && img.height == side) {
    for (std::size_t y = 0; y < side; ++y)
      for (std::size_t x = 0; x < side; ++x)
        for (std::size_t ch = 0; ch < 3; ++ch)
          t.at(0, ch, y, x) = norm(static_cast<float>(img.at(x, y, ch)) / 255.0f);
    return t;
  }
  const double sx = static_cast<double>(img.width) / side;
  const double sy = static_cast<double>(img.height) / side;
  for (std::size_t y = 0; y < side; ++y) {
    const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0,
                                 static_cast<double>(img.height - 1));
    const auto y0 = static_cast<std::size_t>(fy);
    const std::size_t y1 = std::min(y0 + 1, img.height - 1);
    const double wy = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < side; ++x) {
      const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0,
                                   static_cast<double>(img.width - 1));
      const auto x0 = static_cast<std::size_t>(fx);
      const std::size_t x1 = std::min(x0 + 1, img.width - 1);
      const double wx = fx - static_cast<double>(x0);
      for (std::size_t ch = 0; ch < 3; ++ch) {
        const double top = (1 - wx) * img.at(x0, y0, ch) + wx * img.at(x1, y0, ch);
        const double bot = (1 - wx) * img.at(x0, y1, ch) + wx * img.at(x1, y1, ch);
        t.at(0, ch, y, x) = norm(static_cast<float>(((1 - wy) * top + wy * bot) / 255.0));
      }
    }
  }
  return t;
}

// ---------------------------------------------------------------------------
// Folder datasets

std::vector<std::size_t> DatasetSplit::class_counts() const {
  std::vector<std::size_t> counts(num_classes, 0);
  for (const auto& s : samples) {
    if (s.label < num_classes) ++counts[s.label];
  }
  return counts;
}

namespace {

bool is_image_file(const fs::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".ppm" || ext == ".pgm" || ext == ".pnm" || ext == ".png";
}

std::vector<std::string> split_fields(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string field;
  std::stringstream ss(line);
  while (std::getline(ss, field, sep)) {
    while (!field.empty() && (field.back() == '\r' || field.back() == ' ')) field.pop_back();
    out.push_back(field);
  }
  return out;
}

struct ManifestRow {
  std::string filename;
  std::size_t label = 0;
  std::optional<Roi> roi;
};

std::size_t parse_count(const std::string& s, const std::string& what) {
  char* end = nullptr;
  const long v = std::strtol(s.c_str(), &end, 10);
  if (s.empty() || end == s.c_str() || *end != '\0' || v < 0) {
    throw DataError("bad " + what + " value '" + s + "' in manifest");
  }
  return static_cast<std::size_t>(v);
}

std::vector<ManifestRow> read_manifest(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open manifest " + path.string());
  std::string line;
  if (!std::getline(is, line)) throw DataError("manifest " + path.string() + " is empty");
  const auto header = split_fields(line, ';');
  auto column = [&](const std::string& name) -> std::optional<std::size_t> {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return i;
    return std::nullopt;
  };
  const auto file_col = column("Filename");
  const auto class_col = column("ClassId");
  if (!file_col || !class_col) {
    throw DataError("manifest " + path.string() + " needs Filename and ClassId columns");
  }
  const auto rx1 = column("Roi.X1"), ry1 = column("Roi.Y1"), rx2 = column("Roi.X2"),
             ry2 = column("Roi.Y2");
  const bool has_roi = rx1 && ry1 && rx2 && ry2;

  std::vector<ManifestRow> rows;
  while (std::getline(is, line)) {
    if (line.empty() || line == "\r") continue;
    const auto f = split_fields(line, ';');
    const std::size_t need = std::max(*file_col, *class_col);
    if (f.size() <= need) throw DataError("short manifest row: " + line);
    ManifestRow row;
    row.filename = f[*file_col];
    row.label = parse_count(f[*class_col], "ClassId");
    if (has_roi && f.size() > std::max({*rx1, *ry1, *rx2, *ry2})) {
      row.roi = Roi{parse_count(f[*rx1], "Roi.X1"), parse_count(f[*ry1], "Roi.Y1"),
                    parse_count(f[*rx2], "Roi.X2"), parse_count(f[*ry2], "Roi.Y2")};
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace

DatasetSplit load_folder_dataset(const fs::path& root, const std::optional<fs::path>& manifest,
                                 const LoadOptions& options) {
  DatasetSplit split;
  split.name = options.name;
  std::vector<Sample> candidates;

  if (manifest) {
    const fs::path base = manifest->has_parent_path() ? manifest->parent_path() : root;
    for (auto& row : read_manifest(*manifest)) {
      candidates.push_back(Sample{base / row.filename, row.roi, nullptr, row.label});
    }
  } else {
    if (!fs::is_directory(root)) throw DataError("dataset root " + root.string() + " is not a directory");
    std::vector<fs::path> class_dirs;
    for (const auto& e : fs::directory_iterator(root))
      if (e.is_directory()) class_dirs.push_back(e.path());
    std::sort(class_dirs.begin(), class_dirs.end());
    if (class_dirs.empty()) throw DataError("dataset root " + root.string() + " has no class directories");
    for (std::size_t label = 0; label < class_dirs.size(); ++label) {
      const fs::path& dir = class_dirs[label];
      std::optional<fs::path> gt;
      std::vector<fs::path> files;
      for (const auto& e : fs::directory_iterator(dir)) {
        if (!e.is_regular_file()) continue;
        const std::string fname = e.path().filename().string();
        if (fname.rfind("GT-", 0) == 0 && e.path().extension() == ".csv") gt = e.path();
        else if (is_image_file(e.path())) files.push_back(e.path());
      }
      std::map<std::string, Roi> rois;
      if (gt) {
        for (auto& row : read_manifest(*gt))
          if (row.roi) rois[row.filename] = *row.roi;
      }
      for (const auto& f : files) {
        Sample s{f, std::nullopt, nullptr, label};
        if (auto it = rois.find(f.filename().string()); it != rois.end()) s.roi = it->second;
        candidates.push_back(std::move(s));
      }
    }
    split.num_classes = class_dirs.size();
  }

  std::sort(candidates.begin(), candidates.end(),
            [](const Sample& a, const Sample& b) { return a.path.string() < b.path.string(); });

  std::size_t max_label = 0;
  for (auto& s : candidates) {
    if (options.probe_images) {
      try {
        decode_image(s.path);
      } catch (const Error& e) {
        split.skipped.push_back(s.path.string() + ": " + e.what());
        continue;
      }
    }
    max_label = std::max(max_label, s.label);
    split.samples.push_back(std::move(s));
  }
  if (split.samples.empty()) throw DataError("no decodable images under " + root.string());
  if (manifest) split.num_classes = max_label + 1;

  const auto counts = split.class_counts();
  for (std::size_t c = 0; c < counts.size(); ++c) {
    if (counts[c] == 0) throw DataError("class " + std::to_string(c) + " has no samples");
  }
  return split;
}

void write_skip_report(const DatasetSplit& split, const fs::path& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw DataError("cannot write " + path.string());
  os << "# " << split.name << ": " << split.skipped.size() << " skipped\n";
  for (const auto& s : split.skipped) os << s << '\n';
}

// ---------------------------------------------------------------------------
// Synthetic signs

namespace {

enum class Glyph { Disk, Triangle, Square, Ring, Bar, Diamond, Cross, InvTriangle };

constexpr std::array<std::array<std::uint8_t, 3>, 8> kPalette{{
    {220, 30, 30},    // red
    {30, 60, 220},    // blue
    {235, 210, 30},   // yellow
    {30, 170, 60},    // green
    {245, 245, 245},  // white
    {15, 15, 15},     // black
    {245, 130, 20},   // orange
    {200, 40, 200},   // magenta
}};

// (u, v) relative to the glyph centre in units of its radius.
bool inside(Glyph g, double u, double v) {
  const double au = std::abs(u), av = std::abs(v);
  switch (g) {
    case Glyph::Disk:
      return u * u + v * v <= 1.0;
    case Glyph::Triangle:  // apex up
      return v >= -1.0 && v <= 0.8 && au <= (v + 1.0) * 0.6;
    case Glyph::Square:
      return au <= 0.8 && av <= 0.8;
    case Glyph::Ring: {
      const double r2 = u * u + v * v;
      return r2 <= 1.0 && r2 >= 0.36;
    }
    case Glyph::Bar:
      return au <= 1.0 && av <= 0.3;
    case Glyph::Diamond:
      return au + av <= 1.0;
    case Glyph::Cross:
      return (au <= 0.3 && av <= 1.0) || (av <= 0.3 && au <= 1.0);
    case Glyph::InvTriangle:
      return v <= 1.0 && v >= -0.8 && au <= (1.0 - v) * 0.6;
  }
  return false;
}

RgbImage render_sign(std::size_t label, std::mt19937_64& rng) {
  constexpr std::size_t side = kInputExtent;
  std::uniform_int_distribution<int> shift(-4, 4);
  std::uniform_real_distribution<double> size(0.85, 1.15);
  std::uniform_int_distribution<int> tone(60, 180);
  std::normal_distribution<double> noise(0.0, 12.0);

  const auto glyph = static_cast<Glyph>(label % 8);
  const auto& colour = kPalette[(label + label / 8) % 8];
  const double cx = side / 2.0 + shift(rng);
  const double cy = side / 2.0 + shift(rng);
  const double radius = 16.0 * size(rng);
  const double bg[3] = {static_cast<double>(tone(rng)), static_cast<double>(tone(rng)),
                        static_cast<double>(tone(rng))};

  RgbImage img(side, side);
  for (std::size_t y = 0; y < side; ++y) {
    for (std::size_t x = 0; x < side; ++x) {
      // 2x2 supersampling for the glyph edge.
      int hits = 0;
      for (int sy = 0; sy < 2; ++sy)
        for (int sx = 0; sx < 2; ++sx) {
          const double u = (static_cast<double>(x) + 0.25 + 0.5 * sx - cx) / radius;
          const double v = (static_cast<double>(y) + 0.25 + 0.5 * sy - cy) / radius;
          hits += inside(glyph, u, v) ? 1 : 0;
        }
      const double cover = hits / 4.0;
      for (std::size_t ch = 0; ch < 3; ++ch) {
        const double value = cover * colour[ch] + (1.0 - cover) * bg[ch] + noise(rng);
        img.at(x, y, ch) = static_cast<std::uint8_t>(std::clamp(std::lround(value), 0L, 255L));
      }
    }
  }
  return img;
}

}  // namespace

DatasetSplit generate_synthetic(std::size_t num_classes, std::size_t per_class, std::uint64_t seed,
                                const std::string& name) {
  if (num_classes < 1 || num_classes > 16) throw ConfigError("synthetic class count must be in [1, 16]");
  if (per_class < 1) throw ConfigError("synthetic set needs at least one sample per class");
  DatasetSplit split;
  split.name = name;
  split.num_classes = num_classes;
  std::mt19937_64 rng(seed);
  split.samples.reserve(num_classes * per_class);
  for (std::size_t i = 0; i < per_class; ++i) {
    for (std::size_t c = 0; c < num_classes; ++c) {
      auto img = std::make_shared<const RgbImage>(render_sign(c, rng));
      split.samples.push_back(Sample{{}, std::nullopt, std::move(img), c});
    }
  }
  return split;
}

std::uint64_t synthetic_holdout_seed(std::uint64_t seed) { return seed * 6364136223846793005ULL + 1442695040888963407ULL; }

std::pair<DatasetSplit, DatasetSplit> split_train_val(const DatasetSplit& split, double val_fraction,
                                                      std::uint64_t seed) {
  if (!(val_fraction > 0.0 && val_fraction < 0.5)) throw ConfigError("val_fraction must lie in (0, 0.5)");
  std::vector<std::vector<std::size_t>> by_class(split.num_classes);
  for (std::size_t i = 0; i < split.samples.size(); ++i) by_class.at(split.samples[i].label).push_back(i);

  std::vector<std::uint8_t> is_val(split.samples.size(), 0);
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    auto& idx = by_class[c];
    if (idx.size() < 2) {
      throw DataError("class " + std::to_string(c) + " has fewer than 2 samples; cannot split");
    }
    std::mt19937_64 rng(seed ^ (0x9e3779b97f4a7c15ULL * (c + 1)));
    std::shuffle(idx.begin(), idx.end(), rng);
    auto n_val = static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(idx.size())));
    n_val = std::clamp<std::size_t>(n_val, 1, idx.size() - 1);
    for (std::size_t i = 0; i < n_val; ++i) is_val[idx[i]] = 1;
  }

  DatasetSplit train, val;
  train.name = "train";
  val.name = "val";
  train.num_classes = val.num_classes = split.num_classes;
  for (std::size_t i = 0; i < split.samples.size(); ++i) {
    (is_val[i] ? val : train).samples.push_back(split.samples[i]);
  }
  return {std::move(train), std::move(val)};
}

// ---------------------------------------------------------------------------
// Batching

Tensor<float> load_sample(const Sample& s, bool use_roi) {
  if (s.image) return to_input_tensor(*s.image);
  RgbImage img = decode_image(s.path);
  if (use_roi && s.roi) img = crop(img, *s.roi);
  return to_input_tensor(img);
}

Batch make_batch(const DatasetSplit& split, const std::vector<std::size_t>& order, std::size_t first,
                 std::size_t count, bool use_roi) {
  constexpr std::size_t side = kInputExtent;
  Batch b{Tensor<float>({count, 3, side, side}), {}};
  b.labels.reserve(count);
  const std::size_t stride = 3 * side * side;
  for (std::size_t i = 0; i < count; ++i) {
    const Sample& s = split.samples.at(order.at(first + i));
    const Tensor<float> t = load_sample(s, use_roi);
    std::copy(t.ptr(), t.ptr() + stride, b.images.ptr() + i * stride);
    b.labels.push_back(s.label);
  }
  return b;
}

BatchPrefetcher::BatchPrefetcher(const DatasetSplit& split, std::vector<std::size_t> order,
                                 std::size_t batch_size, bool use_roi, std::size_t capacity,
                                 bool threaded)
    : split_(split),
      order_(std::move(order)),
      batch_size_(batch_size),
      use_roi_(use_roi),
      threaded_(threaded),
      queue_(capacity) {
  if (batch_size_ == 0) throw ConfigError("batch size must be >= 1");
  if (!threaded_) return;
  worker_ = std::thread([this] {
    try {
      for (std::size_t first = 0; first < order_.size(); first += batch_size_) {
        const std::size_t count = std::min(batch_size_, order_.size() - first);
        queue_.push(make_batch(split_, order_, first, count, use_roi_));
      }
    } catch (...) {
      std::lock_guard lock(error_mu_);
      error_ = std::current_exception();
    }
    queue_.close();
  });
}

BatchPrefetcher::~BatchPrefetcher() {
  queue_.close();
  if (worker_.joinable()) worker_.join();
}

std::optional<Batch> BatchPrefetcher::next() {
  if (!threaded_) {
    if (cursor_ >= order_.size()) return std::nullopt;
    const std::size_t count = std::min(batch_size_, order_.size() - cursor_);
    Batch b = make_batch(split_, order_, cursor_, count, use_roi_);
    cursor_ += count;
    return b;
  }
  auto b = queue_.pop();
  if (!b) {
    std::lock_guard lock(error_mu_);
    if (error_) std::rethrow_exception(error_);
  }
  return b;
}

std::size_t configured_threads() {
  if (const char* env = std::getenv("TRCL_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && v >= 1) return static_cast<std::size_t>(v);
  }
  return 2;
}

}  // namespace dirnet

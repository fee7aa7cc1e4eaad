#include <gtest/gtest.h>
#include <png.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "dirnet/data.hpp"

using namespace dirnet;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("dirnet_test_data_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::vector<std::uint8_t> bytes_of(const std::string& s) { return {s.begin(), s.end()}; }

void write_text(const fs::path& p, const std::string& s) { std::ofstream(p, std::ios::binary) << s; }

RgbImage solid(std::size_t w, std::size_t h, std::uint8_t r, std::uint8_t g, std::uint8_t b) {
  RgbImage img(w, h);
  for (std::size_t i = 0; i < w * h; ++i) {
    img.rgb[3 * i] = r;
    img.rgb[3 * i + 1] = g;
    img.rgb[3 * i + 2] = b;
  }
  return img;
}

void write_png(const RgbImage& img, const fs::path& path) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(img.width);
  image.height = static_cast<png_uint_32>(img.height);
  image.format = PNG_FORMAT_RGB;
  ASSERT_TRUE(png_image_write_to_file(&image, path.c_str(), 0, img.rgb.data(), 0, nullptr)) << image.message;
}

// Two classes, two images each; class "b" carries a GT file with ROIs.
fs::path toy_folder(const std::string& name) {
  const fs::path root = scratch(name);
  fs::create_directories(root / "a");
  fs::create_directories(root / "b");
  write_ppm(solid(10, 12, 255, 0, 0), root / "a" / "00000.ppm");
  write_ppm(solid(8, 8, 250, 5, 5), root / "a" / "00001.ppm");
  write_png(solid(20, 20, 0, 0, 255), root / "b" / "00000.png");
  write_ppm(solid(16, 16, 0, 0, 250), root / "b" / "00001.ppm");
  write_text(root / "b" / "GT-b.csv", "Filename;Width;Height;Roi.X1;Roi.Y1;Roi.X2;Roi.Y2;ClassId\n"
                                      "00001.ppm;16;16;2;3;12;13;1\n");
  return root;
}

}  // namespace

TEST(Pnm, BinaryColour) {
  std::string s = "P6\n# comment\n2 1\n255\n";
  s += std::string("\x01\x02\x03\xff\x00\x80", 6);
  const RgbImage img = decode_pnm(bytes_of(s));
  ASSERT_EQ(img.width, 2u);
  ASSERT_EQ(img.height, 1u);
  EXPECT_EQ(img.rgb, (std::vector<std::uint8_t>{1, 2, 3, 255, 0, 128}));
}

TEST(Pnm, AsciiAndGrey) {
  const RgbImage a = decode_pnm(bytes_of("P3 1 1 15\n15 0 5\n"));
  EXPECT_EQ(a.rgb, (std::vector<std::uint8_t>{255, 0, 85}));
  std::string g = "P5 2 1 255\n";
  g += std::string("\x10\x20", 2);
  const RgbImage b = decode_pnm(bytes_of(g));
  EXPECT_EQ(b.rgb, (std::vector<std::uint8_t>{16, 16, 16, 32, 32, 32}));
}

TEST(Pnm, SixteenBitSamples) {
  std::string s = "P5 1 1 65535\n";
  s += std::string("\xff\xff", 2);
  EXPECT_EQ(decode_pnm(bytes_of(s)).rgb[0], 255);
}

TEST(Pnm, MalformedInputsAreDataErrors) {
  EXPECT_THROW(decode_pnm(bytes_of("P6 4 4 255\n\x01\x02")), DataError);
  EXPECT_THROW(decode_pnm(bytes_of("P4 1 1\n")), DataError);
  EXPECT_THROW(decode_pnm(bytes_of("P6 0 4 255\n")), DataError);
  EXPECT_THROW(decode_pnm(bytes_of("P6 1 1 70000\n")), DataError);
  EXPECT_THROW(decode_pnm(bytes_of("X")), DataError);
}

TEST(ImageFiles, PpmRoundTrip) {
  const fs::path dir = scratch("ppm");
  RgbImage img(3, 2);
  for (std::size_t i = 0; i < img.rgb.size(); ++i) img.rgb[i] = static_cast<std::uint8_t>(i * 13);
  write_ppm(img, dir / "x.ppm");
  EXPECT_EQ(decode_image(dir / "x.ppm").rgb, img.rgb);
}

TEST(ImageFiles, PngDecodes) {
  const fs::path dir = scratch("png");
  RgbImage img(4, 3);
  for (std::size_t i = 0; i < img.rgb.size(); ++i) img.rgb[i] = static_cast<std::uint8_t>(200 - i * 5);
  write_png(img, dir / "x.png");
  const RgbImage back = decode_image(dir / "x.png");
  EXPECT_EQ(back.width, 4u);
  EXPECT_EQ(back.height, 3u);
  EXPECT_EQ(back.rgb, img.rgb);
}

TEST(ImageFiles, UnknownOrMissingIsDataError) {
  const fs::path dir = scratch("bad");
  write_text(dir / "x.png", "not an image");
  EXPECT_THROW(decode_image(dir / "x.png"), DataError);
  EXPECT_THROW(decode_image(dir / "missing.ppm"), DataError);
  std::string truncated_png("\x89PNG\r\n\x1a\n\0\0", 10);
  write_text(dir / "t.png", truncated_png);
  EXPECT_THROW(decode_image(dir / "t.png"), DataError);
}

TEST(Crop, InclusiveBoxClampedToImage) {
  RgbImage img(10, 8);
  img.at(3, 2, 1) = 77;
  const RgbImage c = crop(img, Roi{3, 2, 5, 6});
  EXPECT_EQ(c.width, 3u);
  EXPECT_EQ(c.height, 5u);
  EXPECT_EQ(c.at(0, 0, 1), 77);
  const RgbImage d = crop(img, Roi{8, 6, 40, 40});
  EXPECT_EQ(d.width, 2u);
  EXPECT_EQ(d.height, 2u);
}

TEST(Resize, NativeSizeIsExact) {
  RgbImage img(56, 56);
  for (std::size_t i = 0; i < img.rgb.size(); ++i) img.rgb[i] = static_cast<std::uint8_t>((i * 7) % 256);
  const auto t = to_input_tensor(img);
  ASSERT_EQ(t.shape(), (Shape{1, 3, 56, 56}));
  for (std::size_t y = 0; y < 56; y += 5)
    for (std::size_t x = 0; x < 56; x += 3)
      for (std::size_t ch = 0; ch < 3; ++ch)
        EXPECT_FLOAT_EQ(t.at(0, ch, y, x), (img.at(x, y, ch) / 255.0f - 0.5f) / 0.5f);
}

TEST(Resize, ConstantImageStaysConstant) {
  for (auto [w, h] : std::vector<std::pair<std::size_t, std::size_t>>{{250, 250}, {15, 15}, {31, 97}}) {
    const auto t = to_input_tensor(solid(w, h, 255, 0, 51));
    for (std::size_t y = 0; y < 56; ++y)
      for (std::size_t x = 0; x < 56; ++x) {
        EXPECT_FLOAT_EQ(t.at(0, 0, y, x), 1.0f);
        EXPECT_FLOAT_EQ(t.at(0, 1, y, x), -1.0f);
        EXPECT_NEAR(t.at(0, 2, y, x), -0.6f, 1e-6);
      }
  }
}

TEST(Resize, UpscaledCheckerboardKeepsMean) {
  RgbImage img(15, 15);
  for (std::size_t y = 0; y < 15; ++y)
    for (std::size_t x = 0; x < 15; ++x)
      for (std::size_t ch = 0; ch < 3; ++ch) img.at(x, y, ch) = ((x + y) % 2) ? 255 : 0;
  const auto t = to_input_tensor(img);
  double s = 0;
  for (float v : t.data()) s += v;
  const double mean01 = (s / static_cast<double>(t.size())) * 0.5 + 0.5;
  EXPECT_NEAR(mean01, 112.0 / 225.0, 0.02);
  EXPECT_THROW(to_input_tensor(RgbImage{}), DataError);
}

TEST(FolderDataset, ClassesFromSortedDirectories) {
  const fs::path root = toy_folder("folder");
  const DatasetSplit split = load_folder_dataset(root);
  EXPECT_EQ(split.num_classes, 2u);
  ASSERT_EQ(split.size(), 4u);
  EXPECT_EQ(split.class_counts(), (std::vector<std::size_t>{2, 2}));
  EXPECT_TRUE(split.skipped.empty());
  for (std::size_t i = 1; i < split.size(); ++i) EXPECT_LT(split.samples[i - 1].path, split.samples[i].path);
  EXPECT_EQ(split.samples[0].label, 0u);
  EXPECT_EQ(split.samples[3].label, 1u);
  ASSERT_TRUE(split.samples[3].roi.has_value());
  EXPECT_EQ(split.samples[3].roi->x1, 2u);
  EXPECT_EQ(split.samples[3].roi->y2, 13u);
  EXPECT_FALSE(split.samples[2].roi.has_value());
}

TEST(FolderDataset, RoiSelectsCroppedRegion) {
  const fs::path root = scratch("roi");
  fs::create_directories(root / "x");
  RgbImage img = solid(20, 20, 0, 0, 0);
  for (std::size_t y = 5; y <= 9; ++y)
    for (std::size_t x = 5; x <= 9; ++x) img.at(x, y, 0) = 255;
  write_ppm(img, root / "x" / "a.ppm");
  write_text(root / "x" / "GT-x.csv", "Filename;Roi.X1;Roi.Y1;Roi.X2;Roi.Y2;ClassId\na.ppm;5;5;9;9;0\n");
  const DatasetSplit split = load_folder_dataset(root);
  const auto cropped = load_sample(split.samples[0], true);
  const auto full = load_sample(split.samples[0], false);
  EXPECT_FLOAT_EQ(cropped.at(0, 0, 0, 0), 1.0f);
  EXPECT_FLOAT_EQ(full.at(0, 0, 0, 0), -1.0f);
}

TEST(FolderDataset, ManifestRelativeToItsDirectory) {
  const fs::path root = scratch("manifest");
  fs::create_directories(root / "imgs");
  write_ppm(solid(9, 9, 1, 2, 3), root / "imgs" / "p.ppm");
  write_ppm(solid(9, 9, 4, 5, 6), root / "imgs" / "q.ppm");
  write_text(root / "list.csv", "Filename;ClassId;Roi.X1;Roi.Y1;Roi.X2;Roi.Y2\nimgs/q.ppm;1;1;1;7;7\nimgs/p.ppm;0;0;0;8;8\n");
  const DatasetSplit split = load_folder_dataset(root, root / "list.csv");
  EXPECT_EQ(split.num_classes, 2u);
  ASSERT_EQ(split.size(), 2u);
  EXPECT_EQ(split.samples[0].path.filename(), "p.ppm");
  EXPECT_EQ(split.samples[1].label, 1u);
  EXPECT_EQ(split.samples[1].roi->x2, 7u);
  write_text(root / "bad.csv", "Name;Label\nx;0\n");
  EXPECT_THROW(load_folder_dataset(root, root / "bad.csv"), DataError);
}

TEST(FolderDataset, UndecodableFilesAreSkippedAndReported) {
  const fs::path root = toy_folder("skip");
  write_text(root / "a" / "00002.ppm", "P6 9 9 255\n\x01");
  const DatasetSplit split = load_folder_dataset(root);
  EXPECT_EQ(split.size(), 4u);
  ASSERT_EQ(split.skipped.size(), 1u);
  EXPECT_NE(split.skipped[0].find("00002.ppm"), std::string::npos);
  write_skip_report(split, root / "skipped.txt");
  std::ifstream is(root / "skipped.txt");
  std::string first, second;
  std::getline(is, first);
  std::getline(is, second);
  EXPECT_EQ(first, "# train: 1 skipped");
  EXPECT_NE(second.find("00002.ppm"), std::string::npos);
}

TEST(FolderDataset, EmptyClassIsFatal) {
  const fs::path root = toy_folder("empty");
  fs::create_directories(root / "c");
  EXPECT_THROW(load_folder_dataset(root), DataError);
  EXPECT_THROW(load_folder_dataset(root / "nothing"), DataError);
}

TEST(Synthetic, CountsAndDeterminism) {
  const DatasetSplit a = generate_synthetic(8, 250, 7);
  EXPECT_EQ(a.size(), 2000u);
  EXPECT_EQ(a.num_classes, 8u);
  EXPECT_EQ(a.class_counts(), std::vector<std::size_t>(8, 250));
  const DatasetSplit b = generate_synthetic(8, 5, 7);
  const DatasetSplit c = generate_synthetic(8, 5, 7);
  const DatasetSplit d = generate_synthetic(8, 5, 8);
  ASSERT_EQ(b.size(), 40u);
  bool any_diff = false;
  for (std::size_t i = 0; i < b.size(); ++i) {
    EXPECT_EQ(b.samples[i].image->rgb, c.samples[i].image->rgb);
    EXPECT_EQ(b.samples[i].label, c.samples[i].label);
    any_diff = any_diff || b.samples[i].image->rgb != d.samples[i].image->rgb;
  }
  EXPECT_TRUE(any_diff);
  EXPECT_NE(synthetic_holdout_seed(7), 7u);
}

TEST(Synthetic, ClassesAreVisuallyDistinct) {
  const DatasetSplit s = generate_synthetic(8, 20, 3);
  std::vector<std::vector<double>> mean(8, std::vector<double>(3 * 56 * 56, 0.0));
  for (const auto& smp : s.samples) {
    const auto t = to_input_tensor(*smp.image);
    for (std::size_t i = 0; i < t.size(); ++i) mean[smp.label][i] += t.data()[i] / 20.0;
  }
  for (std::size_t a = 0; a < 8; ++a)
    for (std::size_t b = a + 1; b < 8; ++b) {
      double d = 0;
      for (std::size_t i = 0; i < mean[a].size(); ++i) d += std::abs(mean[a][i] - mean[b][i]);
      EXPECT_GT(d / static_cast<double>(mean[a].size()), 0.05) << a << " vs " << b;
    }
}

TEST(Split, StratifiedDisjointDeterministic) {
  const DatasetSplit s = generate_synthetic(4, 30, 1);
  const auto [train, val] = split_train_val(s, 0.1, 5);
  EXPECT_EQ(train.size(), 108u);
  EXPECT_EQ(val.size(), 12u);
  EXPECT_EQ(val.class_counts(), std::vector<std::size_t>(4, 3));
  std::set<const RgbImage*> seen;
  for (const auto& x : train.samples) seen.insert(x.image.get());
  for (const auto& x : val.samples) EXPECT_FALSE(seen.count(x.image.get()));
  const auto again = split_train_val(s, 0.1, 5);
  for (std::size_t i = 0; i < val.size(); ++i) EXPECT_EQ(val.samples[i].image, again.second.samples[i].image);
  const auto other = split_train_val(s, 0.1, 6);
  bool differs = false;
  for (std::size_t i = 0; i < val.size(); ++i) differs = differs || val.samples[i].image != other.second.samples[i].image;
  EXPECT_TRUE(differs);
}

TEST(Split, RejectsBadFractionAndTinyClasses) {
  const DatasetSplit s = generate_synthetic(2, 10, 1);
  EXPECT_THROW(split_train_val(s, 0.0, 1), ConfigError);
  EXPECT_THROW(split_train_val(s, 0.5, 1), ConfigError);
  EXPECT_THROW(split_train_val(generate_synthetic(2, 1, 1), 0.1, 1), DataError);
}

TEST(Prefetch, ThreadedMatchesInline) {
  const DatasetSplit s = generate_synthetic(3, 7, 2);
  std::vector<std::size_t> order(s.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = (i * 5) % order.size();
  BatchPrefetcher a(s, order, 4, true, 2, true);
  BatchPrefetcher b(s, order, 4, true, 2, false);
  EXPECT_EQ(a.batch_count(), 6u);
  std::size_t batches = 0, seen = 0;
  while (auto ba = a.next()) {
    auto bb = b.next();
    ASSERT_TRUE(bb.has_value());
    EXPECT_EQ(ba->labels, bb->labels);
    EXPECT_EQ(max_abs_diff(ba->images, bb->images), 0.0f);
    seen += ba->labels.size();
    ++batches;
  }
  EXPECT_FALSE(b.next().has_value());
  EXPECT_EQ(batches, 6u);
  EXPECT_EQ(seen, 21u);
}

TEST(Prefetch, LoadErrorsReachTheConsumer) {
  DatasetSplit s;
  s.num_classes = 1;
  s.samples.push_back(Sample{"/nonexistent/x.ppm", std::nullopt, nullptr, 0});
  BatchPrefetcher p(s, {0}, 1, false, 1, true);
  EXPECT_THROW(p.next(), DataError);
}

TEST(Batch, AssemblesInOrder) {
  const DatasetSplit s = generate_synthetic(2, 3, 4);
  const Batch b = make_batch(s, {5, 0, 3}, 1, 2, false);
  EXPECT_EQ(b.images.shape(), (Shape{2, 3, 56, 56}));
  EXPECT_EQ(b.labels, (std::vector<std::size_t>{s.samples[0].label, s.samples[3].label}));
  const auto one = load_sample(s.samples[3], false);
  for (std::size_t i = 0; i < one.size(); ++i) ASSERT_EQ(b.images.data()[one.size() + i], one.data()[i]);
}

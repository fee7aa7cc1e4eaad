#pragma once

#include <condition_variable>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "dirnet/tensor.hpp"

namespace dirnet {

inline constexpr std::size_t kInputExtent = 56;
inline constexpr float kNormMean = 0.5f;
inline constexpr float kNormScale = 0.5f;  // (v - mean) / scale maps [0,1] to [-1,1]

/// 8-bit RGB raster, interleaved, row-major.
struct RgbImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> rgb;

  RgbImage() = default;
  RgbImage(std::size_t w, std::size_t h) : width(w), height(h), rgb(w * h * 3, 0) {}
  std::uint8_t& at(std::size_t x, std::size_t y, std::size_t ch) { return rgb[(y * width + x) * 3 + ch]; }
  [[nodiscard]] std::uint8_t at(std::size_t x, std::size_t y, std::size_t ch) const {
    return rgb[(y * width + x) * 3 + ch];
  }
};

/// Inclusive pixel box, as in GTSRB annotation files.
struct Roi {
  std::size_t x1 = 0, y1 = 0, x2 = 0, y2 = 0;
};

/// Decodes binary/ASCII PNM (P3, P5, P6) or PNG by content sniffing.
RgbImage decode_image(const std::filesystem::path& path);
RgbImage decode_pnm(const std::vector<std::uint8_t>& bytes);
void write_ppm(const RgbImage& img, const std::filesystem::path& path);

RgbImage crop(const RgbImage& img, const Roi& roi);

/// Bilinear resize (pixel-centre aligned) to 56x56, scaled to [0,1] and then
/// normalized with kNormMean / kNormScale. Shape (1, 3, 56, 56).
Tensor<float> to_input_tensor(const RgbImage& img);

struct Sample {
  std::filesystem::path path;                 // empty for generated samples
  std::optional<Roi> roi;
  std::shared_ptr<const RgbImage> image;      // set for generated samples
  std::size_t label = 0;
};

struct DatasetSplit {
  std::string name;
  std::size_t num_classes = 0;
  std::vector<Sample> samples;
  std::vector<std::string> skipped;  // "<path>: <reason>" for undecodable files

  [[nodiscard]] std::size_t size() const { return samples.size(); }
  [[nodiscard]] std::vector<std::size_t> class_counts() const;
};

struct LoadOptions {
  std::string name = "train";
  // Validate decodability of every file while loading.
  bool probe_images = true;
};

/// Reads either a `manifest` CSV (';'-separated, header with Filename and
/// ClassId, optional Roi.X1 Roi.Y1 Roi.X2 Roi.Y2; filenames relative to the
/// manifest's directory) or per-class subdirectories of `root`. Class
/// directories are numbered in byte-wise name order; a GT-*.csv inside a
/// class directory supplies ROIs. Samples come out sorted by path.
DatasetSplit load_folder_dataset(const std::filesystem::path& root,
                                 const std::optional<std::filesystem::path>& manifest = std::nullopt,
                                 const LoadOptions& options = {});

void write_skip_report(const DatasetSplit& split, const std::filesystem::path& path);

/// Procedural sign-like images: one shape/colour pair per class (up to 16),
/// random offset within +-4 px, size within +-15 %, noisy background.
DatasetSplit generate_synthetic(std::size_t num_classes, std::size_t per_class, std::uint64_t seed,
                                const std::string& name = "synthetic");

/// Seed used for the held-out companion of a synthetic training set.
std::uint64_t synthetic_holdout_seed(std::uint64_t seed);

/// Stratified per-class split; deterministic for a given seed.
std::pair<DatasetSplit, DatasetSplit> split_train_val(const DatasetSplit& split, double val_fraction,
                                                      std::uint64_t seed);

Tensor<float> load_sample(const Sample& s, bool use_roi);

struct Batch {
  Tensor<float> images;             // (n, 3, 56, 56)
  std::vector<std::size_t> labels;
};

Batch make_batch(const DatasetSplit& split, const std::vector<std::size_t>& order, std::size_t first,
                 std::size_t count, bool use_roi);

/// Bounded FIFO shared between one producer and one consumer.
template <typename Item>
class BoundedQueue {
 public:
  explicit BoundedQueue(std::size_t capacity) : capacity_(capacity == 0 ? 1 : capacity) {}

  void push(Item item) {
    std::unique_lock lock(mu_);
    not_full_.wait(lock, [&] { return items_.size() < capacity_ || closed_; });
    if (closed_) return;
    items_.push_back(std::move(item));
    not_empty_.notify_one();
  }

  /// Empty optional once the queue is closed and drained.
  std::optional<Item> pop() {
    std::unique_lock lock(mu_);
    not_empty_.wait(lock, [&] { return !items_.empty() || closed_; });
    if (items_.empty()) return std::nullopt;
    Item item = std::move(items_.front());
    items_.pop_front();
    not_full_.notify_one();
    return item;
  }

  void close() {
    std::lock_guard lock(mu_);
    closed_ = true;
    not_empty_.notify_all();
    not_full_.notify_all();
  }

 private:
  std::size_t capacity_;
  std::deque<Item> items_;
  bool closed_ = false;
  std::mutex mu_;
  std::condition_variable not_full_;
  std::condition_variable not_empty_;
};

/// Assembles the batches of one pass over `order` ahead of the consumer. With
/// `threaded` false batches are built on demand in the caller's thread; the
/// sequence is identical either way. Errors raised while loading are
/// rethrown from `next`.
class BatchPrefetcher {
 public:
  BatchPrefetcher(const DatasetSplit& split, std::vector<std::size_t> order, std::size_t batch_size,
                  bool use_roi, std::size_t capacity, bool threaded);
  ~BatchPrefetcher();
  BatchPrefetcher(const BatchPrefetcher&) = delete;
  BatchPrefetcher& operator=(const BatchPrefetcher&) = delete;

  std::optional<Batch> next();
  [[nodiscard]] std::size_t batch_count() const { return (order_.size() + batch_size_ - 1) / batch_size_; }

 private:
  const DatasetSplit& split_;
  std::vector<std::size_t> order_;
  std::size_t batch_size_;
  bool use_roi_;
  std::size_t cursor_ = 0;
  bool threaded_;
  BoundedQueue<Batch> queue_;
  std::exception_ptr error_;
  std::mutex error_mu_;
  std::thread worker_;
};

/// Worker thread cap from TRCL_THREADS (default 2, minimum 1).
std::size_t configured_threads();

}  // namespace dirnet

#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "dirnet/arch_calculus.hpp"
#include "dirnet/blocks.hpp"
#include "dirnet/layers.hpp"

namespace dirnet {

/// The full classifier: stem, residual stages, pooling and the dense head.
/// `forward` returns class probabilities, shape (n, classes, 1, 1).
template <typename T>
class Network final : public Module<T> {
 public:
  explicit Network(NetworkSpec spec, std::uint64_t seed = 0);

  Tensor<T> forward(const Tensor<T>& x, Mode mode) override;
  /// Takes the gradient with respect to the probabilities.
  Tensor<T> backward(const Tensor<T>& grad_probs) override;
  void collect_params(std::vector<Param<T>*>& out) override;
  void collect_buffers(std::vector<Buffer<T>*>& out) override;

  [[nodiscard]] const NetworkSpec& spec() const { return spec_; }
  [[nodiscard]] std::size_t num_classes() const { return spec_.num_classes; }
  [[nodiscard]] const Tensor<T>& logits() const { return logits_; }

  /// When enabled, every forward stores each layer output under its name
  /// ("conv1", "pool1", "avgpool", "dense1", "logits", "softmax") and every
  /// block intermediate under "<block>.<label>".
  void record_activations(bool on);
  [[nodiscard]] const ActivationMap<T>& activations() const { return acts_; }

  /// Output shape of each table row for one forward pass of `input`.
  std::vector<std::pair<std::string, Shape>> shape_trace(const Shape& input);

  std::vector<Block<T>*> blocks();

 private:
  struct Stage {
    std::size_t layer;  // index into spec_.layers
    std::unique_ptr<Module<T>> module;
    Block<T>* block = nullptr;
    std::unique_ptr<ReLU<T>> relu;  // dense layers followed by an activation
  };

  void check_input(const Shape& s) const;

  NetworkSpec spec_;
  std::vector<Stage> stages_;
  Softmax<T> softmax_;
  Tensor<T> logits_;
  bool recording_ = false;
  ActivationMap<T> acts_;
};

/// Network built from `NetworkSpec::standard(num_classes)`.
template <typename T>
Network<T> build(std::size_t num_classes, std::uint64_t seed = 0);

// ---------------------------------------------------------------------------
// Checkpoints
//
// Layout (little-endian): "TRCL", u32 version, u32 num_classes, u32 entry
// count, then per entry u32 name length, name bytes, 4 x u32 shape and the
// values as 32-bit floats. Entries cover parameters and running moments.

inline constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
void save_checkpoint(Network<T>& net, const std::filesystem::path& path);

/// Rebuilds the standard network for the stored class count.
template <typename T>
Network<T> load_checkpoint(const std::filesystem::path& path);

/// Copies stored values into an existing network; names and shapes must match.
template <typename T>
void load_checkpoint_into(Network<T>& net, const std::filesystem::path& path);

std::uint32_t checkpoint_num_classes(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Parameter audit

struct ParamAudit {
  std::uint64_t closed_form_total = 0;
  std::uint64_t registry_total = 0;
  std::vector<RowSummary> rows;
  double deviation = 0.0;  // (closed_form_total - reference) / reference
  std::string report;      // human-readable table
  std::string csv;         // row,output,params,conv_weights,batchnorm,projection,dense,bias
};

/// Compares the closed-form count against an instantiated registry and
/// against the reference total. Throws Error if the two counts disagree.
ParamAudit network_param_audit(const NetworkSpec& spec);

// ---------------------------------------------------------------------------
// Feature-map dumps

/// Sums the activations named in `expr`, e.g. "conv2a.F2+R1"; terms after the
/// first may omit the block prefix. Throws ConfigError on unknown names.
template <typename T>
Tensor<T> resolve_activation(const ActivationMap<T>& acts, const std::string& expr);

/// Runs `x` (first sample) through the network in infer mode and writes one
/// tiled 8-bit PGM grid per requested name. Each channel is min-max scaled;
/// constant channels render mid-grey. Returns the written paths.
template <typename T>
std::vector<std::filesystem::path> dump_feature_maps(Network<T>& net, const Tensor<T>& x,
                                                     const std::vector<std::string>& names,
                                                     const std::filesystem::path& out_dir);

struct GrayImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;
};

/// Tiles channel maps of sample 0 into a near-square grid with 1-pixel gaps.
template <typename T>
GrayImage tile_feature_maps(const Tensor<T>& maps, std::size_t* tiles = nullptr);

void write_pgm(const GrayImage& img, const std::filesystem::path& path);

}  // namespace dirnet

#pragma once

// Closed-form receptive-field and parameter algebra for dilated kernels and
// the full classifier, plus a brute-force receptive-field probe. Nothing
// here touches the tensor engine.

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "dirnet/blocks.hpp"
#include "dirnet/layers.hpp"

namespace dirnet {

struct ReceptiveField {
  std::size_t e1 = 0;     // ordinary k x k kernel side
  std::size_t e2 = 0;     // dilated kernel side, k + (k-1)(r-1)
  std::int64_t delta = 0; // e2^2 - e1^2
};

/// Exact non-negative rational, always reduced.
struct Rational {
  std::uint64_t num = 0;
  std::uint64_t den = 1;
  static Rational make(std::uint64_t num, std::uint64_t den);
  [[nodiscard]] double value() const { return static_cast<double>(num) / static_cast<double>(den); }
  friend bool operator==(const Rational&, const Rational&) = default;
};

struct ParamCount {
  std::uint64_t p1 = 0;  // ordinary kernel covering the same extent
  std::uint64_t p2 = 0;  // dilated kernel
  Rational ratio;        // p1 / p2
};

ReceptiveField receptive_extension(std::size_t k, std::size_t r);

/// The product form (k-1)(r-1)(2k + (k-1)(r-1)) of the area extension.
std::int64_t receptive_extension_product_form(std::size_t k, std::size_t r);

ParamCount param_comparison(std::size_t k, std::size_t r, std::size_t d_l, std::size_t d_lminus1);

/// [1 + (k-1)(r-1)/k]^2 evaluated in exact rational arithmetic.
Rational param_ratio_closed_form(std::size_t k, std::size_t r);

/// Marks every input pixel reachable from one output pixel through the
/// stride-1 stack and returns the side of the bounding square. Throws
/// ConfigError if the cone leaves the `canvas` x `canvas` probe area.
std::size_t brute_force_receptive_field(const std::vector<ConvSpec>& stack,
                                        std::size_t canvas = 257);

/// 1 + sum (k_i - 1) r_i for a stride-1 stack.
std::size_t composed_receptive_field(const std::vector<ConvSpec>& stack);

// ---------------------------------------------------------------------------
// Network description shared by the builder and the closed-form audit.

enum class LayerKind { Conv, Block, MaxPool, AvgPool, Dense };

struct LayerSpec {
  LayerKind kind = LayerKind::Conv;
  std::string name;    // registry prefix, e.g. "conv2a"
  std::string row;     // layer-table row this layer belongs to, e.g. "Conv2a,b"
  std::size_t units = 0;  // output channels (conv, block) or features (dense)
  std::size_t k = 1;      // conv / pool window
  bool bias = false;
  bool relu = false;      // dense followed by ReLU
  BlockKind block = BlockKind::DilatedInnerResidual;
};

struct NetworkSpec {
  std::size_t in_channels = 3;
  std::size_t in_extent = 56;
  std::size_t num_classes = 43;
  BatchNormConfig bn{};
  std::vector<LayerSpec> layers;

  /// The 12-row traffic-sign classifier: 1x1 stem, six dilated inner
  /// residual blocks (64, 64 | pool | 64, 128 | pool | 256 | pool | 256),
  /// global 7x7 average pool, 512-unit dense, class dense + softmax.
  static NetworkSpec standard(std::size_t num_classes);

  /// Same topology with stage widths {w1, w2, w3}, dense width `dense` and
  /// input side `extent`; the average pool covers whatever extent remains.
  static NetworkSpec scaled(std::size_t num_classes, std::size_t extent, std::size_t w1,
                            std::size_t w2, std::size_t w3, std::size_t dense);
};

struct LayerShape {
  std::string name;
  std::string row;
  Shape output;  // per-sample (n = 1)
  std::uint64_t params = 0;
};

struct RowSummary {
  std::string row;
  Shape output;
  std::uint64_t params = 0;
  // Breakdown of `params` by convention.
  std::uint64_t conv_weights = 0;
  std::uint64_t batchnorm = 0;
  std::uint64_t projection = 0;
  std::uint64_t dense = 0;
  std::uint64_t bias = 0;
};

/// Per-layer output shape and parameter count from the layer algebra alone.
std::vector<LayerShape> closed_form_layers(const NetworkSpec& spec);

/// Layers grouped by table row, in order.
std::vector<RowSummary> closed_form_rows(const NetworkSpec& spec);

std::uint64_t closed_form_total(const NetworkSpec& spec);

/// Reported parameter total of the reference architecture.
inline constexpr std::uint64_t kReferenceParamCount = 6'256'000;

// ---------------------------------------------------------------------------
// Identity audit over a (k, r) grid.

struct AuditCheck {
  std::string identity;
  std::size_t k = 0;
  std::size_t r = 0;
  std::string detail;
  bool pass = false;
};

struct AuditReport {
  std::vector<AuditCheck> checks;
  [[nodiscard]] bool all_pass() const;
  [[nodiscard]] std::size_t failures() const;
};

/// Receptive-field (closed form vs brute force, area form vs product
/// form), parameter ratio and ordering, and block savings identities.
AuditReport run_identity_audit(const std::vector<std::size_t>& ks = {1, 3, 5},
                               const std::vector<std::size_t>& rs = {1, 2, 3},
                               const std::vector<std::size_t>& depths = {64, 128, 256});

}  // namespace dirnet

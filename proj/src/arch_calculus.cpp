#include "dirnet/arch_calculus.hpp"

#include <algorithm>
#include <numeric>
#include <sstream>

namespace dirnet {

Rational Rational::make(std::uint64_t num, std::uint64_t den) {
  if (den == 0) throw ConfigError("rational with zero denominator");
  const std::uint64_t g = std::gcd(num, den);
  return Rational{num / (g == 0 ? 1 : g), den / (g == 0 ? 1 : g)};
}

ReceptiveField receptive_extension(std::size_t k, std::size_t r) {
  if (k < 1 || r < 1) throw ConfigError("receptive_extension needs k >= 1 and r >= 1");
  ReceptiveField rf;
  rf.e1 = k;
  rf.e2 = k + (k - 1) * (r - 1);
  rf.delta = static_cast<std::int64_t>(rf.e2 * rf.e2) - static_cast<std::int64_t>(rf.e1 * rf.e1);
  return rf;
}

std::int64_t receptive_extension_product_form(std::size_t k, std::size_t r) {
  const auto a = static_cast<std::int64_t>((k - 1) * (r - 1));
  return a * (2 * static_cast<std::int64_t>(k) + a);
}

ParamCount param_comparison(std::size_t k, std::size_t r, std::size_t d_l, std::size_t d_lminus1) {
  if (k < 1 || r < 1 || d_l < 1 || d_lminus1 < 1) {
    throw ConfigError("param_comparison arguments must be >= 1");
  }
  const std::uint64_t e = k + (k - 1) * (r - 1);
  const std::uint64_t depth = static_cast<std::uint64_t>(d_l) * d_lminus1;
  ParamCount pc;
  pc.p1 = e * e * depth;
  pc.p2 = static_cast<std::uint64_t>(k) * k * depth;
  pc.ratio = Rational::make(pc.p1, pc.p2);
  return pc;
}

Rational param_ratio_closed_form(std::size_t k, std::size_t r) {
  // 1 + (k-1)(r-1)/k = (k + (k-1)(r-1)) / k, squared.
  const std::uint64_t num = k + (k - 1) * (r - 1);
  const Rational base = Rational::make(num, k);
  return Rational::make(base.num * base.num, base.den * base.den);
}

std::size_t brute_force_receptive_field(const std::vector<ConvSpec>& stack, std::size_t canvas) {
  if (stack.empty()) throw ConfigError("receptive field of an empty stack");
  if (canvas % 2 == 0) ++canvas;
  for (const auto& s : stack) {
    if (s.stride != 1) throw ConfigError("brute-force receptive field handles stride-1 stacks only");
  }
  const auto side = static_cast<std::ptrdiff_t>(canvas);
  const std::ptrdiff_t centre = side / 2;
  std::vector<std::uint8_t> marked(canvas * canvas, 0);
  marked[static_cast<std::size_t>(centre * side + centre)] = 1;

  // Walk from the output layer back to the input, spreading each marked
  // pixel to every tap that reads it.
  for (auto it = stack.rbegin(); it != stack.rend(); ++it) {
    const auto k = static_cast<std::ptrdiff_t>(it->k);
    const auto r = static_cast<std::ptrdiff_t>(it->rate);
    const std::ptrdiff_t half = (k - 1) / 2;
    std::vector<std::uint8_t> next(canvas * canvas, 0);
    for (std::ptrdiff_t y = 0; y < side; ++y) {
      for (std::ptrdiff_t x = 0; x < side; ++x) {
        if (!marked[static_cast<std::size_t>(y * side + x)]) continue;
        for (std::ptrdiff_t ty = 0; ty < k; ++ty) {
          for (std::ptrdiff_t tx = 0; tx < k; ++tx) {
            const std::ptrdiff_t iy = y + (ty - half) * r;
            const std::ptrdiff_t ix = x + (tx - half) * r;
            if (iy < 0 || iy >= side || ix < 0 || ix >= side) {
              throw ConfigError("receptive field exceeds the " + std::to_string(canvas) +
                                "-pixel probe canvas");
            }
            next[static_cast<std::size_t>(iy * side + ix)] = 1;
          }
        }
      }
    }
    marked.swap(next);
  }

  std::ptrdiff_t y0 = side, y1 = -1, x0 = side, x1 = -1;
  for (std::ptrdiff_t y = 0; y < side; ++y) {
    for (std::ptrdiff_t x = 0; x < side; ++x) {
      if (!marked[static_cast<std::size_t>(y * side + x)]) continue;
      y0 = std::min(y0, y);
      y1 = std::max(y1, y);
      x0 = std::min(x0, x);
      x1 = std::max(x1, x);
    }
  }
  return static_cast<std::size_t>(std::max(y1 - y0, x1 - x0) + 1);
}

std::size_t composed_receptive_field(const std::vector<ConvSpec>& stack) {
  std::size_t extent = 1;
  for (const auto& s : stack) extent += (s.k - 1) * s.rate;
  return extent;
}

// ---------------------------------------------------------------------------

namespace {

LayerSpec conv_layer(std::string name, std::string row, std::size_t units) {
  LayerSpec l;
  l.kind = LayerKind::Conv;
  l.name = std::move(name);
  l.row = std::move(row);
  l.units = units;
  l.k = 1;
  l.bias = true;
  return l;
}

LayerSpec block_layer(std::string name, std::string row, std::size_t units) {
  LayerSpec l;
  l.kind = LayerKind::Block;
  l.name = std::move(name);
  l.row = std::move(row);
  l.units = units;
  l.k = 3;
  return l;
}

LayerSpec pool_layer(LayerKind kind, std::string name, std::string row, std::size_t k) {
  LayerSpec l;
  l.kind = kind;
  l.name = std::move(name);
  l.row = std::move(row);
  l.k = k;
  return l;
}

LayerSpec dense_layer(std::string name, std::string row, std::size_t units, bool relu) {
  LayerSpec l;
  l.kind = LayerKind::Dense;
  l.name = std::move(name);
  l.row = std::move(row);
  l.units = units;
  l.bias = true;
  l.relu = relu;
  return l;
}

const PoolSpec kMaxPool{3, 2, 1};

}  // namespace

NetworkSpec NetworkSpec::scaled(std::size_t num_classes, std::size_t extent, std::size_t w1,
                                std::size_t w2, std::size_t w3, std::size_t dense) {
  if (num_classes < 2) throw ConfigError("a classifier needs at least 2 classes");
  NetworkSpec s;
  s.num_classes = num_classes;
  s.in_extent = extent;
  std::size_t side = extent;
  s.layers.push_back(conv_layer("conv1", "Conv1", w1));
  s.layers.push_back(block_layer("conv2a", "Conv2a,b", w1));
  s.layers.push_back(block_layer("conv2b", "Conv2a,b", w1));
  s.layers.push_back(pool_layer(LayerKind::MaxPool, "pool1", "Pool1", 3));
  side = kMaxPool.out_extent(side);
  s.layers.push_back(block_layer("conv2c", "Conv2c", w1));
  s.layers.push_back(block_layer("conv3a", "Conv3a", w2));
  s.layers.push_back(pool_layer(LayerKind::MaxPool, "pool2", "Pool2", 3));
  side = kMaxPool.out_extent(side);
  s.layers.push_back(block_layer("conv4a", "Conv4a", w3));
  s.layers.push_back(pool_layer(LayerKind::MaxPool, "pool3", "Pool3", 3));
  side = kMaxPool.out_extent(side);
  s.layers.push_back(block_layer("conv4b", "Conv4b", w3));
  s.layers.push_back(pool_layer(LayerKind::AvgPool, "avgpool", "AvgPool", side));
  s.layers.push_back(dense_layer("dense1", "Dense1", dense, true));
  s.layers.push_back(dense_layer("dense2", "Dense2", num_classes, false));
  return s;
}

NetworkSpec NetworkSpec::standard(std::size_t num_classes) {
  return scaled(num_classes, 56, 64, 128, 256, 512);
}

std::vector<LayerShape> closed_form_layers(const NetworkSpec& spec) {
  std::vector<LayerShape> out;
  Shape cur{1, spec.in_channels, spec.in_extent, spec.in_extent};
  for (const auto& l : spec.layers) {
    LayerShape ls{l.name, l.row, cur, 0};
    switch (l.kind) {
      case LayerKind::Conv:
        ls.params = l.k * l.k * cur.c * l.units + (l.bias ? l.units : 0);
        cur.c = l.units;
        break;
      case LayerKind::Block: {
        BlockConfig cfg{cur.c, l.units, l.k, 2, 3, spec.bn};
        ls.params = block_param_count(cfg, l.block).total;
        cur.c = l.units;
        break;
      }
      case LayerKind::MaxPool:
        cur.h = kMaxPool.out_extent(cur.h);
        cur.w = kMaxPool.out_extent(cur.w);
        break;
      case LayerKind::AvgPool: {
        const PoolSpec p{l.k, l.k, 0};
        cur.h = p.out_extent(cur.h);
        cur.w = p.out_extent(cur.w);
        break;
      }
      case LayerKind::Dense:
        ls.params = cur.sample() * l.units + l.units;
        cur = Shape{1, l.units, 1, 1};
        break;
    }
    ls.output = cur;
    out.push_back(ls);
  }
  return out;
}

std::vector<RowSummary> closed_form_rows(const NetworkSpec& spec) {
  std::vector<RowSummary> rows;
  Shape in{1, spec.in_channels, spec.in_extent, spec.in_extent};
  const auto layers = closed_form_layers(spec);
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const LayerSpec& l = spec.layers[i];
    const LayerShape& ls = layers[i];
    if (rows.empty() || rows.back().row != ls.row) rows.push_back(RowSummary{ls.row, {}, 0});
    RowSummary& row = rows.back();
    row.output = ls.output;
    row.params += ls.params;
    switch (l.kind) {
      case LayerKind::Conv:
        row.conv_weights += l.k * l.k * in.c * l.units;
        row.bias += l.bias ? l.units : 0;
        break;
      case LayerKind::Block: {
        const auto pc = block_param_count(BlockConfig{in.c, l.units, l.k, 2, 3, spec.bn}, l.block);
        row.conv_weights += pc.conv_weights;
        row.batchnorm += pc.batchnorm;
        row.projection += pc.projection;
        break;
      }
      case LayerKind::Dense:
        row.dense += in.sample() * l.units;
        row.bias += l.units;
        break;
      default:
        break;
    }
    in = ls.output;
  }
  return rows;
}

std::uint64_t closed_form_total(const NetworkSpec& spec) {
  std::uint64_t total = 0;
  for (const auto& l : closed_form_layers(spec)) total += l.params;
  return total;
}

// ---------------------------------------------------------------------------

bool AuditReport::all_pass() const { return failures() == 0; }

std::size_t AuditReport::failures() const {
  return static_cast<std::size_t>(
      std::count_if(checks.begin(), checks.end(), [](const AuditCheck& c) { return !c.pass; }));
}

AuditReport run_identity_audit(const std::vector<std::size_t>& ks, const std::vector<std::size_t>& rs,
                               const std::vector<std::size_t>& depths) {
  AuditReport report;
  auto add = [&](std::string identity, std::size_t k, std::size_t r, bool pass, std::string detail) {
    report.checks.push_back(AuditCheck{std::move(identity), k, r, std::move(detail), pass});
  };

  for (std::size_t k : ks) {
    for (std::size_t r : rs) {
      const ReceptiveField rf = receptive_extension(k, r);
      std::ostringstream d;

      const ConvSpec single{k, r, 1, 0, 1, 1, false};
      const std::size_t brute = brute_force_receptive_field({single});
      d << "brute=" << brute << " closed=" << rf.e2;
      add("receptive-field-single", k, r, brute == rf.e2, d.str());

      // Two-layer stack: an ordinary k kernel followed by the dilated one.
      const std::vector<ConvSpec> stack{{k, 1, 1, 0, 1, 1, false}, single};
      const std::size_t brute2 = brute_force_receptive_field(stack);
      const std::size_t closed2 = composed_receptive_field(stack);
      d.str("");
      d << "brute=" << brute2 << " composed=" << closed2;
      add("receptive-field-stack", k, r, brute2 == closed2, d.str());

      const std::int64_t product = receptive_extension_product_form(k, r);
      d.str("");
      d << "e2^2-e1^2=" << rf.delta << " product-form=" << product;
      add("extension-area", k, r, rf.delta == product, d.str());

      for (std::size_t depth : depths) {
        const ParamCount pc = param_comparison(k, r, depth, depth);
        const Rational closed = param_ratio_closed_form(k, r);
        d.str("");
        d << "D=" << depth << " p1=" << pc.p1 << " p2=" << pc.p2 << " ratio=" << pc.ratio.num << '/'
          << pc.ratio.den << " closed=" << closed.num << '/' << closed.den;
        add("param-ratio", k, r, pc.ratio == closed, d.str());
        const bool ordered = (k > 1 && r > 1) ? pc.p1 > pc.p2 : pc.p1 == pc.p2;
        add("param-ordering", k, r, ordered, d.str());
      }
    }
  }

  for (std::size_t depth : depths) {
    const BlockConfig cfg{depth, depth, 3, 2, 3, {}};
    const BlockParamCount pc = block_param_count(cfg);
    const std::uint64_t expected = static_cast<std::uint64_t>(depth) * depth * ((25 - 9) + (49 - 9));
    std::ostringstream d;
    d << "D=" << depth << " savings=" << pc.savings << " closed-form=" << pc.closed_form_savings
      << " expected=" << expected << " P_IR=" << pc.undilated_total << " P_DIR=" << pc.total;
    add("block-savings", 3, 0, pc.savings == expected && pc.closed_form_savings == expected, d.str());
    add("block-ordering", 3, 0, pc.undilated_total > pc.total, d.str());
  }
  return report;
}

}  // namespace dirnet

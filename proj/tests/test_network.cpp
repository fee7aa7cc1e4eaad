#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "dirnet/gradcheck.hpp"
#include "dirnet/network.hpp"
#include "oracles.hpp"

using namespace dirnet;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("dirnet_test_network_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

NetworkSpec tiny(std::size_t classes) { return NetworkSpec::scaled(classes, 14, 4, 8, 16, 32); }

template <typename T>
Tensor<T> rand_t(Shape s, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return Tensor<T>::randn(s, rng);
}

}  // namespace

TEST(Network, ShapeTraceMatchesLayerTable) {
  Network<float> net = build<float>(43, 1);
  const auto trace = net.shape_trace({1, 3, 56, 56});
  const std::vector<Shape> want{{1, 64, 56, 56},  {1, 64, 56, 56},  {1, 64, 28, 28}, {1, 64, 28, 28},
                                {1, 128, 28, 28}, {1, 128, 14, 14}, {1, 256, 14, 14}, {1, 256, 7, 7},
                                {1, 256, 7, 7},   {1, 256, 1, 1},   {1, 512, 1, 1},   {1, 43, 1, 1}};
  ASSERT_EQ(trace.size(), 12u);
  for (std::size_t i = 0; i < 12; ++i) EXPECT_EQ(trace[i].second, want[i]) << trace[i].first;
}

TEST(Network, ClassCountChangesOnlyLastRow) {
  Network<float> a = build<float>(43, 1);
  Network<float> b = build<float>(62, 1);
  const auto ta = a.shape_trace({1, 3, 56, 56});
  const auto tb = b.shape_trace({1, 3, 56, 56});
  for (std::size_t i = 0; i + 1 < ta.size(); ++i) EXPECT_EQ(ta[i], tb[i]);
  EXPECT_EQ(tb.back().second, (Shape{1, 62, 1, 1}));
}

TEST(Network, RegistryMatchesClosedForm) {
  for (std::size_t classes : {43, 62}) {
    const ParamAudit audit = network_param_audit(NetworkSpec::standard(classes));
    EXPECT_EQ(audit.registry_total, audit.closed_form_total);
    EXPECT_LT(std::abs(audit.deviation), 0.15);
    EXPECT_NE(audit.report.find("registry total"), std::string::npos);
    EXPECT_EQ(std::count(audit.csv.begin(), audit.csv.end(), '\n'), 13);
  }
  EXPECT_EQ(network_param_audit(NetworkSpec::standard(43)).registry_total, 6284587u);
}

TEST(Network, RejectsWrongInput) {
  Network<float> net(tiny(3), 1);
  EXPECT_THROW(net.forward(Tensor<float>({1, 1, 14, 14}), Mode::Infer), ShapeError);
  EXPECT_THROW(net.forward(Tensor<float>({1, 3, 16, 16}), Mode::Infer), ShapeError);
}

TEST(Network, ProbabilitiesAreNormalized) {
  Network<float> net(tiny(5), 3);
  const auto p = net.forward(rand_t<float>({4, 3, 14, 14}, 4), Mode::Train);
  ASSERT_EQ(p.shape(), (Shape{4, 5, 1, 1}));
  for (std::size_t n = 0; n < 4; ++n) {
    double s = 0;
    for (std::size_t c = 0; c < 5; ++c) s += p.at(n, c, 0, 0);
    EXPECT_NEAR(s, 1.0, 1e-5);
  }
}

TEST(Network, SeedDeterminesInitialisation) {
  Network<float> a(tiny(3), 9), b(tiny(3), 9), c(tiny(3), 10);
  const auto x = rand_t<float>({2, 3, 14, 14}, 1);
  EXPECT_EQ(max_abs_diff(a.forward(x, Mode::Infer), b.forward(x, Mode::Infer)), 0.0f);
  EXPECT_GT(max_abs_diff(a.forward(x, Mode::Infer), c.forward(x, Mode::Infer)), 0.0f);
}

TEST(Network, RecordsNamedActivations) {
  Network<float> net(tiny(3), 2);
  net.record_activations(true);
  net.forward(rand_t<float>({1, 3, 14, 14}, 2), Mode::Infer);
  for (const char* name : {"conv1", "conv2a.F1", "conv2a.R1", "conv2a.sum1", "conv2b.out", "pool1", "conv3a.H",
                           "avgpool", "dense1", "logits", "softmax"}) {
    EXPECT_TRUE(net.activations().count(name)) << name;
  }
  const auto sum = resolve_activation(net.activations(), "conv2a.F1+R1");
  EXPECT_LT(max_abs_diff(sum, net.activations().at("conv2a.sum1")), 1e-6f);
  EXPECT_THROW(resolve_activation(net.activations(), "conv2a.nope"), ConfigError);
}

TEST(Checkpoint, RoundTripRestoresOutputs) {
  const fs::path dir = scratch("roundtrip");
  Network<float> a(tiny(4), 5);
  // Move running moments away from their initial values.
  a.forward(rand_t<float>({4, 3, 14, 14}, 6), Mode::Train);
  save_checkpoint(a, dir / "a.ckpt");
  EXPECT_EQ(checkpoint_num_classes(dir / "a.ckpt"), 4u);

  Network<float> b(tiny(4), 77);
  load_checkpoint_into(b, dir / "a.ckpt");
  const auto x = rand_t<float>({3, 3, 14, 14}, 7);
  EXPECT_EQ(max_abs_diff(a.forward(x, Mode::Infer), b.forward(x, Mode::Infer)), 0.0f);
}

TEST(Checkpoint, StandardNetworkReload) {
  const fs::path dir = scratch("standard");
  Network<float> a = build<float>(8, 11);
  save_checkpoint(a, dir / "s.ckpt");
  Network<float> b = load_checkpoint<float>(dir / "s.ckpt");
  EXPECT_EQ(b.num_classes(), 8u);
  const auto pa = a.params();
  const auto pb = b.params();
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_EQ(max_abs_diff(pa[i]->value, pb[i]->value), 0.0f);
}

TEST(Checkpoint, LayoutHeader) {
  const fs::path dir = scratch("layout");
  Network<float> a(tiny(3), 1);
  save_checkpoint(a, dir / "h.ckpt");
  std::ifstream is(dir / "h.ckpt", std::ios::binary);
  char magic[4];
  std::uint32_t version = 0, classes = 0, count = 0;
  is.read(magic, 4);
  is.read(reinterpret_cast<char*>(&version), 4);
  is.read(reinterpret_cast<char*>(&classes), 4);
  is.read(reinterpret_cast<char*>(&count), 4);
  EXPECT_EQ(std::string(magic, 4), "TRCL");
  EXPECT_EQ(version, kCheckpointVersion);
  EXPECT_EQ(classes, 3u);
  EXPECT_EQ(count, a.params().size() + a.buffers().size());
}

TEST(Checkpoint, MalformedFilesAreFormatErrors) {
  const fs::path dir = scratch("bad");
  Network<float> a(tiny(3), 1);
  save_checkpoint(a, dir / "ok.ckpt");
  std::string bytes;
  {
    std::ifstream is(dir / "ok.ckpt", std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(is), {});
  }
  auto write = [&](const std::string& name, const std::string& content) {
    std::ofstream(dir / name, std::ios::binary) << content;
    return dir / name;
  };
  std::string magic = bytes;
  magic[0] = 'X';
  EXPECT_THROW(load_checkpoint_into(a, write("magic.ckpt", magic)), FormatError);
  std::string version = bytes;
  version[4] = 9;
  EXPECT_THROW(load_checkpoint_into(a, write("version.ckpt", version)), FormatError);
  EXPECT_THROW(load_checkpoint_into(a, write("short.ckpt", bytes.substr(0, bytes.size() / 2))), FormatError);
  Network<float> other(tiny(5), 1);
  EXPECT_THROW(load_checkpoint_into(other, dir / "ok.ckpt"), FormatError);
  Network<float> wider(NetworkSpec::scaled(3, 14, 4, 8, 8, 32), 1);
  EXPECT_THROW(load_checkpoint_into(wider, dir / "ok.ckpt"), FormatError);
  EXPECT_THROW(load_checkpoint_into(a, dir / "missing.ckpt"), DataError);
}

TEST(FeatureMaps, TiledGridGeometry) {
  Tensor<float> maps({1, 6, 4, 5});
  for (std::size_t c = 0; c < 6; ++c)
    for (std::size_t i = 0; i < 20; ++i) maps.plane(0, c)[i] = static_cast<float>(i * (c + 1));
  maps.plane(0, 5)[0] = 0;
  std::size_t tiles = 0;
  const GrayImage img = tile_feature_maps(maps, &tiles);
  EXPECT_EQ(tiles, 6u);
  EXPECT_EQ(img.width, 3u * 5 + 2);
  EXPECT_EQ(img.height, 2u * 4 + 1);
  EXPECT_EQ(img.pixels[0], 0);
  EXPECT_EQ(img.pixels[4], 54);  // round(255 * 4 / 19)
}

TEST(FeatureMaps, ConstantMapIsMidGrey) {
  Tensor<float> maps({1, 1, 3, 3}, 2.5f);
  const GrayImage img = tile_feature_maps(maps);
  for (auto px : img.pixels) EXPECT_EQ(px, 128);
}

TEST(FeatureMaps, DumpWritesOneFilePerName) {
  const fs::path dir = scratch("dump");
  Network<float> net(tiny(3), 4);
  const auto paths = dump_feature_maps(net, rand_t<float>({1, 3, 14, 14}, 5),
                                       {"conv2a.F2", "conv2a.R1", "conv2a.sum1", "conv2a.F2+R1"}, dir);
  ASSERT_EQ(paths.size(), 4u);
  for (const auto& p : paths) {
    EXPECT_TRUE(fs::exists(p)) << p;
    EXPECT_GT(fs::file_size(p), 0u);
  }
  EXPECT_THROW(dump_feature_maps(net, rand_t<float>({1, 3, 14, 14}, 5), {"nowhere"}, dir), ConfigError);
}

TEST(GradCheckNetwork, ScaledTopology) {
  Network<double> net(tiny(3), 21);
  GradCheckOptions o;
  o.max_probes_per_tensor = 12;
  o.seed = 3;
  const auto r = backward_check(net, rand_t<double>({2, 3, 14, 14}, 22), o, "network");
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst;
  EXPECT_GT(r.probes, 500u);
  EXPECT_LT(r.nonsmooth_max_rel_error, 1e-4) << r.nonsmooth_worst;
  EXPECT_LE(r.nonsmooth * 10, r.probes);
}

#include "dirnet/network.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <sstream>

namespace dirnet {

template <typename T>
Network<T>::Network(NetworkSpec spec, std::uint64_t seed) : spec_(std::move(spec)) {
  if (spec_.num_classes < 2) throw ConfigError("a classifier needs at least 2 classes");
  std::mt19937_64 rng(seed);
  Shape cur{1, spec_.in_channels, spec_.in_extent, spec_.in_extent};
  const auto shapes = closed_form_layers(spec_);
  for (std::size_t i = 0; i < spec_.layers.size(); ++i) {
    const LayerSpec& l = spec_.layers[i];
    Stage st{i, nullptr, nullptr, nullptr};
    switch (l.kind) {
      case LayerKind::Conv: {
        auto conv = std::make_unique<Conv2d<T>>(l.name, ConvSpec{l.k, 1, 1, (l.k - 1) / 2, cur.c,
                                                                 l.units, l.bias});
        conv->init(rng);
        st.module = std::move(conv);
        break;
      }
      case LayerKind::Block: {
        auto blk = make_block<T>(l.block, l.name, BlockConfig{cur.c, l.units, l.k, 2, 3, spec_.bn});
        blk->init(rng);
        st.block = blk.get();
        st.module = std::move(blk);
        break;
      }
      case LayerKind::MaxPool:
        st.module = std::make_unique<MaxPool2d<T>>(PoolSpec{3, 2, 1});
        break;
      case LayerKind::AvgPool:
        st.module = std::make_unique<AvgPool2d<T>>(l.k);
        break;
      case LayerKind::Dense: {
        auto d = std::make_unique<Dense<T>>(l.name, cur.sample(), l.units);
        d->init(rng);
        st.module = std::move(d);
        if (l.relu) st.relu = std::make_unique<ReLU<T>>();
        break;
      }
    }
    cur = shapes[i].output;
    stages_.push_back(std::move(st));
  }
}

template <typename T>
void Network<T>::check_input(const Shape& s) const {
  if (s.c != spec_.in_channels || s.h != spec_.in_extent || s.w != spec_.in_extent) {
    throw ShapeError("network expects input (n," + std::to_string(spec_.in_channels) + "," +
                     std::to_string(spec_.in_extent) + "," + std::to_string(spec_.in_extent) +
                     "), got " + s.str());
  }
}

template <typename T>
void Network<T>::record_activations(bool on) {
  recording_ = on;
  acts_.clear();
  for (auto& st : stages_) {
    if (st.block) st.block->set_recorder(on ? &acts_ : nullptr);
  }
}

template <typename T>
Tensor<T> Network<T>::forward(const Tensor<T>& x, Mode mode) {
  check_input(x.shape());
  if (recording_) acts_.clear();
  Tensor<T> cur = x;
  for (auto& st : stages_) {
    cur = st.module->forward(cur, mode);
    if (st.relu) cur = st.relu->forward(cur, mode);
    if (recording_) acts_[spec_.layers[st.layer].name] = cur;
  }
  logits_ = cur;
  Tensor<T> probs = softmax_.forward(cur, mode);
  if (recording_) {
    acts_["logits"] = logits_;
    acts_["softmax"] = probs;
  }
  return probs;
}

template <typename T>
Tensor<T> Network<T>::backward(const Tensor<T>& grad_probs) {
  Tensor<T> g = softmax_.backward(grad_probs);
  for (auto it = stages_.rbegin(); it != stages_.rend(); ++it) {
    if (it->relu) g = it->relu->backward(g);
    g = it->module->backward(g);
  }
  return g;
}

template <typename T>
void Network<T>::collect_params(std::vector<Param<T>*>& out) {
  for (auto& st : stages_) st.module->collect_params(out);
}

template <typename T>
void Network<T>::collect_buffers(std::vector<Buffer<T>*>& out) {
  for (auto& st : stages_) st.module->collect_buffers(out);
}

template <typename T>
std::vector<std::pair<std::string, Shape>> Network<T>::shape_trace(const Shape& input) {
  check_input(input);
  std::vector<std::pair<std::string, Shape>> rows;
  Tensor<T> cur(input);
  for (auto& st : stages_) {
    cur = st.module->forward(cur, Mode::Infer);
    if (st.relu) cur = st.relu->forward(cur, Mode::Infer);
    const std::string& row = spec_.layers[st.layer].row;
    if (rows.empty() || rows.back().first != row) rows.emplace_back(row, cur.shape());
    rows.back().second = cur.shape();
  }
  return rows;
}

template <typename T>
std::vector<Block<T>*> Network<T>::blocks() {
  std::vector<Block<T>*> out;
  for (auto& st : stages_)
    if (st.block) out.push_back(st.block);
  return out;
}

template <typename T>
Network<T> build(std::size_t num_classes, std::uint64_t seed) {
  return Network<T>(NetworkSpec::standard(num_classes), seed);
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kMagic[4] = {'T', 'R', 'C', 'L'};

void put_u32(std::ostream& os, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                              static_cast<unsigned char>((v >> 8) & 0xff),
                              static_cast<unsigned char>((v >> 16) & 0xff),
                              static_cast<unsigned char>((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw FormatError("checkpoint truncated");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

std::uint32_t to_u32(std::size_t v, const char* what) {
  if (v > std::numeric_limits<std::uint32_t>::max()) {
    throw FormatError(std::string(what) + " does not fit the checkpoint format");
  }
  return static_cast<std::uint32_t>(v);
}

struct Entry {
  Shape shape;
  std::vector<float> values;
};

struct CheckpointFile {
  std::uint32_t num_classes = 0;
  std::vector<std::pair<std::string, Entry>> entries;
};

CheckpointFile read_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open checkpoint " + path.string());
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) {
    throw FormatError(path.string() + " is not a checkpoint (bad magic)");
  }
  const std::uint32_t version = get_u32(is);
  if (version != kCheckpointVersion) {
    throw FormatError("checkpoint version " + std::to_string(version) + " unsupported (expected " +
                      std::to_string(kCheckpointVersion) + ")");
  }
  CheckpointFile f;
  f.num_classes = get_u32(is);
  const std::uint32_t count = get_u32(is);
  for (std::uint32_t e = 0; e < count; ++e) {
    const std::uint32_t len = get_u32(is);
    if (len > 4096) throw FormatError("checkpoint entry name too long");
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) throw FormatError("checkpoint truncated");
    Entry entry;
    entry.shape.n = get_u32(is);
    entry.shape.c = get_u32(is);
    entry.shape.h = get_u32(is);
    entry.shape.w = get_u32(is);
    checked_shape(entry.shape.n, entry.shape.c, entry.shape.h, entry.shape.w);
    entry.values.resize(entry.shape.numel());
    for (float& v : entry.values) v = std::bit_cast<float>(get_u32(is));
    f.entries.emplace_back(std::move(name), std::move(entry));
  }
  return f;
}

}  // namespace

template <typename T>
void save_checkpoint(Network<T>& net, const std::filesystem::path& path) {
  std::vector<std::pair<const std::string*, const Tensor<T>*>> entries;
  for (auto* p : net.params()) entries.emplace_back(&p->name, &p->value);
  for (auto* b : net.buffers()) entries.emplace_back(&b->name, &b->value);

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot write checkpoint " + path.string());
  os.write(kMagic, 4);
  put_u32(os, kCheckpointVersion);
  put_u32(os, to_u32(net.num_classes(), "class count"));
  put_u32(os, to_u32(entries.size(), "entry count"));
  for (const auto& [name, t] : entries) {
    put_u32(os, to_u32(name->size(), "name length"));
    os.write(name->data(), static_cast<std::streamsize>(name->size()));
    const Shape& s = t->shape();
    put_u32(os, to_u32(s.n, "shape"));
    put_u32(os, to_u32(s.c, "shape"));
    put_u32(os, to_u32(s.h, "shape"));
    put_u32(os, to_u32(s.w, "shape"));
    for (T v : t->data()) put_u32(os, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  }
  if (!os) throw DataError("failed writing checkpoint " + path.string());
}

template <typename T>
void load_checkpoint_into(Network<T>& net, const std::filesystem::path& path) {
  CheckpointFile f = read_checkpoint(path);
  if (f.num_classes != net.num_classes()) {
    throw FormatError("checkpoint has " + std::to_string(f.num_classes) +
                      " classes, network has " + std::to_string(net.num_classes()));
  }
  std::map<std::string, Entry*> by_name;
  for (auto& [name, entry] : f.entries) by_name[name] = &entry;

  std::size_t used = 0;
  auto assign = [&](const std::string& name, Tensor<T>& dst) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw FormatError("checkpoint lacks entry " + name);
    if (it->second->shape != dst.shape()) {
      throw FormatError("checkpoint entry " + name + " has shape " + it->second->shape.str() + ", network expects " +
                        dst.shape().str());
    }
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(it->second->values[i]);
    ++used;
  };
  for (auto* p : net.params()) assign(p->name, p->value);
  for (auto* b : net.buffers()) assign(b->name, b->value);
  if (used != f.entries.size()) {
    throw FormatError("checkpoint holds " + std::to_string(f.entries.size()) +
                      " entries, network uses " + std::to_string(used));
  }
}

template <typename T>
Network<T> load_checkpoint(const std::filesystem::path& path) {
  Network<T> net = build<T>(checkpoint_num_classes(path));
  load_checkpoint_into(net, path);
  return net;
}

std::uint32_t checkpoint_num_classes(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open checkpoint " + path.string());
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) {
    throw FormatError(path.string() + " is not a checkpoint (bad magic)");
  }
  const std::uint32_t version = get_u32(is);
  if (version != kCheckpointVersion) {
    throw FormatError("checkpoint version " + std::to_string(version) + " unsupported");
  }
  return get_u32(is);
}

// ---------------------------------------------------------------------------
// Audit

namespace {

std::string hwc(const Shape& s) {
  if (s.h == 1 && s.w == 1 && s.c > 1) return std::to_string(s.c);
  return std::to_string(s.h) + "x" + std::to_string(s.w) + "x" + std::to_string(s.c);
}

}  // namespace

ParamAudit network_param_audit(const NetworkSpec& spec) {
  ParamAudit audit;
  audit.rows = closed_form_rows(spec);
  audit.closed_form_total = closed_form_total(spec);
  {
    Network<float> net(spec, 0);
    audit.registry_total = net.param_count();
  }
  if (audit.closed_form_total != audit.registry_total) {
    throw Error("parameter audit inconsistency: closed form " +
                std::to_string(audit.closed_form_total) + " vs registry " +
                std::to_string(audit.registry_total));
  }
  const auto ref = static_cast<double>(kReferenceParamCount);
  audit.deviation = (static_cast<double>(audit.closed_form_total) - ref) / ref;

  std::ostringstream rep;
  rep << std::left << std::setw(10) << "layer" << std::setw(14) << "output" << std::right
      << std::setw(10) << "params" << std::setw(10) << "conv" << std::setw(8) << "bn"
      << std::setw(8) << "proj" << std::setw(9) << "dense" << std::setw(7) << "bias" << '\n';
  std::ostringstream csv;
  csv << "row,output,params,conv_weights,batchnorm,projection,dense,bias\n";
  std::uint64_t conv = 0, bn = 0, proj = 0, dense = 0, bias = 0;
  for (const auto& r : audit.rows) {
    rep << std::left << std::setw(10) << r.row << std::setw(14) << hwc(r.output) << std::right
        << std::setw(10) << r.params << std::setw(10) << r.conv_weights << std::setw(8)
        << r.batchnorm << std::setw(8) << r.projection << std::setw(9) << r.dense << std::setw(7)
        << r.bias << '\n';
    csv << '"' << r.row << "\"," << hwc(r.output) << ',' << r.params << ',' << r.conv_weights
        << ',' << r.batchnorm << ',' << r.projection << ',' << r.dense << ',' << r.bias << '\n';
    conv += r.conv_weights;
    bn += r.batchnorm;
    proj += r.projection;
    dense += r.dense;
    bias += r.bias;
  }
  rep << "\nclosed-form total : " << audit.closed_form_total << '\n'
      << "registry total    : " << audit.registry_total << '\n'
      << "reference total   : " << kReferenceParamCount << '\n'
      << "deviation         : " << std::showpos << std::fixed << std::setprecision(2)
      << audit.deviation * 100.0 << std::noshowpos << " %\n"
      << "\nconvention contributions:\n"
      << "  conv weights (3x3 and dilated 3x3, no bias) : " << conv << '\n'
      << "  batch-norm gamma+beta (one per composite)    : " << bn << '\n'
      << "  1x1 identity projections (channel changes)   : " << proj << '\n'
      << "  dense weights                                : " << dense << '\n'
      << "  biases (stem conv and dense layers)          : " << bias << '\n';
  audit.report = rep.str();
  audit.csv = csv.str();
  return audit;
}

// ---------------------------------------------------------------------------
// Feature maps

template <typename T>
Tensor<T> resolve_activation(const ActivationMap<T>& acts, const std::string& expr) {
  std::vector<std::string> terms;
  std::stringstream ss(expr);
  for (std::string t; std::getline(ss, t, '+');) {
    if (t.empty()) throw ConfigError("empty term in activation name '" + expr + "'");
    terms.push_back(t);
  }
  if (terms.empty()) throw ConfigError("empty activation name");
  const auto dot = terms.front().rfind('.');
  const std::string prefix = dot == std::string::npos ? "" : terms.front().substr(0, dot + 1);

  auto lookup = [&](const std::string& name) -> const Tensor<T>& {
    auto it = acts.find(name);
    if (it == acts.end() && name.find('.') == std::string::npos) it = acts.find(prefix + name);
    if (it == acts.end()) throw ConfigError("unknown layer name '" + name + "'");
    return it->second;
  };
  Tensor<T> out = lookup(terms.front());
  for (std::size_t i = 1; i < terms.size(); ++i) {
    const Tensor<T>& t = lookup(terms[i]);
    require_same_shape(t.shape(), out.shape(), "activation sum '" + expr + "'");
    add_inplace(out, t);
  }
  return out;
}

template <typename T>
GrayImage tile_feature_maps(const Tensor<T>& maps, std::size_t* tiles) {
  const Shape& s = maps.shape();
  const std::size_t count = s.c;
  const auto cols = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(count))));
  const std::size_t rows = (count + cols - 1) / cols;
  GrayImage img;
  img.width = cols * s.w + (cols - 1);
  img.height = rows * s.h + (rows - 1);
  img.pixels.assign(img.width * img.height, 0);
  for (std::size_t c = 0; c < count; ++c) {
    const T* plane = maps.plane(0, c);
    const auto [lo_it, hi_it] = std::minmax_element(plane, plane + s.plane());
    const double lo = *lo_it;
    const double hi = *hi_it;
    const double range = hi - lo;
    const std::size_t ox = (c % cols) * (s.w + 1);
    const std::size_t oy = (c / cols) * (s.h + 1);
    for (std::size_t y = 0; y < s.h; ++y) {
      for (std::size_t x = 0; x < s.w; ++x) {
        double v = 128.0;
        if (range > 0.0 && std::isfinite(range)) v = 255.0 * (plane[y * s.w + x] - lo) / range;
        img.pixels[(oy + y) * img.width + ox + x] =
            static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
      }
    }
  }
  if (tiles) *tiles = count;
  return img;
}

void write_pgm(const GrayImage& img, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot write " + path.string());
  os << "P5\n" << img.width << ' ' << img.height << "\n255\n";
  os.write(reinterpret_cast<const char*>(img.pixels.data()),
           static_cast<std::streamsize>(img.pixels.size()));
  if (!os) throw DataError("failed writing " + path.string());
}

template <typename T>
std::vector<std::filesystem::path> dump_feature_maps(Network<T>& net, const Tensor<T>& x,
                                                     const std::vector<std::string>& names,
                                                     const std::filesystem::path& out_dir) {
  const Tensor<T> first = x.slice_batch(0, 1);
  net.record_activations(true);
  net.forward(first, Mode::Infer);
  // Resolve every name before writing anything.
  std::vector<Tensor<T>> maps;
  for (const auto& n : names) maps.push_back(resolve_activation(net.activations(), n));
  net.record_activations(false);

  std::filesystem::create_directories(out_dir);
  std::vector<std::filesystem::path> written;
  for (std::size_t i = 0; i < names.size(); ++i) {
    std::string file = names[i];
    for (char& ch : file)
      if (ch == '+' || ch == '/' || ch == '\\') ch = '_';
    const auto path = out_dir / (file + ".pgm");
    write_pgm(tile_feature_maps(maps[i]), path);
    written.push_back(path);
  }
  return written;
}

#define DIRNET_INSTANTIATE(T)                                                               \
  template class Network<T>;                                                                \
  template Network<T> build<T>(std::size_t, std::uint64_t);                                 \
  template void save_checkpoint(Network<T>&, const std::filesystem::path&);                 \
  template Network<T> load_checkpoint<T>(const std::filesystem::path&);                     \
  template void load_checkpoint_into(Network<T>&, const std::filesystem::path&);            \
  template Tensor<T> resolve_activation(const ActivationMap<T>&, const std::string&);       \
  template GrayImage tile_feature_maps(const Tensor<T>&, std::size_t*);                     \
  template std::vector<std::filesystem::path> dump_feature_maps(                            \
      Network<T>&, const Tensor<T>&, const std::vector<std::string>&,                       \
      const std::filesystem::path&);

DIRNET_INSTANTIATE(float)
DIRNET_INSTANTIATE(double)

#undef DIRNET_INSTANTIATE

}  // namespace dirnet

#include <zlib.h>

#include <cmath>
#include <numbers>

#include "dfx/app.hpp"

namespace dfx {

namespace {

constexpr std::uint32_t kIdxLabels = 0x00000801;
constexpr std::uint32_t kIdxImages = 0x00000803;

// Streams for Philox draws; distinct from rounding and init streams.
constexpr std::uint64_t kCenterStream = 0xDA7A'0000'0000'0001ULL;
constexpr std::uint64_t kTrainStream = 0xDA7A'0000'0000'0002ULL;
constexpr std::uint64_t kTestStream = 0xDA7A'0000'0000'0003ULL;
constexpr std::uint64_t kLabelStream = 0xDA7A'0000'0000'0004ULL;
constexpr std::uint64_t kShuffleStream = 0x5EED'0000'0000'0000ULL;

std::vector<unsigned char> read_all(const std::filesystem::path& path) {
  gzFile f = gzopen(path.string().c_str(), "rb");
  if (!f) throw DfxError(ErrorCode::kDatasetNotFound, "cannot open " + path.string());
  std::vector<unsigned char> out;
  unsigned char buf[1 << 16];
  int n = 0;
  while ((n = gzread(f, buf, sizeof buf)) > 0) out.insert(out.end(), buf, buf + n);
  const bool failed = n < 0;
  gzclose(f);
  if (failed) throw DfxError(ErrorCode::kMalformedIdx, "corrupt compressed stream in " + path.string());
  return out;
}

std::uint32_t be32(const std::vector<unsigned char>& b, std::size_t at, const std::filesystem::path& path) {
  if (at + 4 > b.size()) throw DfxError(ErrorCode::kMalformedIdx, "truncated header in " + path.string());
  return (std::uint32_t{b[at]} << 24) | (std::uint32_t{b[at + 1]} << 16) | (std::uint32_t{b[at + 2]} << 8) | b[at + 3];
}

double uniform(std::uint64_t seed, std::uint64_t stream, std::uint64_t index) {
  return (static_cast<double>(RoundingContext::draw(seed, stream, index) >> 11) + 0.5) * 0x1.0p-53;
}

double gaussian(std::uint64_t seed, std::uint64_t stream, std::uint64_t index) {
  const double u1 = uniform(seed, stream, 2 * index), u2 = uniform(seed, stream, 2 * index + 1);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

Dataset blobs(const std::vector<std::vector<double>>& centers, Index n, const Shape& sample_shape, float noise,
              std::uint64_t seed, std::uint64_t stream) {
  const Index d = numel(sample_shape), classes = static_cast<Index>(centers.size());
  Shape shape{n};
  shape.insert(shape.end(), sample_shape.begin(), sample_shape.end());
  Dataset out{FloatTensor(shape), std::vector<int>(static_cast<std::size_t>(n)), classes};
  for (Index i = 0; i < n; ++i) {
    const auto c = static_cast<int>(RoundingContext::draw(seed, stream ^ kLabelStream, static_cast<std::uint64_t>(i)) %
                                    static_cast<std::uint64_t>(classes));
    out.labels[static_cast<std::size_t>(i)] = c;
    for (Index j = 0; j < d; ++j)
      out.images[i * d + j] = static_cast<float>(
          centers[static_cast<std::size_t>(c)][static_cast<std::size_t>(j)] +
          noise * gaussian(seed, stream, static_cast<std::uint64_t>(i * d + j)));
  }
  return out;
}

std::filesystem::path find_file(const std::filesystem::path& dir, const std::string& name) {
  for (const auto& candidate : {dir / name, dir / (name + ".gz")})
    if (std::filesystem::exists(candidate)) return candidate;
  throw DfxError(ErrorCode::kDatasetNotFound, "missing " + (dir / name).string() + "[.gz]");
}

}  // namespace

FloatTensor Dataset::gather(std::span<const Index> indices) const {
  Shape shape = sample_shape();
  const Index d = numel(shape);
  shape.insert(shape.begin(), static_cast<Index>(indices.size()));
  FloatTensor out(shape);
  for (std::size_t r = 0; r < indices.size(); ++r)
    out.data().segment(static_cast<Index>(r) * d, d) = images.data().segment(indices[r] * d, d);
  return out;
}

Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels) {
  const std::vector<unsigned char> ib = read_all(images), lb = read_all(labels);
  if (be32(ib, 0, images) != kIdxImages) throw DfxError(ErrorCode::kMalformedIdx, "bad image magic in " + images.string());
  if (be32(lb, 0, labels) != kIdxLabels) throw DfxError(ErrorCode::kMalformedIdx, "bad label magic in " + labels.string());
  const Index n = be32(ib, 4, images), rows = be32(ib, 8, images), cols = be32(ib, 12, images);
  const Index nl = be32(lb, 4, labels);
  if (static_cast<Index>(ib.size()) != 16 + n * rows * cols)
    throw DfxError(ErrorCode::kMalformedIdx, "image payload size mismatch in " + images.string());
  if (static_cast<Index>(lb.size()) != 8 + nl)
    throw DfxError(ErrorCode::kMalformedIdx, "label payload size mismatch in " + labels.string());
  if (nl != n)
    throw DfxError(ErrorCode::kDimMismatch, std::to_string(n) + " images but " + std::to_string(nl) + " labels");

  Dataset out{FloatTensor({n, rows, cols}), std::vector<int>(static_cast<std::size_t>(n)), 0};
  for (Index i = 0; i < n * rows * cols; ++i) out.images[i] = static_cast<float>(ib[static_cast<std::size_t>(16 + i)]) / 255.0f;
  int max_label = -1;
  for (Index i = 0; i < n; ++i) {
    const int y = lb[static_cast<std::size_t>(8 + i)];
    out.labels[static_cast<std::size_t>(i)] = y;
    max_label = std::max(max_label, y);
  }
  out.classes = max_label + 1;
  return out;
}

DataSplit make_synthetic(const RunConfig& config, const Shape& sample_shape) {
  const Index d = numel(sample_shape);
  // Unit-norm random centers scaled by the margin.
  std::vector<std::vector<double>> centers(static_cast<std::size_t>(config.synthetic_classes));
  for (std::size_t c = 0; c < centers.size(); ++c) {
    auto& v = centers[c];
    v.resize(static_cast<std::size_t>(d));
    double norm = 0.0;
    for (Index j = 0; j < d; ++j) {
      v[static_cast<std::size_t>(j)] = gaussian(config.seed, kCenterStream, c * static_cast<std::uint64_t>(d) + j);
      norm += v[static_cast<std::size_t>(j)] * v[static_cast<std::size_t>(j)];
    }
    for (double& x : v) x *= config.synthetic_margin / std::sqrt(norm);
  }
  return DataSplit{blobs(centers, config.synthetic_train, sample_shape, config.synthetic_noise, config.seed, kTrainStream),
                   blobs(centers, config.synthetic_test, sample_shape, config.synthetic_noise, config.seed, kTestStream)};
}

DataSplit load_dataset(const RunConfig& config) {
  DataSplit split;
  if (config.dataset == "synthetic") {
    split = make_synthetic(config, {1, 28, 28});
  } else if (config.dataset == "idx") {
    const std::filesystem::path dir = config.data_dir;
    if (!std::filesystem::is_directory(dir)) throw DfxError(ErrorCode::kDatasetNotFound, "no directory " + dir.string());
    split.train = load_idx(find_file(dir, "train-images-idx3-ubyte"), find_file(dir, "train-labels-idx1-ubyte"));
    split.test = load_idx(find_file(dir, "t10k-images-idx3-ubyte"), find_file(dir, "t10k-labels-idx1-ubyte"));
    split.test.classes = split.train.classes = std::max(split.train.classes, split.test.classes);
    for (Dataset* d : {&split.train, &split.test})
      d->images = d->images.reshaped({d->images.dim(0), 1, d->images.dim(1), d->images.dim(2)});
  } else {
    throw DfxError(ErrorCode::kConfigInvalid, "unknown dataset " + config.dataset);
  }
  if (config.model == "mlp")
    for (Dataset* d : {&split.train, &split.test})
      d->images = d->images.reshaped({d->images.dim(0), numel(d->sample_shape())});
  return split;
}

std::vector<Index> epoch_order(Index n, std::uint64_t seed, int epoch) {
  std::vector<Index> order(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
  for (Index i = n - 1; i > 0; --i) {
    const auto j = static_cast<Index>(RoundingContext::draw(seed, kShuffleStream + static_cast<std::uint64_t>(epoch),
                                                            static_cast<std::uint64_t>(i)) %
                                      static_cast<std::uint64_t>(i + 1));
    std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
  }
  return order;
}

std::uint64_t order_digest(std::span<const Index> order) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (Index v : order)
    for (int b = 0; b < 8; ++b) {
      h ^= (static_cast<std::uint64_t>(v) >> (8 * b)) & 0xFF;
      h *= 0x100000001b3ULL;
    }
  return h;
}

}  // namespace dfx

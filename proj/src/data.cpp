#include "dsnet/data.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <utility>

namespace dsnet {

namespace {

constexpr double kPi = 3.14159265358979323846;

// Reads one unsigned header field, skipping whitespace and '#' comments.
// Leaves the terminating separator in the stream.
std::size_t parse_header_uint(std::istream& in, const std::string& path) {
  int ch = in.get();
  for (;;) {
    if (ch == EOF) throw DataError(path + ": truncated header");
    if (ch == '#') {
      do {
        ch = in.get();
      } while (ch != EOF && ch != '\n');
      continue;
    }
    if (std::isspace(static_cast<unsigned char>(ch))) {
      ch = in.get();
      continue;
    }
    break;
  }
  if (!std::isdigit(static_cast<unsigned char>(ch)))
    throw DataError(path + ": malformed header");
  std::size_t v = 0;
  while (ch != EOF && std::isdigit(static_cast<unsigned char>(ch))) {
    v = v * 10 + static_cast<std::size_t>(ch - '0');
    if (v > 1000000000u) throw DataError(path + ": header value out of range");
    ch = in.get();
  }
  if (ch != EOF) in.unget();
  return v;
}

bool has_image_ext(const std::filesystem::path& p) {
  const std::string ext = p.extension().string();
  return ext == ".ppm" || ext == ".pgm" || ext == ".pnm";
}

}  // namespace

Image read_pnm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(path + ": cannot open");

  const int m0 = in.get();
  const int m1 = in.get();
  if (m0 != 'P' || (m1 != '5' && m1 != '6'))
    throw DataError(path + ": not a binary PPM/PGM (P6/P5)");
  const std::size_t channels = (m1 == '6') ? 3 : 1;

  const std::size_t w = parse_header_uint(in, path);
  const std::size_t h = parse_header_uint(in, path);
  const std::size_t maxval = parse_header_uint(in, path);
  if (w == 0 || h == 0) throw DataError(path + ": zero image extent");
  if (maxval == 0 || maxval > 65535)
    throw DataError(path + ": unsupported maxval");

  const int sep = in.get();
  if (sep == EOF || !std::isspace(static_cast<unsigned char>(sep)))
    throw DataError(path + ": malformed header");

  const std::size_t samples = w * h * channels;
  const std::size_t bytes_per = maxval > 255 ? 2 : 1;
  std::vector<unsigned char> raw(samples * bytes_per);
  in.read(reinterpret_cast<char*>(raw.data()),
          static_cast<std::streamsize>(raw.size()));
  if (static_cast<std::size_t>(in.gcount()) != raw.size())
    throw DataError(path + ": truncated pixel data");

  Image img;
  img.channels = channels;
  img.height = h;
  img.width = w;
  img.pix.resize(samples);
  const double inv = 1.0 / static_cast<double>(maxval);
  // file order is row-major interleaved; planes are CHW
  for (std::size_t i = 0; i < w * h; ++i) {
    for (std::size_t c = 0; c < channels; ++c) {
      const std::size_t at = (i * channels + c) * bytes_per;
      std::size_t s = raw[at];
      if (bytes_per == 2) s = (s << 8) | raw[at + 1];
      if (s > maxval) throw DataError(path + ": sample exceeds maxval");
      img.pix[c * w * h + i] = static_cast<double>(s) * inv;
    }
  }
  return img;
}

void write_ppm(const std::string& path, const Image& img) {
  if (img.channels != 1 && img.channels != 3)
    throw ConfigError("write_ppm: image must have 1 or 3 channels");
  if (img.pix.size() != img.channels * img.height * img.width)
    throw ConfigError("write_ppm: pixel buffer does not match extents");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError(path + ": cannot open for writing");
  out << "P6\n" << img.width << " " << img.height << "\n255\n";
  const std::size_t plane = img.height * img.width;
  std::vector<unsigned char> row(img.width * 3);
  for (std::size_t y = 0; y < img.height; ++y) {
    for (std::size_t x = 0; x < img.width; ++x) {
      for (std::size_t c = 0; c < 3; ++c) {
        const std::size_t src_c = img.channels == 3 ? c : 0;
        double v = img.pix[src_c * plane + y * img.width + x];
        long q = std::lround(v * 255.0);
        q = std::clamp(q, 0L, 255L);
        row[x * 3 + c] = static_cast<unsigned char>(q);
      }
    }
    out.write(reinterpret_cast<const char*>(row.data()),
              static_cast<std::streamsize>(row.size()));
  }
  if (!out) throw DataError(path + ": write failed");
}

Image ensure_rgb(Image img) {
  if (img.channels == 3) return img;
  if (img.channels != 1)
    throw DataError("ensure_rgb: expected 1 or 3 channels");
  const std::size_t plane = img.height * img.width;
  img.pix.resize(3 * plane);
  std::copy_n(img.pix.data(), plane, img.pix.data() + plane);
  std::copy_n(img.pix.data(), plane, img.pix.data() + 2 * plane);
  img.channels = 3;
  return img;
}

Image resize_bilinear(const Image& img, std::size_t out_h, std::size_t out_w) {
  if (out_h == 0 || out_w == 0)
    throw ConfigError("resize_bilinear: output extents must be positive");
  if (out_h == img.height && out_w == img.width) return img;

  Image out;
  out.channels = img.channels;
  out.height = out_h;
  out.width = out_w;
  out.pix.resize(img.channels * out_h * out_w);

  const std::size_t ih = img.height, iw = img.width;
  const double sy_scale = static_cast<double>(ih) / static_cast<double>(out_h);
  const double sx_scale = static_cast<double>(iw) / static_cast<double>(out_w);
  for (std::size_t c = 0; c < img.channels; ++c) {
    const double* src = img.pix.data() + c * ih * iw;
    double* dst = out.pix.data() + c * out_h * out_w;
    for (std::size_t y = 0; y < out_h; ++y) {
      double sy = (static_cast<double>(y) + 0.5) * sy_scale - 0.5;
      sy = std::clamp(sy, 0.0, static_cast<double>(ih - 1));
      const std::size_t y0 = static_cast<std::size_t>(sy);
      const std::size_t y1 = std::min(y0 + 1, ih - 1);
      const double fy = sy - static_cast<double>(y0);
      for (std::size_t x = 0; x < out_w; ++x) {
        double sx = (static_cast<double>(x) + 0.5) * sx_scale - 0.5;
        sx = std::clamp(sx, 0.0, static_cast<double>(iw - 1));
        const std::size_t x0 = static_cast<std::size_t>(sx);
        const std::size_t x1 = std::min(x0 + 1, iw - 1);
        const double fx = sx - static_cast<double>(x0);
        const double top =
            (1.0 - fx) * src[y0 * iw + x0] + fx * src[y0 * iw + x1];
        const double bot =
            (1.0 - fx) * src[y1 * iw + x0] + fx * src[y1 * iw + x1];
        dst[y * out_w + x] = (1.0 - fy) * top + fy * bot;
      }
    }
  }
  return out;
}

Dataset load_dataset(const std::string& root, std::size_t image_size,
                     bool skip_bad) {
  namespace fs = std::filesystem;
  if (image_size == 0)
    throw ConfigError("load_dataset: image_size must be positive");
  std::error_code ec;
  if (!fs::is_directory(root, ec))
    throw DataError(root + ": not a directory");

  std::vector<std::string> classes;
  for (const auto& entry : fs::directory_iterator(root)) {
    if (entry.is_directory()) classes.push_back(entry.path().filename().string());
  }
  std::sort(classes.begin(), classes.end());
  if (classes.empty()) throw DataError(root + ": no class directories");

  Dataset ds;
  ds.class_names = classes;
  for (std::size_t k = 0; k < classes.size(); ++k) {
    const fs::path dir = fs::path(root) / classes[k];
    std::vector<std::string> files;
    for (const auto& entry : fs::directory_iterator(dir)) {
      if (entry.is_regular_file() && has_image_ext(entry.path()))
        files.push_back(entry.path().filename().string());
    }
    std::sort(files.begin(), files.end());

    const std::size_t before = ds.samples.size();
    for (const auto& name : files) {
      Image img;
      try {
        img = read_pnm((dir / name).string());
      } catch (const DataError&) {
        if (skip_bad) continue;
        throw;
      }
      img = resize_bilinear(ensure_rgb(std::move(img)), image_size, image_size);
      LabeledSample s;
      s.pixels = Tensor::from({3, image_size, image_size}, std::move(img.pix));
      s.label = k;
      s.source_id = classes[k] + "/" + name;
      ds.samples.push_back(std::move(s));
    }
    if (ds.samples.size() == before)
      throw DataError("class '" + classes[k] + "': no readable images");
  }
  return ds;
}

void write_corpus(const std::string& root, const Dataset& ds) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(root, ec);
  for (const auto& name : ds.class_names)
    fs::create_directories(fs::path(root) / name, ec);
  for (const auto& s : ds.samples) {
    const auto& sh = s.pixels.shape();
    Image img;
    img.channels = sh[0];
    img.height = sh[1];
    img.width = sh[2];
    img.pix = s.pixels.vec();
    // source ids are "<class>/<file>"; fall back to the label's class dir
    std::string rel = s.source_id;
    if (rel.find('/') == std::string::npos)
      rel = ds.class_names.at(s.label) + "/" + rel;
    write_ppm((fs::path(root) / rel).string(), img);
  }
}

SplitResult split(const Dataset& ds, double train_fraction, std::uint64_t seed,
                  bool stratified) {
  if (!(train_fraction >= 0.0 && train_fraction <= 1.0))
    throw ConfigError("split: train_fraction must lie in [0, 1]");
  Rng rng(seed);
  SplitResult out;
  out.train.class_names = ds.class_names;
  out.test.class_names = ds.class_names;

  auto take = [&](std::vector<std::size_t>& idx) {
    rng.shuffle(idx);
    const std::size_t n_train = static_cast<std::size_t>(std::floor(
        train_fraction * static_cast<double>(idx.size())));
    for (std::size_t i = 0; i < idx.size(); ++i) {
      auto& dst = i < n_train ? out.train : out.test;
      dst.samples.push_back(ds.samples[idx[i]]);
    }
  };

  if (!stratified) {
    std::vector<std::size_t> idx(ds.samples.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    take(idx);
  } else {
    for (std::size_t k = 0; k < ds.class_names.size(); ++k) {
      std::vector<std::size_t> idx;
      for (std::size_t i = 0; i < ds.samples.size(); ++i)
        if (ds.samples[i].label == k) idx.push_back(i);
      take(idx);
    }
  }
  return out;
}

Dataset synth_dataset(std::size_t n_per_class, std::size_t num_classes,
                      std::size_t image_size, std::uint64_t seed) {
  if (n_per_class == 0)
    throw ConfigError("synth_dataset: n_per_class must be positive");
  if (num_classes == 0)
    throw ConfigError("synth_dataset: num_classes must be positive");
  if (image_size == 0)
    throw ConfigError("synth_dataset: image_size must be positive");

  // Tint palette cycles if num_classes exceeds it.
  static const double kTints[][3] = {
      {0.95, 0.55, 0.50}, {0.50, 0.95, 0.55}, {0.50, 0.60, 0.95},
      {0.95, 0.90, 0.45}, {0.85, 0.50, 0.95}, {0.45, 0.95, 0.95},
      {0.95, 0.70, 0.45}, {0.65, 0.85, 0.70},
  };
  constexpr std::size_t kPalette = sizeof(kTints) / sizeof(kTints[0]);

  Dataset ds;
  ds.class_names.reserve(num_classes);
  for (std::size_t k = 0; k < num_classes; ++k)
    ds.class_names.push_back("class" + std::to_string(k));

  const double s = static_cast<double>(image_size);
  const std::size_t plane = image_size * image_size;
  for (std::size_t k = 0; k < num_classes; ++k) {
    const double kd = static_cast<double>(k);
    for (std::size_t i = 0; i < n_per_class; ++i) {
      const std::uint64_t global = k * n_per_class + i;
      Rng rng(hash_seed(seed, global));

      // class signature: radius, eccentricity, ring frequency, tint
      const double radius = s * (0.16 + 0.045 * kd + rng.uniform(-0.015, 0.015));
      const double ratio =
          std::max(0.30, 1.0 - 0.14 * kd + rng.uniform(-0.04, 0.04));
      const double rings = (1.5 + 1.6 * kd) * rng.uniform(0.92, 1.08);
      double tint[3];
      for (std::size_t c = 0; c < 3; ++c)
        tint[c] = kTints[k % kPalette][c] + rng.uniform(-0.05, 0.05);

      const double cy = s * (0.5 + rng.uniform(-0.07, 0.07));
      const double cx = s * (0.5 + rng.uniform(-0.07, 0.07));
      const double theta = rng.uniform(0.0, kPi);
      const double ct = std::cos(theta), st = std::sin(theta);
      const double bg_base = 0.30 + rng.uniform(-0.03, 0.03);

      std::vector<double> pix(3 * plane);
      for (std::size_t y = 0; y < image_size; ++y) {
        for (std::size_t x = 0; x < image_size; ++x) {
          const double dy = static_cast<double>(y) - cy;
          const double dx = static_cast<double>(x) - cx;
          const double u = ct * dx + st * dy;
          const double v = -st * dx + ct * dy;
          const double rho = std::sqrt((u * u) / (radius * radius) +
                                       (v * v) /
                                           (radius * ratio * radius * ratio));
          const double bg = bg_base + 0.08 * rng.uniform();
          const double grain = rng.uniform(-0.025, 0.025);
          const double alpha = std::clamp((1.0 - rho) / 0.08, 0.0, 1.0);
          const double shade =
              0.62 + 0.18 * std::cos(2.0 * kPi * rings * rho) + grain;
          for (std::size_t c = 0; c < 3; ++c) {
            const double cell = shade * tint[c];
            pix[c * plane + y * image_size + x] =
                std::clamp(bg + (cell - bg) * alpha, 0.0, 1.0);
          }
        }
      }

      LabeledSample sample;
      sample.pixels = Tensor::from({3, image_size, image_size}, std::move(pix));
      sample.label = k;
      char name[32];
      std::snprintf(name, sizeof(name), "s%05zu.ppm", i);
      sample.source_id = ds.class_names[k] + "/" + name;
      ds.samples.push_back(std::move(sample));
    }
  }
  return ds;
}

std::vector<std::vector<std::size_t>> batch_indices(std::size_t n,
                                                    std::size_t batch_size,
                                                    bool shuffle,
                                                    std::uint64_t seed,
                                                    std::uint64_t epoch) {
  if (batch_size == 0)
    throw ConfigError("batch_indices: batch_size must be positive");
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  if (shuffle) {
    Rng rng(hash_seed(seed, epoch));
    rng.shuffle(order);
  }
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t at = 0; at < n; at += batch_size) {
    const std::size_t cnt = std::min(batch_size, n - at);
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(at),
                         order.begin() + static_cast<std::ptrdiff_t>(at + cnt));
  }
  return batches;
}

std::pair<Tensor, std::vector<std::size_t>> gather_batch(
    const Dataset& ds, const std::vector<std::size_t>& idx) {
  if (idx.empty()) throw ConfigError("gather_batch: empty index list");
  const auto& sh0 = ds.samples.at(idx[0]).pixels.shape();
  Tensor batch = Tensor::zeros({idx.size(), sh0[0], sh0[1], sh0[2]});
  std::vector<std::size_t> labels(idx.size());
  const std::size_t stride = sh0[0] * sh0[1] * sh0[2];
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const auto& s = ds.samples.at(idx[i]);
    if (s.pixels.shape() != sh0)
      throw DataError("gather_batch: mismatched sample extents at " +
                      s.source_id);
    std::copy_n(s.pixels.data(), stride, batch.data() + i * stride);
    labels[i] = s.label;
  }
  return {batch, labels};
}

void hflip_chw(std::vector<double>& pix, std::size_t c, std::size_t h,
               std::size_t w) {
  for (std::size_t ch = 0; ch < c; ++ch) {
    double* plane = pix.data() + ch * h * w;
    for (std::size_t y = 0; y < h; ++y) {
      double* row = plane + y * w;
      for (std::size_t x = 0; x < w / 2; ++x) std::swap(row[x], row[w - 1 - x]);
    }
  }
}

std::vector<double> rotate_nn_chw(const std::vector<double>& pix,
                                  std::size_t c, std::size_t h, std::size_t w,
                                  double degrees) {
  const double rad = degrees * kPi / 180.0;
  const double ct = std::cos(rad), st = std::sin(rad);
  const double cy = (static_cast<double>(h) - 1.0) / 2.0;
  const double cx = (static_cast<double>(w) - 1.0) / 2.0;
  std::vector<double> out(pix.size());
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double* src = pix.data() + ch * h * w;
    double* dst = out.data() + ch * h * w;
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        // inverse map: rotate the target point back into the source
        const double dy = static_cast<double>(y) - cy;
        const double dx = static_cast<double>(x) - cx;
        const double sy = ct * dy + st * dx + cy;
        const double sx = -st * dy + ct * dx + cx;
        long iy = std::lround(sy);
        long ix = std::lround(sx);
        iy = std::clamp(iy, 0L, static_cast<long>(h - 1));
        ix = std::clamp(ix, 0L, static_cast<long>(w - 1));
        dst[y * w + x] = src[static_cast<std::size_t>(iy) * w +
                             static_cast<std::size_t>(ix)];
      }
    }
  }
  return out;
}

std::vector<double> shift_edge_chw(const std::vector<double>& pix,
                                   std::size_t c, std::size_t h, std::size_t w,
                                   std::ptrdiff_t dy, std::ptrdiff_t dx) {
  std::vector<double> out(pix.size());
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double* src = pix.data() + ch * h * w;
    double* dst = out.data() + ch * h * w;
    for (std::size_t y = 0; y < h; ++y) {
      std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y) - dy;
      sy = std::clamp(sy, std::ptrdiff_t{0}, static_cast<std::ptrdiff_t>(h - 1));
      for (std::size_t x = 0; x < w; ++x) {
        std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(x) - dx;
        sx = std::clamp(sx, std::ptrdiff_t{0},
                        static_cast<std::ptrdiff_t>(w - 1));
        dst[y * w + x] = src[static_cast<std::size_t>(sy) * w +
                             static_cast<std::size_t>(sx)];
      }
    }
  }
  return out;
}

void augment_batch(Tensor& batch, const AugmentFlags& flags, Rng& rng) {
  if (batch.rank() != 4)
    throw ConfigError("augment_batch: expected [N, C, H, W]");
  if (!flags.flip && !flags.rotate && !flags.shift) return;
  const std::size_t n = batch.dim(0), c = batch.dim(1), h = batch.dim(2),
                    w = batch.dim(3);
  const std::size_t stride = c * h * w;
  std::vector<double> sample(stride);
  for (std::size_t i = 0; i < n; ++i) {
    double* at = batch.data() + i * stride;
    std::copy_n(at, stride, sample.data());
    if (flags.flip && rng.uniform() < 0.5) hflip_chw(sample, c, h, w);
    if (flags.rotate) {
      const double deg = rng.uniform(-15.0, 15.0);
      sample = rotate_nn_chw(sample, c, h, w, deg);
    }
    if (flags.shift) {
      const auto dy = static_cast<std::ptrdiff_t>(rng.below(17)) - 8;
      const auto dx = static_cast<std::ptrdiff_t>(rng.below(17)) - 8;
      sample = shift_edge_chw(sample, c, h, w, dy, dx);
    }
    std::copy_n(sample.data(), stride, at);
  }
}

}  // namespace dsnet

#include "helix/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "helix/ops.hpp"

namespace fs = std::filesystem;

namespace helix {

// ---------------------------------------------------------------------------
// Raw tensor format
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'H', 'X', 'T', '1'};

void put_u32(std::ostream& out, std::uint32_t v) {
  char b[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
               static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
  out.write(b, 4);
}

std::uint32_t get_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

}  // namespace

void write_raw_tensor(const std::string& path, const Tensor& t, RawDtype dtype) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open for write: " + path);
  out.write(kMagic, 4);
  char meta[4] = {static_cast<char>(dtype), static_cast<char>(t.rank()), 0, 0};
  out.write(meta, 4);
  for (int d : t.shape()) put_u32(out, static_cast<std::uint32_t>(d));
  if (dtype == RawDtype::F64) {
    out.write(reinterpret_cast<const char*>(t.values().data()),
              static_cast<std::streamsize>(t.numel() * sizeof(double)));
  } else {
    std::vector<float> buf(static_cast<std::size_t>(t.numel()));
    for (std::int64_t i = 0; i < t.numel(); ++i) buf[static_cast<std::size_t>(i)] = static_cast<float>(t.at(i));
    out.write(reinterpret_cast<const char*>(buf.data()),
              static_cast<std::streamsize>(buf.size() * sizeof(float)));
  }
  if (!out) throw DataError("write failed: " + path);
}

Tensor read_raw_tensor(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open: " + path);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kMagic, 4) != 0)
    throw FormatError("bad magic in " + path);
  std::uint8_t dtype = bytes[4], rank = bytes[5];
  if (dtype != 1 && dtype != 2) throw FormatError("bad dtype code in " + path);
  std::size_t off = 8;
  if (bytes.size() < off + static_cast<std::size_t>(rank) * 4)
    throw FormatError("truncated header in " + path);
  Shape shape;
  std::int64_t n = 1;
  for (int i = 0; i < rank; ++i) {
    std::uint32_t d = get_u32(bytes.data() + off);
    off += 4;
    if (d == 0) throw FormatError("zero dimension in " + path);
    shape.push_back(static_cast<int>(d));
    n *= d;
  }
  std::size_t esize = dtype == 1 ? 4 : 8;
  if (bytes.size() != off + static_cast<std::size_t>(n) * esize)
    throw FormatError("payload length mismatch in " + path);
  Tensor t = Tensor::zeros(shape);
  if (dtype == 2) {
    std::memcpy(t.values().data(), bytes.data() + off, static_cast<std::size_t>(n) * 8);
  } else {
    const float* fp = reinterpret_cast<const float*>(bytes.data() + off);
    for (std::int64_t i = 0; i < n; ++i) t.values()[i] = static_cast<double>(fp[i]);
  }
  return t;
}

// ---------------------------------------------------------------------------
// PPM / PGM
// ---------------------------------------------------------------------------

namespace {

// Reads one whitespace/comment-delimited header token of a PNM file.
std::string pnm_token(std::istream& in) {
  std::string tok;
  int c;
  while ((c = in.get()) != EOF) {
    if (c == '#') {
      while ((c = in.get()) != EOF && c != '\n') {}
      continue;
    }
    if (std::isspace(c)) {
      if (!tok.empty()) return tok;
      continue;
    }
    tok.push_back(static_cast<char>(c));
  }
  return tok;
}

}  // namespace

Tensor read_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open: " + path);
  if (pnm_token(in) != "P6") throw DataError("not a P6 PPM: " + path);
  int w, h, maxval;
  try {
    w = std::stoi(pnm_token(in));
    h = std::stoi(pnm_token(in));
    maxval = std::stoi(pnm_token(in));
  } catch (const std::exception&) {
    throw DataError("malformed PPM header: " + path);
  }
  if (w <= 0 || h <= 0 || maxval != 255) throw DataError("unsupported PPM parameters: " + path);
  std::vector<unsigned char> buf(static_cast<std::size_t>(w) * h * 3);
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (in.gcount() != static_cast<std::streamsize>(buf.size()))
    throw DataError("truncated PPM payload: " + path);
  Tensor t = Tensor::zeros({3, h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        t.values()[(c * h + y) * w + x] = buf[(static_cast<std::size_t>(y) * w + x) * 3 + c] / 255.0;
  return t;
}

void write_ppm(const std::string& path, const Tensor& image) {
  if (image.rank() != 3 || image.dim(0) != 3) throw DimensionError("write_ppm: expects (3,H,W)");
  int h = image.dim(1), w = image.dim(2);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open for write: " + path);
  out << "P6\n" << w << " " << h << "\n255\n";
  std::vector<unsigned char> buf(static_cast<std::size_t>(w) * h * 3);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) {
        double v = std::clamp(image.at((c * h + y) * w + x), 0.0, 1.0);
        buf[(static_cast<std::size_t>(y) * w + x) * 3 + c] =
            static_cast<unsigned char>(std::lround(v * 255.0));
      }
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

void write_pgm(const std::string& path, int h, int w, const std::vector<std::uint8_t>& bytes) {
  if (static_cast<std::size_t>(h) * w != bytes.size())
    throw DimensionError("write_pgm: byte count mismatch");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open for write: " + path);
  out << "P5\n" << w << " " << h << "\n255\n";
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

Tensor resize_bilinear(const Tensor& image, int out_h, int out_w) {
  if (image.rank() != 3) throw DimensionError("resize_bilinear: expects (C,H,W)");
  int c = image.dim(0), h = image.dim(1), w = image.dim(2);
  if (h == out_h && w == out_w) return image;
  Tensor out = Tensor::zeros({c, out_h, out_w});
  double sy = static_cast<double>(h) / out_h, sx = static_cast<double>(w) / out_w;
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < out_h; ++y) {
      double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, h - 1.0);
      int y0 = static_cast<int>(fy), y1 = std::min(y0 + 1, h - 1);
      double wy = fy - y0;
      for (int x = 0; x < out_w; ++x) {
        double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, w - 1.0);
        int x0 = static_cast<int>(fx), x1 = std::min(x0 + 1, w - 1);
        double wx = fx - x0;
        auto at = [&](int yy, int xx) { return image.at((ch * h + yy) * w + xx); };
        out.values()[(ch * out_h + y) * out_w + x] =
            (1 - wy) * ((1 - wx) * at(y0, x0) + wx * at(y0, x1)) +
            wy * ((1 - wx) * at(y1, x0) + wx * at(y1, x1));
      }
    }
  return out;
}

// ---------------------------------------------------------------------------
// Dataset loading
// ---------------------------------------------------------------------------

namespace {

std::vector<ClassSamples> load_split_dir(const fs::path& dir, int resize_to, int& image_size) {
  if (!fs::is_directory(dir)) throw DataError("missing split directory: " + dir.string());
  std::vector<fs::path> class_dirs;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_directory()) class_dirs.push_back(e.path());
  std::sort(class_dirs.begin(), class_dirs.end());
  if (class_dirs.empty()) throw DataError("empty split directory: " + dir.string());
  std::vector<ClassSamples> out;
  for (const auto& cd : class_dirs) {
    ClassSamples cs;
    cs.name = cd.filename().string();
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(cd))
      if (e.is_regular_file()) files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      std::string ext = f.extension().string();
      Tensor img;
      if (ext == ".hxt") {
        img = read_raw_tensor(f.string());
        if (img.rank() != 3 || img.dim(0) != 3)
          throw DataError("not a (3,H,W) image tensor: " + f.string());
      } else if (ext == ".ppm") {
        img = resize_bilinear(read_ppm(f.string()), resize_to, resize_to);
      } else {
        continue;
      }
      if (image_size == 0) image_size = img.dim(1);
      if (img.dim(1) != image_size || img.dim(2) != image_size)
        throw DataError("inconsistent image size: " + f.string());
      cs.images.push_back(std::move(img));
    }
    if (cs.images.empty()) throw DataError("class with no samples: " + cd.string());
    out.push_back(std::move(cs));
  }
  return out;
}

}  // namespace

DatasetSplit load_dataset(const std::string& root_dir, int resize_to) {
  DatasetSplit ds;
  ds.base = load_split_dir(fs::path(root_dir) / "base", resize_to, ds.image_size);
  ds.val = load_split_dir(fs::path(root_dir) / "val", resize_to, ds.image_size);
  ds.novel = load_split_dir(fs::path(root_dir) / "novel", resize_to, ds.image_size);
  // Splits must be disjoint by class.
  std::vector<std::string> names;
  for (const auto* split : {&ds.base, &ds.val, &ds.novel})
    for (const auto& c : *split) names.push_back(c.name);
  std::sort(names.begin(), names.end());
  if (std::adjacent_find(names.begin(), names.end()) != names.end())
    throw DataError("class name appears in more than one split");
  // Base-split normalization statistics.
  std::array<double, 3> sum{0, 0, 0}, sq{0, 0, 0};
  std::int64_t count = 0;
  for (const auto& c : ds.base)
    for (const auto& img : c.images) {
      std::int64_t hw = img.numel() / 3;
      for (int ch = 0; ch < 3; ++ch) {
        auto seg = img.values().segment(ch * hw, hw);
        sum[static_cast<std::size_t>(ch)] += seg.sum();
        sq[static_cast<std::size_t>(ch)] += (seg * seg).sum();
      }
      count += hw;
    }
  for (int ch = 0; ch < 3; ++ch) {
    double m = sum[static_cast<std::size_t>(ch)] / static_cast<double>(count);
    double v = sq[static_cast<std::size_t>(ch)] / static_cast<double>(count) - m * m;
    ds.norm_mean[static_cast<std::size_t>(ch)] = m;
    ds.norm_std[static_cast<std::size_t>(ch)] = std::sqrt(std::max(v, 1e-8));
  }
  return ds;
}

const std::vector<ClassSamples>& split_classes(const DatasetSplit& ds, const std::string& which) {
  if (which == "base") return ds.base;
  if (which == "val") return ds.val;
  if (which == "novel") return ds.novel;
  throw ConfigError("unknown split: " + which);
}

// ---------------------------------------------------------------------------
// Episode sampling
// ---------------------------------------------------------------------------

Episode sample_episode(const std::vector<ClassSamples>& classes, int n_way, int k_shot, int q_per,
                       Rng& rng) {
  if (n_way < 2) throw PreconditionError("sample_episode: N must be >= 2");
  std::vector<int> eligible;
  for (std::size_t i = 0; i < classes.size(); ++i)
    if (static_cast<int>(classes[i].images.size()) >= k_shot + q_per)
      eligible.push_back(static_cast<int>(i));
  if (static_cast<int>(eligible.size()) < n_way)
    throw DataError("sample_episode: fewer than N classes with K+Q samples");
  // Partial Fisher-Yates for class choice without replacement.
  for (int i = 0; i < n_way; ++i) {
    std::size_t j = static_cast<std::size_t>(i) + rng.index(eligible.size() - static_cast<std::size_t>(i));
    std::swap(eligible[static_cast<std::size_t>(i)], eligible[j]);
  }
  Episode ep;
  ep.n_way = n_way;
  ep.k_shot = k_shot;
  ep.q_per = q_per;
  for (int n = 0; n < n_way; ++n) {
    int ci = eligible[static_cast<std::size_t>(n)];
    ep.classes.push_back(ci);
    std::vector<int> idx(classes[static_cast<std::size_t>(ci)].images.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
    for (int i = 0; i < k_shot + q_per; ++i) {
      std::size_t j = static_cast<std::size_t>(i) + rng.index(idx.size() - static_cast<std::size_t>(i));
      std::swap(idx[static_cast<std::size_t>(i)], idx[j]);
    }
    for (int i = 0; i < k_shot; ++i) ep.support.emplace_back(n, idx[static_cast<std::size_t>(i)]);
    for (int i = 0; i < q_per; ++i) {
      ep.query.emplace_back(n, idx[static_cast<std::size_t>(k_shot + i)]);
      ep.query_labels.push_back(n);
    }
  }
  return ep;
}

Tensor prototype_support(const std::vector<Tensor>& features) {
  if (features.empty()) throw PreconditionError("prototype_support: K must be >= 1");
  if (features.size() == 1) return features[0];
  return scale(add_n(features), 1.0 / static_cast<double>(features.size()));
}

// ---------------------------------------------------------------------------
// Synthetic generator
// ---------------------------------------------------------------------------

namespace {

std::uint64_t mix(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (a + 1) + 0xbf58476d1ce4e5b9ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

struct GenusStyle {
  std::array<double, 3> bg0, bg1, body;
  double grad_x, grad_y;
  double cx, cy, rx, ry, theta;
  double part_ox, part_oy;           // part-region offset from the body center
  std::array<double, 3> glyph_tint;  // signed channel deltas for the glyph
};

GenusStyle genus_style(const SyntheticSpec& spec, int genus) {
  Rng r(mix(spec.seed, static_cast<std::uint64_t>(genus), 0));
  const double s = spec.image_size;
  GenusStyle g;
  for (int c = 0; c < 3; ++c) g.bg0[static_cast<std::size_t>(c)] = r.uniform(0.05, 0.30);
  for (int c = 0; c < 3; ++c) g.bg1[static_cast<std::size_t>(c)] = r.uniform(0.05, 0.30);
  double a = r.uniform(0.0, 2.0 * 3.14159265358979);
  g.grad_x = std::cos(a);
  g.grad_y = std::sin(a);
  for (int c = 0; c < 3; ++c) g.body[static_cast<std::size_t>(c)] = r.uniform(0.35, 0.85);
  g.cx = s * 0.5 + r.uniform(-0.04, 0.04) * s;
  g.cy = s * 0.5 + r.uniform(-0.04, 0.04) * s;
  g.rx = r.uniform(0.24, 0.34) * s;
  g.ry = r.uniform(0.24, 0.34) * s;
  g.theta = r.uniform(0.0, 3.14159265358979);
  // Part sits well off the body center so pose rotation moves it around.
  double pr = r.uniform(0.45, 0.75), pa = r.uniform(0.0, 2.0 * 3.14159265358979);
  g.part_ox = pr * g.rx * std::cos(pa);
  g.part_oy = pr * g.ry * std::sin(pa);
  for (int c = 0; c < 3; ++c)
    g.glyph_tint[static_cast<std::size_t>(c)] = (r.uniform(0.0, 1.0) < 0.5 ? -1.0 : 1.0) * r.uniform(0.25, 0.45);
  return g;
}

double glyph_mask(int species, double u, double v) {
  int kind = species % 4;
  double freq = 1.0 + species / 4;
  double rad = std::sqrt(u * u + v * v);
  switch (kind) {
    case 0: return rad <= 0.65 ? 1.0 : 0.0;
    case 1: return (rad >= 0.35 && rad <= 0.80) ? 1.0 : 0.0;
    case 2: return std::sin(freq * 3.0 * 3.14159265358979 * u) > 0.0 && rad <= 1.0 ? 1.0 : 0.0;
    default:
      return (std::sin(freq * 2.5 * 3.14159265358979 * u) *
              std::sin(freq * 2.5 * 3.14159265358979 * v)) > 0.0 && rad <= 1.0
                 ? 1.0
                 : 0.0;
  }
}

}  // namespace

Jitter sample_jitter(const SyntheticSpec& spec, Rng& rng) {
  Jitter j;
  int t = spec.translate_jitter;
  j.dx = t > 0 ? static_cast<int>(rng.index(static_cast<std::uint64_t>(2 * t + 1))) - t : 0;
  j.dy = t > 0 ? static_cast<int>(rng.index(static_cast<std::uint64_t>(2 * t + 1))) - t : 0;
  j.rot = rng.uniform(-spec.rotate_jitter, spec.rotate_jitter);
  for (int c = 0; c < 3; ++c)
    j.hue[static_cast<std::size_t>(c)] = 1.0 + rng.uniform(-spec.hue_jitter, spec.hue_jitter);
  const double s = spec.image_size;
  for (int b = 0; b < spec.clutter_blobs; ++b)
    j.blobs.push_back({rng.uniform(0.0, s), rng.uniform(0.0, s),
                       static_cast<double>(rng.index(4)), rng.uniform(0.0, 1.0),
                       rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0)});
  return j;
}

namespace {

// Part offset in image coordinates: the genus-fixed offset rotated by the
// sample's pose angle, so the part travels around the body with pose.
std::pair<double, double> part_offset(const GenusStyle& g, const Jitter& jit) {
  double cr = std::cos(jit.rot), sr = std::sin(jit.rot);
  return {g.part_ox * cr - g.part_oy * sr, g.part_ox * sr + g.part_oy * cr};
}

}  // namespace

std::array<int, 4> part_region_box(const SyntheticSpec& spec, int genus, const Jitter& jit) {
  GenusStyle g = genus_style(spec, genus);
  auto [rox, roy] = part_offset(g, jit);
  int s = spec.image_size, p = spec.part_size;
  int pcx = static_cast<int>(std::lround(g.cx + rox)) + jit.dx;
  int pcy = static_cast<int>(std::lround(g.cy + roy)) + jit.dy;
  int x0 = std::clamp(pcx - p / 2, 0, s), y0 = std::clamp(pcy - p / 2, 0, s);
  int x1 = std::clamp(pcx - p / 2 + p, 0, s), y1 = std::clamp(pcy - p / 2 + p, 0, s);
  return {x0, y0, x1, y1};
}

Tensor render_sample(const SyntheticSpec& spec, int genus, int species, const Jitter& jit) {
  const int s = spec.image_size;
  GenusStyle g = genus_style(spec, genus);
  Tensor img = Tensor::zeros({3, s, s});
  const double cx = g.cx + jit.dx, cy = g.cy + jit.dy;
  const double th = g.theta + jit.rot;
  const double ct = std::cos(th), st = std::sin(th);
  for (int y = 0; y < s; ++y)
    for (int x = 0; x < s; ++x) {
      double t = ((x * g.grad_x + y * g.grad_y) / s + 1.0) * 0.5;
      double dx = x - cx, dy = y - cy;
      double ex = (dx * ct + dy * st) / g.rx, ey = (-dx * st + dy * ct) / g.ry;
      double rad2 = ex * ex + ey * ey;
      for (int c = 0; c < 3; ++c) {
        double bg = g.bg0[static_cast<std::size_t>(c)] +
                    t * (g.bg1[static_cast<std::size_t>(c)] - g.bg0[static_cast<std::size_t>(c)]);
        double v = bg;
        if (rad2 <= 1.0) v = g.body[static_cast<std::size_t>(c)] * (1.0 - 0.25 * rad2);
        img.values()[(c * s + y) * s + x] = v;
      }
    }
  // Per-sample distractors: part-like glyph patches confined to the
  // background, so only location on the body separates the real part from
  // look-alike clutter.
  const double bhalf = spec.part_size / 2.0;
  for (const auto& b : jit.blobs) {
    int x0 = std::max(0, static_cast<int>(b[0] - bhalf)), x1 = std::min(s - 1, static_cast<int>(b[0] + bhalf));
    int y0 = std::max(0, static_cast<int>(b[1] - bhalf)), y1 = std::min(s - 1, static_cast<int>(b[1] + bhalf));
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x) {
        double m = glyph_mask(static_cast<int>(b[2]), (x - b[0]) / bhalf, (y - b[1]) / bhalf) * 0.85;
        if (m <= 0.0) continue;
        double dx = x - cx, dy = y - cy;
        double ex = (dx * ct + dy * st) / g.rx, ey = (-dx * st + dy * ct) / g.ry;
        if (ex * ex + ey * ey <= 1.0) continue;  // keep the body silhouette intact
        for (int c = 0; c < 3; ++c) {
          auto& cur = img.values()[(c * s + y) * s + x];
          // Paint distractors in the genus part color so pooled color/texture
          // statistics cannot separate them from the real part glyph.
          double gc = std::clamp(g.body[static_cast<std::size_t>(c)] +
                                     g.glyph_tint[static_cast<std::size_t>(c)],
                                 0.0, 1.0);
          cur = cur + m * (gc - cur);
        }
      }
  }
  // Species glyph, confined to the jittered part region.
  auto box = part_region_box(spec, genus, jit);
  auto [rox, roy] = part_offset(g, jit);
  const double pcx = g.cx + rox + jit.dx, pcy = g.cy + roy + jit.dy;
  const double half = spec.part_size / 2.0;
  const double cr = std::cos(jit.rot), sr = std::sin(jit.rot);
  for (int y = box[1]; y < box[3]; ++y)
    for (int x = box[0]; x < box[2]; ++x) {
      double u = (x - pcx) / half, v = (y - pcy) / half;
      double ur = u * cr + v * sr, vr = -u * sr + v * cr;
      double m = glyph_mask(species, ur, vr) * 0.85;
      if (m <= 0.0) continue;
      for (int c = 0; c < 3; ++c) {
        double cur = img.at((c * s + y) * s + x);
        double gc = std::clamp(g.body[static_cast<std::size_t>(c)] +
                                   g.glyph_tint[static_cast<std::size_t>(c)],
                               0.0, 1.0);
        img.values()[(c * s + y) * s + x] = cur + m * (gc - cur);
      }
    }
  // Global hue jitter.
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < s * s; ++i) {
      auto& v = img.values()[c * s * s + i];
      v = std::clamp(v * jit.hue[static_cast<std::size_t>(c)], 0.0, 1.0);
    }
  return img;
}

void generate_synthetic(const SyntheticSpec& spec, const std::string& root) {
  if (spec.genera < 3 || spec.species_per_genus < 1 || spec.samples_per_species < 1 ||
      spec.image_size < 8 || spec.part_size < 2 || spec.part_size > spec.image_size)
    throw ConfigError("generate_synthetic: invalid spec");
  int base_g = spec.base_genera >= 0 ? spec.base_genera
                                     : std::max(1, static_cast<int>(std::lround(spec.genera * 0.6)));
  int val_g = spec.val_genera >= 0 ? spec.val_genera
                                   : std::max(1, static_cast<int>(std::lround(spec.genera * 0.15)));
  if (base_g + val_g >= spec.genera)
    throw ConfigError("generate_synthetic: split leaves no novel genera");
  for (int genus = 0; genus < spec.genera; ++genus) {
    std::string split = genus < base_g ? "base" : (genus < base_g + val_g ? "val" : "novel");
    for (int sp = 0; sp < spec.species_per_genus; ++sp) {
      char cls[32];
      std::snprintf(cls, sizeof(cls), "g%02d_s%02d", genus, sp);
      fs::path dir = fs::path(root) / split / cls;
      std::error_code ec;
      fs::create_directories(dir, ec);
      if (ec) throw DataError("cannot create " + dir.string());
      Rng sample_rng(mix(spec.seed, static_cast<std::uint64_t>(genus) * 1000 + 7,
                         static_cast<std::uint64_t>(sp) + 1));
      for (int i = 0; i < spec.samples_per_species; ++i) {
        Jitter jit = sample_jitter(spec, sample_rng);
        Tensor img = render_sample(spec, genus, sp, jit);
        char name[16];
        std::snprintf(name, sizeof(name), "%04d.hxt", i);
        write_raw_tensor((dir / name).string(), img, RawDtype::F32);
      }
    }
  }
}

}  // namespace helix

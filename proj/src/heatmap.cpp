#include "helix/heatmap.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "helix/data.hpp"

namespace helix {

std::vector<std::uint8_t> heatmap_bytes(const Tensor& feature) {
  if (feature.rank() != 3) throw DimensionError("heatmap_bytes: expects (C,H,W)");
  int c = feature.dim(0), h = feature.dim(1), w = feature.dim(2);
  std::int64_t hw = static_cast<std::int64_t>(h) * w;
  std::vector<double> proj(static_cast<std::size_t>(hw));
  for (std::int64_t i = 0; i < hw; ++i) {
    double m = feature.at(i);
    for (int ch = 1; ch < c; ++ch) m = std::max(m, feature.at(ch * hw + i));
    proj[static_cast<std::size_t>(i)] = m;
  }
  auto [lo, hi] = std::minmax_element(proj.begin(), proj.end());
  std::vector<std::uint8_t> out(proj.size(), 0);
  double range = *hi - *lo;
  if (range > 0)
    for (std::size_t i = 0; i < proj.size(); ++i)
      out[i] = static_cast<std::uint8_t>(std::lround((proj[i] - *lo) / range * 255.0));
  return out;
}

std::vector<std::uint8_t> upscale_nearest(const std::vector<std::uint8_t>& bytes, int h, int w,
                                          int out) {
  if (static_cast<std::size_t>(h) * w != bytes.size())
    throw DimensionError("upscale_nearest: byte count mismatch");
  std::vector<std::uint8_t> up(static_cast<std::size_t>(out) * out);
  for (int y = 0; y < out; ++y) {
    int sy = std::min(y * h / out, h - 1);
    for (int x = 0; x < out; ++x) {
      int sx = std::min(x * w / out, w - 1);
      up[static_cast<std::size_t>(y) * out + x] = bytes[static_cast<std::size_t>(sy) * w + sx];
    }
  }
  return up;
}

namespace {

void write_map(const std::filesystem::path& path, const Tensor& feature, int upscale_to) {
  std::vector<std::uint8_t> bytes = heatmap_bytes(feature);
  bytes = upscale_nearest(bytes, feature.dim(1), feature.dim(2), upscale_to);
  write_pgm(path.string(), upscale_to, upscale_to, bytes);
}

Tensor tokens_to_map(const Tensor& tokens, int c, int h, int w) {
  return reshape(transpose2d(tokens), {c, h, w});
}

}  // namespace

void write_heatmaps(Checkpoint& ckpt, const Tensor& support_image, const Tensor& query_image,
                    const std::string& out_dir, int upscale_to) {
  ckpt.restore_best();
  TrainConfig cfg = ckpt.train_config();
  FewShotModel m(cfg, ckpt.params, nullptr);
  autograd::NoGradGuard guard;

  Tensor f_s = m.features({&support_image}, ckpt.norm_mean, ckpt.norm_std, false);
  Tensor f_q = m.features({&query_image}, ckpt.norm_mean, ckpt.norm_std, false);
  f_s = slice_sample(f_s, 0);
  f_q = slice_sample(f_q, 0);
  int c = f_s.dim(0), h = f_s.dim(1), w = f_s.dim(2);

  const Variant v = cfg.helix.variant;
  const bool dir_s = cfg.helix.stack > 0 && v != Variant::StoQ;  // enhances the support branch
  const bool dir_q = cfg.helix.stack > 0 && v != Variant::QtoS;  // enhances the query branch

  Tensor rmp_s = f_s, rmp_q = f_q, rep_s = f_s, rep_q = f_q;
  if (dir_s) {
    Tensor r = multi_head_csrm(m.helix.embed_tokens(f_s, 0, 'S', 'e', false),
                               m.helix.embed_tokens(f_q, 0, 'Q', 'k', false),
                               m.helix.embed_tokens(f_q, 0, 'Q', 'v', false), cfg.helix.heads);
    rmp_s = tokens_to_map(r, c, h, w);
    rep_s = m.helix.rep_enhance(f_s, r, 0, 'S', false);
  }
  if (dir_q) {
    Tensor r = multi_head_csrm(m.helix.embed_tokens(f_q, 0, 'Q', 'e', false),
                               m.helix.embed_tokens(f_s, 0, 'S', 'k', false),
                               m.helix.embed_tokens(f_s, 0, 'S', 'v', false), cfg.helix.heads);
    rmp_q = tokens_to_map(r, c, h, w);
    rep_q = m.helix.rep_enhance(f_q, r, 0, 'Q', false);
  }

  std::filesystem::path dir(out_dir);
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw DataError("cannot create " + out_dir);
  write_map(dir / "backbone_support.pgm", f_s, upscale_to);
  write_map(dir / "backbone_query.pgm", f_q, upscale_to);
  write_map(dir / "rmp_support.pgm", rmp_s, upscale_to);
  write_map(dir / "rmp_query.pgm", rmp_q, upscale_to);
  write_map(dir / "rep_support.pgm", rep_s, upscale_to);
  write_map(dir / "rep_query.pgm", rep_q, upscale_to);
}

}  // namespace helix

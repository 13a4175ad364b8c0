#pragma once

#include <string>
#include <vector>

#include "helix/trainer.hpp"

namespace helix {

/// Channel-max projection of a (C,H,W) feature map, min-max normalized to
/// [0,255]. A constant map (degenerate range) maps to all zeros.
std::vector<std::uint8_t> heatmap_bytes(const Tensor& feature);

/// Nearest-neighbor upscale of an (h,w) byte map to (out,out).
std::vector<std::uint8_t> upscale_nearest(const std::vector<std::uint8_t>& bytes, int h, int w,
                                          int out);

/// Writes six PGM maps under out_dir: {backbone,rmp,rep}_{support,query}.pgm.
/// For directions a unidirectional model does not compute, the backbone map
/// is written in place of the missing stage.
void write_heatmaps(Checkpoint& ckpt, const Tensor& support_image, const Tensor& query_image,
                    const std::string& out_dir, int upscale_to = 84);

}  // namespace helix

#include "helix/model.hpp"

namespace helix {

namespace {

void make_conv_bn(ParamSet& ps, const std::string& p, int cin, int cout, Rng* rng) {
  if (ps.contains(p + ".conv.w")) return;
  if (!rng) throw PreconditionError("model: params missing and no rng to create them: " + p);
  ps.add(p + ".conv.w", init::he_normal<double>({cout, cin, 3, 3}, static_cast<std::int64_t>(cin) * 9, *rng));
  ps.add(p + ".bn.gamma", Tensor::ones({cout}));
  ps.add(p + ".bn.beta", Tensor::zeros({cout}));
  ps.add(p + ".bn.rmean", Tensor::zeros({cout}), /*trainable=*/false);
  ps.add(p + ".bn.rvar", Tensor::ones({cout}), /*trainable=*/false);
}

Tensor conv_bn_relu(ParamSet& ps, const std::string& p, const Tensor& x, bool training) {
  Tensor h = conv2d(x, ps.get(p + ".conv.w"), Tensor{}, 1, 1);
  h = batch_norm(h, ps.get(p + ".bn.gamma"), ps.get(p + ".bn.beta"), ps.get(p + ".bn.rmean"),
                 ps.get(p + ".bn.rvar"), training);
  return relu(h);
}

}  // namespace

Conv4Backbone::Conv4Backbone(ParamSet& ps, std::string prefix, const Conv4Config& cfg, Rng* rng)
    : ps_(&ps), prefix_(std::move(prefix)), cfg_(cfg) {
  int cin = cfg_.in_channels;
  for (int b = 0; b < 4; ++b) {
    make_conv_bn(ps, prefix_ + ".b" + std::to_string(b), cin, cfg_.width, rng);
    cin = cfg_.width;
  }
}

Tensor Conv4Backbone::forward(const Tensor& image, bool training) const {
  bool batched = image.rank() == 4;
  if (image.rank() != 3 && image.rank() != 4)
    throw DimensionError("backbone: expects rank-3 or rank-4 input");
  if (image.dim(batched ? 1 : 0) != cfg_.in_channels)
    throw DimensionError("backbone: wrong channel count");
  Tensor h = image;
  for (int b = 0; b < 4; ++b) {
    h = conv_bn_relu(*ps_, prefix_ + ".b" + std::to_string(b), h, training);
    if (cfg_.pool[static_cast<std::size_t>(b)]) h = max_pool2d(h);
  }
  return h;
}

RelationHead::RelationHead(ParamSet& ps, std::string prefix, int width, Rng* rng)
    : ps_(&ps), prefix_(std::move(prefix)), width_(width) {
  make_conv_bn(ps, prefix_ + ".b0", 2 * width, width, rng);
  make_conv_bn(ps, prefix_ + ".b1", width, width, rng);
  int half = width / 2;
  if (!ps.contains(prefix_ + ".fc1.w")) {
    if (!rng) throw PreconditionError("model: params missing and no rng to create them: " + prefix_);
    ps.add(prefix_ + ".fc1.w", init::he_normal<double>({half, width}, width, *rng));
    ps.add(prefix_ + ".fc1.b", Tensor::zeros({half}));
    ps.add(prefix_ + ".fc2.w", init::he_normal<double>({1, half}, half, *rng));
    ps.add(prefix_ + ".fc2.b", Tensor::zeros({1}));
  }
}

Tensor RelationHead::forward(const Tensor& pair, bool training) const {
  bool batched = pair.rank() == 4;
  if (pair.dim(batched ? 1 : 0) != 2 * width_)
    throw DimensionError("relation head: expects 2C input channels");
  Tensor h = conv_bn_relu(*ps_, prefix_ + ".b0", pair, training);
  int hdim = h.dim(batched ? 2 : 1), wdim = h.dim(batched ? 3 : 2);
  if (hdim >= 2 && wdim >= 2) h = max_pool2d(h);
  h = conv_bn_relu(*ps_, prefix_ + ".b1", h, training);
  Tensor g = global_avg_pool(h);  // (N,C) or (C)
  Tensor f1 = relu(linear(g, ps_->get(prefix_ + ".fc1.w"), ps_->get(prefix_ + ".fc1.b")));
  Tensor out = linear(f1, ps_->get(prefix_ + ".fc2.w"), ps_->get(prefix_ + ".fc2.b"));
  if (batched) return reshape(out, {pair.dim(0)});
  return reshape(out, {1});
}

Tensor RelationHead::relation_score(const Tensor& fs_hat, const Tensor& fq_hat, bool training) const {
  if (fs_hat.shape() != fq_hat.shape())
    throw DimensionError("relation_score: feature shapes differ");
  return forward(concat_channels(fs_hat, fq_hat), training);
}

}  // namespace helix

#include "helix/helixformer.hpp"

#include <cmath>

namespace helix {

Variant parse_variant(const std::string& s) {
  if (s == "qs") return Variant::QtoS;
  if (s == "sq") return Variant::StoQ;
  if (s == "asym-sq") return Variant::AsymSQ;
  if (s == "asym-qs") return Variant::AsymQS;
  if (s == "sym") return Variant::Symmetric;
  throw ConfigError("unknown variant: " + s);
}

std::string variant_name(Variant v) {
  switch (v) {
    case Variant::QtoS: return "qs";
    case Variant::StoQ: return "sq";
    case Variant::AsymSQ: return "asym-sq";
    case Variant::AsymQS: return "asym-qs";
    case Variant::Symmetric: return "sym";
  }
  return "?";
}

Tensor attention_scores(const Tensor& e_self, const Tensor& k_other) {
  if (e_self.rank() != 2 || k_other.rank() != 2 || e_self.dim(1) != k_other.dim(1))
    throw DimensionError("attention_scores: channel counts differ");
  return matmul(e_self, transpose2d(k_other));
}

Tensor csrm_from_scores(const Tensor& scores, const Tensor& v_other, int d) {
  return matmul(softmax_rows(scale(scores, 1.0 / std::sqrt(static_cast<double>(d)))), v_other);
}

Tensor multi_head_csrm(const Tensor& e_self, const Tensor& k_other, const Tensor& v_other,
                       int heads) {
  int c = e_self.dim(1);
  if (heads < 1 || c % heads != 0)
    throw ConfigError("multi_head_csrm: channel count not divisible by head count");
  int d = c / heads;
  std::vector<Tensor> outs;
  outs.reserve(static_cast<std::size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    Tensor e = slice_cols(e_self, h * d, d);
    Tensor k = slice_cols(k_other, h * d, d);
    Tensor v = slice_cols(v_other, h * d, d);
    outs.push_back(csrm_from_scores(attention_scores(e, k), v, d));
  }
  return concat_cols(outs);
}

namespace {

// Stacks required per variant, at layer granularity. Key format below:
// "<branch>.<role>" embedding stacks and "<branch>.rep" enhancement stacks.
struct Needs {
  bool se = false, sk = false, sv = false;
  bool qe = false, qk = false, qv = false;
  bool rep_s = false, rep_q = false;
};

Needs variant_needs(Variant v, bool rep) {
  Needs n;
  auto q_to_s = [&n] { n.se = n.qk = n.qv = true; };
  auto s_to_q = [&n] { n.qe = n.sk = n.sv = true; };
  switch (v) {
    case Variant::QtoS: q_to_s(); n.rep_s = true; break;
    case Variant::StoQ: s_to_q(); n.rep_q = true; break;
    default: q_to_s(); s_to_q(); n.rep_s = n.rep_q = true; break;
  }
  if (!rep) n.rep_s = n.rep_q = false;
  return n;
}

}  // namespace

HelixFormer::HelixFormer(ParamSet& ps, std::string prefix, const HelixConfig& cfg, Rng* rng)
    : ps_(&ps), prefix_(std::move(prefix)), cfg_(cfg) {
  if (cfg_.heads < 1 || cfg_.channels % cfg_.heads != 0)
    throw ConfigError("helixformer: channels must be divisible by heads");
  const int c = cfg_.channels;
  Needs need = variant_needs(cfg_.variant, cfg_.rep);
  auto make_embed = [&](const std::string& p) {
    if (ps.contains(p + (cfg_.embed == EmbedKind::Conv ? ".conv.w" : ".fc.w"))) return;
    if (!rng) throw PreconditionError("helixformer: params missing and no rng: " + p);
    if (cfg_.embed == EmbedKind::Conv) {
      ps.add(p + ".conv.w", init::he_normal<double>({c, c, 3, 3}, static_cast<std::int64_t>(c) * 9, *rng));
      ps.add(p + ".bn.gamma", Tensor::ones({c}));
      ps.add(p + ".bn.beta", Tensor::zeros({c}));
      ps.add(p + ".bn.rmean", Tensor::zeros({c}), false);
      ps.add(p + ".bn.rvar", Tensor::ones({c}), false);
    } else {
      // Fully-connected token embedding: one CxC linear shared across tokens.
      ps.add(p + ".fc.w", init::he_normal<double>({c, c, 1, 1}, c, *rng));
    }
  };
  auto make_rep = [&](const std::string& p) {
    if (ps.contains(p + ".ln.gamma")) return;
    if (!rng) throw PreconditionError("helixformer: params missing and no rng: " + p);
    ps.add(p + ".ln.gamma", Tensor::ones({c}));
    ps.add(p + ".ln.beta", Tensor::zeros({c}));
    ps.add(p + ".fc1.w", init::he_normal<double>({c, c, 1, 1}, c, *rng));
    ps.add(p + ".fc1.b", Tensor::zeros({c}));
    ps.add(p + ".fc2.w", init::he_normal<double>({c, c, 1, 1}, c, *rng));
    ps.add(p + ".fc2.b", Tensor::zeros({c}));
  };
  for (int l = 0; l < cfg_.stack; ++l) {
    std::string lp = prefix_ + ".l" + std::to_string(l) + ".";
    if (need.se) make_embed(lp + "S.e");
    if (need.sk) make_embed(lp + "S.k");
    if (need.sv) make_embed(lp + "S.v");
    if (need.qe) make_embed(lp + "Q.e");
    if (need.qk) make_embed(lp + "Q.k");
    if (need.qv) make_embed(lp + "Q.v");
    if (need.rep_s) make_rep(lp + "S.rep");
    if (need.rep_q) make_rep(lp + "Q.rep");
  }
}

Tensor HelixFormer::embed_tokens(const Tensor& f, int layer, char branch, char role,
                                 bool training) const {
  if (f.rank() != 3) throw DimensionError("embed_tokens: expects (C,H,W) input");
  const int c = f.dim(0), hw = f.dim(1) * f.dim(2);
  std::string p = prefix_ + ".l" + std::to_string(layer) + "." + branch + "." + role;
  Tensor g;
  if (cfg_.embed == EmbedKind::Conv) {
    g = conv2d(f, ps_->get(p + ".conv.w"), Tensor{}, 1, 1);
    g = batch_norm(g, ps_->get(p + ".bn.gamma"), ps_->get(p + ".bn.beta"),
                   ps_->get(p + ".bn.rmean"), ps_->get(p + ".bn.rvar"), training);
  } else {
    g = conv2d(f, ps_->get(p + ".fc.w"));
  }
  // Row-major (h,w) flattening: token i is spatial position i.
  return transpose2d(reshape(g, {c, hw}));
}

std::pair<Tensor, Tensor> HelixFormer::rmp_forward(const Tensor& f_s, const Tensor& f_q, int layer,
                                                   bool training) const {
  if (f_s.shape() != f_q.shape()) throw DimensionError("rmp_forward: feature shapes differ");
  Tensor e_s = embed_tokens(f_s, layer, 'S', 'e', training);
  Tensor k_s = embed_tokens(f_s, layer, 'S', 'k', training);
  Tensor v_s = embed_tokens(f_s, layer, 'S', 'v', training);
  Tensor e_q = embed_tokens(f_q, layer, 'Q', 'e', training);
  Tensor k_q = embed_tokens(f_q, layer, 'Q', 'k', training);
  Tensor v_q = embed_tokens(f_q, layer, 'Q', 'v', training);
  Tensor r_qs = multi_head_csrm(e_s, k_q, v_q, cfg_.heads);
  Tensor r_sq = multi_head_csrm(e_q, k_s, v_s, cfg_.heads);
  return {r_qs, r_sq};
}

Tensor HelixFormer::rep_enhance(const Tensor& f, const Tensor& relation_map, int layer,
                                char branch, bool training) const {
  (void)training;
  const int c = f.dim(0), h = f.dim(1), w = f.dim(2);
  if (relation_map.rank() != 2 || relation_map.dim(0) != h * w || relation_map.dim(1) != c)
    throw DimensionError("rep_enhance: relation map shape incompatible with feature");
  Tensor r_space = reshape(transpose2d(relation_map), {c, h, w});
  if (!cfg_.rep) return r_space;
  std::string p = prefix_ + ".l" + std::to_string(layer) + "." + branch + ".rep";
  Tensor masked = mul(f, r_space);
  Tensor normed = layer_norm(masked, ps_->get(p + ".ln.gamma"), ps_->get(p + ".ln.beta"));
  Tensor hidden = relu(conv2d(normed, ps_->get(p + ".fc1.w"), ps_->get(p + ".fc1.b")));
  return conv2d(hidden, ps_->get(p + ".fc2.w"), ps_->get(p + ".fc2.b"));
}

std::pair<Tensor, Tensor> HelixFormer::forward_layer(const Tensor& f_s, const Tensor& f_q,
                                                     int layer, Variant v, bool training) const {
  switch (v) {
    case Variant::QtoS: {
      Tensor e_s = embed_tokens(f_s, layer, 'S', 'e', training);
      Tensor k_q = embed_tokens(f_q, layer, 'Q', 'k', training);
      Tensor v_q = embed_tokens(f_q, layer, 'Q', 'v', training);
      Tensor r_qs = multi_head_csrm(e_s, k_q, v_q, cfg_.heads);
      return {rep_enhance(f_s, r_qs, layer, 'S', training), f_q};
    }
    case Variant::StoQ: {
      Tensor e_q = embed_tokens(f_q, layer, 'Q', 'e', training);
      Tensor k_s = embed_tokens(f_s, layer, 'S', 'k', training);
      Tensor v_s = embed_tokens(f_s, layer, 'S', 'v', training);
      Tensor r_sq = multi_head_csrm(e_q, k_s, v_s, cfg_.heads);
      return {f_s, rep_enhance(f_q, r_sq, layer, 'Q', training)};
    }
    case Variant::AsymSQ: {
      auto [s1, q1] = forward_layer(f_s, f_q, layer, Variant::StoQ, training);
      return forward_layer(s1, q1, layer, Variant::QtoS, training);
    }
    case Variant::AsymQS: {
      auto [s1, q1] = forward_layer(f_s, f_q, layer, Variant::QtoS, training);
      return forward_layer(s1, q1, layer, Variant::StoQ, training);
    }
    case Variant::Symmetric: {
      auto [r_qs, r_sq] = rmp_forward(f_s, f_q, layer, training);
      return {rep_enhance(f_s, r_qs, layer, 'S', training),
              rep_enhance(f_q, r_sq, layer, 'Q', training)};
    }
  }
  throw ConfigError("helixformer: invalid variant");
}

std::vector<Tensor> HelixFormer::embed_tokens_batch(const std::vector<Tensor>& fs, int layer,
                                                    char branch, char role, bool training) const {
  const int c = fs[0].dim(0), hw = fs[0].dim(1) * fs[0].dim(2);
  std::string p = prefix_ + ".l" + std::to_string(layer) + "." + branch + "." + role;
  Tensor g = stack_samples(fs);
  if (cfg_.embed == EmbedKind::Conv) {
    g = conv2d(g, ps_->get(p + ".conv.w"), Tensor{}, 1, 1);
    g = batch_norm(g, ps_->get(p + ".bn.gamma"), ps_->get(p + ".bn.beta"),
                   ps_->get(p + ".bn.rmean"), ps_->get(p + ".bn.rvar"), training);
  } else {
    g = conv2d(g, ps_->get(p + ".fc.w"));
  }
  std::vector<Tensor> out;
  out.reserve(fs.size());
  for (int i = 0; i < static_cast<int>(fs.size()); ++i)
    out.push_back(transpose2d(reshape(slice_sample(g, i), {c, hw})));
  return out;
}

std::vector<std::pair<Tensor, Tensor>> HelixFormer::forward_episode(
    const std::vector<Tensor>& protos, const std::vector<Tensor>& queries, bool training) const {
  const int n = static_cast<int>(protos.size()), nq = static_cast<int>(queries.size());
  const int np = n * nq;
  std::vector<Tensor> s_list = protos, q_list = queries;
  // Which entry of each branch list pair p = q * n + c currently refers to.
  // Branch lists start out shared across pairs and become per-pair once that
  // branch has been enhanced.
  std::vector<int> s_of(static_cast<std::size_t>(np)), q_of(static_cast<std::size_t>(np));
  for (int q = 0; q < nq; ++q)
    for (int c = 0; c < n; ++c) {
      s_of[static_cast<std::size_t>(q * n + c)] = c;
      q_of[static_cast<std::size_t>(q * n + c)] = q;
    }
  auto identity = [np](std::vector<int>& idx) {
    for (int p = 0; p < np; ++p) idx[static_cast<std::size_t>(p)] = p;
  };
  for (int l = 0; l < cfg_.stack; ++l) {
    auto step = [&](Variant dir) {  // one directed pass, QtoS or StoQ
      if (dir == Variant::QtoS) {
        auto e_s = embed_tokens_batch(s_list, l, 'S', 'e', training);
        auto k_q = embed_tokens_batch(q_list, l, 'Q', 'k', training);
        auto v_q = embed_tokens_batch(q_list, l, 'Q', 'v', training);
        std::vector<Tensor> ns(static_cast<std::size_t>(np));
        for (int p = 0; p < np; ++p) {
          auto sp = static_cast<std::size_t>(s_of[static_cast<std::size_t>(p)]);
          auto qp = static_cast<std::size_t>(q_of[static_cast<std::size_t>(p)]);
          Tensor r_qs = multi_head_csrm(e_s[sp], k_q[qp], v_q[qp], cfg_.heads);
          ns[static_cast<std::size_t>(p)] = rep_enhance(s_list[sp], r_qs, l, 'S', training);
        }
        s_list = std::move(ns);
        identity(s_of);
      } else {
        auto e_q = embed_tokens_batch(q_list, l, 'Q', 'e', training);
        auto k_s = embed_tokens_batch(s_list, l, 'S', 'k', training);
        auto v_s = embed_tokens_batch(s_list, l, 'S', 'v', training);
        std::vector<Tensor> nq_list(static_cast<std::size_t>(np));
        for (int p = 0; p < np; ++p) {
          auto sp = static_cast<std::size_t>(s_of[static_cast<std::size_t>(p)]);
          auto qp = static_cast<std::size_t>(q_of[static_cast<std::size_t>(p)]);
          Tensor r_sq = multi_head_csrm(e_q[qp], k_s[sp], v_s[sp], cfg_.heads);
          nq_list[static_cast<std::size_t>(p)] = rep_enhance(q_list[qp], r_sq, l, 'Q', training);
        }
        q_list = std::move(nq_list);
        identity(q_of);
      }
    };
    switch (cfg_.variant) {
      case Variant::QtoS: step(Variant::QtoS); break;
      case Variant::StoQ: step(Variant::StoQ); break;
      case Variant::AsymSQ: step(Variant::StoQ); step(Variant::QtoS); break;
      case Variant::AsymQS: step(Variant::QtoS); step(Variant::StoQ); break;
      case Variant::Symmetric: {
        // Both directions read the same layer inputs with no sequential
        // dependence, so embed everything before enhancing either branch.
        auto e_s = embed_tokens_batch(s_list, l, 'S', 'e', training);
        auto k_s = embed_tokens_batch(s_list, l, 'S', 'k', training);
        auto v_s = embed_tokens_batch(s_list, l, 'S', 'v', training);
        auto e_q = embed_tokens_batch(q_list, l, 'Q', 'e', training);
        auto k_q = embed_tokens_batch(q_list, l, 'Q', 'k', training);
        auto v_q = embed_tokens_batch(q_list, l, 'Q', 'v', training);
        std::vector<Tensor> ns(static_cast<std::size_t>(np)), nqv(static_cast<std::size_t>(np));
        for (int p = 0; p < np; ++p) {
          auto sp = static_cast<std::size_t>(s_of[static_cast<std::size_t>(p)]);
          auto qp = static_cast<std::size_t>(q_of[static_cast<std::size_t>(p)]);
          Tensor r_qs = multi_head_csrm(e_s[sp], k_q[qp], v_q[qp], cfg_.heads);
          Tensor r_sq = multi_head_csrm(e_q[qp], k_s[sp], v_s[sp], cfg_.heads);
          ns[static_cast<std::size_t>(p)] = rep_enhance(s_list[sp], r_qs, l, 'S', training);
          nqv[static_cast<std::size_t>(p)] = rep_enhance(q_list[qp], r_sq, l, 'Q', training);
        }
        s_list = std::move(ns);
        q_list = std::move(nqv);
        identity(s_of);
        identity(q_of);
        break;
      }
    }
  }
  std::vector<std::pair<Tensor, Tensor>> out;
  out.reserve(static_cast<std::size_t>(np));
  for (int p = 0; p < np; ++p)
    out.emplace_back(s_list[static_cast<std::size_t>(s_of[static_cast<std::size_t>(p)])],
                     q_list[static_cast<std::size_t>(q_of[static_cast<std::size_t>(p)])]);
  return out;
}

std::pair<Tensor, Tensor> HelixFormer::forward(const Tensor& f_s, const Tensor& f_q,
                                               bool training) const {
  Tensor s = f_s, q = f_q;
  for (int l = 0; l < cfg_.stack; ++l) {
    auto [s2, q2] = forward_layer(s, q, l, cfg_.variant, training);
    s = s2;
    q = q2;
  }
  return {s, q};
}

}  // namespace helix

#include "helix/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <ostream>
#include <sstream>

namespace helix {

namespace {

std::uint64_t mix64(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (a + 1) + 0xbf58476d1ce4e5b9ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Salts for independent derived streams.
constexpr std::uint64_t kSaltInit = 0x11, kSaltStage1 = 0x51, kSaltStage2 = 0x52,
                        kSaltVal = 0x7a, kSaltEval = 0xe7;

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string join_ints(const std::vector<int>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(v[i]);
  }
  return s;
}

}  // namespace

// ---------------------------------------------------------------------------
// TrainConfig
// ---------------------------------------------------------------------------

TrainConfig TrainConfig::from_config(const Config& c) {
  TrainConfig t;
  t.image_size = static_cast<int>(c.get_int("model.image_size", t.image_size));
  t.width = static_cast<int>(c.get_int("model.width", t.width));
  std::vector<int> pools = c.get_int_list("model.pool", {1, 1, 1, 1});
  if (pools.size() != 4) throw ConfigError("model.pool: expected four flags");
  for (int i = 0; i < 4; ++i) t.pool[static_cast<std::size_t>(i)] = pools[static_cast<std::size_t>(i)] != 0;
  t.helix.channels = t.width;
  t.helix.variant = parse_variant(c.get_str("helix.variant", "sym"));
  t.helix.heads = static_cast<int>(c.get_int("helix.heads", t.helix.heads));
  std::string embed = c.get_str("helix.embed", "conv");
  if (embed == "conv")
    t.helix.embed = EmbedKind::Conv;
  else if (embed == "fc")
    t.helix.embed = EmbedKind::Fc;
  else
    throw ConfigError("helix.embed: expected conv or fc");
  t.helix.rep = c.get_bool("helix.rep", t.helix.rep);
  t.helix.stack = static_cast<int>(c.get_int("helix.stack", t.helix.stack));
  t.n_way = static_cast<int>(c.get_int("episode.n_way", t.n_way));
  t.k_shot = static_cast<int>(c.get_int("episode.k_shot", t.k_shot));
  t.q_per = static_cast<int>(c.get_int("episode.q_per", t.q_per));
  t.s1_lr = c.get_double("stage1.lr", t.s1_lr);
  t.s1_momentum = c.get_double("stage1.momentum", t.s1_momentum);
  t.s1_weight_decay = c.get_double("stage1.weight_decay", t.s1_weight_decay);
  t.s1_batch = static_cast<int>(c.get_int("stage1.batch", t.s1_batch));
  t.s1_decay = c.get_int_list("stage1.decay", t.s1_decay);
  t.s1_epochs = static_cast<int>(c.get_int("stage1.epochs", t.s1_epochs));
  t.s2_lr = c.get_double("stage2.lr", t.s2_lr);
  t.s2_decay = c.get_int_list("stage2.decay", t.s2_decay);
  t.s2_epochs = static_cast<int>(c.get_int("stage2.epochs", t.s2_epochs));
  t.s2_backbone_wd = c.get_double("stage2.backbone_wd", t.s2_backbone_wd);
  t.s2_momentum = c.get_double("stage2.momentum", t.s2_momentum);
  t.episodes_per_epoch = static_cast<int>(c.get_int("stage2.episodes_per_epoch", t.episodes_per_epoch));
  t.val_every = static_cast<int>(c.get_int("stage2.val_every", t.val_every));
  t.val_episodes = static_cast<int>(c.get_int("stage2.val_episodes", t.val_episodes));
  t.eval_episodes = static_cast<int>(c.get_int("eval.episodes", t.eval_episodes));
  t.seed = static_cast<std::uint64_t>(c.get_int("seed", static_cast<std::int64_t>(t.seed)));
  t.validate();
  return t;
}

Config TrainConfig::to_config() const {
  Config c;
  c.set("model.image_size", std::to_string(image_size));
  c.set("model.width", std::to_string(width));
  std::vector<int> pools;
  for (bool p : pool) pools.push_back(p ? 1 : 0);
  c.set("model.pool", join_ints(pools));
  c.set("helix.variant", variant_name(helix.variant));
  c.set("helix.heads", std::to_string(helix.heads));
  c.set("helix.embed", helix.embed == EmbedKind::Conv ? "conv" : "fc");
  c.set("helix.rep", helix.rep ? "on" : "off");
  c.set("helix.stack", std::to_string(helix.stack));
  c.set("episode.n_way", std::to_string(n_way));
  c.set("episode.k_shot", std::to_string(k_shot));
  c.set("episode.q_per", std::to_string(q_per));
  c.set("stage1.lr", fmt_double(s1_lr));
  c.set("stage1.momentum", fmt_double(s1_momentum));
  c.set("stage1.weight_decay", fmt_double(s1_weight_decay));
  c.set("stage1.batch", std::to_string(s1_batch));
  c.set("stage1.decay", join_ints(s1_decay));
  c.set("stage1.epochs", std::to_string(s1_epochs));
  c.set("stage2.lr", fmt_double(s2_lr));
  c.set("stage2.decay", join_ints(s2_decay));
  c.set("stage2.epochs", std::to_string(s2_epochs));
  c.set("stage2.backbone_wd", fmt_double(s2_backbone_wd));
  c.set("stage2.momentum", fmt_double(s2_momentum));
  c.set("stage2.episodes_per_epoch", std::to_string(episodes_per_epoch));
  c.set("stage2.val_every", std::to_string(val_every));
  c.set("stage2.val_episodes", std::to_string(val_episodes));
  c.set("eval.episodes", std::to_string(eval_episodes));
  c.set("seed", std::to_string(seed));
  return c;
}

void TrainConfig::validate() const {
  auto check_decay = [](const std::vector<int>& d, int total, const char* name) {
    for (std::size_t i = 0; i < d.size(); ++i) {
      if (d[i] <= 0 || d[i] > total) throw ConfigError(std::string(name) + ": decay epoch out of range");
      if (i > 0 && d[i] <= d[i - 1])
        throw ConfigError(std::string(name) + ": decay epochs must be strictly increasing");
    }
  };
  if (image_size < 8) throw ConfigError("model.image_size: too small");
  if (width < 1) throw ConfigError("model.width: must be positive");
  if (helix.heads < 1 || width % helix.heads != 0)
    throw ConfigError("helix.heads: must divide channel width");
  if (helix.stack < 0) throw ConfigError("helix.stack: must be >= 0");
  if (n_way < 2 || k_shot < 1 || q_per < 1) throw ConfigError("episode: invalid N/K/Q");
  if (s1_epochs < 0 || s2_epochs < 0) throw ConfigError("epochs: must be >= 0");
  if (s1_batch < 1 || episodes_per_epoch < 1 || val_every < 1 || val_episodes < 1 ||
      eval_episodes < 1)
    throw ConfigError("training counts must be positive");
  check_decay(s1_decay, std::max(s1_epochs, 1), "stage1.decay");
  check_decay(s2_decay, std::max(s2_epochs, 1), "stage2.decay");
}

double lr_at(double base, const std::vector<int>& decay, int epoch) {
  double lr = base;
  for (int d : decay)
    if (epoch >= d) lr *= 0.1;
  return lr;
}

// ---------------------------------------------------------------------------
// FewShotModel
// ---------------------------------------------------------------------------

FewShotModel::FewShotModel(const TrainConfig& c, ParamSet& ps, Rng* rng) : cfg(c) {
  Conv4Config bc;
  bc.in_channels = 3;
  bc.width = cfg.width;
  bc.pool = cfg.pool;
  backbone = Conv4Backbone(ps, "backbone", bc, rng);
  HelixConfig hc = cfg.helix;
  hc.channels = cfg.width;
  helix = HelixFormer(ps, "helix", hc, rng);
  head = RelationHead(ps, "head", cfg.width, rng);
}

Tensor FewShotModel::features(const std::vector<const Tensor*>& images,
                              const std::array<double, 3>& mean, const std::array<double, 3>& stdv,
                              bool training) const {
  if (images.empty()) throw PreconditionError("features: empty batch");
  int s = images[0]->dim(1);
  int b = static_cast<int>(images.size());
  Tensor batch = Tensor::zeros({b, 3, s, s});
  std::int64_t hw = static_cast<std::int64_t>(s) * s;
  for (int i = 0; i < b; ++i) {
    const Tensor& img = *images[static_cast<std::size_t>(i)];
    if (img.rank() != 3 || img.dim(0) != 3 || img.dim(1) != s || img.dim(2) != s)
      throw DimensionError("features: inconsistent image shapes");
    for (int c = 0; c < 3; ++c)
      batch.values().segment((static_cast<std::int64_t>(i) * 3 + c) * hw, hw) =
          (img.values().segment(c * hw, hw) - mean[static_cast<std::size_t>(c)]) /
          stdv[static_cast<std::size_t>(c)];
  }
  return backbone.forward(batch, training);
}

EpisodeOutcome episode_forward(const FewShotModel& m, const std::vector<ClassSamples>& classes,
                               const Episode& ep, const std::array<double, 3>& mean,
                               const std::array<double, 3>& stdv, bool training) {
  const int n = ep.n_way, k = ep.k_shot;
  const int nq = static_cast<int>(ep.query.size());
  std::vector<const Tensor*> imgs;
  for (const auto& [slot, idx] : ep.support)
    imgs.push_back(&classes[static_cast<std::size_t>(ep.classes[static_cast<std::size_t>(slot)])]
                        .images[static_cast<std::size_t>(idx)]);
  for (const auto& [slot, idx] : ep.query)
    imgs.push_back(&classes[static_cast<std::size_t>(ep.classes[static_cast<std::size_t>(slot)])]
                        .images[static_cast<std::size_t>(idx)]);
  Tensor feats = m.features(imgs, mean, stdv, training);
  std::vector<Tensor> protos;
  for (int c = 0; c < n; ++c) {
    std::vector<Tensor> shots;
    for (int i = 0; i < k; ++i) shots.push_back(slice_sample(feats, c * k + i));
    protos.push_back(prototype_support(shots));
  }
  std::vector<Tensor> queries;
  queries.reserve(static_cast<std::size_t>(nq));
  for (int q = 0; q < nq; ++q) queries.push_back(slice_sample(feats, n * k + q));
  // Batch the cross-attention embeddings and the relation head over all
  // (query, class) pairs so their batch-norm statistics pool across the
  // episode instead of a single feature map.
  auto enhanced = m.helix.forward_episode(protos, queries, training);
  std::vector<Tensor> pairs;
  pairs.reserve(enhanced.size());
  for (auto& [fs_hat, fq_hat] : enhanced) pairs.push_back(concat_channels(fs_hat, fq_hat));
  Tensor scores = m.head.forward(stack_samples(pairs), training);
  EpisodeOutcome out;
  out.logits = reshape(scores, {nq, n});
  out.loss = softmax_cross_entropy(out.logits, ep.query_labels);
  int correct = 0;
  for (int q = 0; q < nq; ++q) {
    int best = 0;
    for (int c = 1; c < n; ++c)
      if (out.logits.at(q * n + c) > out.logits.at(q * n + best)) best = c;
    out.predictions.push_back(best);
    if (best == ep.query_labels[static_cast<std::size_t>(q)]) correct++;
  }
  out.accuracy = static_cast<double>(correct) / nq;
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoint I/O
// ---------------------------------------------------------------------------

namespace {

constexpr char kCkptMagic[4] = {'H', 'X', 'C', 'K'};

void w_bytes(std::ostream& o, const void* p, std::size_t n) {
  o.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}
void w_u8(std::ostream& o, std::uint8_t v) { w_bytes(o, &v, 1); }
void w_u32(std::ostream& o, std::uint32_t v) { w_bytes(o, &v, 4); }
void w_u64(std::ostream& o, std::uint64_t v) { w_bytes(o, &v, 8); }
void w_f64(std::ostream& o, double v) { w_bytes(o, &v, 8); }
void w_str(std::ostream& o, const std::string& s) {
  w_u64(o, s.size());
  w_bytes(o, s.data(), s.size());
}
void w_arr(std::ostream& o, const ArrX<double>& a) {
  w_u64(o, static_cast<std::uint64_t>(a.size()));
  w_bytes(o, a.data(), static_cast<std::size_t>(a.size()) * 8);
}

struct Reader {
  const unsigned char* p;
  std::size_t n, off = 0;
  void need(std::size_t k) {
    if (off + k > n) throw FormatError("checkpoint: truncated");
  }
  std::uint8_t u8() {
    need(1);
    return p[off++];
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v;
    std::memcpy(&v, p + off, 4);
    off += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v;
    std::memcpy(&v, p + off, 8);
    off += 8;
    return v;
  }
  double f64() {
    need(8);
    double v;
    std::memcpy(&v, p + off, 8);
    off += 8;
    return v;
  }
  std::string str() {
    std::uint64_t k = u64();
    need(k);
    std::string s(reinterpret_cast<const char*>(p + off), k);
    off += k;
    return s;
  }
  ArrX<double> arr() {
    std::uint64_t k = u64();
    need(k * 8);
    ArrX<double> a(static_cast<std::int64_t>(k));
    std::memcpy(a.data(), p + off, k * 8);
    off += k * 8;
    return a;
  }
};

void w_optim(std::ostream& o, const OptimizerState& st) {
  w_u8(o, st.kind == OptimizerKind::SgdMomentum ? 0 : 1);
  w_f64(o, st.lr);
  w_f64(o, st.momentum);
  w_f64(o, st.weight_decay);
  w_f64(o, st.beta1);
  w_f64(o, st.beta2);
  w_f64(o, st.eps);
  w_u64(o, st.step_count);
  w_u64(o, st.paths.size());
  for (const auto& p : st.paths) w_str(o, p);
  auto w_map = [&](const std::map<std::string, ArrX<double>>& m) {
    w_u64(o, m.size());
    for (const auto& [k, v] : m) {
      w_str(o, k);
      w_arr(o, v);
    }
  };
  w_map(st.velocity);
  w_map(st.m1);
  w_map(st.m2);
}

OptimizerState r_optim(Reader& r) {
  OptimizerState st;
  st.kind = r.u8() == 0 ? OptimizerKind::SgdMomentum : OptimizerKind::Adam;
  st.lr = r.f64();
  st.momentum = r.f64();
  st.weight_decay = r.f64();
  st.beta1 = r.f64();
  st.beta2 = r.f64();
  st.eps = r.f64();
  st.step_count = r.u64();
  std::uint64_t np = r.u64();
  for (std::uint64_t i = 0; i < np; ++i) st.paths.push_back(r.str());
  auto r_map = [&](std::map<std::string, ArrX<double>>& m) {
    std::uint64_t k = r.u64();
    for (std::uint64_t i = 0; i < k; ++i) {
      std::string key = r.str();
      m[key] = r.arr();
    }
  };
  r_map(st.velocity);
  r_map(st.m1);
  r_map(st.m2);
  return st;
}

}  // namespace

void Checkpoint::restore_best() {
  if (best_params.empty()) return;
  for (auto& [path, e] : params) {
    auto it = best_params.find(path);
    if (it == best_params.end()) throw FormatError("checkpoint: best snapshot missing " + path);
    e.tensor.values() = it->second;
  }
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open for write: " + path);
  w_bytes(out, kCkptMagic, 4);
  w_u32(out, ckpt.version);
  w_str(out, ckpt.config.serialize());
  for (double v : ckpt.norm_mean) w_f64(out, v);
  for (double v : ckpt.norm_std) w_f64(out, v);
  w_str(out, ckpt.stage);
  w_u64(out, static_cast<std::uint64_t>(ckpt.epoch));
  w_str(out, ckpt.rng_state);
  w_u64(out, ckpt.params.size());
  for (const auto& [p, e] : ckpt.params) {
    w_str(out, p);
    w_u8(out, e.trainable ? 1 : 0);
    w_u32(out, static_cast<std::uint32_t>(e.tensor.rank()));
    for (int d : e.tensor.shape()) w_u32(out, static_cast<std::uint32_t>(d));
    w_arr(out, e.tensor.values());
  }
  w_u8(out, ckpt.has_optim ? 1 : 0);
  if (ckpt.has_optim) {
    w_optim(out, ckpt.opt_backbone);
    w_optim(out, ckpt.opt_new);
  }
  w_f64(out, ckpt.best_val_acc);
  w_u64(out, ckpt.best_params.size());
  for (const auto& [k, v] : ckpt.best_params) {
    w_str(out, k);
    w_arr(out, v);
  }
  if (!out) throw DataError("write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open: " + path);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kCkptMagic, 4) != 0)
    throw FormatError("checkpoint: bad magic in " + path);
  Reader r{bytes.data(), bytes.size()};
  r.off = 4;
  Checkpoint c;
  c.version = r.u32();
  if (c.version != 1) throw FormatError("checkpoint: unsupported version");
  c.config = Config::from_string(r.str());
  for (double& v : c.norm_mean) v = r.f64();
  for (double& v : c.norm_std) v = r.f64();
  c.stage = r.str();
  c.epoch = static_cast<int>(r.u64());
  c.rng_state = r.str();
  std::uint64_t np = r.u64();
  for (std::uint64_t i = 0; i < np; ++i) {
    std::string p = r.str();
    bool trainable = r.u8() != 0;
    std::uint32_t rank = r.u32();
    Shape shape;
    for (std::uint32_t d = 0; d < rank; ++d) shape.push_back(static_cast<int>(r.u32()));
    Tensor t = Tensor::zeros(shape);
    ArrX<double> v = r.arr();
    if (v.size() != t.numel()) throw FormatError("checkpoint: blob size mismatch for " + p);
    t.values() = v;
    c.params.add(p, std::move(t), trainable);
  }
  c.has_optim = r.u8() != 0;
  if (c.has_optim) {
    c.opt_backbone = r_optim(r);
    c.opt_new = r_optim(r);
  }
  c.best_val_acc = r.f64();
  std::uint64_t nb = r.u64();
  for (std::uint64_t i = 0; i < nb; ++i) {
    std::string k = r.str();
    c.best_params[k] = r.arr();
  }
  if (r.off != bytes.size()) throw FormatError("checkpoint: trailing bytes in " + path);
  return c;
}

std::uint64_t param_checksum(const ParamSet& ps) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto eat = [&](const void* p, std::size_t n) {
    const unsigned char* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (const auto& [path, e] : ps) {
    eat(path.data(), path.size());
    eat(e.tensor.values().data(), static_cast<std::size_t>(e.tensor.numel()) * 8);
  }
  return h;
}

// ---------------------------------------------------------------------------
// Stage 1
// ---------------------------------------------------------------------------

Checkpoint pretrain_backbone(const TrainConfig& cfg, const DatasetSplit& ds, std::ostream* log) {
  cfg.validate();
  if (ds.base.empty()) throw DataError("pretrain: empty base split");
  Rng init_rng(mix64(cfg.seed, kSaltInit, 1));
  ParamSet ps;
  Conv4Config bc;
  bc.width = cfg.width;
  bc.pool = cfg.pool;
  Conv4Backbone backbone(ps, "backbone", bc, &init_rng);
  int n_classes = static_cast<int>(ds.base.size());
  ps.add("cls.fc.w", init::he_normal<double>({n_classes, cfg.width}, cfg.width, init_rng));
  ps.add("cls.fc.b", Tensor::zeros({n_classes}));

  std::vector<std::pair<int, int>> samples;  // (class, index)
  for (int c = 0; c < n_classes; ++c)
    for (std::size_t i = 0; i < ds.base[static_cast<std::size_t>(c)].images.size(); ++i)
      samples.emplace_back(c, static_cast<int>(i));

  OptimizerState opt = OptimizerState::sgd(select_paths(ps, {"backbone.", "cls."}), cfg.s1_lr,
                                           cfg.s1_momentum, cfg.s1_weight_decay);
  for (int epoch = 0; epoch < cfg.s1_epochs; ++epoch) {
    opt.lr = lr_at(cfg.s1_lr, cfg.s1_decay, epoch);
    Rng shuffle_rng(mix64(cfg.seed, kSaltStage1, static_cast<std::uint64_t>(epoch)));
    std::vector<std::pair<int, int>> order = samples;
    for (std::size_t i = 0; i + 1 < order.size(); ++i) {
      std::size_t j = i + shuffle_rng.index(order.size() - i);
      std::swap(order[i], order[j]);
    }
    double loss_sum = 0;
    int steps = 0;
    FewShotModel m;  // only the backbone is used in stage 1
    m.cfg = cfg;
    m.backbone = backbone;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.s1_batch)) {
      std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.s1_batch));
      std::vector<const Tensor*> imgs;
      std::vector<int> labels;
      for (std::size_t i = start; i < end; ++i) {
        imgs.push_back(&ds.base[static_cast<std::size_t>(order[i].first)]
                            .images[static_cast<std::size_t>(order[i].second)]);
        labels.push_back(order[i].first);
      }
      Tensor feats = m.features(imgs, ds.norm_mean, ds.norm_std, true);
      Tensor logits = linear(global_avg_pool(feats), ps.get("cls.fc.w"), ps.get("cls.fc.b"));
      Tensor loss = softmax_cross_entropy(logits, labels);
      double lv = loss.item();
      if (!std::isfinite(lv))
        throw TrainError("stage 1 diverged at epoch " + std::to_string(epoch));
      loss.backward();
      sgd_step(ps, opt);
      loss_sum += lv;
      steps++;
    }
    if (log) {
      char buf[128];
      std::snprintf(buf, sizeof(buf), "stage1 epoch %d loss %.6f lr %.6g\n", epoch,
                    loss_sum / std::max(steps, 1), opt.lr);
      *log << buf << std::flush;
    }
  }

  Checkpoint ckpt;
  ckpt.config = cfg.to_config();
  ckpt.norm_mean = ds.norm_mean;
  ckpt.norm_std = ds.norm_std;
  ckpt.stage = "pretrain";
  ckpt.epoch = cfg.s1_epochs;
  ckpt.rng_state = init_rng.serialize();
  for (const auto& [path, e] : ps)
    if (path.rfind("backbone.", 0) == 0) {
      Tensor t = Tensor::zeros(e.tensor.shape());
      t.values() = e.tensor.values();
      ckpt.params.add(path, std::move(t), e.trainable);
    }
  return ckpt;
}

// ---------------------------------------------------------------------------
// Stage 2
// ---------------------------------------------------------------------------

Checkpoint meta_train(const TrainConfig& cfg, const DatasetSplit& ds, const Checkpoint& pretrained,
                      std::ostream* log) {
  cfg.validate();
  if (!pretrained.params.contains("backbone.b0.conv.w"))
    throw ConfigError("meta_train: pretrained checkpoint has no backbone");
  if (pretrained.params.get("backbone.b0.conv.w").dim(0) != cfg.width)
    throw ConfigError("meta_train: backbone width mismatch");
  Checkpoint ckpt;
  ckpt.config = cfg.to_config();
  ckpt.norm_mean = pretrained.norm_mean;
  ckpt.norm_std = pretrained.norm_std;
  ckpt.stage = "meta";
  ckpt.epoch = 0;
  for (const auto& [path, e] : pretrained.params) {
    Tensor t = Tensor::zeros(e.tensor.shape());
    t.values() = e.tensor.values();
    ckpt.params.add(path, std::move(t), e.trainable);
  }
  Rng init_rng(mix64(cfg.seed, kSaltInit, 2));
  FewShotModel m(cfg, ckpt.params, &init_rng);
  ckpt.rng_state = init_rng.serialize();
  ckpt.has_optim = true;
  ckpt.opt_backbone = OptimizerState::sgd(select_paths(ckpt.params, {"backbone."}), cfg.s2_lr,
                                          cfg.s2_momentum, cfg.s2_backbone_wd);
  ckpt.opt_new = OptimizerState::adam(select_paths(ckpt.params, {"helix.", "head."}), cfg.s2_lr);
  meta_train_run(ckpt, ds, log);
  return ckpt;
}

void meta_train_run(Checkpoint& ckpt, const DatasetSplit& ds, std::ostream* log) {
  if (ckpt.stage != "meta") throw ConfigError("meta_train_run: not a stage-2 checkpoint");
  TrainConfig cfg = ckpt.train_config();
  FewShotModel m(cfg, ckpt.params, nullptr);
  for (int epoch = ckpt.epoch; epoch < cfg.s2_epochs; ++epoch) {
    double lr = lr_at(cfg.s2_lr, cfg.s2_decay, epoch);
    ckpt.opt_backbone.lr = lr;
    ckpt.opt_new.lr = lr;
    Rng ep_rng(mix64(cfg.seed, kSaltStage2, static_cast<std::uint64_t>(epoch)));
    double loss_sum = 0;
    for (int i = 0; i < cfg.episodes_per_epoch; ++i) {
      Episode ep = sample_episode(ds.base, cfg.n_way, cfg.k_shot, cfg.q_per, ep_rng);
      EpisodeOutcome out = episode_forward(m, ds.base, ep, ckpt.norm_mean, ckpt.norm_std, true);
      double lv = out.loss.item();
      if (!std::isfinite(lv))
        throw TrainError("stage 2 diverged at epoch " + std::to_string(epoch));
      out.loss.backward();
      sgd_step(ckpt.params, ckpt.opt_backbone);
      adam_step(ckpt.params, ckpt.opt_new);
      loss_sum += lv;
    }
    if (log) {
      char buf[128];
      std::snprintf(buf, sizeof(buf), "stage2 epoch %d loss %.6f lr %.6g\n", epoch,
                    loss_sum / cfg.episodes_per_epoch, lr);
      *log << buf << std::flush;
    }
    if ((epoch + 1) % cfg.val_every == 0 || epoch + 1 == cfg.s2_epochs) {
      Rng val_rng(mix64(cfg.seed, kSaltVal, static_cast<std::uint64_t>(epoch)));
      EvalReport rep =
          evaluate_model(m, ds.val, ckpt.norm_mean, ckpt.norm_std, cfg.val_episodes, val_rng);
      if (rep.mean > ckpt.best_val_acc) {
        ckpt.best_val_acc = rep.mean;
        ckpt.best_params.clear();
        for (const auto& [path, e] : ckpt.params) ckpt.best_params[path] = e.tensor.values();
      }
      if (log) {
        char buf[128];
        std::snprintf(buf, sizeof(buf), "stage2 epoch %d val_acc %.4f best %.4f\n", epoch,
                      rep.mean, ckpt.best_val_acc);
        *log << buf << std::flush;
      }
    }
    ckpt.epoch = epoch + 1;
  }
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

EvalReport evaluate_scorer(const std::vector<ClassSamples>& classes, int n_way, int k_shot,
                           int q_per, int episodes, Rng& rng, const EpisodeScorer& scorer) {
  if (episodes < 1) throw PreconditionError("evaluate: episodes must be >= 1");
  EvalReport rep;
  rep.episodes = episodes;
  for (int e = 0; e < episodes; ++e) {
    Episode ep = sample_episode(classes, n_way, k_shot, q_per, rng);
    std::vector<std::vector<double>> logits = scorer(classes, ep);
    int correct = 0;
    for (std::size_t q = 0; q < ep.query_labels.size(); ++q) {
      const std::vector<double>& row = logits[q];
      int best = 0;
      for (int c = 1; c < n_way; ++c)
        if (row[static_cast<std::size_t>(c)] > row[static_cast<std::size_t>(best)]) best = c;
      if (best == ep.query_labels[q]) correct++;
    }
    rep.per_episode.push_back(static_cast<double>(correct) /
                              static_cast<double>(ep.query_labels.size()));
  }
  double sum = 0;
  for (double a : rep.per_episode) sum += a;
  rep.mean = sum / episodes;
  if (episodes > 1) {
    double ss = 0;
    for (double a : rep.per_episode) ss += (a - rep.mean) * (a - rep.mean);
    rep.ci95 = 1.96 * std::sqrt(ss / (episodes - 1)) / std::sqrt(static_cast<double>(episodes));
  }
  return rep;
}

EvalReport evaluate_model(const FewShotModel& m, const std::vector<ClassSamples>& classes,
                          const std::array<double, 3>& mean, const std::array<double, 3>& stdv,
                          int episodes, Rng& rng) {
  return evaluate_scorer(
      classes, m.cfg.n_way, m.cfg.k_shot, m.cfg.q_per, episodes, rng,
      [&](const std::vector<ClassSamples>& cls, const Episode& ep) {
        autograd::NoGradGuard guard;
        EpisodeOutcome out = episode_forward(m, cls, ep, mean, stdv, false);
        std::vector<std::vector<double>> logits;
        for (std::size_t q = 0; q < ep.query_labels.size(); ++q) {
          std::vector<double> row;
          for (int c = 0; c < ep.n_way; ++c)
            row.push_back(out.logits.at(static_cast<std::int64_t>(q) * ep.n_way + c));
          logits.push_back(std::move(row));
        }
        return logits;
      });
}

EvalReport evaluate_checkpoint(Checkpoint& ckpt, const std::vector<ClassSamples>& classes,
                               int episodes, Rng& rng) {
  if (ckpt.stage != "meta") throw ConfigError("evaluate: expected a stage-2 checkpoint");
  ckpt.restore_best();
  TrainConfig cfg = ckpt.train_config();
  FewShotModel m(cfg, ckpt.params, nullptr);
  return evaluate_model(m, classes, ckpt.norm_mean, ckpt.norm_std, episodes, rng);
}

// ---------------------------------------------------------------------------
// Ablation
// ---------------------------------------------------------------------------

std::vector<AblationResult> run_ablation(const TrainConfig& base, const DatasetSplit& ds,
                                         const std::vector<AblationCell>& cells,
                                         const std::vector<std::uint64_t>& seeds,
                                         std::ostream* log) {
  if (cells.empty() || seeds.empty()) throw PreconditionError("run_ablation: empty matrix");
  std::vector<AblationResult> results;
  for (std::uint64_t seed : seeds) {
    TrainConfig scfg = base;
    scfg.seed = seed;
    Checkpoint pre = pretrain_backbone(scfg, ds, log);
    for (const AblationCell& cell : cells) {
      TrainConfig ccfg = scfg;
      ccfg.helix.variant = parse_variant(cell.variant);
      ccfg.helix.heads = cell.heads;
      ccfg.helix.embed = cell.embed == "fc" ? EmbedKind::Fc : EmbedKind::Conv;
      ccfg.helix.rep = cell.rep;
      ccfg.helix.stack = cell.stack;
      ccfg.validate();
      if (log)
        *log << "cell variant=" << cell.variant << " heads=" << cell.heads
             << " embed=" << cell.embed << " rep=" << (cell.rep ? "on" : "off")
             << " stack=" << cell.stack << " seed=" << seed << "\n"
             << std::flush;
      Checkpoint ck = meta_train(ccfg, ds, pre, log);
      Rng eval_rng(mix64(seed, kSaltEval, 1));
      AblationResult r;
      r.cell = cell;
      r.seed = seed;
      r.report = evaluate_checkpoint(ck, ds.novel, ccfg.eval_episodes, eval_rng);
      if (log) {
        char buf[64];
        std::snprintf(buf, sizeof(buf), "cell acc %.4f ci %.4f\n", r.report.mean, r.report.ci95);
        *log << buf << std::flush;
      }
      results.push_back(std::move(r));
    }
  }
  return results;
}

std::string ablation_csv(const std::vector<AblationResult>& results) {
  std::string out = "variant,heads,embed,rep,stack,mean,ci,episodes,seed\n";
  for (const auto& r : results) {
    char buf[160];
    std::snprintf(buf, sizeof(buf), "%s,%d,%s,%s,%d,%.6f,%.6f,%d,%llu\n", r.cell.variant.c_str(),
                  r.cell.heads, r.cell.embed.c_str(), r.cell.rep ? "on" : "off", r.cell.stack,
                  r.report.mean, r.report.ci95, r.report.episodes,
                  static_cast<unsigned long long>(r.seed));
    out += buf;
  }
  return out;
}

}  // namespace helix

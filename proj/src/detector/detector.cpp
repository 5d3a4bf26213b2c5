#include "sona/detector/detector.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "sona/core/error.hpp"

namespace sona::detector {

namespace {

Tensor gather_rows(const Tensor& src, std::span<const std::size_t> rows) {
  Shape shape = src.shape();
  const std::size_t row = src.numel() / shape[0];
  shape[0] = rows.size();
  Tensor out(shape);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy_n(src.data().begin() + static_cast<std::ptrdiff_t>(rows[i] * row), row,
                out.data().begin() + static_cast<std::ptrdiff_t>(i * row));
  }
  return out;
}

void shuffle(std::vector<std::size_t>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i) - 1));
    std::swap(v[i - 1], v[j]);
  }
}

}  // namespace

DetectorModel::DetectorModel(DetectorConfig config, std::uint64_t seed) : cfg_(config) {
  if (cfg_.side % 4 != 0 || cfg_.side < 8) throw ConfigError("detector input side must be a multiple of 4, >= 8");
  if (cfg_.classes < 2) throw ConfigError("detector needs at least two classes");
  Rng root(seed);
  Rng body_rng = root.fork(1);
  Rng club_rng = root.fork(2);
  const std::size_t w = cfg_.width, q = cfg_.side / 4;
  c1_ = nn::Conv2d(body_, "enc.conv1", cfg_.channels, w, 3, 1, 1, body_rng);
  c2_ = nn::Conv2d(body_, "enc.conv2", w, 2 * w, 3, 2, 1, body_rng);
  c3_ = nn::Conv2d(body_, "enc.conv3", 2 * w, 4 * w, 3, 2, 1, body_rng);
  proj_ = nn::Dense(body_, "enc.proj", 4 * w * q * q, cfg_.feature_dim, body_rng);
  head_ = nn::Dense(body_, "head", cfg_.feature_dim, cfg_.classes, body_rng);
  mu1_ = nn::Dense(club_, "q.mu1", cfg_.feature_dim, cfg_.club_hidden, club_rng);
  mu2_ = nn::Dense(club_, "q.mu2", cfg_.club_hidden, cfg_.feature_dim, club_rng);
  lv1_ = nn::Dense(club_, "q.logvar1", cfg_.feature_dim, cfg_.club_hidden, club_rng);
  lv2_ = nn::Dense(club_, "q.logvar2", cfg_.club_hidden, cfg_.feature_dim, club_rng);
}

nn::Var DetectorModel::features(const nn::Var& x) const {
  nn::Var h = nn::relu(c1_(x));
  h = nn::relu(c2_(h));
  h = nn::relu(c3_(h));
  const std::size_t batch = h->value.dim(0);
  h = nn::reshape(h, Shape{batch, h->value.numel() / batch});
  return nn::relu(proj_(h));
}

std::pair<nn::Var, nn::Var> DetectorModel::club_head(const nn::Var& f) const {
  nn::Var mu = mu2_(nn::relu(mu1_(f)));
  nn::Var lv = nn::scale(nn::tanh(lv2_(nn::relu(lv1_(f)))), real(kLogVarRange));
  return {mu, lv};
}

Tensor DetectorModel::predict_logits(const Tensor& images, std::size_t chunk) const {
  nn::NoGradGuard guard;
  const std::size_t n = images.dim(0);
  std::vector<Tensor> parts;
  for (std::size_t b = 0; b < n; b += chunk) {
    const std::size_t e = std::min(n, b + chunk);
    parts.push_back(logits(nn::constant(images.slice_rows(b, e)))->value);
  }
  return stack_rows(parts);
}

nn::Var loss_ce(const nn::Var& logits, std::span<const std::int32_t> labels) {
  return nn::cross_entropy(logits, labels);
}

nn::Var loss_oe(const nn::Var& logits, OeForm form) {
  return form == OeForm::kUniformCrossEntropy ? nn::uniform_cross_entropy(logits)
                                              : nn::negative_mean_softmax(logits);
}

nn::Var club_mi(const DetectorModel& model, const nn::Var& features_id, const nn::Var& features_ood) {
  if (!features_id->value.same_shape(features_ood->value)) {
    throw ArgumentError("CLUB needs paired batches of equal shape");
  }
  auto [mu, lv] = model.club_head(mi_space(features_id));
  return nn::club_upper_bound(mu, lv, mi_space(features_ood));
}

nn::Var mi_space(const nn::Var& features) {
  const auto d = static_cast<real>(features->value.dim(1));
  return nn::scale(nn::l2_normalize_rows(features), std::sqrt(d));
}

std::vector<double> energy_from_logits(const Tensor& logits) {
  if (logits.ndim() != 2) throw ArgumentError("energy needs [B, C] logits");
  const std::size_t b = logits.dim(0), c = logits.dim(1);
  std::vector<double> out(b);
  for (std::size_t i = 0; i < b; ++i) {
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < c; ++k) m = std::max(m, static_cast<double>(logits[i * c + k]));
    double s = 0.0;
    for (std::size_t k = 0; k < c; ++k) s += std::exp(static_cast<double>(logits[i * c + k]) - m);
    out[i] = -(m + std::log(s));
  }
  return out;
}

std::vector<double> energy_scores(const DetectorModel& model, const Tensor& images) {
  return energy_from_logits(model.predict_logits(images));
}

LossTier parse_loss_tier(const std::string& text) {
  if (text == "ce") return LossTier::kCe;
  if (text == "ce+oe") return LossTier::kCeOe;
  if (text == "full") return LossTier::kFull;
  throw ConfigError("unknown loss tier '" + text + "' (expected ce, ce+oe or full)");
}

std::string to_string(LossTier tier) {
  switch (tier) {
    case LossTier::kCe: return "ce";
    case LossTier::kCeOe: return "ce+oe";
    case LossTier::kFull: return "full";
  }
  return "?";
}

void TrainConfig::validate() const {
  if (!(beta >= 0.0) || !(gamma_mi >= 0.0)) throw ConfigError("loss weights must be non-negative");
  if (epochs == 0 || batch_size == 0) throw ConfigError("epochs and batch size must be positive");
  if (!(lr > 0.0) || !(club_lr > 0.0)) throw ConfigError("learning rates must be positive");
}

std::vector<EpochLosses> train_detector(DetectorModel& model, const Tensor& id_images,
                                        std::span<const std::int32_t> id_labels, const PairedOutliers& outliers,
                                        const TrainConfig& cfg) {
  cfg.validate();
  const std::size_t n = id_labels.size();
  if (n == 0 || id_images.dim(0) != n) throw ArgumentError("one label per ID image required");
  const double beta = cfg.effective_beta(), gamma = cfg.effective_gamma();
  const bool use_outliers = beta > 0.0 || gamma > 0.0;

  std::vector<std::int64_t> pair_of(n, -1);
  if (use_outliers) {
    if (!outliers.images || outliers.source_indices.size() != outliers.images->dim(0)) {
      throw ConfigError("outlier set without provenance: every outlier needs a source index");
    }
    for (std::size_t j = 0; j < outliers.source_indices.size(); ++j) {
      const auto s = outliers.source_indices[j];
      if (s < 0 || static_cast<std::size_t>(s) >= n) {
        throw ConfigError("outlier " + std::to_string(j) + " names source " + std::to_string(s) +
                          ", outside the ID training set");
      }
      if (pair_of[static_cast<std::size_t>(s)] < 0) pair_of[static_cast<std::size_t>(s)] = static_cast<std::int64_t>(j);
    }
  }

  nn::OptimizerState opt = nn::OptimizerState::for_block(model.body(), {cfg.lr});
  nn::OptimizerState qopt = nn::OptimizerState::for_block(model.club(), {cfg.club_lr});
  Rng order_rng = Rng(cfg.seed).fork(3);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});

  const std::size_t steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  const auto total = static_cast<std::int64_t>(steps_per_epoch * cfg.epochs);
  const auto warmup = static_cast<std::int64_t>(steps_per_epoch * cfg.mi_warmup_epochs);
  std::vector<EpochLosses> curves;
  std::int64_t step = 0;
  std::vector<std::size_t> ids, oods;
  std::vector<std::int32_t> labels;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    shuffle(order, order_rng);
    EpochLosses acc;
    for (std::size_t b = 0; b < n; b += cfg.batch_size) {
      const std::size_t e = std::min(n, b + cfg.batch_size);
      ids.assign(order.begin() + static_cast<std::ptrdiff_t>(b), order.begin() + static_cast<std::ptrdiff_t>(e));
      labels.clear();
      for (auto i : ids) labels.push_back(id_labels[i]);
      const Tensor x_id = gather_rows(id_images, ids);

      // Paired rows: ID samples that have an outlier, and those outliers.
      std::vector<std::size_t> paired_ids;
      oods.clear();
      if (use_outliers) {
        for (auto i : ids) {
          if (pair_of[i] < 0) continue;
          paired_ids.push_back(i);
          oods.push_back(static_cast<std::size_t>(pair_of[i]));
        }
      }
      Tensor x_ood, x_pair;
      if (!oods.empty()) {
        x_ood = gather_rows(*outliers.images, oods);
        x_pair = gather_rows(id_images, paired_ids);
      }

      const double lr_scale = nn::cosine_lr(1.0, step, total);
      const double mi_ramp =
          warmup > 0 ? std::min(1.0, static_cast<double>(step + 1) / static_cast<double>(warmup)) : 1.0;
      if (gamma > 0.0 && !oods.empty()) {
        Tensor fx, fy;
        {
          nn::NoGradGuard guard;
          fx = mi_space(model.features(nn::constant(x_pair)))->value;
          fy = mi_space(model.features(nn::constant(x_ood)))->value;
        }
        acc.q_nll += nn::forward_backward(model.club(), [&] {
          auto [mu, lv] = model.club_head(nn::constant(fx));
          return nn::gaussian_nll(mu, lv, nn::constant(fy));
        });
        qopt.hyper.lr = cfg.club_lr * lr_scale;
        nn::adam_step(model.club(), qopt);
      }

      double ce_v = 0, oe_v = 0, mi_v = 0;
      nn::forward_backward(model.body(), [&] {
        nn::Var loss = loss_ce(model.logits(nn::constant(x_id)), labels);
        ce_v = loss->value.item();
        if (!oods.empty()) {
          const nn::Var f_ood = model.features(nn::constant(x_ood));
          if (beta > 0.0) {
            const nn::Var oe = loss_oe(model.logits_from_features(f_ood), cfg.oe_form);
            oe_v = oe->value.item();
            loss = nn::add(loss, nn::scale(oe, static_cast<real>(beta)));
          }
          if (gamma > 0.0) {
            const nn::Var f_pair = model.features(nn::constant(x_pair));
            const nn::Var mi = club_mi(model, f_pair, f_ood);
            mi_v = mi->value.item();
            loss = nn::add(loss, nn::scale(mi, static_cast<real>(gamma * mi_ramp)));
          }
        }
        return loss;
      });
      opt.hyper.lr = cfg.lr * lr_scale;
      nn::adam_step(model.body(), opt);
      acc.ce += ce_v;
      acc.oe += oe_v;
      acc.mi += mi_v;
      ++step;
    }
    const double k = 1.0 / static_cast<double>(steps_per_epoch);
    curves.push_back({acc.ce * k, acc.oe * k, acc.mi * k, acc.q_nll * k});
  }
  return curves;
}

double accuracy(const Tensor& logits, std::span<const std::int32_t> labels) {
  if (logits.ndim() != 2 || logits.dim(0) != labels.size() || labels.empty()) {
    throw ArgumentError("accuracy needs one label per logit row");
  }
  const std::size_t c = logits.dim(1);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto row = logits.data().subspan(i * c, c);
    const auto best = static_cast<std::int32_t>(std::max_element(row.begin(), row.end()) - row.begin());
    hit += best == labels[i];
  }
  return static_cast<double>(hit) / static_cast<double>(labels.size());
}

}  // namespace sona::detector

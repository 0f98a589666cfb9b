#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "lesionaware/checkpoint.hpp"
#include "lesionaware/data.hpp"
#include "lesionaware/losses.hpp"
#include "lesionaware/metrics.hpp"
#include "lesionaware/model.hpp"
#include "lesionaware/optimizer.hpp"
#include "lesionaware/runtime.hpp"

namespace lesionaware {

struct TrainConfig {
  double lambda = 0.5;       // hybrid weight of the classification term
  double alpha = 0.1;        // pseudo-label term weight
  double tau = 0.8;          // pseudo-label binarization threshold
  double lr = 0.001;
  int batch_labeled = 8;     // m
  int batch_unlabeled = 8;   // m'
  int stage1_epochs = 20;    // t_l
  int stage2_epochs = 100;   // t_c
  double val_fraction = 0.15;
  std::uint64_t seed = 0;
  int repeats = 3;
  bool augment = true;

  void validate() const {
    if (lambda < 0.0 || lambda > 1.0) throw ConfigError("train: lambda must be in [0,1]");
    if (alpha < 0.0) throw ConfigError("train: alpha must be >= 0");
    if (tau <= 0.0 || tau >= 1.0) throw ConfigError("train: tau must be in (0,1)");
    if (lr <= 0.0) throw ConfigError("train: lr must be > 0");
    if (batch_labeled < 1 || batch_unlabeled < 1) throw ConfigError("train: batch sizes must be >= 1");
    if (stage1_epochs < 0 || stage2_epochs < 0) throw ConfigError("train: epochs must be >= 0");
    if (val_fraction <= 0.0 || val_fraction >= 1.0) {
      throw ConfigError("train: val_fraction must be in (0,1)");
    }
    if (repeats < 1) throw ConfigError("train: repeats must be >= 1");
  }
};

// One CSV row of the per-epoch training log. Loss columns hold epoch means;
// absent optionals print as empty cells.
struct EpochRow {
  int epoch = 0;
  std::optional<double> l_cls, l_loc_labeled, l_loc_pseudo, l_hyb;
  std::optional<double> val_accuracy, val_jsi;
};

inline void write_epoch_csv(const std::filesystem::path& path, const std::vector<EpochRow>& rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot create training log: " + path.string());
  out << "epoch,L_cls,L_loc_labeled,L_loc_pseudo,L_hyb,val_accuracy,val_JSI\n";
  const auto cell = [](const std::optional<double>& v) {
    return v ? format_number(*v) : std::string();
  };
  for (const auto& r : rows) {
    out << r.epoch << ',' << cell(r.l_cls) << ',' << cell(r.l_loc_labeled) << ','
        << cell(r.l_loc_pseudo) << ',' << cell(r.l_hyb) << ',' << cell(r.val_accuracy) << ','
        << cell(r.val_jsi) << '\n';
  }
  if (!out) throw IoError("failed writing training log: " + path.string());
}

template <typename S>
struct ModelSnapshot {
  std::vector<std::vector<S>> params;
  std::vector<std::vector<S>> buffers;
};

template <typename S>
ModelSnapshot<S> snapshot_model(LesionModel<S>& model) {
  ModelSnapshot<S> snap;
  for (const auto& p : model.parameters()) snap.params.push_back(p.tensor.values());
  for (const auto& b : model.buffers()) snap.buffers.push_back(*b.values);
  return snap;
}

template <typename S>
void restore_snapshot(LesionModel<S>& model, const ModelSnapshot<S>& snap) {
  auto params = model.parameters();
  auto buffers = model.buffers();
  if (snap.params.size() != params.size() || snap.buffers.size() != buffers.size()) {
    throw UsageError("restore_snapshot: snapshot does not match model");
  }
  for (std::size_t i = 0; i < params.size(); ++i) params[i].tensor.assign_values(snap.params[i]);
  for (std::size_t i = 0; i < buffers.size(); ++i) *buffers[i].values = snap.buffers[i];
}

namespace detail {

// Infinite cycling stream over a sample-index pool with seeded reshuffling.
class IndexStream {
 public:
  IndexStream(std::vector<int> pool, Rng rng) : pool_(std::move(pool)), rng_(rng) { reshuffle(); }

  bool empty() const { return pool_.empty(); }

  int next() {
    if (pool_.empty()) throw UsageError("index stream: empty pool");
    if (pos_ >= pool_.size()) reshuffle();
    return pool_[pos_++];
  }

 private:
  void reshuffle() {
    rng_.shuffle(pool_);
    pos_ = 0;
  }

  std::vector<int> pool_;
  Rng rng_;
  std::size_t pos_ = 0;
};

}  // namespace detail

template <typename S>
Tensor<S> images_to_tensor(const std::vector<Sample>& batch, int input_size) {
  const int n = static_cast<int>(batch.size());
  std::vector<S> values;
  values.reserve(static_cast<std::size_t>(n) * input_size * input_size);
  for (const Sample& s : batch) {
    if (s.width != input_size || s.height != input_size) {
      throw DimensionError("batch: sample '" + s.name + "' is " + std::to_string(s.width) + "x" +
                           std::to_string(s.height) + ", model expects " +
                           std::to_string(input_size) + "x" + std::to_string(input_size));
    }
    for (float v : s.image) values.push_back(static_cast<S>(v));
  }
  return Tensor<S>::from_vector({n, 1, input_size, input_size}, std::move(values));
}

template <typename S>
Tensor<S> onehot_labels(const std::vector<Sample>& batch, int num_classes) {
  const int n = static_cast<int>(batch.size());
  std::vector<S> values(static_cast<std::size_t>(n) * num_classes, S(0));
  for (int i = 0; i < n; ++i) {
    const int label = batch[static_cast<std::size_t>(i)].class_label;
    if (label < 0 || label >= num_classes) {
      throw UsageError("batch: class label " + std::to_string(label) + " out of range for K=" +
                       std::to_string(num_classes));
    }
    values[static_cast<std::size_t>(i) * num_classes + label] = S(1);
  }
  return Tensor<S>::from_vector({n, num_classes}, std::move(values));
}

// Rasterizes location supervision at the mask head resolution: full-resolution
// mask (or filled box), area-downsampled and thresholded at 0.5.
template <typename S>
Tensor<S> target_masks_tensor(const std::vector<Sample>& batch, int input_size, int top_size) {
  const int n = static_cast<int>(batch.size());
  std::vector<S> values;
  values.reserve(static_cast<std::size_t>(n) * top_size * top_size);
  for (const Sample& s : batch) {
    const auto full = location_to_mask(s.location, s.width, s.height);
    const auto coarse = downsample_mask(full, input_size, top_size);
    for (std::uint8_t v : coarse) values.push_back(static_cast<S>(v));
  }
  return Tensor<S>::from_vector({n, 1, top_size, top_size}, std::move(values));
}

// Classification accuracy and mean localization JSI on a held-out set
// (evaluation mode, no gradients). JSI compares the upsampled 0.5-binarized
// predicted mask against the raw location label.
template <typename S>
std::pair<double, std::optional<double>> validate_model(LesionModel<S>& model, const Dataset& val) {
  NoGradGuard ng;
  const int input_size = model.cfg.fex.input_size;
  int correct = 0;
  double jsi_sum = 0.0;
  int jsi_n = 0;
  const int chunk = 16;
  for (int start = 0; start < val.size(); start += chunk) {
    const int stop = std::min(val.size(), start + chunk);
    std::vector<Sample> batch(val.samples.begin() + start, val.samples.begin() + stop);
    auto out = model.forward(images_to_tensor<S>(batch, input_size), NormMode::kEval);
    const int k = model.cfg.num_classes;
    for (int i = 0; i < static_cast<int>(batch.size()); ++i) {
      int arg = 0;
      for (int j = 1; j < k; ++j) {
        if (out.probs.values()[static_cast<std::size_t>(i) * k + j] >
            out.probs.values()[static_cast<std::size_t>(i) * k + arg]) {
          arg = j;
        }
      }
      if (arg == batch[static_cast<std::size_t>(i)].class_label) ++correct;
      if (out.mask.defined() && batch[static_cast<std::size_t>(i)].location.present()) {
        const int sn = model.cfg.fex.top_size();
        std::vector<double> probs(static_cast<std::size_t>(sn) * sn);
        for (int p = 0; p < sn * sn; ++p) {
          probs[static_cast<std::size_t>(p)] =
              static_cast<double>(out.mask.values()[static_cast<std::size_t>(i) * sn * sn + p]);
        }
        const auto pred = binarize_mask(probs, sn, 0.5, input_size, input_size);
        const auto gt = location_to_mask(batch[static_cast<std::size_t>(i)].location, input_size,
                                         input_size);
        jsi_sum += jsi_masks(pred, gt).value;
        ++jsi_n;
      }
    }
  }
  const double acc = val.size() > 0 ? static_cast<double>(correct) / val.size() : 0.0;
  std::optional<double> jsi;
  if (jsi_n > 0) jsi = jsi_sum / jsi_n;
  return {acc, jsi};
}

// Stage 1: pre-train FEX + LA-Net on the located subset by minimizing the
// localization BCE. Classifier parameters are untouched.
template <typename S>
std::vector<EpochRow> train_stage1(LesionModel<S>& model, const Dataset& dataset,
                                   const TrainConfig& cfg, Adam<S>* optimizer = nullptr) {
  cfg.validate();
  if (!model.lanet) throw UsageError("stage1: model has no LA-Net branch");
  std::vector<int> located;
  for (int i = 0; i < dataset.size(); ++i) {
    if (dataset.samples[static_cast<std::size_t>(i)].location.present()) located.push_back(i);
  }
  if (located.empty()) throw UsageError("stage1: no location-labeled samples");
  std::vector<EpochRow> rows;
  if (cfg.stage1_epochs == 0) return rows;

  Rng master(cfg.seed);
  detail::IndexStream stream(located, master.fork(1));
  Rng aug_rng = master.fork(2);

  const auto params = model.localization_parameters();
  Adam<S> local_opt(cfg.lr);
  Adam<S>& opt = optimizer ? *optimizer : local_opt;

  const int m = cfg.batch_labeled;
  const int steps = (static_cast<int>(located.size()) + m - 1) / m;
  const int input_size = model.cfg.fex.input_size;
  const int top_size = model.cfg.fex.top_size();

  for (int epoch = 1; epoch <= cfg.stage1_epochs; ++epoch) {
    double loss_sum = 0.0;
    for (int step = 0; step < steps; ++step) {
      std::vector<Sample> batch;
      for (int i = 0; i < m; ++i) {
        const Sample& s = dataset.samples[static_cast<std::size_t>(stream.next())];
        batch.push_back(cfg.augment ? augment(s, aug_rng) : s);
      }
      auto pyramid = model.fex.extract(images_to_tensor<S>(batch, input_size), NormMode::kTrain);
      auto mask = model.lanet->predict(pyramid, NormMode::kTrain);
      auto loss = localization_loss(mask, target_masks_tensor<S>(batch, input_size, top_size));
      const double value = static_cast<double>(loss.item());
      if (!std::isfinite(value)) throw NumericError("stage1: non-finite loss");
      backward(loss);
      opt.step(params);
      for (const auto& p : params) p.tensor.zero_grad();
      loss_sum += value;
    }
    EpochRow row;
    row.epoch = epoch;
    row.l_loc_labeled = loss_sum / steps;
    rows.push_back(row);
  }
  return rows;
}

template <typename S>
struct Stage2Result {
  std::vector<EpochRow> rows;
  int best_epoch = 0;
  double best_val_accuracy = 0.0;
  std::optional<double> best_val_jsi;
  ModelSnapshot<S> best;
  bool aborted_non_finite = false;
  std::string abort_reason;
};

// Stage 2: joint semi-supervised training of FEX, LA-Net, and classifier with
// the hybrid loss. Each step draws `batch_labeled` located and
// `batch_unlabeled` unlocated samples (all carry class labels); model
// selection keeps the epoch with the highest validation accuracy.
template <typename S>
Stage2Result<S> train_stage2(LesionModel<S>& model, const Dataset& train, const Dataset& val,
                             const TrainConfig& cfg, int epoch_offset = 0,
                             Adam<S>* optimizer = nullptr) {
  cfg.validate();
  if (train.size() == 0) throw UsageError("stage2: empty training set");

  std::vector<int> located, unlocated;
  for (int i = 0; i < train.size(); ++i) {
    if (train.samples[static_cast<std::size_t>(i)].location.present()) {
      located.push_back(i);
    } else {
      unlocated.push_back(i);
    }
  }
  const bool model_localizes = static_cast<bool>(model.lanet);
  const bool use_loc = cfg.lambda < 1.0 && model_localizes && !located.empty();
  const bool use_pseudo = use_loc && !unlocated.empty() && cfg.alpha > 0.0;
  const bool use_cls = cfg.lambda > 0.0;
  if (model_localizes && located.empty() && cfg.lambda < 1.0) {
    std::cerr << "warning: no location-labeled samples; training degenerates to pure classification\n";
  }

  Rng master(cfg.seed);
  detail::IndexStream located_stream(located.empty() ? std::vector<int>{0} : located, master.fork(3));
  detail::IndexStream unlocated_stream(unlocated.empty() ? std::vector<int>{0} : unlocated,
                                       master.fork(4));
  Rng aug_rng = master.fork(5);

  const auto params = model.parameters();
  Adam<S> local_opt(cfg.lr);
  Adam<S>& opt = optimizer ? *optimizer : local_opt;

  const int m = located.empty() ? 0 : cfg.batch_labeled;
  const int mu = unlocated.empty() ? 0 : cfg.batch_unlabeled;
  const int batch_size = m + mu;
  const int steps = (train.size() + batch_size - 1) / batch_size;
  const int input_size = model.cfg.fex.input_size;
  const int top_size = model.cfg.fex.top_size();

  Stage2Result<S> result;
  result.best = snapshot_model(model);
  ModelSnapshot<S> last_good = result.best;
  double best_acc = -1.0;

  for (int epoch = 1; epoch <= cfg.stage2_epochs; ++epoch) {
    double sum_cls = 0.0, sum_loc = 0.0, sum_pseudo = 0.0, sum_hyb = 0.0;
    bool aborted = false;
    try {
      for (int step = 0; step < steps; ++step) {
        std::vector<Sample> batch;
        for (int i = 0; i < m; ++i) {
          const Sample& s = train.samples[static_cast<std::size_t>(located_stream.next())];
          batch.push_back(cfg.augment ? augment(s, aug_rng) : s);
        }
        for (int i = 0; i < mu; ++i) {
          const Sample& s = train.samples[static_cast<std::size_t>(unlocated_stream.next())];
          batch.push_back(cfg.augment ? augment(s, aug_rng) : s);
        }

        auto out = model.forward(images_to_tensor<S>(batch, input_size), NormMode::kTrain);

        Tensor<S> loss;
        std::optional<Tensor<S>> cls_loss;
        if (use_cls) {
          cls_loss = classification_loss(out.probs, onehot_labels<S>(batch, model.cfg.num_classes));
          sum_cls += static_cast<double>(cls_loss->item());
        }
        if (use_loc) {
          std::vector<Sample> located_batch(batch.begin(), batch.begin() + m);
          Tensor<S> mask_l = mu > 0 ? narrow(out.mask, 0, 0, m) : out.mask;
          Tensor<S> gt_l = target_masks_tensor<S>(located_batch, input_size, top_size);
          Tensor<S> loc_l = localization_loss(mask_l, gt_l);
          sum_loc += static_cast<double>(loc_l.item());
          Tensor<S> semi = loc_l;
          if (use_pseudo) {
            Tensor<S> mask_u = narrow(out.mask, 0, m, mu);
            Tensor<S> pseudo_bce = localization_loss(mask_u, binarize(mask_u, cfg.tau));
            sum_pseudo += static_cast<double>(pseudo_bce.item());
            semi = add(loc_l, mul_scalar(pseudo_bce, static_cast<S>(cfg.alpha)));
          }
          loss = use_cls ? hybrid_loss(*cls_loss, semi, cfg.lambda) : semi;
        } else {
          if (!use_cls) throw UsageError("stage2: both loss terms are disabled");
          // pure classification; the lambda weight still applies when < 1
          loss = cfg.lambda < 1.0 ? mul_scalar(*cls_loss, static_cast<S>(cfg.lambda)) : *cls_loss;
        }
        const double value = static_cast<double>(loss.item());
        if (!std::isfinite(value)) throw NumericError("stage2: non-finite loss");
        sum_hyb += value;
        backward(loss);
        opt.step(params);
        for (const auto& p : params) p.tensor.zero_grad();
      }
    } catch (const NumericError& e) {
      restore_snapshot(model, last_good);
      result.aborted_non_finite = true;
      result.abort_reason = e.what();
      aborted = true;
    }
    if (aborted) break;

    EpochRow row;
    row.epoch = epoch_offset + epoch;
    if (use_cls) row.l_cls = sum_cls / steps;
    if (use_loc) row.l_loc_labeled = sum_loc / steps;
    if (use_loc) row.l_loc_pseudo = use_pseudo ? sum_pseudo / steps : 0.0;
    row.l_hyb = sum_hyb / steps;
    const auto [acc, jsi] = validate_model(model, val);
    row.val_accuracy = acc;
    row.val_jsi = jsi;
    result.rows.push_back(row);
    last_good = snapshot_model(model);

    if (acc > best_acc) {
      best_acc = acc;
      result.best = snapshot_model(model);
      result.best_epoch = epoch_offset + epoch;
      result.best_val_accuracy = acc;
      result.best_val_jsi = jsi;
    }
  }
  if (cfg.stage2_epochs == 0) {
    const auto [acc, jsi] = validate_model(model, val);
    result.best_val_accuracy = acc;
    result.best_val_jsi = jsi;
  }
  return result;
}

}  // namespace lesionaware

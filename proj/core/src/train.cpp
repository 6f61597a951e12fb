#include "blendiff/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "blendiff/errors.hpp"

namespace fs = std::filesystem;

namespace blendiff {

// ---- optimizer ---------------------------------------------------------------

AdamW::AdamW(std::vector<std::pair<std::string, Tensor>> params, AdamWConfig cfg)
    : params_(std::move(params)), cfg_(cfg) {
  slots_.resize(params_.size());
  for (size_t i = 0; i < params_.size(); ++i) {
    const auto n = params_[i].second.size();
    slots_[i].m.assign(n, 0.f);
    slots_[i].v.assign(n, 0.f);
  }
}

void AdamW::zero_grad() {
  for (auto& [name, t] : params_) t.zero_grad();
}

void AdamW::step() {
  // NaN scan + global grad norm first
  double sq_norm = 0.0;
  for (auto& [name, t] : params_) {
    if (!t.requires_grad())
      throw contract_error("adamw: parameter " + name + " is frozen");
    for (float g : t.grad()) {
      if (std::isnan(g))
        throw numeric_error("adamw: NaN gradient in parameter " + name);
      sq_norm += double(g) * g;
    }
  }
  double clip_factor = 1.0;
  if (cfg_.grad_clip > 0.f) {
    double norm = std::sqrt(sq_norm);
    if (norm > cfg_.grad_clip) clip_factor = cfg_.grad_clip / norm;
  }

  ++step_count_;
  const double b1 = cfg_.beta1, b2 = cfg_.beta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(step_count_));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(step_count_));
  for (size_t i = 0; i < params_.size(); ++i) {
    Tensor& t = params_[i].second;
    auto data = t.data_mut();
    const auto grad = t.grad();
    auto& m = slots_[i].m;
    auto& v = slots_[i].v;
    for (size_t j = 0; j < data.size(); ++j) {
      const double g = double(grad[j]) * clip_factor;
      const double mj = b1 * m[j] + (1.0 - b1) * g;
      const double vj = b2 * v[j] + (1.0 - b2) * g * g;
      m[j] = static_cast<float>(mj);
      v[j] = static_cast<float>(vj);
      const double mhat = mj / bc1;
      const double vhat = vj / bc2;
      double p = data[j];
      p -= cfg_.lr * (mhat / (std::sqrt(vhat) + cfg_.eps));
      p -= cfg_.lr * cfg_.weight_decay * data[j];
      data[j] = static_cast<float>(p);
    }
  }
}

std::vector<NamedTensor> AdamW::state_tensors() const {
  std::vector<NamedTensor> out;
  for (size_t i = 0; i < params_.size(); ++i) {
    const Shape& s = params_[i].second.shape();
    out.push_back({"opt." + params_[i].first + ".m", s, slots_[i].m});
    out.push_back({"opt." + params_[i].first + ".v", s, slots_[i].v});
  }
  out.push_back({"opt.step_count", {1},
                 {static_cast<float>(step_count_)}});
  return out;
}

void AdamW::restore_state(const Checkpoint& ckpt) {
  for (size_t i = 0; i < params_.size(); ++i) {
    const NamedTensor* m = ckpt.find("opt." + params_[i].first + ".m");
    const NamedTensor* v = ckpt.find("opt." + params_[i].first + ".v");
    if (!m || !v)
      throw config_error("adamw: checkpoint has no optimizer state for " +
                         params_[i].first);
    slots_[i].m = m->data;
    slots_[i].v = v->data;
  }
  const NamedTensor* sc = ckpt.find("opt.step_count");
  if (!sc) throw config_error("adamw: checkpoint has no step count");
  step_count_ = static_cast<int64_t>(sc->data[0]);
}

// ---- dataset -------------------------------------------------------------------

Dataset Dataset::load(const std::string& dir) {
  Dataset ds;
  ds.root = dir;
  for (const std::string split : {"train", "val", "test"}) {
    auto rows = read_manifest((fs::path(dir) / (split + ".csv")).string());
    for (auto& r : rows) ds.rows.push_back(std::move(r));
  }
  ds.images.reserve(ds.rows.size());
  for (size_t i = 0; i < ds.rows.size(); ++i) {
    ds.images.push_back(
        read_png((fs::path(dir) / ds.rows[i].path).string()));
    if (ds.rows[i].split == "train")
      ds.train.push_back(i);
    else if (ds.rows[i].split == "val")
      ds.val.push_back(i);
    else
      ds.test.push_back(i);
  }
  if (ds.train.empty()) throw config_error("dataset: no training rows in " + dir);
  return ds;
}

std::vector<TrainSample> Dataset::batch(std::span<const size_t> indices) const {
  std::vector<TrainSample> out;
  out.reserve(indices.size());
  for (size_t idx : indices)
    out.push_back({&images[idx], rows[idx].shape_id});
  return out;
}

int Dataset::n_shapes() const {
  int mx = 0;
  for (const auto& r : rows) mx = std::max(mx, r.shape_id + 1);
  return mx;
}

// ---- training loops -------------------------------------------------------------

namespace {

std::vector<size_t> shuffled(const std::vector<size_t>& base, Rng rng) {
  std::vector<size_t> idx = base;
  for (size_t i = idx.size(); i > 1; --i)
    std::swap(idx[i - 1], idx[rng.below(static_cast<uint32_t>(i))]);
  return idx;
}

struct EpochStats {
  double sum = 0.0;
  int batches = 0;
  float mean() const { return batches ? static_cast<float>(sum / batches) : 0.f; }
};

}  // namespace

float validation_loss(const DenoiserModel& model, const Dataset& data,
                      const NoiseSchedule& sched, uint64_t seed, int n_draws,
                      const AdapterWeights* adapter, BlendMode mode) {
  if (data.val.empty()) throw config_error("validation_loss: empty val split");
  Rng rng(seed, streams::kValNoise);
  double sum = 0.0;
  for (int d = 0; d < n_draws; ++d) {
    Rng drng = rng.split(d);
    const size_t idx = data.val[drng.below(static_cast<uint32_t>(data.val.size()))];
    const Image& img = data.images[idx];
    const int class_id = data.rows[idx].shape_id;
    const int t = 1 + static_cast<int>(drng.below(sched.T));

    Tensor x0 = image_to_model_space(img);
    Tensor eps = Tensor::randn(x0.shape(), drng);
    Tensor x_t = forward_noise(x0, t, eps, sched);

    Tensor eps_hat;
    if (mode == BlendMode::kOff) {
      eps_hat = forward(model, x_t, t, class_id).eps;
    } else {
      LayerActivations acts = encode_reference(model, img, class_id);
      BlendSpec spec;
      spec.mode = mode;
      spec.alpha = 1.f;
      spec.inv_temp = 1.f;
      const LayerActivations refs[1] = {acts};
      BlendContext ctx = make_blend_context(spec, adapter, refs);
      eps_hat = forward(model, x_t, t, class_id, &ctx).eps;
    }
    sum += mse(eps_hat, eps).item();
  }
  return static_cast<float>(sum / n_draws);
}

namespace {

template <typename LossFn>
TrainResult run_epochs(const Dataset& data, const TrainHyper& hyper, AdamW& opt,
                       int start_epoch, const LossFn& batch_loss,
                       const std::function<float()>& val_loss,
                       const std::function<void(int)>& epoch_boundary,
                       const EpochHook& hook) {
  TrainResult result;
  Rng shuffle_root(hyper.seed, streams::kShuffle);
  for (int epoch = start_epoch; epoch < hyper.epochs; ++epoch) {
    auto perm = shuffled(data.train, shuffle_root.split(epoch));
    EpochStats stats;
    for (size_t off = 0; off + hyper.batch_size <= perm.size();
         off += hyper.batch_size) {
      std::span<const size_t> idx(perm.data() + off,
                                  static_cast<size_t>(hyper.batch_size));
      Tensor loss = batch_loss(epoch, static_cast<int>(off / hyper.batch_size), idx);
      const float lv = loss.item();
      if (!std::isfinite(lv))
        throw numeric_error("training diverged: non-finite loss at epoch " +
                            std::to_string(epoch));
      opt.zero_grad();
      loss.backward();
      opt.step();
      stats.sum += lv;
      ++stats.batches;
    }
    const float vl = val_loss();
    result.curve.push_back({epoch, "train", stats.mean()});
    result.curve.push_back({epoch, "val", vl});
    result.final_val_loss = vl;
    if (epoch_boundary) epoch_boundary(epoch);
    if (hook) hook(epoch, stats.mean(), vl);
  }
  return result;
}

}  // namespace

TrainResult train_base(DenoiserModel& model, const Dataset& data,
                       const NoiseSchedule& sched, const TrainHyper& hyper,
                       AdamW& opt, int start_epoch, const EpochHook& hook) {
  Rng noise_root(hyper.seed, streams::kTrainNoise);
  auto batch_loss = [&](int epoch, int step, std::span<const size_t> idx) {
    auto batch = data.batch(idx);
    return training_loss(model, batch, sched, noise_root.split(epoch).split(step),
                         nullptr, hyper.class_drop);
  };
  auto val = [&] {
    return validation_loss(model, data, sched, hyper.seed, hyper.val_draws);
  };
  return run_epochs(data, hyper, opt, start_epoch, batch_loss, val, nullptr, hook);
}

TrainResult train_adapter(const DenoiserModel& model, AdapterWeights& adapter,
                          const Dataset& data, const NoiseSchedule& sched,
                          const TrainHyper& hyper, AdamW& opt, int start_epoch,
                          const EpochHook& hook) {
  if (!model.frozen)
    throw contract_error("train_adapter: base model must be frozen");
  const uint64_t base_hash = model.content_hash();

  Rng noise_root(hyper.seed, streams::kTrainNoise);
  auto batch_loss = [&](int epoch, int step, std::span<const size_t> idx) {
    auto batch = data.batch(idx);
    return training_loss(model, batch, sched, noise_root.split(epoch).split(step),
                         &adapter, 0.f);
  };
  auto val = [&] {
    return validation_loss(model, data, sched, hyper.seed, hyper.val_draws,
                           &adapter, BlendMode::kBa);
  };
  auto boundary = [&](int epoch) {
    if (model.content_hash() != base_hash)
      throw contract_error("train_adapter: frozen base weights changed during "
                           "epoch " + std::to_string(epoch));
  };
  return run_epochs(data, hyper, opt, start_epoch, batch_loss, val, boundary, hook);
}

void write_curves_csv(const std::string& path,
                      const std::vector<CurvePoint>& curve) {
  std::ofstream out(path);
  if (!out) throw config_error("write_curves_csv: cannot open " + path);
  out << "epoch,split,loss\n";
  char buf[64];
  for (const auto& p : curve) {
    std::snprintf(buf, sizeof buf, "%.8g", p.loss);
    out << p.epoch << "," << p.split << "," << buf << "\n";
  }
}

}  // namespace blendiff

#pragma once

// Two-stage training, attention export and evaluation over a synthetic dataset.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "transgeo/batching.hpp"
#include "transgeo/checkpoint.hpp"
#include "transgeo/config.hpp"
#include "transgeo/crop.hpp"
#include "transgeo/dataset.hpp"
#include "transgeo/eval.hpp"
#include "transgeo/loss.hpp"
#include "transgeo/optim.hpp"
#include "transgeo/vit.hpp"

namespace transgeo {

using Encoder = VisionTransformer<float>;

class PipelineError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (salt + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

struct Encoders {
  Encoder street;
  Encoder aerial;
};

inline Encoders build_encoders(const RunConfig& cfg, const DatasetIndex& index) {
  return {Encoder(cfg.street.vit(index.street_height, index.street_width), mix_seed(cfg.seed, 1)),
          Encoder(cfg.aerial.vit(index.aerial_px, index.aerial_px), mix_seed(cfg.seed, 2))};
}

/// Aerial token selection for stage 2: images upsampled to the scaled side, one patch mask
/// per reference.
struct CropSetup {
  CropPolicy policy;
  ScaledGrid scaled;
  std::string attn_dir;
};

inline std::filesystem::path attention_path(const std::string& attn_dir, const SampleRecord& r) {
  return std::filesystem::path(attn_dir) / (r.id + ".attn");
}

/// Per-stream input standardization, fitted on the stage-1 training images.
struct InputNorm {
  ImageStats street;
  ImageStats aerial;
};

/// Images (standardized) and masks for a set of records, loaded once.
struct LoadedSamples {
  std::vector<std::size_t> records;
  std::vector<Image> street;
  std::vector<Image> aerial;
  std::vector<TokenMask> masks;  // empty unless cropping
  InputNorm norm;
};

/// Loads and standardizes; without `norm` the statistics are fitted on these images.
inline LoadedSamples load_samples(const DatasetIndex& index, const std::vector<std::size_t>& records,
                                  const std::optional<CropSetup>& crop, const std::optional<InputNorm>& norm) {
  LoadedSamples s;
  s.records = records;
  for (std::size_t r : records) {
    s.street.push_back(load_ppm(index.street_path(r).string()));
    Image a = load_ppm(index.aerial_path(r).string());
    if (crop) {
      if (crop->scaled.side_px != a.width) a = resize_bilinear(a, crop->scaled.side_px, crop->scaled.side_px);
      const auto path = attention_path(crop->attn_dir, index.records[r]);
      if (!std::filesystem::exists(path)) throw PipelineError("missing attention file " + path.string());
      AttentionMap map = resize_attention(read_attention(path.string()), crop->scaled.grid);
      s.masks.push_back(select_tokens(map, crop->policy.beta));
    }
    s.aerial.push_back(std::move(a));
  }
  s.norm = norm ? *norm : InputNorm{channel_stats(s.street), channel_stats(s.aerial)};
  for (auto& img : s.street) img = standardize(std::move(img), s.norm.street);
  for (auto& img : s.aerial) img = standardize(std::move(img), s.norm.aerial);
  return s;
}

inline NamedArray stats_array(const std::string& name, const ImageStats& st) {
  NamedArray a{name, {2, st.mean.size()}, {}};
  a.values.insert(a.values.end(), st.mean.begin(), st.mean.end());
  a.values.insert(a.values.end(), st.std.begin(), st.std.end());
  return a;
}

inline ImageStats stats_from_array(const NamedArray& a) {
  if (a.extents.size() != 2 || a.extents[0] != 2) throw PipelineError("malformed statistics array " + a.name);
  const auto c = static_cast<std::ptrdiff_t>(a.extents[1]);
  return {{a.values.begin(), a.values.begin() + c}, {a.values.begin() + c, a.values.end()}};
}

inline Tensor<float> aerial_embedding(const Encoder& enc, const LoadedSamples& s, std::size_t i) {
  if (s.masks.empty()) return enc.encode(s.aerial[i]).embedding;
  TokenSet<float> tokens = add_position(enc.embed(s.aerial[i]), enc.position_embedding());
  return enc.forward(crop_tokens(tokens, s.masks[i])).embedding;
}

struct Embeddings {
  Tensor<float> street;  // [n x E]
  Tensor<float> aerial;
};

inline Embeddings embed_all(const Encoders& enc, const LoadedSamples& s) {
  NoGradGuard guard;
  std::vector<Tensor<float>> st, ae;
  for (std::size_t i = 0; i < s.records.size(); ++i) {
    st.push_back(enc.street.encode(s.street[i]).embedding);
    ae.push_back(aerial_embedding(enc.aerial, s, i));
  }
  return {concat(st, 0), concat(ae, 0)};
}

inline double train_recall_at_1(const Encoders& enc, const LoadedSamples& s) {
  auto e = embed_all(enc, s);
  return recall_at_k(rank_references(e.street, e.aerial, 1), 1);
}

struct EpochLog {
  std::size_t epoch = 0;
  std::size_t steps = 0;
  double first_loss = 0;
  double mean_loss = 0;
  double train_r1 = -1;
  double lr = 0;
  double seconds = 0;
};

struct TrainResult {
  std::vector<EpochLog> epochs;
  std::string checkpoint;
  double final_train_r1 = -1;
  double seconds = 0;
};

inline void write_run_config(const RunConfig& cfg, const std::string& stage) {
  std::filesystem::create_directories(cfg.out_dir);
  std::ofstream f(std::filesystem::path(cfg.out_dir) / (stage + "_config.txt"));
  f << echo_config(cfg);
  if (!f) throw PipelineError("cannot write config echo into " + cfg.out_dir);
}

inline std::vector<NamedArray> checkpoint_arrays(const Encoders& enc, const AdamW<float>& opt,
                                                 const std::optional<CropSetup>& crop, const InputNorm& norm,
                                                 int stage) {
  std::vector<NamedArray> out;
  out.push_back({"meta/stage", {1}, {float(stage)}});
  out.push_back(stats_array("meta/street_norm", norm.street));
  out.push_back(stats_array("meta/aerial_norm", norm.aerial));
  const auto& ac = enc.aerial.config();
  out.push_back({"meta/aerial_side", {1}, {float(ac.image_height)}});
  if (crop) out.push_back({"meta/crop", {2}, {float(crop->policy.beta), float(crop->policy.gamma)}});
  enc.street.params().append_to(out, "street/");
  enc.aerial.params().append_to(out, "aerial/");
  opt.append_to(out, "opt/");
  return out;
}

inline const NamedArray* find_array(const std::vector<NamedArray>& arrays, const std::string& name) {
  for (const auto& a : arrays)
    if (a.name == name) return &a;
  return nullptr;
}

/// Rebuilds both encoders from a checkpoint. The aerial input size is taken from the
/// checkpoint, so a stage-2 checkpoint comes back with its scaled grid.
struct LoadedModel {
  Encoders enc;
  std::vector<NamedArray> arrays;
  std::optional<CropPolicy> crop;
  InputNorm norm;
};

inline LoadedModel load_model(const RunConfig& cfg, const DatasetIndex& index, const std::string& checkpoint) {
  LoadedModel m{build_encoders(cfg, index), read_checkpoint(checkpoint), std::nullopt, {}};
  const auto* sn = find_array(m.arrays, "meta/street_norm");
  const auto* an = find_array(m.arrays, "meta/aerial_norm");
  if (!sn || !an) throw PipelineError("checkpoint lacks input statistics");
  m.norm = {stats_from_array(*sn), stats_from_array(*an)};
  if (const auto* side = find_array(m.arrays, "meta/aerial_side")) {
    const int s = int(side->values.at(0));
    m.enc.aerial.resize_input(s, s);
  }
  m.enc.street.params().load_from(m.arrays, "street/");
  m.enc.aerial.params().load_from(m.arrays, "aerial/");
  if (const auto* c = find_array(m.arrays, "meta/crop")) {
    CropPolicy p;
    p.beta = c->values.at(0);
    p.gamma = c->values.at(1);
    p.patch_size = m.enc.aerial.config().patch_size;
    m.crop = p;
  }
  return m;
}

inline std::vector<std::size_t> split_records(const DatasetIndex& index, const std::string& split) {
  auto out = index.select(split == "all" ? "" : split);
  if (out.empty()) throw PipelineError("split '" + split + "' is empty");
  return out;
}

/// Shared training loop for both stages.
inline TrainResult train_loop(const RunConfig& cfg, const DatasetIndex& index, Encoders& enc,
                              const LoadedSamples& data, std::size_t epochs, int stage,
                              const std::optional<CropSetup>& crop, std::ostream* log) {
  const auto t0 = std::chrono::steady_clock::now();
  const std::uint64_t batch_seed = mix_seed(cfg.seed, 100 + stage);
  // Batch plans for every epoch fix the schedule length up front.
  DatasetIndex local;
  for (std::size_t r : data.records) local.records.push_back(index.records[r]);
  std::vector<std::size_t> pool(data.records.size());
  std::iota(pool.begin(), pool.end(), std::size_t{0});
  std::vector<std::vector<std::vector<std::size_t>>> plans;
  std::size_t total_steps = 0;
  for (std::size_t e = 0; e < epochs; ++e) {
    plans.push_back(make_batches(local, pool, cfg.batch_size, mix_seed(batch_seed, e)));
    total_steps += plans.back().size();
  }
  CosineSchedule sched{total_steps, cfg.lr, 0.0};
  AdamW<float> opt(AdamWConfig{cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, cfg.weight_decay});
  AsamConfig asam{cfg.asam, cfg.rho, cfg.eta};
  TripletLossConfig loss_cfg{cfg.alpha};

  ParamList<float> params;
  if (cfg.freeze_street && stage == 2) {
    for (auto& e : enc.street.params().entries()) e.tensor.set_requires_grad(false);
  } else {
    collect_params(params, enc.street.params(), "street/");
  }
  collect_params(params, enc.aerial.params(), "aerial/");

  std::filesystem::create_directories(cfg.out_dir);
  const auto log_path = std::filesystem::path(cfg.out_dir) / ("stage" + std::to_string(stage) + "_log.csv");
  std::ofstream csv(log_path);
  csv << "epoch,steps,first_loss,mean_loss,train_r1,lr,seconds\n";

  TrainResult result;
  std::size_t step = 0;
  for (std::size_t e = 0; e < epochs; ++e) {
    EpochLog el;
    el.epoch = e;
    double loss_sum = 0;
    for (const auto& batch : plans[e]) {
      auto loss_fn = [&]() {
        std::vector<Tensor<float>> st, ae;
        for (std::size_t i : batch) {
          st.push_back(enc.street.encode(data.street[i]).embedding);
          ae.push_back(aerial_embedding(enc.aerial, data, i));
        }
        return triplet_loss(concat(st, 0), concat(ae, 0), loss_cfg).loss;
      };
      const double lr = sched.lr(step);
      StepResult r = asam_step<float>(params, loss_fn, asam, opt, lr);
      if (el.steps == 0) el.first_loss = r.loss;
      loss_sum += r.loss;
      ++el.steps;
      ++step;
      el.lr = lr;
    }
    el.mean_loss = loss_sum / double(std::max<std::size_t>(1, el.steps));
    if (cfg.log_train_recall || e + 1 == epochs) el.train_r1 = train_recall_at_1(enc, data);
    el.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    char line[256];
    std::snprintf(line, sizeof line, "%zu,%zu,%.6f,%.6f,%.4f,%.6g,%.2f\n", el.epoch, el.steps, el.first_loss,
                  el.mean_loss, el.train_r1, el.lr, el.seconds);
    csv << line << std::flush;
    if (log) *log << "stage" << stage << " " << line << std::flush;
    result.epochs.push_back(el);
  }
  if (cfg.freeze_street && stage == 2) {
    for (auto& e : enc.street.params().entries()) e.tensor.set_requires_grad(true);
  }
  result.final_train_r1 = result.epochs.empty() ? train_recall_at_1(enc, data) : result.epochs.back().train_r1;
  result.checkpoint = (std::filesystem::path(cfg.out_dir) / ("stage" + std::to_string(stage) + ".ckpt")).string();
  write_checkpoint(result.checkpoint, checkpoint_arrays(enc, opt, crop, data.norm, stage));
  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return result;
}

/// Regular training of both streams from scratch.
inline TrainResult train_stage1(const RunConfig& cfg, std::ostream* log = nullptr) {
  write_run_config(cfg, "stage1");
  DatasetIndex index = load_index(cfg.data_dir);
  Encoders enc = build_encoders(cfg, index);
  LoadedSamples data = load_samples(index, split_records(index, cfg.train_split), std::nullopt, std::nullopt);
  return train_loop(cfg, index, enc, data, cfg.stage1_epochs, 1, std::nullopt, log);
}

/// One ATTN file per reference image of the index, from the last-layer class-token row.
inline std::size_t export_attention(const RunConfig& cfg, const std::string& checkpoint) {
  DatasetIndex index = load_index(cfg.data_dir);
  LoadedModel m = load_model(cfg, index, checkpoint);
  if (m.crop) throw PipelineError("attention export expects a stage-1 checkpoint");
  const std::string dir = cfg.resolved_attn_dir();
  std::filesystem::create_directories(dir);
  NoGradGuard guard;
  for (std::size_t i = 0; i < index.size(); ++i) {
    const auto path = index.aerial_path(i);
    if (!std::filesystem::exists(path)) throw PipelineError("missing aerial image " + path.string());
    auto out = m.enc.aerial.encode(standardize(load_ppm(path.string()), m.norm.aerial), true);
    write_attention(*out.attention, attention_path(dir, index.records[i]).string());
  }
  return index.size();
}

inline CropSetup make_crop_setup(const RunConfig& cfg, const DatasetIndex& index, CropPolicy policy) {
  policy.patch_size = cfg.aerial.patch_size;
  policy.validate();
  return {policy, scaled_grid(index.aerial_px, policy.gamma, policy.patch_size), cfg.resolved_attn_dir()};
}

/// Attend-and-zoom-in training, continuing from stage-1 weights with fresh optimizer state.
inline TrainResult train_stage2(const RunConfig& cfg, const std::string& stage1_checkpoint,
                                std::ostream* log = nullptr) {
  write_run_config(cfg, "stage2");
  DatasetIndex index = load_index(cfg.data_dir);
  LoadedModel m = load_model(cfg, index, stage1_checkpoint);
  if (m.crop) throw PipelineError("stage 2 expects a stage-1 checkpoint");
  CropPolicy policy;
  policy.beta = cfg.beta;
  policy.gamma = cfg.gamma;
  CropSetup crop = make_crop_setup(cfg, index, policy);
  m.enc.aerial.resize_input(crop.scaled.side_px, crop.scaled.side_px);
  LoadedSamples data = load_samples(index, split_records(index, cfg.train_split), crop, m.norm);
  return train_loop(cfg, index, m.enc, data, cfg.stage2_epochs, 2, crop, log);
}

inline const std::vector<double>& default_thresholds() {
  static const std::vector<double> t{1, 2, 5, 10, 20, 50, 100, 200, 500, 1000};
  return t;
}

struct EvalReport {
  MetricTable metrics;
  RetrievalResult result;
  std::vector<double> thresholds;
  std::vector<double> curve;
};

/// Embeds every query and reference of `split`, ranks, and writes metrics.csv and
/// meter_curve.csv into the output directory.
inline EvalReport evaluate(const RunConfig& cfg, const std::string& checkpoint, const std::string& split) {
  DatasetIndex index = load_index(cfg.data_dir);
  LoadedModel m = load_model(cfg, index, checkpoint);
  std::optional<CropSetup> crop;
  if (m.crop) crop = make_crop_setup(cfg, index, *m.crop);
  LoadedSamples data = load_samples(index, split_records(index, split), crop, m.norm);
  auto e = embed_all(m.enc, data);
  EvalReport rep;
  rep.result = rank_references(e.street, e.aerial, 10);
  EvalRows rows{data.records, data.records};
  rep.metrics = summarize(rep.result, index, rows);
  rep.thresholds = default_thresholds();
  rep.curve = meter_curve(rep.result, index, rows, rep.thresholds);
  std::filesystem::create_directories(cfg.out_dir);
  std::ofstream(std::filesystem::path(cfg.out_dir) / "metrics.csv") << metrics_csv(rep.metrics);
  std::ofstream(std::filesystem::path(cfg.out_dir) / "meter_curve.csv") << meter_curve_csv(rep.thresholds, rep.curve);
  return rep;
}

/// Per-image encoder cost of each stream for a stage; the street stream never changes.
struct StageFlops {
  FlopReport street;
  FlopReport aerial;
};

inline StageFlops stage_flops(const RunConfig& cfg, const DatasetIndex& index, std::optional<CropPolicy> policy) {
  const ViTConfig sc = cfg.street.vit(index.street_height, index.street_width);
  ViTConfig ac = cfg.aerial.vit(index.aerial_px, index.aerial_px);
  std::uint64_t tokens = ac.grid().size() + 1;
  if (policy) {
    policy->patch_size = ac.patch_size;
    const ScaledGrid g = scaled_grid(index.aerial_px, policy->gamma, ac.patch_size);
    ac.image_height = ac.image_width = g.side_px;
    tokens = keep_count(policy->beta, g.grid.size()) + 1;
  }
  return {flops(sc, sc.grid().size() + 1), flops(ac, tokens)};
}

}  // namespace transgeo

#pragma once

// Adam with heavy/light learning-rate groups, the product-grouped training
// loop, and cached end-to-end extraction.

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "eave/data.hpp"
#include "eave/encoder.hpp"
#include "eave/rep_cache.hpp"
#include "eave/tagging.hpp"

namespace eave {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.99;
  double eps = 1e-8;
};

struct TrainConfig {
  double lr_light = 1e-3;
  double beta = 1.0;  // heavy learning rate = beta * lr_light
  std::size_t batch_size = 16;
  std::size_t max_steps = 2000;
  AdamConfig adam;
  double dropout = 0.1;
  std::uint64_t seed = 0;
  std::size_t eval_every = 200;  // 0 disables periodic evaluation
};

void validate(const TrainConfig& config);
void to_json(nlohmann::json& j, const AdamConfig& c);
void from_json(const nlohmann::json& j, AdamConfig& c);
void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

// One bias-corrected Adam update in place; `step` counts from 1.
void adam_update(std::span<float> weights, std::span<const float> grads, std::span<float> m,
                 std::span<float> v, std::size_t step, double lr, const AdamConfig& config);

// Optimizer over every model parameter. Heavy parameters use beta * lr;
// fusion, adaptor and head parameters belong to the light group. With
// beta == 0 the heavy group is never touched.
class Adam {
 public:
  Adam(EaveModel<float>& model, const TrainConfig& config);

  // Applies the accumulated gradients and clears them. Throws NumericError
  // naming the parameter on a non-finite gradient, before any update.
  void step();
  std::size_t steps_taken() const { return step_; }

 private:
  struct Slot {
    ParamRef<float> param;
    std::vector<float> m, v;
  };
  EaveModel<float>* model_;
  TrainConfig config_;
  std::vector<Slot> slots_;
  std::size_t step_ = 0;
};

// Products whose id hash is 0 mod 10 form the held-out split.
bool is_eval_product(const std::string& product_id);

struct EvalPoint {
  std::size_t step = 0;
  EvalReport report;
};

struct RunManifest {
  EaveConfig eave;
  TrainConfig train;
  std::uint64_t seed = 0;
  std::string status = "ok";  // "ok" or "diverged"
  std::vector<double> losses;
  std::vector<EvalPoint> evals;
  std::optional<EvalReport> final_eval;
  std::size_t train_products = 0;
  std::size_t eval_products = 0;
  std::size_t train_examples = 0;
  std::size_t vocab_size = 0;
  double wall_seconds = 0.0;
  std::string checkpoint_path;
};

void to_json(nlohmann::json& j, const RunManifest& m);

struct TrainResult {
  RunManifest manifest;
  EaveModel<float> model;
  Vocab vocab;
};

struct TrainHooks {
  // Called after each periodic evaluation; returning false ends training.
  std::function<bool(const EvalPoint&)> on_eval;
  // Called after every optimizer step with the step number and batch loss.
  std::function<void(std::size_t, double)> on_step;
};

// Builds the vocabulary from the training split, sizes both embeddings to
// it, and trains. When out_dir is set the checkpoint, vocab and manifest are
// written there. A NaN loss stops training with status "diverged".
TrainResult train(const std::vector<ProductRecord>& corpus, EaveConfig eave_config, const TrainConfig& train_config,
                  const std::optional<std::filesystem::path>& out_dir = std::nullopt, const TrainHooks& hooks = {});

// Same loop on caller-provided train/eval records and vocabulary.
TrainResult train_split(const std::vector<ProductRecord>& train_records, const std::vector<ProductRecord>& eval_records,
                        const Vocab& vocab, EaveConfig eave_config, const TrainConfig& train_config,
                        const TrainHooks& hooks = {});

struct AttributeExtraction {
  std::vector<SpanPrediction> spans;
  Tensor<float> logits;  // [S_c, 3]
};

struct ExtractionCounters {
  std::size_t heavy_context_forwards = 0;
  std::size_t heavy_attribute_forwards = 0;
  std::size_t cache_hits = 0;
  std::size_t cache_misses = 0;
};

// Inference pipeline. Each extract() call encodes the product context at
// most once; attribute representations are memoised for the extractor's
// lifetime. With a cache, entries are read first and written on a miss.
class Extractor {
 public:
  Extractor(const EaveModel<float>& model, const Vocab& vocab, const RepCache* cache = nullptr);

  std::map<std::string, AttributeExtraction> extract(const ProductRecord& product,
                                                     const std::vector<std::string>& attribute_keys);

  const ExtractionCounters& counters() const { return counters_; }
  void reset_counters() { counters_ = {}; }

 private:
  HeavyReps<float> heavy(SequenceKind kind, const std::vector<int>& ids);

  const EaveModel<float>* model_;
  const Vocab* vocab_;
  const RepCache* cache_;
  std::uint64_t fingerprint_;
  std::unordered_map<std::uint64_t, HeavyReps<float>> attribute_memo_;
  ExtractionCounters counters_;
};

// Gold spans for every annotated attribute, after truncation to context_len.
std::vector<LabeledSpans> gold_spans(const std::vector<ProductRecord>& records, const Vocab& vocab,
                                     std::size_t context_len, std::size_t attribute_len);

std::vector<LabeledSpans> predict(const std::vector<ProductRecord>& records, Extractor& extractor);

EvalReport evaluate_model(const EaveModel<float>& model, const Vocab& vocab,
                          const std::vector<ProductRecord>& records);

}  // namespace eave

#include "eave/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include "eave/checkpoint.hpp"
#include "eave/errors.hpp"
#include "eave/hash.hpp"
#include "eave/rng.hpp"

namespace eave {

void validate(const TrainConfig& c) {
  if (!(c.lr_light > 0.0) || !std::isfinite(c.lr_light)) throw ValidationError("train: lr_light must be > 0");
  if (!(c.beta >= 0.0) || !std::isfinite(c.beta)) throw ValidationError("train: beta must be >= 0");
  if (c.batch_size == 0) throw ValidationError("train: batch_size must be >= 1");
  if (c.dropout < 0.0 || c.dropout >= 1.0) throw ValidationError("train: dropout must be in [0, 1)");
  if (c.adam.beta1 < 0.0 || c.adam.beta1 >= 1.0 || c.adam.beta2 < 0.0 || c.adam.beta2 >= 1.0) {
    throw ValidationError("train: adam betas must be in [0, 1)");
  }
  if (!(c.adam.eps > 0.0)) throw ValidationError("train: adam eps must be > 0");
}

void to_json(nlohmann::json& j, const AdamConfig& c) {
  j = nlohmann::json{{"beta1", c.beta1}, {"beta2", c.beta2}, {"eps", c.eps}};
}

void from_json(const nlohmann::json& j, AdamConfig& c) {
  const AdamConfig d;
  c.beta1 = j.value("beta1", d.beta1);
  c.beta2 = j.value("beta2", d.beta2);
  c.eps = j.value("eps", d.eps);
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"lr_light", c.lr_light},     {"beta", c.beta},       {"batch_size", c.batch_size},
                     {"max_steps", c.max_steps},   {"adam", c.adam},       {"dropout", c.dropout},
                     {"seed", c.seed},             {"eval_every", c.eval_every}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  const TrainConfig d;
  c.lr_light = j.value("lr_light", d.lr_light);
  c.beta = j.value("beta", d.beta);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.max_steps = j.value("max_steps", d.max_steps);
  c.adam = j.contains("adam") ? j.at("adam").get<AdamConfig>() : d.adam;
  c.dropout = j.value("dropout", d.dropout);
  c.seed = j.value("seed", d.seed);
  c.eval_every = j.value("eval_every", d.eval_every);
}

void adam_update(std::span<float> w, std::span<const float> g, std::span<float> m, std::span<float> v,
                 std::size_t step, double lr, const AdamConfig& c) {
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(step));
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double gi = g.empty() ? 0.0 : static_cast<double>(g[i]);
    const double mi = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
    const double vi = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
    m[i] = static_cast<float>(mi);
    v[i] = static_cast<float>(vi);
    const double m_hat = mi / bc1;
    const double v_hat = vi / bc2;
    w[i] = static_cast<float>(w[i] - lr * m_hat / (std::sqrt(v_hat) + c.eps));
  }
}

Adam::Adam(EaveModel<float>& model, const TrainConfig& config) : model_(&model), config_(config) {
  validate(config_);
  for (auto& p : model.parameters()) {
    if (p.group == ParamGroup::Heavy && config_.beta == 0.0) continue;
    const auto n = p.tensor.numel();
    slots_.push_back({p, std::vector<float>(n, 0.0f), std::vector<float>(n, 0.0f)});
  }
}

void Adam::step() {
  for (const auto& s : slots_) {
    if (!s.param.tensor.has_grad()) continue;
    for (float g : s.param.tensor.node()->grad) {
      if (!std::isfinite(g)) throw NumericError("non-finite gradient in parameter " + s.param.name);
    }
  }
  ++step_;
  bool heavy_changed = false;
  for (auto& s : slots_) {
    auto& t = s.param.tensor;
    const double lr = s.param.group == ParamGroup::Heavy ? config_.beta * config_.lr_light : config_.lr_light;
    std::span<const float> g;
    if (t.has_grad()) g = t.node()->grad;
    adam_update(t.mutable_data(), g, s.m, s.v, step_, lr, config_.adam);
    heavy_changed = heavy_changed || s.param.group == ParamGroup::Heavy;
  }
  for (auto& p : model_->parameters()) p.tensor.zero_grad();
  if (heavy_changed) model_->invalidate_fingerprint();
}

bool is_eval_product(const std::string& product_id) {
  Fnv1a64 h;
  h.update(product_id);
  return h.digest() % 10 == 0;
}

void to_json(nlohmann::json& j, const RunManifest& m) {
  nlohmann::json evals = nlohmann::json::array();
  for (const auto& e : m.evals) evals.push_back({{"step", e.step}, {"report", e.report}});
  j = nlohmann::json{{"eave", m.eave},
                     {"train", m.train},
                     {"seed", m.seed},
                     {"status", m.status},
                     {"losses", m.losses},
                     {"evals", evals},
                     {"final_eval", m.final_eval ? nlohmann::json(*m.final_eval) : nlohmann::json(nullptr)},
                     {"train_products", m.train_products},
                     {"eval_products", m.eval_products},
                     {"train_examples", m.train_examples},
                     {"vocab_size", m.vocab_size},
                     {"wall_seconds", m.wall_seconds},
                     {"checkpoint_path", m.checkpoint_path}};
}

namespace {

struct ProductExamples {
  std::vector<int> context_ids;
  std::vector<TokenizedExample> examples;
};

struct BatchItem {
  std::size_t product;
  std::size_t example;
};

// Products in shuffled order, each product's examples contiguous, so a batch
// touches few contexts.
std::vector<BatchItem> epoch_order(const std::vector<ProductExamples>& products, Rng& rng) {
  std::vector<std::size_t> order(products.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng.shuffle(order.begin(), order.end());
  std::vector<BatchItem> items;
  for (auto p : order) {
    std::vector<std::size_t> ex(products[p].examples.size());
    for (std::size_t i = 0; i < ex.size(); ++i) ex[i] = i;
    rng.shuffle(ex.begin(), ex.end());
    for (auto e : ex) items.push_back({p, e});
  }
  return items;
}

}  // namespace

TrainResult train_split(const std::vector<ProductRecord>& train_records, const std::vector<ProductRecord>& eval_records,
                        const Vocab& vocab, EaveConfig eave_config, const TrainConfig& tc, const TrainHooks& hooks) {
  const auto started = std::chrono::steady_clock::now();
  validate(tc);
  if (eave_config.beta != tc.beta) {
    throw ValidationError("train: eave beta " + std::to_string(eave_config.beta) + " differs from train beta " +
                          std::to_string(tc.beta));
  }
  eave_config.heavy.vocab_size = vocab.size();
  eave_config.light.vocab_size = vocab.size();
  validate(eave_config);

  std::vector<ProductExamples> products;
  std::size_t n_examples = 0;
  for (const auto& r : train_records) {
    ProductExamples pe;
    for (const auto& a : r.attributes) {
      pe.examples.push_back(
          build_example(r, a.key, vocab, eave_config.context_len, eave_config.attribute_len));
    }
    if (pe.examples.empty()) continue;
    pe.context_ids = pe.examples.front().context_ids;
    n_examples += pe.examples.size();
    products.push_back(std::move(pe));
  }
  if (products.empty()) throw ValidationError("train: no training examples");

  TrainResult result{{}, EaveModel<float>::init(eave_config, tc.seed), vocab};
  auto& model = result.model;
  auto& manifest = result.manifest;
  manifest.eave = eave_config;
  manifest.train = tc;
  manifest.seed = tc.seed;
  manifest.train_products = products.size();
  manifest.eval_products = eval_records.size();
  manifest.train_examples = n_examples;
  manifest.vocab_size = vocab.size();

  if (tc.beta == 0.0) {
    for (auto& p : model.parameters()) {
      if (p.group == ParamGroup::Heavy) p.tensor.set_requires_grad(false);
    }
  }
  Adam adam(model, tc);
  Rng rng(tc.seed ^ 0x9e3779b97f4a7c15ULL);
  const ForwardOptions opts{tc.dropout, &rng};

  auto run_eval = [&](std::size_t step) -> bool {
    if (eval_records.empty()) return true;
    EvalPoint point{step, evaluate_model(model, vocab, eval_records)};
    manifest.evals.push_back(point);
    return !hooks.on_eval || hooks.on_eval(point);
  };

  std::vector<BatchItem> order;
  std::size_t cursor = 0;
  for (std::size_t step = 1; step <= tc.max_steps; ++step) {
    std::vector<BatchItem> batch;
    while (batch.size() < tc.batch_size) {
      if (cursor == order.size()) {
        order = epoch_order(products, rng);
        cursor = 0;
      }
      batch.push_back(order[cursor++]);
    }

    std::map<std::size_t, HeavyReps<float>> ctx_reps;
    std::map<std::uint64_t, HeavyReps<float>> attr_reps;
    Tensor<float> total;
    for (const auto& item : batch) {
      const auto& pe = products[item.product];
      const auto& ex = pe.examples[item.example];
      auto cit = ctx_reps.find(item.product);
      if (cit == ctx_reps.end()) {
        cit = ctx_reps.emplace(item.product, heavy_encode<float>(pe.context_ids, SequenceKind::Context, model, opts))
                  .first;
      }
      const auto akey = content_hash(SequenceKind::Attribute, ex.attribute_ids);
      auto ait = attr_reps.find(akey);
      if (ait == attr_reps.end()) {
        ait = attr_reps.emplace(akey, heavy_encode<float>(ex.attribute_ids, SequenceKind::Attribute, model, opts))
                  .first;
      }
      const auto states = light_encode<float>(ex.context_ids, ex.attribute_ids, cit->second, ait->second, model, opts);
      const auto loss = tagging_loss(tag_logits(states, model.head, eave_config.context_len), ex.gold_tags,
                                     ex.context_pad_mask);
      total = total.defined() ? add(total, loss) : loss;
    }
    const auto loss = scale(total, 1.0f / static_cast<float>(batch.size()));
    const double value = loss.item();
    manifest.losses.push_back(value);
    if (!std::isfinite(value)) {
      manifest.status = "diverged";
      break;
    }
    backward(loss);
    adam.step();
    if (hooks.on_step) hooks.on_step(step, value);
    if (tc.eval_every && step % tc.eval_every == 0 && !run_eval(step)) break;
  }
  if (manifest.status == "ok" && !eval_records.empty()) {
    if (!manifest.evals.empty() && manifest.evals.back().step == adam.steps_taken()) {
      manifest.final_eval = manifest.evals.back().report;
    } else {
      manifest.final_eval = evaluate_model(model, vocab, eval_records);
    }
  }
  manifest.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return result;
}

TrainResult train(const std::vector<ProductRecord>& corpus, EaveConfig eave_config, const TrainConfig& tc,
                  const std::optional<std::filesystem::path>& out_dir, const TrainHooks& hooks) {
  if (corpus.empty()) throw ValidationError("train: empty corpus");
  std::vector<ProductRecord> train_records, eval_records;
  for (const auto& r : corpus) (is_eval_product(r.id) ? eval_records : train_records).push_back(r);
  const Vocab vocab = Vocab::build(train_records);
  auto result = train_split(train_records, eval_records, vocab, std::move(eave_config), tc, hooks);
  if (out_dir) {
    std::filesystem::create_directories(*out_dir);
    const auto ckpt = *out_dir / "model.ckpt";
    save_checkpoint(ckpt, result.model);
    result.vocab.save(*out_dir / "vocab.txt");
    result.manifest.checkpoint_path = ckpt.string();
    std::ofstream out(*out_dir / "manifest.json");
    out << nlohmann::json(result.manifest).dump(2) << '\n';
  }
  return result;
}

Extractor::Extractor(const EaveModel<float>& model, const Vocab& vocab, const RepCache* cache)
    : model_(&model), vocab_(&vocab), cache_(cache), fingerprint_(model.fingerprint()) {}

HeavyReps<float> Extractor::heavy(SequenceKind kind, const std::vector<int>& ids) {
  const CacheKey key{content_hash(kind, ids), fingerprint_};
  if (cache_) {
    if (auto hit = cache_->get(key)) {
      ++counters_.cache_hits;
      return std::move(*hit);
    }
    ++counters_.cache_misses;
  }
  auto reps = heavy_encode<float>(ids, kind, *model_);
  ++(kind == SequenceKind::Context ? counters_.heavy_context_forwards : counters_.heavy_attribute_forwards);
  if (cache_) cache_->put(key, reps);
  return reps;
}

std::map<std::string, AttributeExtraction> Extractor::extract(const ProductRecord& product,
                                                              const std::vector<std::string>& keys) {
  NoGradGuard no_grad;
  if (model_->fingerprint() != fingerprint_) {
    fingerprint_ = model_->fingerprint();
    attribute_memo_.clear();
  }
  const auto& cfg = model_->config;
  const std::string context = join_context(product);
  const auto ctx = encode_context(context, *vocab_, cfg.context_len);
  const auto mask = pad_mask(ctx.ids);
  std::map<std::string, AttributeExtraction> out;
  if (keys.empty()) return out;
  const auto reps_c = heavy(SequenceKind::Context, ctx.ids);
  for (const auto& key : keys) {
    const auto attr_ids = encode_attribute(key, *vocab_, cfg.attribute_len);
    const auto h = content_hash(SequenceKind::Attribute, attr_ids);
    auto it = attribute_memo_.find(h);
    if (it == attribute_memo_.end()) it = attribute_memo_.emplace(h, heavy(SequenceKind::Attribute, attr_ids)).first;
    const auto states = light_encode<float>(ctx.ids, attr_ids, reps_c, it->second, *model_);
    AttributeExtraction ae;
    ae.logits = tag_logits(states, model_->head, cfg.context_len);
    ae.spans = decode_spans(argmax_tags(ae.logits), mask);
    for (auto& s : ae.spans) {
      const auto b = ctx.offsets[s.token_start].begin;
      s.text = context.substr(b, ctx.offsets[s.token_end - 1].end - b);
    }
    out[key] = std::move(ae);
  }
  return out;
}

std::vector<LabeledSpans> gold_spans(const std::vector<ProductRecord>& records, const Vocab& vocab,
                                     std::size_t context_len, std::size_t attribute_len) {
  std::vector<LabeledSpans> out;
  for (const auto& r : records) {
    for (const auto& a : r.attributes) {
      auto ex = build_example(r, a.key, vocab, context_len, attribute_len);
      out.push_back({r.id, a.key, std::move(ex.gold_spans)});
    }
  }
  return out;
}

std::vector<LabeledSpans> predict(const std::vector<ProductRecord>& records, Extractor& extractor) {
  std::vector<LabeledSpans> out;
  for (const auto& r : records) {
    std::vector<std::string> keys;
    for (const auto& a : r.attributes) keys.push_back(a.key);
    for (auto& [key, ae] : extractor.extract(r, keys)) out.push_back({r.id, key, std::move(ae.spans)});
  }
  return out;
}

EvalReport evaluate_model(const EaveModel<float>& model, const Vocab& vocab, const std::vector<ProductRecord>& records) {
  Extractor extractor(model, vocab);
  return evaluate(predict(records, extractor),
                  gold_spans(records, vocab, model.config.context_len, model.config.attribute_len));
}

}  // namespace eave

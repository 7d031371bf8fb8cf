// Command-line front end: train, extract, precompute, eval, bench-flops,
// synth and cache maintenance.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "eave/checkpoint.hpp"
#include "eave/cost_model.hpp"
#include "eave/data.hpp"
#include "eave/rep_cache.hpp"
#include "eave/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return json::parse(in);
}

std::vector<eave::ProductRecord> read_corpus(const fs::path& path, bool skip_bad) {
  auto loaded = eave::load_corpus(path, skip_bad ? eave::LoadMode::SkipAndWarn : eave::LoadMode::FailFast);
  for (const auto& w : loaded.warnings) std::cerr << "warning: " << w << '\n';
  return std::move(loaded.records);
}

std::vector<eave::LabeledSpans> read_spans(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<eave::LabeledSpans> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    out.push_back(json::parse(line).get<eave::LabeledSpans>());
  }
  return out;
}

void write_spans(const fs::path& path, const std::vector<eave::LabeledSpans>& spans) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (const auto& s : spans) out << json(s).dump() << '\n';
}

fs::path default_vocab(const fs::path& checkpoint, const std::string& vocab) {
  return vocab.empty() ? checkpoint.parent_path() / "vocab.txt" : fs::path(vocab);
}

void print_cost_table(const eave::EaveConfig& config, bool include_precompute) {
  std::printf("%6s %16s %16s %9s\n", "N", "amortized GFLOPs", "baseline GFLOPs", "speedup");
  for (const auto& row : eave::speedup_report(config, {1, 2, 3, 5, 8, 10, 15, 20}, include_precompute)) {
    std::printf("%6zu %16.3f %16.3f %9.3f\n", row.n_attributes, row.amortized / 1e9, row.baseline / 1e9, row.speedup);
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Heavy/light encoder attribute value extraction"};
  app.require_subcommand(1);

  // train
  std::string corpus_path, config_path, out_dir;
  std::optional<std::uint64_t> seed;
  bool skip_bad = false;
  auto* train = app.add_subcommand("train", "Train a model on a corpus");
  train->add_option("--corpus", corpus_path, "Corpus JSONL")->required();
  train->add_option("--config", config_path, "JSON with \"eave\" and \"train\" objects")->required();
  train->add_option("--out", out_dir, "Output directory")->required();
  train->add_option("--seed", seed, "Overrides train.seed");
  train->add_flag("--skip-bad", skip_bad, "Skip malformed corpus lines with a warning");

  // extract
  std::string checkpoint, vocab_path, cache_dir, pred_out, gold_out, dump_path;
  auto* extract = app.add_subcommand("extract", "Extract attribute values");
  extract->add_option("--checkpoint", checkpoint)->required();
  extract->add_option("--corpus", corpus_path)->required();
  extract->add_option("--cache", cache_dir, "Representation cache directory");
  extract->add_option("--out", pred_out, "Predictions JSONL")->required();
  extract->add_option("--vocab", vocab_path, "Defaults to vocab.txt next to the checkpoint");
  extract->add_option("--gold-out", gold_out, "Also write gold spans JSONL");
  extract->add_option("--dump-activations", dump_path, "Write tag logits per product and attribute");
  extract->add_flag("--skip-bad", skip_bad);

  // precompute
  auto* precompute = app.add_subcommand("precompute", "Fill the representation cache");
  precompute->add_option("--checkpoint", checkpoint)->required();
  precompute->add_option("--corpus", corpus_path)->required();
  precompute->add_option("--cache", cache_dir)->required();
  precompute->add_option("--vocab", vocab_path);
  precompute->add_flag("--skip-bad", skip_bad);

  // eval
  std::string pred_path, gold_path;
  auto* eval = app.add_subcommand("eval", "Score predictions against gold spans");
  eval->add_option("--pred", pred_path)->required();
  eval->add_option("--gold", gold_path)->required();

  // bench-flops
  std::string preset = "mave";
  std::size_t n_attrs = 1;
  bool include_precompute = false;
  auto* bench = app.add_subcommand("bench-flops", "Analytical FLOPs report");
  bench->add_option("--config", config_path, "EaveConfig JSON (or a train config with an \"eave\" object)");
  bench->add_option("--preset", preset, "mave or ae110k")->check(CLI::IsMember({"mave", "ae110k"}));
  bench->add_option("--n-attrs", n_attrs)->check(CLI::PositiveNumber);
  bench->add_flag("--include-precompute", include_precompute);

  // synth
  eave::SynthOptions synth_options;
  std::string synth_out;
  auto* synth = app.add_subcommand("synth", "Generate a synthetic corpus");
  synth->add_option("--seed", synth_options.seed);
  synth->add_option("--out", synth_out)->required();
  synth->add_option("--noise-p", synth_options.noise_p)->check(CLI::Range(0.0, 1.0));
  synth->add_option("--n-products", synth_options.n_products);
  synth->add_option("--attrs", synth_options.attrs_per_product);
  synth->add_option("--vocab-size", synth_options.vocab_size);
  synth->add_option("--context-len", synth_options.context_len_tokens);
  synth->add_option("--negative-p", synth_options.negative_p)->check(CLI::Range(0.0, 1.0));

  // cache gc
  std::uint64_t max_bytes = 0;
  auto* cache = app.add_subcommand("cache", "Cache maintenance");
  cache->require_subcommand(1);
  auto* gc = cache->add_subcommand("gc", "Delete oldest entries down to a size budget");
  gc->add_option("--cache", cache_dir)->required();
  gc->add_option("--max-bytes", max_bytes)->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train) {
      const auto cfg = read_json_file(config_path);
      auto eave_config = cfg.at("eave").get<eave::EaveConfig>();
      auto train_config = cfg.contains("train") ? cfg.at("train").get<eave::TrainConfig>() : eave::TrainConfig{};
      if (seed) train_config.seed = *seed;
      eave::TrainHooks hooks;
      hooks.on_eval = [](const eave::EvalPoint& p) {
        std::cerr << "step " << p.step << " eval f1 " << p.report.f1 << '\n';
        return true;
      };
      const auto result = eave::train(read_corpus(corpus_path, skip_bad), eave_config, train_config, fs::path(out_dir),
                                      hooks);
      std::cout << json(result.manifest.final_eval ? json(*result.manifest.final_eval) : json(nullptr)).dump(2)
                << '\n';
      return result.manifest.status == "ok" ? 0 : 2;
    }
    if (*extract || *precompute) {
      const auto model = eave::load_checkpoint(checkpoint);
      const auto vocab = eave::Vocab::load(default_vocab(checkpoint, vocab_path));
      const auto records = read_corpus(corpus_path, skip_bad);
      std::optional<eave::RepCache> store;
      if (!cache_dir.empty()) store.emplace(cache_dir);
      if (*precompute) {
        const auto stats = eave::precompute_corpus(records, model, vocab, *store);
        std::cout << json{{"contexts_encoded", stats.contexts_encoded},
                          {"attributes_encoded", stats.attributes_encoded},
                          {"bytes_written", stats.bytes_written}}
                         .dump()
                  << '\n';
        return 0;
      }
      eave::Extractor extractor(model, vocab, store ? &*store : nullptr);
      std::ofstream preds(pred_out);
      if (!preds) throw std::runtime_error("cannot write " + pred_out);
      std::ofstream dump;
      if (!dump_path.empty()) dump.open(dump_path);
      for (const auto& r : records) {
        std::vector<std::string> keys;
        for (const auto& a : r.attributes) keys.push_back(a.key);
        for (const auto& [key, ae] : extractor.extract(r, keys)) {
          preds << json(eave::LabeledSpans{r.id, key, ae.spans}).dump() << '\n';
          if (dump) {
            dump << r.id << '\t' << key << '\n';
            eave::dump_tensor(dump, ae.logits);
          }
        }
      }
      if (!gold_out.empty()) {
        write_spans(gold_out, eave::gold_spans(records, vocab, model.config.context_len, model.config.attribute_len));
      }
      const auto& c = extractor.counters();
      std::cerr << "heavy context forwards " << c.heavy_context_forwards << ", attribute forwards "
                << c.heavy_attribute_forwards << ", cache hits " << c.cache_hits << ", misses " << c.cache_misses
                << '\n';
      return 0;
    }
    if (*eval) {
      std::cout << json(eave::evaluate(read_spans(pred_path), read_spans(gold_path))).dump(2) << '\n';
      return 0;
    }
    if (*bench) {
      eave::EaveConfig config =
          preset == "ae110k" ? eave::presets::ae110k_base_small() : eave::presets::mave_large_small();
      if (!config_path.empty()) {
        const auto j = read_json_file(config_path);
        config = (j.contains("eave") ? j.at("eave") : j).get<eave::EaveConfig>();
      }
      std::cout << json(eave::amortized_cost(config, n_attrs, include_precompute)).dump(2) << '\n';
      print_cost_table(config, include_precompute);
      return 0;
    }
    if (*synth) {
      eave::save_corpus(synth_out, eave::synthesize_corpus(synth_options));
      return 0;
    }
    if (*gc) {
      const auto stats = eave::RepCache(cache_dir).gc(max_bytes);
      std::cout << json{{"files_removed", stats.files_removed},
                        {"bytes_removed", stats.bytes_removed},
                        {"bytes_remaining", stats.bytes_remaining}}
                       .dump()
                << '\n';
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}

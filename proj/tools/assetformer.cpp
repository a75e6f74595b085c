// assetformer: single entry-point CLI wiring the library into reproducible
// end-to-end workflows. Every subcommand is a thin wrapper over library
// operations; failures exit non-zero with a machine-readable error JSON on
// stderr.

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "assetformer/decoder.hpp"
#include "assetformer/eval.hpp"
#include "assetformer/pcg.hpp"
#include "assetformer/train.hpp"

using namespace assetformer;
namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

int g_exit_code = 0;  // non-zero outcomes that are not exceptions (validate)

// ASSETFORMER_SEED is the global fallback when --seed is not given.
uint64_t default_seed() {
  if (const char* env = std::getenv("ASSETFORMER_SEED")) {
    return std::stoull(env);
  }
  return 0;
}

// Echo the effective configuration (file values + command-line overrides)
// next to the primary output for provenance.
void echo_config(const CLI::App* sub, const std::string& out_path) {
  if (out_path.empty()) return;
  std::ofstream f(out_path + ".config");
  if (!f) throw std::runtime_error("cannot write config echo: " + out_path + ".config");
  f << "# effective configuration for `assetformer " << sub->get_name() << "`\n"
    << sub->config_to_str(true, true);
}

void write_json_file(const ordered_json& j, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  out << j.dump(2) << "\n";
}

void write_stats(const GenerationResult& res, const std::string& path) {
  if (path.empty()) return;
  ordered_json stats;
  stats["tokens"] = res.tokens.ids.size();
  stats["seconds"] = res.seconds;
  stats["tokens_per_s"] = res.tokens_per_s;
  if (res.acceptance) stats["acceptance_rate"] = res.acceptance->rate();
  write_json_file(stats, path);
}

// A caption is four comma-separated phrases: building type, height phrase,
// and two feature phrases, all from the fixed phrase vocabulary.
PhraseBundle parse_caption(const std::string& text) {
  std::vector<std::string> parts;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const size_t a = item.find_first_not_of(" \t");
    const size_t b = item.find_last_not_of(" \t");
    parts.push_back(a == std::string::npos ? "" : item.substr(a, b - a + 1));
  }
  if (parts.size() != 4) {
    throw std::invalid_argument("caption must be 4 comma-separated phrases, got " +
                                std::to_string(parts.size()));
  }
  PhraseBundle b{parts[0], parts[1], {parts[2], parts[3]}};
  for (const auto& p : b.phrases()) (void)phrases::id_of(p);  // throws on unknown
  return b;
}

std::array<int, 4> condition_ids(const std::string& caption_text, bool unconditional) {
  if (unconditional) return ModelF::null_condition();
  if (caption_text.empty()) {
    throw std::invalid_argument("either --caption or --unconditional is required");
  }
  return phrases::bundle_ids(parse_caption(caption_text));
}

struct SamplingFlags {
  std::string strategy = "topk";
  int top_k = 10;
  int beam_width = 4;
  double temperature = 0.7;
  double cfg_scale = 2.0;
  bool no_cfg = false;
  int max_tokens = 5 * kMaxPrimitives + 1;
  uint64_t seed = default_seed();

  void attach(CLI::App* sub) {
    sub->add_option("--strategy", strategy, "Decoding strategy")
        ->check(CLI::IsMember({"greedy", "beam", "topk"}))
        ->capture_default_str();
    sub->add_option("--k", top_k, "Top-k truncation size")->capture_default_str();
    sub->add_option("--beam-width", beam_width, "Beam width")->capture_default_str();
    sub->add_option("--temperature", temperature, "Softmax temperature")
        ->capture_default_str();
    sub->add_option("--cfg-scale", cfg_scale, "Classifier-free guidance scale")
        ->capture_default_str();
    sub->add_flag("--no-cfg", no_cfg, "Single-model conditional-only decoding");
    sub->add_option("--max-tokens", max_tokens, "Token budget before truncation")
        ->capture_default_str();
    sub->add_option("--seed", seed, "Sampling seed (fallback: ASSETFORMER_SEED)")
        ->capture_default_str();
  }

  SamplingParams to_params() const {
    SamplingParams p;
    if (strategy == "greedy") p.strategy = SamplingParams::Strategy::Greedy;
    if (strategy == "beam") p.strategy = SamplingParams::Strategy::Beam;
    if (strategy == "topk") p.strategy = SamplingParams::Strategy::TopK;
    p.top_k = top_k;
    p.beam_width = beam_width;
    p.temperature = temperature;
    p.cfg_scale = cfg_scale;
    p.use_cfg = !no_cfg;
    p.max_tokens = max_tokens;
    p.seed = seed;
    return p;
  }
};

void save_generated(const GenerationResult& res, const std::optional<PhraseBundle>& caption,
                    const std::string& out, const std::string& stats_path) {
  Asset asset = detokenize(res.tokens);
  asset.caption = caption;
  write_asset_file(asset, out);
  write_stats(res, stats_path);
  if (res.tokens.truncated) {
    std::cerr << "note: generation hit --max-tokens and was truncated to whole "
                 "primitives\n";
  }
}

std::vector<Asset> load_asset_collection(const std::string& path) {
  std::vector<Asset> assets;
  if (fs::is_directory(path)) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(path)) {
      if (e.path().extension() == ".json") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) assets.push_back(read_asset_file(f.string()).asset);
  } else if (path.ends_with(".jsonl")) {
    for (auto& rec : read_dataset(path)) assets.push_back(std::move(rec.asset));
  } else {
    assets.push_back(read_asset_file(path).asset);
  }
  if (assets.empty()) throw std::runtime_error("no assets found at: " + path);
  return assets;
}

// ---- subcommands --------------------------------------------------------

void setup_pcg(CLI::App& app) {
  auto* sub = app.add_subcommand("pcg", "Synthesize a procedural dataset (JSONL)");
  auto n = std::make_shared<int>(100);
  auto seed = std::make_shared<uint64_t>(default_seed());
  auto params = std::make_shared<PcgParams>();
  auto out = std::make_shared<std::string>();
  sub->add_option("--n", *n, "Number of records")->check(CLI::PositiveNumber)
      ->capture_default_str();
  sub->add_option("--seed", *seed, "Dataset seed (fallback: ASSETFORMER_SEED)")
      ->capture_default_str();
  sub->add_option("--max-width", params->max_width, "Max footprint cells along x0")
      ->capture_default_str();
  sub->add_option("--max-length", params->max_length, "Max footprint cells along x2")
      ->capture_default_str();
  sub->add_option("--max-storeys", params->max_floor_height, "Max storey count")
      ->capture_default_str();
  sub->add_option("--wall-height", params->wall_height_per_storey,
                  "Wall cells per storey")->capture_default_str();
  sub->add_option("--pitched-prob", params->pitched_roof_prob,
                  "Probability of a pitched roof")->capture_default_str();
  sub->add_option("--window-rate", params->window_rate, "Window rate per wall cell")
      ->capture_default_str();
  sub->add_option("--stair-prob", params->stair_prob, "Probability of stairs")
      ->capture_default_str();
  sub->add_option("--out", *out, "Output JSONL path")->required();
  sub->callback([=]() {
    params->validate();
    build_dataset(*n, *params, *seed, *out);
    echo_config(sub, *out);
    std::cout << "wrote " << *n << " records to " << *out << "\n";
  });
}

void setup_prepare(CLI::App& app) {
  auto* sub = app.add_subcommand("prepare", "Tokenize a dataset into binary form");
  auto dataset = std::make_shared<std::string>();
  auto order = std::make_shared<std::string>("dfs");
  auto seed = std::make_shared<uint64_t>(default_seed());
  auto max_seq_len = std::make_shared<int>(2048);
  auto out = std::make_shared<std::string>();
  sub->add_option("--dataset", *dataset, "Input JSONL dataset")->required();
  sub->add_option("--order", *order, "Primitive ordering")
      ->check(CLI::IsMember({"raw", "dfs", "bfs", "random"}))->capture_default_str();
  sub->add_option("--seed", *seed, "Ordering tie-break seed")->capture_default_str();
  sub->add_option("--max-seq-len", *max_seq_len, "Context length recorded in the header")
      ->capture_default_str();
  sub->add_option("--out", *out, "Output tokenized file")->required();
  sub->callback([=]() {
    const OrderingMethod method = ordering_method_from_string(*order);
    auto records = read_dataset(*dataset);
    TokenizedDataset ds;
    ds.max_seq_len = uint32_t(*max_seq_len);
    for (size_t i = 0; i < records.size(); ++i) {
      TokenizedRecord rec;
      rec.phrase_ids = phrases::bundle_ids(records[i].caption);
      auto tau = reorder(records[i].asset, method, *seed + i);
      auto seq = tokenize(records[i].asset, tau);
      if (seq.ids.size() > size_t(*max_seq_len)) {
        throw std::runtime_error("record " + std::to_string(i) + " has " +
                                 std::to_string(seq.ids.size()) +
                                 " tokens, exceeding --max-seq-len");
      }
      // Round-trip guard: tokenization must be lossless for every record.
      Asset back = detokenize(seq);
      if (back.primitives.size() != records[i].asset.primitives.size()) {
        throw std::runtime_error("round-trip failure on record " + std::to_string(i));
      }
      rec.tokens = std::move(seq.ids);
      ds.records.push_back(std::move(rec));
    }
    write_tokenized(ds, *out);
    echo_config(sub, *out);
    std::cout << "tokenized " << ds.records.size() << " records (" << *order << ") to "
              << *out << "\n";
  });
}

void setup_train(CLI::App& app) {
  auto* sub = app.add_subcommand("train", "Train a model on a tokenized dataset");
  auto data_path = std::make_shared<std::string>();
  auto model_name = std::make_shared<std::string>("nano");
  auto max_seq_len = std::make_shared<int>(2048);
  auto init = std::make_shared<std::string>();
  auto out = std::make_shared<std::string>();
  auto metrics = std::make_shared<std::string>();
  auto cfg = std::make_shared<TrainConfig>();
  cfg->seed = default_seed();
  sub->add_option("--data", *data_path, "Tokenized dataset")->required();
  sub->add_option("--model", *model_name, "Model size")
      ->check(CLI::IsMember({"nano", "mini"}))->capture_default_str();
  sub->add_option("--max-seq-len", *max_seq_len, "Model context length")
      ->capture_default_str();
  sub->add_option("--init", *init, "Checkpoint to continue from (overrides --model)");
  sub->add_option("--steps", cfg->total_steps, "Optimizer steps")->capture_default_str();
  sub->add_option("--batch-size", cfg->batch_size, "Records per step")
      ->capture_default_str();
  sub->add_option("--lr", cfg->learning_rate, "Peak learning rate")->capture_default_str();
  sub->add_option("--warmup", cfg->warmup_steps, "Linear warmup steps")
      ->capture_default_str();
  sub->add_option("--seed", cfg->seed, "Training seed (fallback: ASSETFORMER_SEED)")
      ->capture_default_str();
  sub->add_option("--metrics", *metrics, "Line-delimited JSON metrics log");
  sub->add_option("--out", *out, "Output checkpoint path")->required();
  sub->callback([=]() {
    auto data = read_tokenized(*data_path);
    std::optional<Transformer<float>> model;
    if (!init->empty()) {
      model.emplace(Transformer<float>::load(*init));
    } else {
      ModelConfig mc = *model_name == "mini" ? ModelConfig::mini() : ModelConfig::nano();
      mc.max_seq_len = *max_seq_len;
      model.emplace(mc);
      model->init_weights(cfg->seed);
    }
    cfg->metrics_path = *metrics;
    auto result = train(*model, data, *cfg);
    model->save(*out);
    echo_config(sub, *out);
    std::cout << "trained " << cfg->total_steps << " steps; final loss "
              << result.losses.back() << "; saved " << *out << "\n";
  });
}

void setup_generate(CLI::App& app) {
  auto* sub = app.add_subcommand("generate", "Sample one asset from a checkpoint");
  auto ckpt = std::make_shared<std::string>();
  auto caption_text = std::make_shared<std::string>();
  auto unconditional = std::make_shared<bool>(false);
  auto flags = std::make_shared<SamplingFlags>();
  auto out = std::make_shared<std::string>();
  auto stats = std::make_shared<std::string>();
  sub->add_option("--checkpoint", *ckpt, "Model checkpoint")->required();
  sub->add_option("--caption", *caption_text,
                  "4 comma-separated phrases: type, height, feature, feature");
  sub->add_flag("--unconditional", *unconditional, "Use the null condition");
  flags->attach(sub);
  sub->add_option("--out", *out, "Output asset JSON")->required();
  sub->add_option("--stats", *stats, "Output stats JSON");
  sub->callback([=]() {
    auto model = Transformer<float>::load(*ckpt);
    const auto cond = condition_ids(*caption_text, *unconditional);
    auto res = generate(model, cond, flags->to_params());
    std::optional<PhraseBundle> caption;
    if (!*unconditional) caption = parse_caption(*caption_text);
    save_generated(res, caption, *out, *stats);
    echo_config(sub, *out);
    std::cout << "generated " << res.tokens.ids.size() << " tokens ("
              << res.tokens_per_s << " tok/s) to " << *out << "\n";
  });
}

void setup_slowfast(CLI::App& app) {
  auto* sub = app.add_subcommand(
      "slowfast", "Speculative decoding with a draft and a target checkpoint");
  auto draft_path = std::make_shared<std::string>();
  auto target_path = std::make_shared<std::string>();
  auto caption_text = std::make_shared<std::string>();
  auto unconditional = std::make_shared<bool>(false);
  auto lookahead = std::make_shared<int>(5);
  auto flags = std::make_shared<SamplingFlags>();
  auto out = std::make_shared<std::string>();
  auto stats = std::make_shared<std::string>();
  sub->add_option("--draft", *draft_path, "Draft (fast) checkpoint")->required();
  sub->add_option("--target", *target_path, "Target (slow) checkpoint")->required();
  sub->add_option("--caption", *caption_text,
                  "4 comma-separated phrases: type, height, feature, feature");
  sub->add_flag("--unconditional", *unconditional, "Use the null condition");
  sub->add_option("--lookahead", *lookahead, "Draft tokens per round (K)")
      ->capture_default_str();
  flags->attach(sub);
  sub->add_option("--out", *out, "Output asset JSON")->required();
  sub->add_option("--stats", *stats, "Output stats JSON");
  sub->callback([=]() {
    auto draft = Transformer<float>::load(*draft_path);
    auto target = Transformer<float>::load(*target_path);
    const auto cond = condition_ids(*caption_text, *unconditional);
    SlowFastParams sf;
    sf.lookahead = *lookahead;
    auto res = slowfast_generate(draft, target, cond, flags->to_params(), sf);
    std::optional<PhraseBundle> caption;
    if (!*unconditional) caption = parse_caption(*caption_text);
    save_generated(res, caption, *out, *stats);
    echo_config(sub, *out);
    std::cout << "generated " << res.tokens.ids.size() << " tokens ("
              << res.tokens_per_s << " tok/s, acceptance "
              << res.acceptance->rate() << ") to " << *out << "\n";
  });
}

void setup_inpaint(CLI::App& app) {
  auto* sub = app.add_subcommand(
      "inpaint", "Continue generation from an existing asset used as a prefix");
  auto ckpt = std::make_shared<std::string>();
  auto prefix_path = std::make_shared<std::string>();
  auto order = std::make_shared<std::string>("dfs");
  auto order_seed = std::make_shared<uint64_t>(0);
  auto caption_text = std::make_shared<std::string>();
  auto unconditional = std::make_shared<bool>(false);
  auto flags = std::make_shared<SamplingFlags>();
  auto out = std::make_shared<std::string>();
  auto stats = std::make_shared<std::string>();
  sub->add_option("--checkpoint", *ckpt, "Model checkpoint")->required();
  sub->add_option("--prefix", *prefix_path, "Asset JSON whose tokens seed the output")
      ->required();
  sub->add_option("--order", *order, "Ordering applied to the prefix asset")
      ->check(CLI::IsMember({"raw", "dfs", "bfs", "random"}))->capture_default_str();
  sub->add_option("--order-seed", *order_seed, "Ordering tie-break seed")
      ->capture_default_str();
  sub->add_option("--caption", *caption_text,
                  "4 comma-separated phrases: type, height, feature, feature");
  sub->add_flag("--unconditional", *unconditional, "Use the null condition");
  flags->attach(sub);
  sub->add_option("--out", *out, "Output asset JSON")->required();
  sub->add_option("--stats", *stats, "Output stats JSON");
  sub->callback([=]() {
    auto model = Transformer<float>::load(*ckpt);
    Asset prefix_asset = read_asset_file(*prefix_path).asset;
    auto seq = tokenize(prefix_asset,
                        reorder(prefix_asset, ordering_method_from_string(*order),
                                *order_seed));
    seq.ids.pop_back();  // drop EOS; the model decides where to stop
    const auto cond = condition_ids(*caption_text, *unconditional);
    auto res = continue_from_prefix(model, cond, seq.ids, flags->to_params());
    std::optional<PhraseBundle> caption;
    if (!*unconditional) caption = parse_caption(*caption_text);
    save_generated(res, caption, *out, *stats);
    echo_config(sub, *out);
    std::cout << "continued " << seq.ids.size() << " prefix tokens to "
              << res.tokens.ids.size() << " total; wrote " << *out << "\n";
  });
}

void setup_export(CLI::App& app) {
  auto* sub = app.add_subcommand("export", "Export an asset JSON as a Wavefront OBJ");
  auto in = std::make_shared<std::string>();
  auto out = std::make_shared<std::string>();
  sub->add_option("--asset", *in, "Input asset JSON")->required();
  sub->add_option("--out", *out, "Output OBJ path")->required();
  sub->callback([=]() {
    auto r = read_asset_file(*in);
    for (const auto& w : r.warnings) std::cerr << "warning: " << w << "\n";
    export_mesh(r.asset, *out);
    std::cout << "exported " << r.asset.primitives.size() << " primitives to " << *out
              << "\n";
  });
}

void setup_eval(CLI::App& app) {
  auto* sub = app.add_subcommand(
      "eval", "Compare generated assets against a reference dataset");
  auto generated = std::make_shared<std::string>();
  auto reference = std::make_shared<std::string>();
  auto tok_per_s = std::make_shared<double>(0.0);
  auto acc_rate = std::make_shared<double>(-1.0);
  auto out = std::make_shared<std::string>();
  sub->add_option("--generated", *generated,
                  "Directory of asset JSON files, a JSONL dataset, or one asset")
      ->required();
  sub->add_option("--reference", *reference, "Reference collection (same forms)")
      ->required();
  sub->add_option("--tokens-per-second", *tok_per_s, "Measured throughput to record");
  sub->add_option("--acceptance-rate", *acc_rate,
                  "Measured draft acceptance rate to record");
  sub->add_option("--out", *out, "Output report JSON")->required();
  sub->callback([=]() {
    TimingStats timing;
    timing.tokens_per_second = *tok_per_s;
    timing.acceptance_rate = *acc_rate;
    auto report = evaluate(load_asset_collection(*generated),
                           load_asset_collection(*reference), timing);
    write_json_file(report.to_json(), *out);
    echo_config(sub, *out);
    std::cout << report.to_json().dump(2) << "\n";
  });
}

void setup_validate(CLI::App& app) {
  auto* sub = app.add_subcommand("validate", "Validate an asset JSON file");
  auto in = std::make_shared<std::string>();
  auto strict = std::make_shared<bool>(false);
  sub->add_option("--asset", *in, "Input asset JSON")->required();
  sub->add_flag("--strict", *strict, "Exit non-zero on warnings too");
  sub->callback([=]() {
    auto r = read_asset_file(*in);
    auto report = validate_asset(r.asset);
    ordered_json j;
    j["ok"] = report.ok();
    j["errors"] = report.error_count();
    j["warnings"] = report.warning_count() + int(r.warnings.size());
    j["num_components"] = report.num_components;
    j["roof_rule_violations"] = report.roof_rule_violations;
    j["findings"] = json::array();
    for (const auto& w : r.warnings) {
      j["findings"].push_back({{"severity", "warning"}, {"message", w}});
    }
    for (const auto& f : report.findings) {
      const char* sev = f.severity == Severity::Error
                            ? "error"
                            : f.severity == Severity::Warning ? "warning" : "info";
      j["findings"].push_back({{"severity", sev}, {"message", f.message}});
    }
    std::cout << j.dump(2) << "\n";
    if (!report.ok() || (*strict && j["warnings"].get<int>() > 0)) g_exit_code = 2;
  });
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"AssetFormer: procedural data, tokenization, training, and "
               "constrained decoding for modular 3D assets"};
  app.require_subcommand(1);
  // App-level config file; keys live in a [subcommand] section, e.g.
  //   [pcg]
  //   n=100
  app.set_config("--config", "", "Read options from a TOML/INI config file");

  setup_pcg(app);
  setup_prepare(app);
  setup_train(app);
  setup_generate(app);
  setup_slowfast(app);
  setup_inpaint(app);
  setup_export(app);
  setup_eval(app);
  setup_validate(app);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() != 0) {
      ordered_json err;
      err["error"] = {{"type", "usage"}, {"message", e.what()}};
      std::cerr << err.dump() << "\n";
    }
    return app.exit(e);
  } catch (const std::exception& e) {
    ordered_json err;
    err["error"] = {{"type", "runtime"}, {"message", e.what()}};
    std::cerr << err.dump() << "\n";
    return 1;
  }
  return g_exit_code;
}

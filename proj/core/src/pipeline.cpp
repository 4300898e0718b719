#include "dpruner/pipeline.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <ostream>
#include <sstream>

#include "dpruner/errors.hpp"
#include "dpruner/eval.hpp"
#include "dpruner/hash.hpp"
#include "dpruner/importance.hpp"

namespace dpruner {

namespace {

// Shortest text that parses back to the same double.
std::string format_double(double v) {
  char buf[40];
  const auto end = std::to_chars(buf, buf + sizeof buf, v).ptr;
  return std::string(buf, end);
}

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

[[noreturn]] void bad_value(std::string_view key, std::string_view value, const char* expected) {
  throw ValidationError("config key '" + std::string(key) + "': '" + std::string(value) + "' is not " + expected);
}

std::size_t to_size(std::string_view key, std::string_view value) {
  std::size_t v = 0;
  const auto [p, ec] = std::from_chars(value.data(), value.data() + value.size(), v);
  if (ec != std::errc() || p != value.data() + value.size() || value.empty()) bad_value(key, value, "a count");
  return v;
}

double to_double(std::string_view key, std::string_view value) {
  double v = 0.0;
  const auto [p, ec] = std::from_chars(value.data(), value.data() + value.size(), v);
  if (ec != std::errc() || p != value.data() + value.size() || value.empty()) bad_value(key, value, "a number");
  return v;
}

bool to_bool(std::string_view key, std::string_view value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  bad_value(key, value, "true or false");
}

struct KeyBinding {
  std::function<void(RunConfig&, std::string_view, std::string_view)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <typename T>
KeyBinding size_key(T RunConfig::*field) {
  return {[field](RunConfig& c, std::string_view k, std::string_view v) { c.*field = to_size(k, v); },
          [field](const RunConfig& c) { return std::to_string(c.*field); }};
}

KeyBinding model_key(std::size_t ModelConfig::*field) {
  return {[field](RunConfig& c, std::string_view k, std::string_view v) { c.model.*field = to_size(k, v); },
          [field](const RunConfig& c) { return std::to_string(c.model.*field); }};
}

KeyBinding double_key(double RunConfig::*field) {
  return {[field](RunConfig& c, std::string_view k, std::string_view v) { c.*field = to_double(k, v); },
          [field](const RunConfig& c) { return format_double(c.*field); }};
}

KeyBinding string_key(std::string RunConfig::*field) {
  return {[field](RunConfig& c, std::string_view, std::string_view v) { c.*field = std::string(v); },
          [field](const RunConfig& c) { return c.*field; }};
}

const std::map<std::string, KeyBinding, std::less<>>& bindings() {
  static const std::map<std::string, KeyBinding, std::less<>> table = {
      {"vocab_size", model_key(&ModelConfig::vocab_size)},
      {"context_length", model_key(&ModelConfig::context_length)},
      {"num_layers", model_key(&ModelConfig::num_layers)},
      {"d_model", model_key(&ModelConfig::d_model)},
      {"num_heads", model_key(&ModelConfig::num_heads)},
      {"d_ff", model_key(&ModelConfig::d_ff)},
      {"seed",
       {[](RunConfig& c, std::string_view k, std::string_view v) { c.seed = to_size(k, v); },
        [](const RunConfig& c) { return std::to_string(c.seed); }}},
      {"pretrain_sources", string_key(&RunConfig::pretrain_sources)},
      {"pretrain_steps", size_key(&RunConfig::pretrain_steps)},
      {"pretrain_lr", double_key(&RunConfig::pretrain_lr)},
      {"batch_size", size_key(&RunConfig::batch_size)},
      {"clip_norm", double_key(&RunConfig::clip_norm)},
      {"log_every", size_key(&RunConfig::log_every)},
      {"open_sources", string_key(&RunConfig::open_sources)},
      {"open_samples", size_key(&RunConfig::open_samples)},
      {"domain_sources", string_key(&RunConfig::domain_sources)},
      {"domain_samples", size_key(&RunConfig::domain_samples)},
      {"test_sources", string_key(&RunConfig::test_sources)},
      {"test_samples", size_key(&RunConfig::test_samples)},
      {"sequence_length", size_key(&RunConfig::sequence_length)},
      {"open_cache", string_key(&RunConfig::open_cache)},
      {"domain_cache", string_key(&RunConfig::domain_cache)},
      {"test_cache", string_key(&RunConfig::test_cache)},
      {"lambda", double_key(&RunConfig::lambda)},
      {"alpha", double_key(&RunConfig::alpha)},
      {"damping", double_key(&RunConfig::damping)},
      {"fisher_source", string_key(&RunConfig::fisher_source)},
      {"normalize_g",
       {[](RunConfig& c, std::string_view k, std::string_view v) { c.normalize_g = to_bool(k, v); },
        [](const RunConfig& c) { return std::string(c.normalize_g ? "true" : "false"); }}},
      {"sparsity", double_key(&RunConfig::sparsity)},
      {"mode", string_key(&RunConfig::mode)},
      {"block_base", size_key(&RunConfig::block_base)},
      {"method", string_key(&RunConfig::method)},
      {"sweep_sparsities", string_key(&RunConfig::sweep_sparsities)},
      {"out_dir",
       {[](RunConfig& c, std::string_view, std::string_view v) { c.out_dir = std::string(v); },
        [](const RunConfig& c) { return c.out_dir.string(); }}},
      {"checkpoint", string_key(&RunConfig::checkpoint)},
      {"general_scores", string_key(&RunConfig::general_scores)},
      {"scores", string_key(&RunConfig::scores)},
  };
  return table;
}

std::uint64_t derive_seed(std::uint64_t seed, std::string_view role) {
  Fnv1a h;
  h.update(role);
  h.update_u64(seed);
  return h.value();
}

Checkpoint load_input_checkpoint(const RunConfig& config) {
  const auto path = config.checkpoint_path();
  if (!std::filesystem::exists(path)) throw ValidationError("checkpoint not found: " + path.string());
  return load_checkpoint(path);
}

void require_sequence_fits(const RunConfig& config, const ModelConfig& model) {
  if (config.sequence_length > model.context_length) {
    throw ValidationError("sequence_length " + std::to_string(config.sequence_length) +
                          " exceeds the checkpoint's context_length " + std::to_string(model.context_length));
  }
}

void require_model(const std::string& recorded, const TransformerModel& model, const std::string& what) {
  if (recorded != model.fingerprint()) {
    throw ValidationError(what + " was computed for model " + recorded + ", but the checkpoint is " +
                          model.fingerprint());
  }
}

}  // namespace

void RunConfig::set(std::string_view key, std::string_view value) {
  const auto& table = bindings();
  const auto it = table.find(key);
  if (it == table.end()) throw ValidationError("unknown config key '" + std::string(key) + "'");
  it->second.set(*this, key, trim(value));
}

std::vector<std::string> RunConfig::keys() {
  std::vector<std::string> out;
  for (const auto& [k, _] : bindings()) out.push_back(k);
  return out;
}

std::string RunConfig::to_text() const {
  std::string out;
  for (const auto& [k, b] : bindings()) out += k + " = " + b.get(*this) + "\n";
  return out;
}

void RunConfig::validate() const {
  ModelConfig m = model;
  m.seed = seed;
  m.validate();
  if (!(lambda >= 0.0)) throw ValidationError("lambda must be >= 0");
  if (!(alpha > 0.0)) throw ValidationError("alpha must be > 0");
  if (!(damping > 0.0)) throw ValidationError("damping must be > 0");
  if (!(pretrain_lr > 0.0)) throw ValidationError("pretrain_lr must be > 0");
  if (!(clip_norm >= 0.0)) throw ValidationError("clip_norm must be >= 0");
  if (pretrain_steps == 0) throw ValidationError("pretrain_steps must be >= 1");
  if (batch_size == 0) throw ValidationError("batch_size must be >= 1");
  if (open_samples == 0 || domain_samples == 0 || test_samples == 0) {
    throw ValidationError("sample counts must be >= 1");
  }
  if (sequence_length < 2 || sequence_length > model.context_length) {
    throw ValidationError("sequence_length must lie in [2, context_length]");
  }
  if (fisher_source != "domain" && fisher_source != "open") {
    throw ValidationError("fisher_source must be 'domain' or 'open', got '" + fisher_source + "'");
  }
  prune_config().validate();
  sweep_list();
  if (out_dir.empty()) throw ValidationError("out_dir is empty");
}

PruneConfig RunConfig::prune_config() const {
  PruneConfig p;
  p.sparsity = sparsity;
  p.mode = parse_selection_mode(mode);
  p.block_base = block_base;
  p.method = parse_prune_method(method);
  return p;
}

std::vector<double> RunConfig::sweep_list() const {
  std::vector<double> out;
  std::string_view rest = sweep_sparsities;
  while (!rest.empty()) {
    const auto comma = rest.find(',');
    const auto item = trim(rest.substr(0, comma));
    const double s = to_double("sweep_sparsities", item);
    if (!(s >= 0.0 && s < 1.0)) bad_value("sweep_sparsities", item, "in [0, 1)");
    out.push_back(s);
    rest = comma == std::string_view::npos ? std::string_view{} : rest.substr(comma + 1);
  }
  if (out.empty()) throw ValidationError("sweep_sparsities is empty");
  return out;
}

std::filesystem::path RunConfig::checkpoint_path() const {
  return checkpoint.empty() ? out_dir / "model.ckpt" : std::filesystem::path(checkpoint);
}

std::filesystem::path RunConfig::general_scores_path() const {
  return general_scores.empty() ? out_dir / "general.scores" : std::filesystem::path(general_scores);
}

std::filesystem::path RunConfig::scores_path() const {
  return scores.empty() ? out_dir / "dual.scores" : std::filesystem::path(scores);
}

void load_config_file(const std::filesystem::path& path, RunConfig& config) {
  std::ifstream in(path);
  if (!in) throw ValidationError("config file not found: " + path.string());
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string_view text = line;
    if (const auto hash = text.find('#'); hash != std::string_view::npos) text = text.substr(0, hash);
    text = trim(text);
    if (text.empty()) continue;
    const auto eq = text.find('=');
    if (eq == std::string_view::npos) {
      throw ValidationError(path.string() + ":" + std::to_string(lineno) + ": expected key = value");
    }
    config.set(trim(text.substr(0, eq)), text.substr(eq + 1));
  }
}

std::string_view corpus_role_name(CorpusRole role) {
  switch (role) {
    case CorpusRole::open: return "open";
    case CorpusRole::domain: return "domain";
    case CorpusRole::test: return "test";
  }
  return "?";
}

CorpusRole parse_corpus_role(std::string_view name) {
  if (name == "open") return CorpusRole::open;
  if (name == "domain") return CorpusRole::domain;
  if (name == "test") return CorpusRole::test;
  throw ValidationError("unknown corpus '" + std::string(name) + "' (expected open, domain or test)");
}

CalibrationSpec calibration_spec(const RunConfig& config, CorpusRole role) {
  CalibrationSpec spec;
  spec.name = std::string(corpus_role_name(role));
  spec.sequence_length = config.sequence_length;
  spec.seed = derive_seed(config.seed, spec.name);
  switch (role) {
    case CorpusRole::open:
      spec.sources = parse_source_list(config.open_sources);
      spec.sample_count = config.open_samples;
      break;
    case CorpusRole::domain:
      spec.sources = parse_source_list(config.domain_sources);
      spec.sample_count = config.domain_samples;
      break;
    case CorpusRole::test:
      spec.sources = parse_source_list(config.test_sources);
      spec.sample_count = config.test_samples;
      break;
  }
  return spec;
}

Corpus load_corpus(const RunConfig& config, CorpusRole role) {
  const std::string& cache = role == CorpusRole::open     ? config.open_cache
                             : role == CorpusRole::domain ? config.domain_cache
                                                          : config.test_cache;
  if (!cache.empty()) {
    if (!std::filesystem::exists(cache)) throw ValidationError("corpus cache not found: " + cache);
    return read_corpus_cache(cache);
  }
  return build_calibration(calibration_spec(config, role));
}

std::vector<std::filesystem::path> cmd_pretrain(const RunConfig& config, std::ostream& log) {
  config.validate();
  const auto sources = parse_source_list(config.pretrain_sources);
  const auto streams = load_streams(sources);

  ModelConfig mc = config.model;
  mc.seed = config.seed;
  PretrainOptions opts;
  opts.steps = config.pretrain_steps;
  opts.learning_rate = config.pretrain_lr;
  opts.batch_size = config.batch_size;
  opts.clip_norm = config.clip_norm;
  opts.log_every = config.log_every;
  opts.seed = config.seed;
  opts.log = &log;
  auto result = pretrain(init_model(mc), streams, opts);

  Checkpoint ckpt{std::move(result.model), config.pretrain_steps, {}};
  ckpt.extra["pretrain.sources"] = config.pretrain_sources;
  ckpt.extra["pretrain.lr"] = format_double(config.pretrain_lr);
  ckpt.extra["pretrain.final_loss"] = format_double(result.losses.back());
  ckpt.extra["pretrain.still_decreasing"] = result.still_decreasing ? "1" : "0";

  const auto ckpt_path = config.out_dir / "model.ckpt";
  const auto loss_path = config.out_dir / "pretrain_loss.csv";
  save_checkpoint(ckpt_path, ckpt);
  std::string csv = "step,loss\n";
  for (std::size_t i = 0; i < result.losses.size(); ++i) {
    csv += std::to_string(i + 1) + "," + format_double(result.losses[i]) + "\n";
  }
  write_text_file(loss_path, csv);
  if (result.still_decreasing) log << "warning: loss is still decreasing at the last step\n";
  log << "pretrained " << config.pretrain_steps << " steps, final loss " << result.losses.back() << "\n";
  return {ckpt_path, loss_path};
}

std::vector<std::filesystem::path> cmd_calibrate(const RunConfig& config, std::ostream& log) {
  config.validate();
  std::vector<std::filesystem::path> out;
  for (auto role : {CorpusRole::open, CorpusRole::domain, CorpusRole::test}) {
    const auto corpus = load_corpus(config, role);
    const auto path = config.out_dir / (std::string(corpus_role_name(role)) + ".corpus");
    write_corpus_cache(path, corpus);
    log << corpus.name << ": " << corpus.size() << " sequences, fingerprint " << corpus.fingerprint() << "\n";
    out.push_back(path);
  }
  return out;
}

std::vector<std::filesystem::path> cmd_general_importance(const RunConfig& config, std::ostream& log) {
  config.validate();
  const auto ckpt = load_input_checkpoint(config);
  require_sequence_fits(config, ckpt.model.config());
  if (ckpt.step == 0) log << "warning: checkpoint " << config.checkpoint_path().string() << " is untrained\n";
  if (auto it = ckpt.extra.find("pretrain.still_decreasing"); it != ckpt.extra.end() && it->second == "1") {
    log << "warning: checkpoint loss was still decreasing when training stopped\n";
  }
  const auto open = load_corpus(config, CorpusRole::open);
  const auto g = general_importance(ckpt.model, open, {config.damping, config.normalize_g});
  const auto path = config.out_dir / "general.scores";
  save_general_importance(path, g);
  log << "general importance over " << open.size() << " open sequences, " << g.scores.size() << " matrices\n";
  return {path};
}

std::vector<std::filesystem::path> cmd_prune(const RunConfig& config, std::ostream& log) {
  config.validate();
  const auto pc = config.prune_config();
  const auto ckpt = load_input_checkpoint(config);
  require_sequence_fits(config, ckpt.model.config());
  const auto& model = ckpt.model;

  std::vector<std::filesystem::path> written;
  Mask mask;
  if (pc.method == PruneMethod::magnitude) {
    mask = select_mask(magnitude_scores(model), pc);
  } else {
    const auto domain = load_corpus(config, CorpusRole::domain);
    DualScoreS s;
    if (pc.method == PruneMethod::noreg) {
      s = unregularized_scores(model, domain);
    } else {
      const auto gpath = config.general_scores_path();
      if (!std::filesystem::exists(gpath)) throw ValidationError("general importance not found: " + gpath.string());
      const auto g = load_general_importance(gpath);
      require_model(g.model_fingerprint, model, "general importance " + gpath.string());
      if (config.fisher_source == "open") {
        const auto fisher = estimate_fisher_diagonal(model, load_corpus(config, CorpusRole::open));
        s = dual_importance_scores(model, domain, g, config.lambda, config.alpha, &fisher);
      } else {
        s = dual_importance_scores(model, domain, g, config.lambda, config.alpha);
      }
    }
    const auto spath = config.out_dir / "dual.scores";
    save_dual_scores(spath, s);
    written.push_back(spath);
    mask = select_mask(s.scores, pc);
  }
  mask.method = pc.method;
  mask.model_fingerprint = model.fingerprint();

  const auto mpath = config.out_dir / "mask.mask";
  const auto ppath = config.out_dir / "pruned.ckpt";
  save_mask(mpath, mask);
  save_checkpoint(ppath, apply_mask(ckpt, mask));
  written.push_back(mpath);
  written.push_back(ppath);
  std::size_t all_params = 0;
  for (const auto& p : model.parameters()) all_params += p.value.size();
  log << prune_method_name(pc.method) << " mask: " << mask.zeros() << " of " << mask.total() << " prunable weights ("
      << selection_mode_name(pc.mode) << "), " << static_cast<double>(mask.zeros()) / static_cast<double>(all_params)
      << " of all " << all_params << " parameters\n";
  return written;
}

std::vector<std::filesystem::path> cmd_eval(const RunConfig& config, CorpusRole role, std::ostream& log) {
  config.validate();
  const auto ckpt = load_input_checkpoint(config);
  require_sequence_fits(config, ckpt.model.config());
  const auto corpus = load_corpus(config, role);
  const auto report = perplexity(ckpt.model, corpus);
  const auto stem = "eval_" + config.checkpoint_path().stem().string() + "_" + corpus.name;
  const auto csv = config.out_dir / (stem + ".csv");
  const auto txt = config.out_dir / (stem + ".txt");
  write_text_file(csv, eval_report_csv(report));
  write_text_file(txt, eval_report_text(report));
  log << eval_report_text(report);
  return {csv, txt};
}

std::vector<std::filesystem::path> cmd_masksim(const RunConfig& config, const std::filesystem::path& mask_a,
                                               const std::filesystem::path& mask_b, std::ostream& log) {
  for (const auto& p : {mask_a, mask_b}) {
    if (!std::filesystem::exists(p)) throw ValidationError("mask not found: " + p.string());
  }
  const auto report = mask_similarity(load_mask(mask_a), load_mask(mask_b));
  const auto csv = config.out_dir / "masksim.csv";
  const auto grid = config.out_dir / "masksim_grid.csv";
  const auto txt = config.out_dir / "masksim.txt";
  write_text_file(csv, similarity_csv(report));
  write_text_file(grid, similarity_grid_csv(report));
  write_text_file(txt, similarity_text(report));
  log << similarity_text(report);
  return {csv, grid, txt};
}

std::vector<std::filesystem::path> cmd_sweep(const RunConfig& config, std::ostream& log) {
  config.validate();
  const auto pc = config.prune_config();
  const auto ckpt = load_input_checkpoint(config);
  require_sequence_fits(config, ckpt.model.config());
  MatrixSet scores;
  if (pc.method == PruneMethod::magnitude) {
    scores = magnitude_scores(ckpt.model);
  } else {
    const auto spath = config.scores_path();
    if (!std::filesystem::exists(spath)) throw ValidationError("scores not found: " + spath.string());
    auto s = load_dual_scores(spath);
    require_model(s.model_fingerprint, ckpt.model, "scores " + spath.string());
    scores = std::move(s.scores);
  }
  const auto corpus = load_corpus(config, CorpusRole::test);
  const auto result = sparsity_sweep(ckpt.model, scores, corpus, config.sweep_list(), pc);
  const auto path = config.out_dir / "sweep.csv";
  write_text_file(path, sweep_csv(result));
  log << sweep_csv(result) << (result.monotone ? "trend: non-decreasing\n" : "trend: not monotone\n");
  return {path};
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ValidationError*>(&e)) return 2;
  if (dynamic_cast<const FormatError*>(&e)) return 3;
  if (dynamic_cast<const NumericError*>(&e)) return 4;
  return 1;
}

}  // namespace dpruner

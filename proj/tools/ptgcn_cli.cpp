// ptgcn: train, evaluate and inspect triplet-extraction models.
//
// Exit codes: 0 success, 1 unexpected failure, 2 invalid configuration or
// input, 3 non-finite training loss.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "ptgcn/corpus.hpp"
#include "ptgcn/eval.hpp"
#include "ptgcn/hash.hpp"
#include "ptgcn/model.hpp"
#include "ptgcn/prompt.hpp"
#include "ptgcn/train.hpp"

namespace fs = std::filesystem;
using namespace ptgcn;

namespace {

struct Options {
  std::string data;
  std::string encoder = "tiny";
  std::string embeddings;
  std::string template_mode = "full";
  std::string template_file;
  double alpha = 0.5;
  double k = 0.3;
  std::size_t layers = 2;
  std::size_t dim = 64;
  std::size_t tensor_width = 32;
  std::size_t encoder_layers = 2;
  std::size_t heads = 4;
  std::size_t epochs = 20;
  std::size_t batch = 4;
  std::optional<double> lr; // 3e-4 for adam, 1e-3 for sgd
  std::uint64_t seed = 1;
  std::string out;
  bool swap_axes = false;
  bool topk_literal = false;
  std::string optimizer = "adam";
  std::size_t max_negatives = 24;
  double target_f1 = 0.0;

  // eval / heatmap
  std::string checkpoint;
  std::string split; // test for eval, train for heatmap
  std::string task = "all";
  std::string id;
  std::string config;
};

void add_model_flags(CLI::App &cmd, Options &o) {
  cmd.add_option("--data", o.data, "dataset directory with {train,dev,test}_triplets.txt")
      ->required();
  cmd.add_option("--encoder", o.encoder, "tiny or frozen")
      ->check(CLI::IsMember({"tiny", "frozen"}));
  cmd.add_option("--embeddings", o.embeddings,
                 "directory of PTGE0001 stores named <split>.ptge");
  cmd.add_option("--template", o.template_mode, "full, no-senti, single or none")
      ->check(CLI::IsMember({"full", "no-senti", "single", "none"}));
  cmd.add_option("--template-file", o.template_file,
                 "file holding the six-slot template text");
  cmd.add_option("--alpha", o.alpha, "entity/sentiment loss balance");
  cmd.add_option("--k", o.k, "top-k pruning threshold");
  cmd.add_option("--layers", o.layers, "grid GCN layers");
  cmd.add_option("--dim", o.dim, "hidden size d");
  cmd.add_option("--tensor-width", o.tensor_width, "bilinear width t");
  cmd.add_option("--encoder-layers", o.encoder_layers, "tiny encoder layers");
  cmd.add_option("--heads", o.heads, "tiny encoder attention heads");
  cmd.add_option("--seed", o.seed, "random seed");
  cmd.add_flag("--swap-axes", o.swap_axes,
               "horizontal arcs use opinion scores, vertical arcs aspect scores");
  cmd.add_flag("--topk-literal", o.topk_literal,
               "keep ceil(k n^2) candidates instead of ceil(k n)");
  cmd.add_option("--config", o.config,
                 "INI file of flag=value lines; command-line flags win");
}

/// Splices the key=value lines of a subcommand's --config file in front of
/// its command-line flags. Options keep their last value, so explicit flags
/// override the file and the file overrides defaults.
std::vector<std::string> expand_config(int argc, char **argv,
                                       const std::set<std::string> &subcommands) {
  std::vector<std::string> args(argv + 1, argv + argc);
  auto sub = std::find_if(args.begin(), args.end(), [&](const std::string &a) {
    return subcommands.count(a) > 0;
  });
  if (sub == args.end())
    return args;
  std::string file;
  for (auto it = sub + 1; it != args.end(); ++it) {
    if (*it == "--config" && it + 1 != args.end())
      file = *(it + 1);
    else if (it->rfind("--config=", 0) == 0)
      file = it->substr(9);
  }
  if (file.empty())
    return args;
  if (!fs::is_regular_file(file))
    throw CLI::FileError::Missing(file);
  std::vector<std::string> injected;
  for (const auto &item : CLI::ConfigINI().from_file(file)) {
    if (!item.parents.empty() || item.name == "++" || item.name == "--")
      continue;
    std::string value;
    for (const auto &v : item.inputs)
      value += (value.empty() ? "" : ",") + v;
    injected.push_back("--" + item.name + "=" + value);
  }
  args.insert(sub + 1, injected.begin(), injected.end());
  return args;
}

fs::path split_file(const std::string &dir, const std::string &split) {
  for (auto name : {split + "_triplets.txt", split + ".txt"}) {
    fs::path p = fs::path(dir) / name;
    if (fs::exists(p))
      return p;
  }
  throw LookupError("no " + split + " split under '" + dir + "'");
}

ModelConfig model_config(const Options &o) {
  ModelConfig mc;
  mc.encoder = o.encoder == "frozen" ? EncoderMode::Frozen : EncoderMode::Tiny;
  mc.template_mode = *parse_template_mode(o.template_mode);
  if (!o.template_file.empty()) {
    std::ifstream in(o.template_file);
    if (!in)
      throw ConfigError("cannot read template file '" + o.template_file + "'");
    std::getline(in, mc.template_text);
  }
  mc.dim = o.dim;
  mc.tensor_width = o.tensor_width;
  mc.gcn_layers = o.layers;
  mc.encoder_layers = o.encoder_layers;
  mc.encoder_heads = o.heads;
  mc.swap_axes = o.swap_axes;
  mc.topk_literal = o.topk_literal;
  mc.k = o.k;
  mc.seed = o.seed;
  if (mc.encoder == EncoderMode::Frozen && o.embeddings.empty())
    throw ConfigError("--encoder frozen requires --embeddings");
  return mc;
}

std::optional<EmbeddingStore> load_store(const Options &o,
                                         const std::string &split) {
  if (o.encoder != "frozen")
    return std::nullopt;
  return EmbeddingStore::load((fs::path(o.embeddings) / (split + ".ptge")).string());
}

/// Builds the model the flags describe; the vocabulary always comes from
/// the training split so that checkpoints line up.
std::unique_ptr<PtGcnModel> make_model(const Options &o,
                                       const DatasetSplit &train) {
  return std::make_unique<PtGcnModel>(model_config(o), model_vocabulary(train));
}

void write_run_config(const fs::path &path, const Options &o) {
  std::ofstream out(path);
  out << "encoder=" << o.encoder << "\n";
  if (!o.embeddings.empty())
    out << "embeddings=\"" << o.embeddings << "\"\n";
  out << "template=" << o.template_mode << "\n";
  if (!o.template_file.empty())
    out << "template-file=\"" << o.template_file << "\"\n";
  out << "alpha=" << o.alpha << "\nk=" << o.k << "\nlayers=" << o.layers
      << "\ndim=" << o.dim << "\ntensor-width=" << o.tensor_width
      << "\nencoder-layers=" << o.encoder_layers << "\nheads=" << o.heads
      << "\nseed=" << o.seed << "\nswap-axes=" << (o.swap_axes ? "true" : "false")
      << "\ntopk-literal=" << (o.topk_literal ? "true" : "false") << "\n";
}

int cmd_train(const Options &o) {
  auto train = parse_split(split_file(o.data, "train").string());
  auto dev = parse_split(split_file(o.data, "dev").string());
  auto model = make_model(o, train);
  auto train_store = load_store(o, "train");
  auto dev_store = load_store(o, "dev");

  TrainConfig tc;
  tc.epochs = o.epochs;
  tc.batch = o.batch;
  tc.lr = o.lr.value_or(o.optimizer == "sgd" ? 1e-3 : 3e-4);
  tc.alpha = o.alpha;
  tc.max_negatives = o.max_negatives;
  tc.optimizer = o.optimizer == "sgd" ? OptimizerKind::Sgd : OptimizerKind::Adam;
  tc.seed = o.seed;
  tc.target_f1 = o.target_f1;

  // Ids restart at 0 in every split, so frozen dev records get a prefix
  // before both stores are merged into one lookup table.
  EmbeddingStore merged;
  if (train_store) {
    for (const auto &[id, rec] : train_store->records())
      merged.insert(id, rec);
    for (const auto &[id, rec] : dev_store->records())
      merged.insert("dev:" + id, rec);
    std::map<std::string, Annotation> gold;
    for (auto &s : dev.sentences) {
      gold.emplace("dev:" + s.id, dev.annotation(s.id));
      s.id = "dev:" + s.id;
    }
    dev.gold = std::move(gold);
    model->set_embeddings(&merged);
  }

  fs::path out = o.out.empty() ? fs::path("run") : fs::path(o.out);
  FitOptions fo;
  fo.out_dir = out;
  fo.manifest_extra["data"] = {
      {"train", {{"path", split_file(o.data, "train").string()},
                 {"git_blob", git_blob_id(split_file(o.data, "train").string())}}},
      {"dev", {{"path", split_file(o.data, "dev").string()},
               {"git_blob", git_blob_id(split_file(o.data, "dev").string())}}}};
  fo.on_epoch = [](const EpochRecord &r) {
    std::printf("epoch %3zu  L=%.4f (Ls=%.4f Le=%.4f L2=%.4f)  dev P=%.4f R=%.4f "
                "F1=%.4f  %.2fs\n",
                r.epoch, r.train.L, r.train.Ls, r.train.Le, r.train.L2,
                r.dev.precision, r.dev.recall, r.dev.f1, r.seconds);
    std::fflush(stdout);
  };
  auto result = fit(*model, train, dev, tc, fo);
  write_run_config(out / "run.ini", o);
  std::printf("selected epoch %zu (dev F1 %.4f); wrote %s\n", result.best_epoch,
              result.best_f1, (out / "checkpoint.ptgc").c_str());
  return 0;
}

void load_checkpoint(PtGcnModel &model, const std::string &path) {
  if (path.empty())
    throw ConfigError("--checkpoint is required");
  if (!fs::exists(path))
    throw LookupError("checkpoint '" + path + "' does not exist");
  model.parameters().load(path);
}

int cmd_eval(const Options &o) {
  auto train = parse_split(split_file(o.data, "train").string());
  auto split = parse_split(split_file(o.data, o.split).string());
  auto model = make_model(o, train);
  load_checkpoint(*model, o.checkpoint);
  auto store = load_store(o, o.split);
  if (store)
    model->set_embeddings(&*store);

  double ms = 0.0;
  auto pred = model->predict_split(split, &ms);
  auto gold = gold_sets(split);

  std::vector<std::pair<std::string, MetricReport>> rows;
  nlohmann::json report;
  if (o.task == "all" || o.task == "triplet")
    rows.emplace_back("triplet", triplet_metrics(pred, gold));
  if (o.task == "all" || o.task == "aesc")
    rows.emplace_back("aesc", subtask_metrics(pred, gold, Subtask::AESC));
  if (o.task == "all" || o.task == "aope")
    rows.emplace_back("aope", subtask_metrics(pred, gold, Subtask::AOPE));
  for (const auto &[name, r] : rows)
    report[name] = to_json(r);
  std::cout << format_report_table(rows);
  if (o.task == "all" || o.task == "triplet") {
    auto errors = error_analysis(pred, gold);
    std::cout << format_error_table(errors);
    report["errors"] = to_json(errors);
  }
  std::printf("inference  %.3f ms per sentence over %zu sentences\n", ms,
              split.size());
  report["mean_inference_ms"] = ms;
  report["parameter_count"] = model->parameters().scalar_count();

  fs::path out = o.out.empty() ? fs::path(o.checkpoint).parent_path() : fs::path(o.out);
  if (out.empty())
    out = ".";
  fs::create_directories(out);
  std::ofstream preds(out / ("predictions." + o.split + ".txt"));
  for (const auto &s : split.sentences)
    preds << s.id << '\t' << format_triplets(pred.at(s.id)) << '\n';
  std::ofstream(out / ("report." + o.split + ".json")) << report.dump(2) << '\n';
  return 0;
}

int cmd_heatmap(const Options &o) {
  auto train = parse_split(split_file(o.data, "train").string());
  auto split = parse_split(split_file(o.data, o.split).string());
  const Sentence *s = split.find(o.id);
  if (!s)
    throw LookupError("no sentence with id '" + o.id + "' in the " + o.split +
                      " split");
  auto model = make_model(o, train);
  if (model->config().template_mode == TemplateMode::None)
    throw ConfigError("template mode none computes no prompt scores");
  load_checkpoint(*model, o.checkpoint);
  auto store = load_store(o, o.split);
  if (store)
    model->set_embeddings(&*store);

  NoGradGuard no_grad;
  Forward f = model->forward(*s);
  fs::path out = o.out.empty() ? fs::path(".") : fs::path(o.out);
  fs::create_directories(out);
  for (auto sentiment : kSentiments) {
    std::string tag = lowercase(std::string(sentiment_tag(sentiment)));
    fs::path file = out / (o.id + "." + tag + ".csv");
    std::ofstream csv(file);
    write_heatmap_csv(csv, *s, heatmap(*f.prompt, sentiment));
    std::cout << "wrote " << file.string() << '\n';
  }
  return 0;
}

} // namespace

int main(int argc, char **argv) {
  CLI::App app{"Prompt-scored grid GCN for aspect sentiment triplet extraction"};
  app.name("ptgcn");
  app.require_subcommand(1);
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  Options o;

  auto *train = app.add_subcommand("train", "train a model and write a checkpoint");
  add_model_flags(*train, o);
  train->add_option("--epochs", o.epochs, "training epochs");
  train->add_option("--batch", o.batch, "sentences per step");
  train->add_option("--lr", o.lr, "learning rate (default 3e-4 adam, 1e-3 sgd)");
  train->add_option("--out", o.out, "output directory");
  train->add_option("--optimizer", o.optimizer, "adam or sgd")
      ->check(CLI::IsMember({"adam", "sgd"}));
  train->add_option("--max-negatives", o.max_negatives,
                    "Padding regions per sentence in the sentiment loss");
  train->add_option("--target-f1", o.target_f1,
                    "stop once dev F1 reaches this value (0 disables)");

  auto *eval = app.add_subcommand("eval", "score a checkpoint on a split");
  add_model_flags(*eval, o);
  eval->add_option("--checkpoint", o.checkpoint, "PTGC0001 checkpoint");
  eval->add_option("--split", o.split, "train, dev or test (default test)");
  eval->add_option("--task", o.task, "triplet, aesc, aope or all")
      ->check(CLI::IsMember({"triplet", "aesc", "aope", "all"}));
  eval->add_option("--out", o.out, "output directory (default: checkpoint's)");

  auto *heat = app.add_subcommand("heatmap", "write prompt-score heatmaps as CSV");
  add_model_flags(*heat, o);
  heat->add_option("--checkpoint", o.checkpoint, "PTGC0001 checkpoint");
  heat->add_option("--split", o.split,
                   "split holding the sentence (default train)");
  heat->add_option("--id", o.id, "sentence id (0-based line index)")->required();
  heat->add_option("--out", o.out, "output directory");

  try {
    auto args = expand_config(argc, argv, {"train", "eval", "heatmap"});
    std::reverse(args.begin(), args.end());
    app.parse(args);
  } catch (const CLI::CallForHelp &e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp &e) {
    return app.exit(e);
  } catch (const CLI::ParseError &e) {
    app.exit(e);
    return 2;
  }

  if (o.split.empty())
    o.split = *heat ? "train" : "test";
  try {
    if (*train)
      return cmd_train(o);
    if (*eval)
      return cmd_eval(o);
    return cmd_heatmap(o);
  } catch (const NonFiniteLossError &e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  } catch (const ConfigError &e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const ValidationError &e) {
    std::cerr << "invalid input: " << e.what() << '\n';
    return 2;
  } catch (const LookupError &e) {
    std::cerr << "not found: " << e.what() << '\n';
    return 2;
  } catch (const ShapeError &e) {
    std::cerr << "shape mismatch: " << e.what() << '\n';
    return 2;
  } catch (const ParseError &e) {
    std::cerr << "parse error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception &e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}

#include "cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <optional>
#include <ostream>
#include <sstream>

#include "spcl/config.hpp"
#include "spcl/dataio.hpp"
#include "spcl/error.hpp"
#include "spcl/flops.hpp"
#include "spcl/partition.hpp"
#include "spcl/probes.hpp"
#include "spcl/rng.hpp"
#include "spcl/trainer.hpp"

namespace spcl::cli {

namespace fs = std::filesystem;

namespace {

struct GenDataArgs {
  fs::path out;
  std::size_t count = 0;
  std::size_t classes = 4;
  std::uint64_t seed = 0;
  double test_fraction = 0.2;
  double noise = 0.05;
  std::size_t image = 64;
};

struct PretrainArgs {
  std::optional<fs::path> config;
  fs::path data;
  fs::path out;
  std::optional<fs::path> resume;
  std::string split = "train";
  std::vector<std::string> set;
  std::optional<std::size_t> epochs, batch_size, threads, checkpoint_every;
  std::optional<double> lr, mask_ratio;
  std::optional<std::uint64_t> seed;
};

struct EmbedArgs {
  fs::path checkpoint;
  fs::path data;
  fs::path out;
  std::optional<std::string> split;
};

struct ProbeArgs {
  fs::path train;
  fs::path test;
  std::optional<std::size_t> knn;
  bool linear = false;
};

struct FlopsArgs {
  EncoderConfig cfg;
  double ratio = 0.6;
  bool tsv = false;
};

struct PartitionArgs {
  std::size_t n = 0;
  double ratio = 0.6;
  std::uint64_t seed = 0;
  std::optional<std::size_t> grid_width;
};

int gen_data(const GenDataArgs& a, std::ostream& err) {
  SyntheticConfig cfg;
  cfg.classes = a.classes;
  cfg.seed = a.seed;
  cfg.noise_std = a.noise;
  cfg.height = cfg.width = a.image;
  const Manifest m = gen_synthetic(a.out, a.count, cfg, a.test_fraction);
  err << "wrote " << m.records.size() << " images and " << kManifestName << " to " << a.out.string() << "\n";
  return kOk;
}

std::vector<ImageGray> load_split(const fs::path& dir, const std::string& split, std::ostream& err) {
  const Manifest m = read_manifest(dir / kManifestName);
  std::vector<ImageGray> images;
  for (const auto& r : m.records) {
    // Unlabelled-split rows count as training data.
    if (r.split == split || (split == "train" && r.split.empty())) images.push_back(load_pgm(dir / r.path));
  }
  if (images.empty()) throw FormatError(dir.string() + ": no images in split '" + split + "'");
  err << "loaded " << images.size() << " images (split " << split << ") from " << dir.string() << "\n";
  return images;
}

int pretrain_cmd(const PretrainArgs& a, std::ostream& err) {
  TrainState state;
  if (a.resume) {
    if (a.config || !a.set.empty() || a.epochs || a.batch_size || a.lr || a.mask_ratio || a.seed ||
        a.checkpoint_every) {
      throw ConfigError("--resume continues the checkpointed run; only --threads may be changed");
    }
    state = load_checkpoint(*a.resume);
    if (a.threads) state.train.threads = *a.threads;
  } else {
    RunConfig cfg;
    if (a.config) apply_key_values(cfg, load_key_values(a.config->string()));
    KeyValues overrides;
    for (const auto& s : a.set) {
      const auto kv = parse_key_values(s, "--set");
      overrides.insert(overrides.end(), kv.begin(), kv.end());
    }
    apply_key_values(cfg, overrides);
    if (a.epochs) cfg.train.epochs = *a.epochs;
    if (a.batch_size) cfg.train.batch_size = *a.batch_size;
    if (a.threads) cfg.train.threads = *a.threads;
    if (a.checkpoint_every) cfg.train.checkpoint_every = *a.checkpoint_every;
    if (a.lr) cfg.train.lr_peak = *a.lr;
    if (a.mask_ratio) cfg.train.mask_ratio = *a.mask_ratio;
    if (a.seed) cfg.train.seed = *a.seed;
    cfg.encoder.validate();
    cfg.train.validate();
    state = init_state(cfg.encoder, cfg.train);
  }

  const auto images = load_split(a.data, a.split, err);
  err << "# effective configuration\n"
      << format_key_values(to_key_values(RunConfig{state.encoder, state.train.resolved(images.size())}));

  PretrainOptions opts;
  opts.out_dir = a.out;
  opts.log = [&err](const std::string& line) { err << line << "\n"; };
  const PretrainResult r = pretrain(images, std::move(state), opts);
  if (!r.metrics.empty()) {
    char buf[96];
    std::snprintf(buf, sizeof buf, "done: step %llu loss %.6f tau %.4f\n",
                  static_cast<unsigned long long>(r.metrics.back().step), r.metrics.back().loss,
                  r.metrics.back().tau);
    err << buf;
  }
  return kOk;
}

int embed_cmd(const EmbedArgs& a, std::ostream& err) {
  const TrainState state = load_checkpoint(a.checkpoint);
  const LabeledImages data = load_dataset(a.data, a.split);
  if (data.images.empty()) throw FormatError(a.data.string() + ": no images selected");
  const LabeledEmbeddings e = embed_dataset(data.images, data.labels, state.encoder, state.params);
  export_embeddings(a.out, e);
  err << "wrote " << e.size() << " embeddings of dimension " << e.dim() << " to " << a.out.string() << "\n";
  return kOk;
}

int probe_cmd(const ProbeArgs& a, std::ostream& out, std::ostream& err) {
  const LabeledEmbeddings train = import_embeddings(a.train);
  const LabeledEmbeddings test = import_embeddings(a.test);
  char buf[64];
  if (a.knn) {
    const double acc = knn_probe(train, test, *a.knn);
    std::snprintf(buf, sizeof buf, "knn_accuracy\t%.6f\n", acc);
    out << buf;
    return kOk;
  }
  const ProbeResult r = linear_probe(train, test);
  for (int c : r.skipped_classes) err << "warning: class " << c << " absent from training embeddings\n";
  std::snprintf(buf, sizeof buf, "linear_accuracy\t%.6f\n", r.accuracy);
  out << buf;
  for (std::size_t c = 0; c < r.per_class.size(); ++c) {
    if (r.per_class[c]) {
      std::snprintf(buf, sizeof buf, "class_%zu\t%.6f\n", c, *r.per_class[c]);
      out << buf;
    }
  }
  return kOk;
}

int flops_cmd(const FlopsArgs& a, std::ostream& out) {
  a.cfg.validate();
  out << format_cost_report(spcl_step_cost(a.cfg, a.ratio), a.tsv);
  return kOk;
}

std::string describe_group(const char* name, const std::vector<std::size_t>& idx, std::size_t width) {
  std::string s = name;
  s += " (" + std::to_string(idx.size()) + "):";
  for (auto i : idx) s += " " + std::to_string(i);
  s += "\n";
  s += std::string(name) + " grid:";
  for (auto i : idx) s += " (" + std::to_string(i / width) + "," + std::to_string(i % width) + ")";
  s += "\n";
  return s;
}

int partition_cmd(const PartitionArgs& a, std::ostream& out) {
  std::size_t width = a.n;
  const auto root = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(a.n))));
  if (root * root == a.n) width = root;
  if (a.grid_width) {
    if (*a.grid_width == 0) throw ConfigError("--grid-width must be positive");
    width = *a.grid_width;
  }
  CounterRng rng = make_stream(a.seed, Stream::partition, 0);
  const PartitionPlan plan = sample_partition(a.n, a.ratio, rng);
  char head[160];
  std::snprintf(head, sizeof head, "tokens %zu  ratio %.6g  visible %zu  masked %zu  grid width %zu\n",
                plan.num_tokens, plan.mask_ratio, visible_count(a.n, a.ratio),
                a.n - visible_count(a.n, a.ratio), width);
  out << head << describe_group("group_a", plan.group_a, width) << describe_group("group_b", plan.group_b, width);
  return kOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Semantic-partitioned contrastive pre-training toolkit", "spcl"};
  app.require_subcommand(1);

  GenDataArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "write a synthetic labelled PGM dataset and manifest");
  gen_cmd->add_option("--out", gen.out, "output directory")->required();
  gen_cmd->add_option("--count", gen.count, "number of images")->required()->check(CLI::PositiveNumber);
  gen_cmd->add_option("--classes", gen.classes, "number of classes")->check(CLI::Range(2, 1 << 20));
  gen_cmd->add_option("--seed", gen.seed, "root seed");
  gen_cmd->add_option("--test-fraction", gen.test_fraction, "fraction tagged 'test'")->check(CLI::Range(0.0, 0.99));
  gen_cmd->add_option("--noise", gen.noise, "pixel noise standard deviation")->check(CLI::NonNegativeNumber);
  gen_cmd->add_option("--image", gen.image, "image side in pixels")->check(CLI::PositiveNumber);

  PretrainArgs pre;
  auto* pre_cmd = app.add_subcommand("pretrain", "self-supervised pre-training");
  pre_cmd->add_option("--config", pre.config, "key = value config file");
  pre_cmd->add_option("--data", pre.data, "dataset directory")->required();
  pre_cmd->add_option("--out", pre.out, "run directory (metrics, checkpoints)")->required();
  pre_cmd->add_option("--resume", pre.resume, "continue from a checkpoint");
  pre_cmd->add_option("--split", pre.split, "manifest split to train on");
  pre_cmd->add_option("--set", pre.set, "config override 'key=value' (repeatable)");
  pre_cmd->add_option("--epochs", pre.epochs);
  pre_cmd->add_option("--batch-size", pre.batch_size);
  pre_cmd->add_option("--lr", pre.lr, "peak learning rate");
  pre_cmd->add_option("--mask-ratio", pre.mask_ratio);
  pre_cmd->add_option("--seed", pre.seed);
  pre_cmd->add_option("--checkpoint-every", pre.checkpoint_every);
  pre_cmd->add_option("--threads", pre.threads, "worker threads; 1 is bit-reproducible");

  EmbedArgs emb;
  auto* emb_cmd = app.add_subcommand("embed", "export frozen [CLS] embeddings");
  emb_cmd->add_option("--checkpoint", emb.checkpoint)->required();
  emb_cmd->add_option("--data", emb.data)->required();
  emb_cmd->add_option("--out", emb.out)->required();
  emb_cmd->add_option("--split", emb.split, "only embed this manifest split");

  ProbeArgs prb;
  auto* prb_cmd = app.add_subcommand("probe", "evaluate exported embeddings");
  prb_cmd->add_option("--train", prb.train)->required();
  prb_cmd->add_option("--test", prb.test)->required();
  auto* knn_opt = prb_cmd->add_option("--knn", prb.knn, "k-nearest-neighbour probe with this k");
  auto* lin_opt = prb_cmd->add_flag("--linear", prb.linear, "linear probe (default)");
  knn_opt->excludes(lin_opt);

  FlopsArgs fl;
  auto* fl_cmd = app.add_subcommand("flops", "analytic compute cost of one pre-training forward");
  fl_cmd->add_option("--depth", fl.cfg.depth)->required();
  fl_cmd->add_option("--dim", fl.cfg.dim)->required();
  fl_cmd->add_option("--heads", fl.cfg.heads)->required();
  fl_cmd->add_option("--patch", fl.cfg.patch)->required();
  fl_cmd->add_option("--image", fl.cfg.image)->required();
  fl_cmd->add_option("--ratio", fl.ratio)->required();
  fl_cmd->add_option("--mlp-ratio", fl.cfg.mlp_ratio);
  fl_cmd->add_flag("--tsv", fl.tsv, "tab-separated output");

  PartitionArgs part;
  auto* part_cmd = app.add_subcommand("partition", "sample and print one partition plan");
  part_cmd->add_option("--n", part.n, "token count")->required()->check(CLI::PositiveNumber);
  part_cmd->add_option("--ratio", part.ratio)->required();
  part_cmd->add_option("--seed", part.seed)->required();
  part_cmd->add_option("--grid-width", part.grid_width, "columns of the token grid (default: square)");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    if (args.empty()) {
      err << app.help();
      return kUsage;
    }
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    app.exit(e, out, err);
    return kOk;
  } catch (const CLI::ParseError& e) {
    app.exit(e, err, err);
    err << app.help();
    return kUsage;
  }

  try {
    if (*gen_cmd) return gen_data(gen, err);
    if (*pre_cmd) return pretrain_cmd(pre, err);
    if (*emb_cmd) return embed_cmd(emb, err);
    if (*prb_cmd) return probe_cmd(prb, out, err);
    if (*fl_cmd) return flops_cmd(fl, out);
    if (*part_cmd) return partition_cmd(part, out);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const NumericalError& e) {
    err << "numerical failure: " << e.what() << "\n";
    return kNumerical;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kData;
  }
  return kUsage;
}

}  // namespace spcl::cli

// connloss: command-line front end for the connector information-loss toolkit.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "connloss/connloss.hpp"
#include "connloss/report.hpp"

namespace fs = std::filesystem;
using connloss::report::json;

namespace {

/// Accepts TOML/INI (CLI11's native format) or a JSON object whose nested
/// objects name subcommands, e.g. {"seed": 3, "knor": {"k": [10, 50]}}.
class TomlOrJsonConfig : public CLI::ConfigBase {
 public:
  std::vector<CLI::ConfigItem> from_config(std::istream& input) const override {
    std::string text((std::istreambuf_iterator<char>(input)), std::istreambuf_iterator<char>());
    const auto first = text.find_first_not_of(" \t\r\n");
    if (first != std::string::npos && text[first] == '{') {
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(text);
      } catch (const nlohmann::json::exception& e) {
        throw CLI::ConversionError(std::string("invalid JSON config: ") + e.what());
      }
      std::vector<CLI::ConfigItem> items;
      flatten(j, "", {}, items);
      return items;
    }
    std::istringstream toml(text);
    return CLI::ConfigBase::from_config(toml);
  }

 private:
  static std::string scalar(const nlohmann::json& v) {
    if (v.is_string()) return v.get<std::string>();
    if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
    return v.dump();
  }

  static void flatten(const nlohmann::json& j, const std::string& name, std::vector<std::string> parents,
                      std::vector<CLI::ConfigItem>& out) {
    if (j.is_object()) {
      if (!name.empty()) parents.push_back(name);
      for (const auto& [key, value] : j.items()) flatten(value, key, parents, out);
      return;
    }
    CLI::ConfigItem item;
    item.name = name;
    item.parents = std::move(parents);
    if (j.is_array()) {
      for (const auto& v : j) item.inputs.push_back(scalar(v));
    } else {
      item.inputs.push_back(scalar(j));
    }
    out.push_back(std::move(item));
  }
};

struct GlobalOptions {
  std::uint64_t seed = 0;
  std::string out_dir = ".";
  unsigned threads = 1;
};

fs::path output_path(const GlobalOptions& g, const std::string& name) {
  fs::path p(name);
  if (p.is_absolute()) return p;
  return fs::path(g.out_dir) / p;
}

json with_meta(json body, const std::string& command, const GlobalOptions& g, const json& config,
               const std::vector<fs::path>& inputs) {
  body["meta"] = connloss::report::metadata(command, connloss::kVersion, config, g.seed, inputs);
  body["timestamp"] = connloss::report::utc_timestamp();
  return body;
}

std::vector<std::size_t> parse_sizes(const std::vector<std::string>& items, const char* what) {
  std::vector<std::size_t> out;
  for (const auto& item : items)
    for (const auto& part : connloss::csv::split(item))
      if (!part.empty()) out.push_back(connloss::csv::parse_number<std::size_t>(part, what));
  return out;
}

// ------------------------------------------------------------------ synth

struct SynthOptions {
  std::string kind = "identity";
  std::size_t samples = 200;
  std::uint32_t grid_rows = 4, grid_cols = 4;
  std::size_t pre_dim = 16, post_dim = 16, classes = 10;
  double noise = 1.0, spread = 3.0;
  std::string out = "synth.embd";
  std::string labels_out;
};

void add_synth(CLI::App& app, GlobalOptions& g) {
  auto opt = std::make_shared<SynthOptions>();
  auto* cmd = app.add_subcommand("synth", "Generate a synthetic embedding set with known ground truth");
  cmd->add_option("--kind", opt->kind, "identity|orthogonal|permuted|linear-map|noisy|compressive")->capture_default_str();
  cmd->add_option("--samples", opt->samples, "Number of samples N")->capture_default_str();
  cmd->add_option("--grid-rows", opt->grid_rows, "Patch grid rows M1")->capture_default_str();
  cmd->add_option("--grid-cols", opt->grid_cols, "Patch grid cols M2")->capture_default_str();
  cmd->add_option("--pre-dim", opt->pre_dim, "Pre-projection dimension D'")->capture_default_str();
  cmd->add_option("--post-dim", opt->post_dim, "Post-projection dimension D")->capture_default_str();
  cmd->add_option("--classes", opt->classes, "Number of clusters / labels")->capture_default_str();
  cmd->add_option("--noise", opt->noise, "Noise level for the noisy kind")->capture_default_str();
  cmd->add_option("--spread", opt->spread, "Cluster center spread")->capture_default_str();
  cmd->add_option("--out", opt->out, "Output EMBD file")->capture_default_str();
  cmd->add_option("--labels-out", opt->labels_out, "Optional labels CSV (id,class)");
  cmd->callback([opt, &g] {
    connloss::synth::Config cfg;
    cfg.kind = connloss::synth::parse_kind(opt->kind);
    cfg.samples = opt->samples;
    cfg.grid_rows = opt->grid_rows;
    cfg.grid_cols = opt->grid_cols;
    cfg.pre_dim = opt->pre_dim;
    cfg.post_dim = opt->post_dim;
    cfg.classes = opt->classes;
    cfg.noise = opt->noise;
    cfg.cluster_spread = opt->spread;
    cfg.seed = g.seed;
    const auto result = connloss::synth::generate(cfg);
    const auto out = output_path(g, opt->out);
    connloss::write_container(result.set, out);
    if (!opt->labels_out.empty()) {
      std::ofstream labels(output_path(g, opt->labels_out));
      labels << "id,class\n";
      for (const auto& id : result.set.ids) labels << id << ',' << result.labels.at(id) << '\n';
    }
    std::printf("wrote %s (%s, N=%zu, S_pre=%zu, D'=%zu, S_post=%zu, D=%zu)\n", out.c_str(),
                connloss::synth::to_string(cfg.kind), result.set.size(), result.set.pre.seq_len, result.set.pre.dim,
                result.set.post.seq_len, result.set.post.dim);
  });
}

// ------------------------------------------------------------------- knor

struct KnorCliOptions {
  std::string input;
  std::vector<std::string> ks{"10", "50", "100"};
  std::string metric = "l2";
  std::string pooling = "mean";
  bool normalize = false;
  std::string prefix = "knor";
};

void add_knor(CLI::App& app, GlobalOptions& g) {
  auto opt = std::make_shared<KnorCliOptions>();
  auto* cmd = app.add_subcommand("knor", "k-NN overlap ratio between pre- and post-projection spaces");
  cmd->add_option("--input,-i", opt->input, "EMBD (or fixture CSV) file")->required()->check(CLI::ExistingFile);
  cmd->add_option("--k", opt->ks, "Neighborhood sizes")->delimiter(',')->capture_default_str();
  cmd->add_option("--metric", opt->metric, "l2|ip")->capture_default_str();
  cmd->add_option("--pooling", opt->pooling, "mean|flat")->capture_default_str();
  cmd->add_flag("--normalize", opt->normalize, "L2-normalize index vectors");
  cmd->add_option("--prefix", opt->prefix, "Output file prefix")->capture_default_str();
  cmd->callback([opt, &g] {
    const auto set = connloss::load_embeddings(opt->input);
    connloss::KnorOptions o{connloss::parse_metric(opt->metric), connloss::parse_pooling(opt->pooling), opt->normalize,
                            g.threads};
    const auto ks = parse_sizes(opt->ks, "k");
    if (ks.empty()) throw connloss::Error(connloss::ErrorKind::invalid_argument, "no k values given");
    const json config = {{"input", opt->input}, {"k", ks},         {"metric", opt->metric},
                         {"pooling", opt->pooling}, {"normalize", opt->normalize}};
    for (auto k : ks) {
      const auto result = connloss::knor(set, k, o);
      json body = connloss::report::to_json(result);
      body["assumptions"] = {"query sample excluded from its own neighbor set",
                             "ties broken by ascending sample id"};
      const auto stem = opt->prefix + "_k" + std::to_string(k);
      connloss::report::write_json(output_path(g, stem + ".json"),
                                   with_meta(std::move(body), "knor", g, config, {opt->input}));
      std::ofstream csv(output_path(g, stem + ".csv"));
      csv << "id,ratio\n";
      for (const auto& rec : result.per_sample) csv << rec.id << ',' << connloss::format_double(rec.ratio()) << '\n';
      std::printf("k=%zu average overlap ratio %.6f\n", k, result.average);
    }
  });
}

// --------------------------------------------------------------- retrieve

struct RetrieveOptions {
  std::string input, labels;
  std::vector<std::string> ks{"1", "5"};
  std::vector<std::string> metrics{"l2", "ip"};
  std::vector<std::string> spaces{"pre", "post"};
  bool normalize = false;
  std::string prefix = "retrieval";
};

void add_retrieve(CLI::App& app, GlobalOptions& g) {
  auto opt = std::make_shared<RetrieveOptions>();
  auto* cmd = app.add_subcommand("retrieve", "Zero-shot Recall@k in the pre and post spaces");
  cmd->add_option("--input,-i", opt->input, "EMBD file")->required()->check(CLI::ExistingFile);
  cmd->add_option("--labels", opt->labels, "Labels CSV (id,class)")->required()->check(CLI::ExistingFile);
  cmd->add_option("--k", opt->ks, "Recall cutoffs")->delimiter(',')->capture_default_str();
  cmd->add_option("--metrics", opt->metrics, "Metrics to evaluate")->delimiter(',')->capture_default_str();
  cmd->add_option("--spaces", opt->spaces, "Spaces to evaluate")->delimiter(',')->capture_default_str();
  cmd->add_flag("--normalize", opt->normalize, "L2-normalize index vectors");
  cmd->add_option("--prefix", opt->prefix, "Output file prefix")->capture_default_str();
  cmd->callback([opt, &g] {
    const auto set = connloss::load_embeddings(opt->input);
    const auto labels = connloss::read_labels(opt->labels);
    const auto ks = parse_sizes(opt->ks, "k");
    const json config = {{"input", opt->input}, {"labels", opt->labels}, {"k", ks},
                         {"metrics", opt->metrics}, {"spaces", opt->spaces}, {"normalize", opt->normalize}};
    for (const auto& space_name : opt->spaces) {
      for (const auto& metric_name : opt->metrics) {
        const auto space = connloss::parse_space(space_name);
        const auto metric = connloss::parse_metric(metric_name);
        const auto r = connloss::retrieval_eval(set, labels, metric, space, ks, opt->normalize, g.threads);
        const auto stem = opt->prefix + "_" + space_name + "_" + connloss::to_string(metric);
        connloss::report::write_json(output_path(g, stem + ".json"),
                                     with_meta(connloss::report::to_json(r), "retrieve", g, config,
                                               {opt->input, opt->labels}));
        std::ofstream csv(output_path(g, stem + ".csv"));
        csv << "id";
        for (auto k : r.ks) csv << ",r@" << k;
        csv << '\n';
        for (const auto& h : r.per_sample) {
          csv << h.id;
          for (bool b : h.hit) csv << ',' << (b ? 1 : 0);
          csv << '\n';
        }
        for (const auto& [k, v] : r.recall)
          std::printf("%s/%s R@%zu = %.4f\n", space_name.c_str(), connloss::to_string(metric), k, v);
      }
    }
  });
}

// ------------------------------------------------------------ recon-train

struct TrainCliOptions {
  std::string train, val;
  double val_fraction = 0.1;
  std::string arch = "mlp";
  std::string preset;
  std::vector<std::size_t> hidden_dims{2048, 2048};
  std::size_t hidden = 2048, ffn = 2048, layers = 4, heads = 8;
  std::string activation = "gelu";
  connloss::recon::TrainerConfig trainer;
  std::size_t connector_params = 0;
  std::string model_out = "model.rcpt";
  std::string history_out = "loss_history.csv";
  std::string report_out = "train_report.json";
};

void add_recon_train(CLI::App& app, GlobalOptions& g) {
  auto opt = std::make_shared<TrainCliOptions>();
  auto* cmd = app.add_subcommand("recon-train", "Train a reconstruction model (post -> pre)");
  cmd->add_option("--train", opt->train, "Training EMBD file")->required()->check(CLI::ExistingFile);
  cmd->add_option("--val", opt->val, "Validation EMBD file (default: split from --train)")->check(CLI::ExistingFile);
  cmd->add_option("--val-fraction", opt->val_fraction, "Held-out fraction when --val is absent")->capture_default_str();
  cmd->add_option("--arch", opt->arch, "mlp|seqreg")->capture_default_str();
  cmd->add_option("--preset", opt->preset, "full: full-size layer sizes (mlp 4096,2048; seqreg 2048/8192/16/16)");
  cmd->add_option("--hidden-dims", opt->hidden_dims, "mlp hidden widths")->delimiter(',')->capture_default_str();
  cmd->add_option("--hidden", opt->hidden, "seqreg model width")->capture_default_str();
  cmd->add_option("--ffn", opt->ffn, "seqreg feed-forward width")->capture_default_str();
  cmd->add_option("--layers", opt->layers, "seqreg encoder layers")->capture_default_str();
  cmd->add_option("--heads", opt->heads, "seqreg attention heads")->capture_default_str();
  cmd->add_option("--activation", opt->activation, "gelu|relu|identity")->capture_default_str();
  cmd->add_option("--lr", opt->trainer.learning_rate, "Learning rate")->capture_default_str();
  cmd->add_option("--dropout", opt->trainer.dropout, "Dropout after hidden activations")->capture_default_str();
  cmd->add_option("--batch", opt->trainer.batch_size, "Batch size (samples)")->capture_default_str();
  cmd->add_option("--epochs", opt->trainer.max_epochs, "Maximum epochs")->capture_default_str();
  cmd->add_option("--patience", opt->trainer.patience, "Early-stopping patience")->capture_default_str();
  cmd->add_option("--beta1", opt->trainer.beta1)->capture_default_str();
  cmd->add_option("--beta2", opt->trainer.beta2)->capture_default_str();
  cmd->add_option("--eps", opt->trainer.epsilon)->capture_default_str();
  cmd->add_option("--connector-params", opt->connector_params, "Connector size, for the capacity check");
  cmd->add_option("--model", opt->model_out, "Checkpoint output")->capture_default_str();
  cmd->add_option("--history", opt->history_out, "Loss history CSV output")->capture_default_str();
  cmd->add_option("--report", opt->report_out, "Training report output")->capture_default_str();
  cmd->callback([opt, &g] {
    auto train_set = connloss::load_embeddings(opt->train);
    connloss::EmbeddingSet val_set;
    std::vector<fs::path> inputs{opt->train};
    if (!opt->val.empty()) {
      val_set = connloss::load_embeddings(opt->val);
      inputs.emplace_back(opt->val);
    } else {
      if (!(opt->val_fraction > 0 && opt->val_fraction < 1))
        throw connloss::Error(connloss::ErrorKind::invalid_argument, "--val-fraction must be in (0, 1)");
      std::vector<std::size_t> rows(train_set.size());
      std::iota(rows.begin(), rows.end(), 0);
      std::mt19937_64 rng(g.seed ^ 0x5eedULL);
      std::shuffle(rows.begin(), rows.end(), rng);
      const auto n_val = std::max<std::size_t>(1, static_cast<std::size_t>(opt->val_fraction * rows.size()));
      std::vector<std::size_t> val_rows(rows.begin(), rows.begin() + n_val), train_rows(rows.begin() + n_val, rows.end());
      std::ranges::sort(val_rows);
      std::ranges::sort(train_rows);
      val_set = train_set.subset(val_rows);
      train_set = train_set.subset(train_rows);
    }

    connloss::recon::ModelConfig arch;
    arch.arch = connloss::recon::parse_arch(opt->arch);
    arch.activation = connloss::recon::parse_activation(opt->activation);
    if (arch.arch == connloss::recon::Arch::mlp) {
      auto hidden = opt->hidden_dims;
      if (opt->preset == "full") hidden = {4096, 2048};
      arch.mlp_dims = {train_set.post.dim};
      arch.mlp_dims.insert(arch.mlp_dims.end(), hidden.begin(), hidden.end());
      arch.mlp_dims.push_back(train_set.pre.dim);
    } else {
      arch = opt->preset == "full"
                 ? connloss::recon::transformer_preset(train_set.post.dim, train_set.pre.dim, train_set.post.seq_len,
                                                       train_set.pre.seq_len)
                 : arch;
      arch.activation = connloss::recon::parse_activation(opt->activation);
      arch.input_dim = train_set.post.dim;
      arch.output_dim = train_set.pre.dim;
      arch.input_len = train_set.post.seq_len;
      arch.output_len = train_set.pre.seq_len;
      if (opt->preset != "full") {
        arch.hidden = opt->hidden;
        arch.ffn = opt->ffn;
        arch.layers = opt->layers;
        arch.heads = opt->heads;
      }
    }
    if (!opt->preset.empty() && opt->preset != "full")
      throw connloss::Error(connloss::ErrorKind::invalid_argument, "unknown preset '" + opt->preset + "'");
    auto trainer = opt->trainer;
    trainer.seed = g.seed;
    trainer.threads = g.threads;

    json warnings = json::array();
    {
      const auto probe = connloss::recon::ReconstructionModel<float>::zeros(arch);
      if (opt->connector_params > 0)
        if (auto w = probe.capacity_warning(opt->connector_params)) {
          std::fprintf(stderr, "warning: %s\n", w->c_str());
          warnings.push_back(*w);
        }
    }
    const auto result = connloss::recon::train<float>(train_set, val_set, trainer, arch, [](const auto& r) {
      std::printf("epoch %3zu  train %.6g  val %.6g\n", r.epoch, r.train_loss, r.val_loss);
      std::fflush(stdout);
    });
    connloss::recon::save_checkpoint(output_path(g, opt->model_out), result.model, result.norms);
    connloss::recon::write_history_csv(output_path(g, opt->history_out), result.history);

    json history = json::array();
    for (const auto& r : result.history)
      history.push_back({{"epoch", r.epoch}, {"train_loss", r.train_loss}, {"val_loss", r.val_loss}});
    const json config = {{"train", opt->train},
                         {"val", opt->val},
                         {"val_fraction", opt->val_fraction},
                         {"arch", opt->arch},
                         {"preset", opt->preset},
                         {"layer_dims", arch.mlp_dims},
                         {"hidden", arch.hidden},
                         {"ffn", arch.ffn},
                         {"layers", arch.layers},
                         {"heads", arch.heads},
                         {"activation", opt->activation},
                         {"lr", trainer.learning_rate},
                         {"dropout", trainer.dropout},
                         {"batch", trainer.batch_size},
                         {"epochs", trainer.max_epochs},
                         {"patience", trainer.patience},
                         {"beta1", trainer.beta1},
                         {"beta2", trainer.beta2},
                         {"eps", trainer.epsilon}};
    json body = {{"parameters", result.model.parameter_count()},
                 {"best_epoch", result.best_epoch},
                 {"best_val_loss", result.best_val_loss},
                 {"stopped_early", result.stopped_early},
                 {"history", std::move(history)},
                 {"warnings", std::move(warnings)},
                 {"assumptions",
                  {"losses are mean per-patch squared L2 error on embeddings normalized with training-split statistics",
                   "normalization statistics are per-dimension mean and population std",
                   "seqreg expands tokens to the patch grid by nearest-index repetition plus sinusoidal positions",
                   "seqreg encoder is post-LN with the configured activation"}}};
    connloss::report::write_json(output_path(g, opt->report_out),
                                 with_meta(std::move(body), "recon-train", g, config, inputs));
    std::printf("best epoch %zu, val loss %.6g, %zu parameters\n", result.best_epoch, result.best_val_loss,
                result.model.parameter_count());
  });
}

// ------------------------------------------------------------- recon-eval

struct EvalCliOptions {
  std::string input, model;
  std::vector<std::string> ids;
  bool denormalize = false;
  std::string losses_out = "per_sample_loss.csv";
  std::string maps_out = "loss_maps.json";
  std::string report_out = "eval_report.json";
};

void add_recon_eval(CLI::App& app, GlobalOptions& g) {
  auto opt = std::make_shared<EvalCliOptions>();
  auto* cmd = app.add_subcommand("recon-eval", "Per-patch reconstruction loss maps for a trained model");
  cmd->add_option("--input,-i", opt->input, "EMBD file")->required()->check(CLI::ExistingFile);
  cmd->add_option("--model", opt->model, "Checkpoint")->required()->check(CLI::ExistingFile);
  cmd->add_option("--ids", opt->ids, "Restrict to these sample ids")->delimiter(',');
  cmd->add_flag("--denormalize-norms", opt->denormalize, "Report norm differences in original units");
  cmd->add_option("--losses", opt->losses_out, "Per-sample loss CSV output")->capture_default_str();
  cmd->add_option("--maps", opt->maps_out, "Loss-map JSON output")->capture_default_str();
  cmd->add_option("--report", opt->report_out, "Summary report output")->capture_default_str();
  cmd->callback([opt, &g] {
    const auto set = connloss::load_embeddings(opt->input);
    const auto ckpt = connloss::recon::load_checkpoint<float>(opt->model);
    if (!ckpt.norms)
      throw connloss::Error(connloss::ErrorKind::missing_key, "checkpoint carries no normalization statistics");
    const auto eval = connloss::recon::evaluate_loss(ckpt.model, set, *ckpt.norms, opt->ids,
                                                     {opt->denormalize, g.threads});
    std::ofstream csv(output_path(g, opt->losses_out));
    csv << "id,total_loss,mean_loss\n";
    for (const auto& m : eval.maps)
      csv << m.id << ',' << connloss::format_double(m.total) << ',' << connloss::format_double(m.mean()) << '\n';
    connloss::report::write_json(output_path(g, opt->maps_out),
                                 connloss::report::loss_maps_to_json(eval.maps, set.grid, opt->denormalize));
    const json config = {{"input", opt->input}, {"model", opt->model}, {"ids", opt->ids},
                         {"denormalize_norms", opt->denormalize}};
    json body = {{"samples", eval.maps.size()},
                 {"total_loss", eval.total},
                 {"mean_patch_loss", eval.mean_patch_loss()},
                 {"assumptions", {"per-sample loss used for correlation is the mean over patches"}}};
    connloss::report::write_json(output_path(g, opt->report_out),
                                 with_meta(std::move(body), "recon-eval", g, config, {opt->input, opt->model}));
    std::printf("%zu samples, total loss %.6g, mean patch loss %.6g\n", eval.maps.size(), eval.total,
                eval.mean_patch_loss());
  });
}

// ------------------------------------------------------------- procrustes

void add_procrustes(CLI::App& app, GlobalOptions& g) {
  struct Options {
    std::string input;
    bool scale = false;
    std::string report_out = "procrustes.json";
    std::string errors_out = "procrustes_errors.csv";
  };
  auto opt = std::make_shared<Options>();
  auto* cmd = app.add_subcommand("procrustes", "Mean-pool, PCA, orthogonal Procrustes alignment error");
  cmd->add_option("--input,-i", opt->input, "EMBD file")->required()->check(CLI::ExistingFile);
  cmd->add_flag("--scale", opt->scale, "Also fit an isotropic scale (not comparable to pure orthogonal reports)");
  cmd->add_option("--report", opt->report_out, "Report output")->capture_default_str();
  cmd->add_option("--errors", opt->errors_out, "Per-sample error CSV")->capture_default_str();
  cmd->callback([opt, &g] {
    const auto set = connloss::load_embeddings(opt->input);
    connloss::ProcrustesOptions po;
    po.fit_scale = opt->scale;
    const auto r = connloss::align_report(set, po);
    json body = connloss::report::to_json(r);
    body["units"] = "L2 distance between mean-centered pooled vectors (original embedding units)";
    if (r.pca) body["pca_retained_variance_fraction"] = r.pca->retained_variance() / r.pca->total_variance;
    connloss::report::write_json(output_path(g, opt->report_out),
                                 with_meta(std::move(body), "procrustes", g,
                                           {{"input", opt->input}, {"scale", opt->scale}}, {opt->input}));
    std::ofstream csv(output_path(g, opt->errors_out));
    csv << "id,error\n";
    for (std::size_t i = 0; i < set.size(); ++i) csv << set.ids[i] << ',' << connloss::format_double(r.errors[i]) << '\n';
    std::printf("alignment error mean %.6g std %.6g min %.6g max %.6g (|R^T R - I| = %.3g)\n", r.summary.mean,
                r.summary.std, r.summary.min, r.summary.max, r.orthogonality_residual);
  });
}

// -------------------------------------------------------------- correlate

void add_correlate(CLI::App& app, GlobalOptions& g) {
  struct Options {
    std::string losses, loss_column = "mean_loss";
    std::string scores, score_column = "score";
    std::string maps, masks;
    double mask_threshold = 0.5;
    std::size_t permutations = 100000;
    std::string report_out = "correlation.json";
  };
  auto opt = std::make_shared<Options>();
  auto* cmd = app.add_subcommand("correlate", "Spearman correlation, quartile comparison and mask-split losses");
  cmd->add_option("--losses", opt->losses, "Per-sample values CSV (id + value column)")->required()->check(CLI::ExistingFile);
  cmd->add_option("--loss-column", opt->loss_column, "Column holding the loss")->capture_default_str();
  cmd->add_option("--scores", opt->scores, "Scores CSV (id + score column)")->required()->check(CLI::ExistingFile);
  cmd->add_option("--score-column", opt->score_column, "Column holding the score")->capture_default_str();
  cmd->add_option("--maps", opt->maps, "Loss-map JSON from recon-eval (for mask splits)")->check(CLI::ExistingFile);
  cmd->add_option("--masks", opt->masks, "Directory of <id>.pgm / <id>.csv masks")->check(CLI::ExistingDirectory);
  cmd->add_option("--mask-threshold", opt->mask_threshold, "Pixel fraction for a relevant patch")->capture_default_str();
  cmd->add_option("--permutations", opt->permutations, "Permutation budget for n < 20")->capture_default_str();
  cmd->add_option("--report", opt->report_out, "Report output")->capture_default_str();
  cmd->callback([opt, &g] {
    const auto losses = connloss::read_sample_values(opt->losses, opt->loss_column);
    const auto scores = connloss::read_score_table(opt->scores, opt->score_column);
    connloss::SpearmanOptions so{g.seed, opt->permutations};
    const auto corr = connloss::correlate_loss_scores(losses, scores, so);
    json body = {{"correlation", connloss::report::to_json(corr)}};
    if (corr.n >= 8) {
      body["quartiles"] = connloss::report::to_json(connloss::quartile_compare(losses, scores));
    } else {
      body["quartiles"] = nullptr;
    }
    std::vector<fs::path> inputs{opt->losses, opt->scores};
    if (!opt->maps.empty() && !opt->masks.empty()) {
      connloss::GridShape grid;
      const auto maps = connloss::report::loss_maps_from_json(connloss::report::read_json(opt->maps), &grid);
      const auto masks = connloss::load_masks(opt->masks, grid, opt->mask_threshold);
      const auto splits = connloss::mask_split_loss(maps, masks);
      json per_sample = json::array();
      connloss::SampleValues relevant, irrelevant;
      for (const auto& s : splits) {
        per_sample.push_back(connloss::report::to_json(s));
        if (s.relevant_mean_loss) relevant.emplace_back(s.id, *s.relevant_mean_loss);
        if (s.irrelevant_mean_loss) irrelevant.emplace_back(s.id, *s.irrelevant_mean_loss);
      }
      json split = {{"per_sample", std::move(per_sample)}, {"unmasked_samples", maps.size() - splits.size()}};
      auto try_corr = [&](const connloss::SampleValues& v) -> json {
        try {
          return connloss::report::to_json(connloss::correlate_loss_scores(v, scores, so));
        } catch (const connloss::Error& e) {
          return {{"error", e.what()}};
        }
      };
      split["relevant_correlation"] = try_corr(relevant);
      split["irrelevant_correlation"] = try_corr(irrelevant);
      body["mask_split"] = std::move(split);
      inputs.emplace_back(opt->maps);
    }
    body["assumptions"] = {"average ranks for ties", "permutation p-value below n=20"};
    const json config = {{"losses", opt->losses}, {"loss_column", opt->loss_column}, {"scores", opt->scores},
                         {"score_column", opt->score_column}, {"maps", opt->maps}, {"masks", opt->masks},
                         {"mask_threshold", opt->mask_threshold}, {"permutations", opt->permutations}};
    connloss::report::write_json(output_path(g, opt->report_out),
                                 with_meta(std::move(body), "correlate", g, config, inputs));
    std::printf("rho = %.4f, p = %.4g, n = %zu (%s)\n", corr.rho, corr.p, corr.n, corr.method.c_str());
  });
}

// ---------------------------------------------------------------- heatmap

void add_heatmap(CLI::App& app, GlobalOptions& g) {
  struct Options {
    std::string maps, grid_csv;
    std::vector<std::string> ids;
    std::string field = "norm_diff";
    std::size_t top_k = 10;
    std::string image;
    std::size_t cell_px = 16;
    double alpha = 0.5;
  };
  auto opt = std::make_shared<Options>();
  auto* cmd = app.add_subcommand("heatmap", "Render loss maps as diverging heatmaps (PPM) with top-k patches outlined");
  auto* maps_opt = cmd->add_option("--maps", opt->maps, "Loss-map JSON from recon-eval")->check(CLI::ExistingFile);
  auto* grid_opt = cmd->add_option("--grid-csv", opt->grid_csv, "A single grid as CSV rows")->check(CLI::ExistingFile);
  maps_opt->excludes(grid_opt);
  cmd->add_option("--ids", opt->ids, "Samples to render (default: all)")->delimiter(',');
  cmd->add_option("--field", opt->field, "norm_diff|squared_error")->capture_default_str();
  cmd->add_option("--top-k", opt->top_k, "High-loss patches to outline (0 = none)")->capture_default_str();
  cmd->add_option("--image", opt->image, "Background PPM (P6) for an overlay")->check(CLI::ExistingFile);
  cmd->add_option("--cell-px", opt->cell_px, "Pixels per grid cell in the standalone map")->capture_default_str();
  cmd->add_option("--alpha", opt->alpha, "Overlay opacity")->capture_default_str();
  cmd->callback([opt, &g] {
    std::vector<connloss::recon::PatchLossMap> maps;
    if (!opt->grid_csv.empty()) {
      const auto grid = connloss::read_mask_file(opt->grid_csv);
      maps.push_back({fs::path(opt->grid_csv).stem().string(), grid, grid, 0.0});
    } else if (!opt->maps.empty()) {
      maps = connloss::report::loss_maps_from_json(connloss::report::read_json(opt->maps));
    } else {
      throw connloss::Error(connloss::ErrorKind::invalid_argument, "one of --maps or --grid-csv is required");
    }
    if (opt->field != "norm_diff" && opt->field != "squared_error")
      throw connloss::Error(connloss::ErrorKind::invalid_argument, "unknown field '" + opt->field + "'");
    std::optional<connloss::RgbImage> background;
    if (!opt->image.empty()) background = connloss::read_ppm(opt->image);
    std::size_t rendered = 0;
    for (const auto& m : maps) {
      if (!opt->ids.empty() && std::ranges::find(opt->ids, m.id) == opt->ids.end()) continue;
      connloss::Heatmap hm;
      hm.grid = opt->field == "norm_diff" ? m.norm_diff : m.squared_error;
      hm.scale = connloss::clip_scale(hm.grid.values());
      if (opt->top_k > 0) hm.marked = connloss::top_loss_patches(m.squared_error, opt->top_k);
      connloss::write_ppm(output_path(g, "heatmap_" + m.id + ".ppm"), connloss::render_heatmap(hm, opt->cell_px));
      if (background)
        connloss::write_ppm(output_path(g, "overlay_" + m.id + ".ppm"),
                            connloss::render_overlay(hm, *background, opt->alpha));
      connloss::write_grid_csv(output_path(g, "grid_" + m.id + ".csv"), hm.grid);
      ++rendered;
    }
    if (rendered == 0) throw connloss::Error(connloss::ErrorKind::missing_key, "no matching samples to render");
    std::printf("rendered %zu heatmap(s)\n", rendered);
  });
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"connloss: quantify and localize information loss across a vision-language connector"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(connloss::kVersion));
  app.config_formatter(std::make_shared<TomlOrJsonConfig>());
  app.set_config("--config", "", "TOML or JSON configuration file");
  GlobalOptions g;
  app.add_option("--seed", g.seed, "Random seed (recorded in every report)")->capture_default_str();
  app.add_option("--out-dir", g.out_dir, "Directory for outputs")->capture_default_str();
  app.add_option("--threads", g.threads, "Worker threads")->capture_default_str()->check(CLI::PositiveNumber);
  add_synth(app, g);
  add_knor(app, g);
  add_retrieve(app, g);
  add_recon_train(app, g);
  add_recon_eval(app, g);
  add_procrustes(app, g);
  add_correlate(app, g);
  add_heatmap(app, g);
  app.parse_complete_callback([&g] { fs::create_directories(g.out_dir); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const connloss::Error& e) {
    std::fprintf(stderr, "error (%s): %s\n", connloss::to_string(e.kind()), e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  }
  return 0;
}

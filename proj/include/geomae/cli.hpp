#pragma once

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "geomae/selfcheck.hpp"
#include "geomae/training.hpp"

namespace geomae::cli {

namespace fs = std::filesystem;

/// Configuration sources shared by every command: preset, JSON file, then key=value overrides.
struct ConfigOptions {
  std::string preset;
  std::string file;
  std::vector<std::string> sets;
  std::size_t threads = 1;
};

struct ResolvedConfig {
  ModelConfig model;
  TrainConfig train;
  bool model_given = false;  // any model key came from the user
};

inline json parse_set_value(const std::string& raw) {
  try {
    return json::parse(raw);
  } catch (const json::exception&) {
    return json(raw);  // bare strings such as paper-literal or off
  }
}

inline ResolvedConfig resolve_config(const ConfigOptions& o) {
  ResolvedConfig r;
  if (!o.preset.empty()) {
    r.model = preset_model_config(o.preset);
    r.model_given = true;
  }
  const json model_keys = to_json(ModelConfig{});
  auto apply = [&](const std::string& key, const json& v) {
    if (!apply_config_key(key, v, r.model, r.train)) fail_usage("unknown config key '" + key + "'");
    if (model_keys.contains(key)) r.model_given = true;
  };
  if (!o.file.empty()) {
    std::ifstream is(o.file);
    if (!is) fail_usage("cannot open config file '" + o.file + "'");
    json obj;
    try {
      obj = json::parse(is);
    } catch (const json::exception& e) {
      fail_usage("config file '" + o.file + "' is not valid JSON: " + e.what());
    }
    if (!obj.is_object()) fail_usage("config must be a JSON object");
    for (const auto& [k, v] : obj.items()) apply(k, v);
  }
  for (const auto& s : o.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos || eq == 0) fail_usage("--set expects key=value, got '" + s + "'");
    apply(s.substr(0, eq), parse_set_value(s.substr(eq + 1)));
  }
  r.model.validate();
  r.train.validate();
  return r;
}

/// Model config for a command that consumes a checkpoint: the stored config, which must agree
/// with any model keys the user supplied.
inline ModelConfig checkpoint_model(const ResolvedConfig& rc, const ModelCheckpoint& ck) {
  const ModelConfig stored = checkpoint_model_config(ck);
  if (rc.model_given && !(stored == rc.model)) fail_data("config mismatch");
  return stored;
}

inline Dataset load_labeled(const std::string& root, const ModelConfig& m, std::uint64_t seed, std::size_t threads,
                            const std::vector<std::string>* classes = nullptr) {
  Dataset ds = load_dataset(manifest_load(root), m.n, derive_seed(seed, stream::resample), classes);
  ensure_normals(ds, m.k_n, threads);
  return ds;
}

/// One cloud resampled to n points; normals stored in the file are kept.
inline PointCloud load_single(const std::string& path, const ModelConfig& m, std::uint64_t seed) {
  PointCloud c = load_xyz(path, m.n, derive_seed(seed, stream::resample));
  return c.has_normals() ? c : estimate_normals(c, m.k_n);
}

/// A single .xyz file or every cloud of a dataset directory.
inline Dataset load_inputs(const std::string& path, const ModelConfig& m, std::uint64_t seed, std::size_t threads) {
  if (fs::is_directory(path)) return load_labeled(path, m, seed, threads);
  if (!fs::exists(path)) fail_data("missing file '" + path + "'");
  Dataset ds;
  ds.items.push_back({load_single(path, m, seed), 0, path});
  return ds;
}

inline void write_text(const std::string& path, const std::string& text, std::ostream& fallback) {
  if (path.empty() || path == "-") {
    fallback << text;
    return;
  }
  const fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream os(p);
  if (!os) fail_data("cannot write '" + path + "'");
  os << text;
}

inline json pretrain_config_json(const ModelConfig& m, const TrainConfig& t) {
  return json{{"model", to_json(m)}, {"train", to_json(t)}};
}

// ---------------------------------------------------------------- commands

inline int cmd_pretrain(const ResolvedConfig& rc, const ConfigOptions& co, const std::string& dataset,
                        const std::string& out_dir, std::ostream& out) {
  const Dataset ds = load_labeled(dataset, rc.model, rc.train.seed, co.threads);
  std::vector<PointCloud> clouds;
  for (const auto& item : ds.items) clouds.push_back(item.cloud);
  fs::create_directories(out_dir);
  LoopOptions opt;
  opt.threads = co.threads;
  const json cfg = pretrain_config_json(rc.model, rc.train);
  opt.on_checkpoint = [&](std::size_t epoch, const ParamStore<float>& p) {
    const fs::path path = fs::path(out_dir) / ("checkpoint_epoch" + std::to_string(epoch) + ".ckpt");
    save_checkpoint(path, {cfg, p});
  };
  opt.on_divergence = [&](const ParamStore<float>& p) {
    save_checkpoint(fs::path(out_dir) / "checkpoint_last_good.ckpt", {cfg, p});
  };
  const auto res = pretrain_loop(clouds, rc.train, rc.model, opt);
  write_text((fs::path(out_dir) / "loss.csv").string(), loss_curve_csv(res.loss_curve), out);
  out << "epochs,steps,final_loss\n"
      << res.loss_curve.size() << ',' << res.steps << ',' << format_real(res.loss_curve.back()) << '\n';
  return 0;
}

inline int cmd_finetune(const ResolvedConfig& rc, const ConfigOptions& co, const std::string& ckpt,
                        const std::string& dataset, const std::string& test, const std::string& scope,
                        const std::string& head, const std::string& out_path, std::ostream& out) {
  FinetuneProtocol proto{parse_scope(scope), parse_head(head), 0};
  const auto ck = load_checkpoint(ckpt);
  const ModelConfig m = checkpoint_model(rc, ck);
  const Dataset train = load_labeled(dataset, m, rc.train.seed, co.threads);
  const auto res = finetune(ck.params, m, train, proto, rc.train, co.threads);
  if (!out_path.empty()) save_checkpoint(out_path, classifier_checkpoint(res.classifier));
  out << "split,items,accuracy\n" << "train," << train.size() << ',' << format_real(res.train_accuracy) << '\n';
  if (!test.empty()) {
    const Dataset ts = load_labeled(test, m, derive_seed(rc.train.seed, 1), co.threads, &train.class_names);
    out << "test," << ts.size() << ',' << format_real(evaluate_classifier(res.classifier, ts, co.threads)) << '\n';
  }
  return 0;
}

inline int cmd_eval(const ResolvedConfig& rc, const ConfigOptions& co, const std::string& ckpt,
                    const std::string& dataset, std::ostream& out) {
  const auto ck = load_checkpoint(ckpt);
  const Classifier clf = classifier_from_checkpoint(ck);
  checkpoint_model(rc, ck);
  const Dataset ds = load_labeled(dataset, clf.model, rc.train.seed, co.threads, &clf.class_names);
  out << "items,accuracy\n" << ds.size() << ',' << format_real(evaluate_classifier(clf, ds, co.threads)) << '\n';
  return 0;
}

inline int cmd_fewshot(const ResolvedConfig& rc, const ConfigOptions& co, const std::string& ckpt,
                       const std::string& dataset, std::size_t n_way, std::size_t m_shot, const std::string& scope,
                       const std::string& head, const std::string& report, std::ostream& out) {
  const auto ck = load_checkpoint(ckpt);
  const ModelConfig m = checkpoint_model(rc, ck);
  const Dataset ds = load_labeled(dataset, m, rc.train.seed, co.threads);
  const FinetuneProtocol proto{parse_scope(scope), parse_head(head), n_way};
  const auto rep = run_few_shot(ck.params, m, ds, n_way, m_shot, proto, rc.train, kFewShotEpisodes, co.threads);
  if (!report.empty()) {
    std::string csv = "episode,classes,train_items,test_items,accuracy\n";
    for (std::size_t e = 0; e < rep.episodes.size(); ++e) {
      std::string names;
      for (auto c : rep.episodes[e].classes) names += (names.empty() ? "" : ";") + ds.class_names[c];
      csv += std::to_string(e) + ',' + names + ',' + std::to_string(rep.episodes[e].train.size()) + ',' +
             std::to_string(rep.episodes[e].test.size()) + ',' + format_real(rep.accuracies[e]) + '\n';
    }
    write_text(report, csv, out);
  }
  out << "n_way,m_shot,episodes,train_items,test_items,mean,std\n"
      << n_way << ',' << m_shot << ',' << rep.episodes.size() << ',' << rep.episodes.front().train.size() << ','
      << rep.episodes.front().test.size() << ',' << format_real(rep.mean) << ',' << format_real(rep.stddev) << '\n';
  return 0;
}

inline int cmd_extract(const ResolvedConfig& rc, const ConfigOptions& co, const std::string& ckpt,
                       const std::string& input, const std::string& out_path, std::ostream& out) {
  const auto ck = load_checkpoint(ckpt);
  const ModelConfig m = checkpoint_model(rc, ck);
  const Dataset ds = load_inputs(input, m, rc.train.seed, co.threads);
  const auto feats = extract_features(ds, m, ck.params, co.threads);
  std::string csv = "path";
  for (std::size_t i = 0; i < m.feature_width(); ++i) csv += ",f" + std::to_string(i);
  csv += '\n';
  for (std::size_t i = 0; i < ds.size(); ++i) {
    csv += ds.items[i].path;
    for (float v : feats[i]) csv += ',' + format_real(v);
    csv += '\n';
  }
  write_text(out_path, csv, out);
  return 0;
}

inline int cmd_describe(const ResolvedConfig& rc, const std::string& input, const std::string& out_path,
                        std::ostream& out) {
  const ModelConfig& m = rc.model;
  const PointCloud cloud = load_single(input, m, rc.train.seed);
  const auto in = prepare_patch_inputs(cloud, m, derive_seed(rc.train.seed, stream::fps));
  std::string csv = "center,x,y,z";
  for (const char* a : {"alpha", "phi", "theta"})
    for (std::size_t b = 0; b < m.bins; ++b) csv += std::string(",") + a + std::to_string(b);
  csv += '\n';
  const std::size_t w = m.descriptor_width();
  for (std::size_t p = 0; p < m.g; ++p) {
    csv += std::to_string(in.patches.center_indices[p]);
    for (int c = 0; c < 3; ++c) csv += ',' + format_real(in.patches.centers[p][c]);
    for (std::size_t j = 0; j < w; ++j) csv += ',' + format_real(in.descriptors[p * w + j]);
    csv += '\n';
  }
  write_text(out_path, csv, out);
  return 0;
}

inline int cmd_reconstruct(const ResolvedConfig& rc, const std::string& ckpt, const std::string& input,
                           const std::string& out_dir, std::ostream& out) {
  const auto ck = load_checkpoint(ckpt);
  const ModelConfig m = checkpoint_model(rc, ck);
  const PointCloud cloud = load_single(input, m, rc.train.seed);
  Tape<float> tape;
  ParamBinder<float> P(tape, ck.params, false);
  const auto res = pretrain_forward(cloud, m, P, rc.train.seed);
  const auto pred = res.prediction.value();
  PointCloud visible, predicted;
  for (std::size_t p : res.mask.visible_indices)
    for (std::size_t j = 0; j < m.k; ++j) visible.points.push_back(res.inputs.patches.neighbor(p, j) + res.inputs.patches.centers[p]);
  for (std::size_t i = 0; i < res.mask.masked_indices.size(); ++i) {
    const Vec3& c = res.inputs.patches.centers[res.mask.masked_indices[i]];
    for (std::size_t j = 0; j < m.k; ++j) {
      const std::size_t o = (i * m.k + j) * 3;
      predicted.points.push_back(c + Vec3(pred[o], pred[o + 1], pred[o + 2]));
    }
  }
  const std::string stem = fs::path(input).stem().string();
  const fs::path dir(out_dir);
  fs::create_directories(dir);
  PointCloud plain;
  plain.points = cloud.points;
  save_xyz(dir / (stem + "_input.xyz"), plain);
  save_xyz(dir / (stem + "_visible.xyz"), visible);
  save_xyz(dir / (stem + "_predicted.xyz"), predicted);
  out << "file,points,loss\n"
      << stem << "_input.xyz," << plain.size() << ",\n"
      << stem << "_visible.xyz," << visible.size() << ",\n"
      << stem << "_predicted.xyz," << predicted.size() << ',' << format_real(res.loss.item()) << '\n';
  return 0;
}

inline int cmd_selfcheck(std::uint64_t seed, std::ostream& out) {
  const auto results = selfcheck::run_all(seed);
  bool ok = true;
  out << "suite,status,seconds,detail\n";
  for (const auto& r : results) {
    ok = ok && r.passed;
    std::string detail = r.detail;
    for (auto& ch : detail)
      if (ch == ',') ch = ';';
    char secs[32];
    std::snprintf(secs, sizeof secs, "%.3f", r.seconds);
    out << r.name << ',' << (r.passed ? "pass" : "FAIL") << ',' << secs << ',' << detail << '\n';
  }
  return ok ? 0 : static_cast<int>(ErrorKind::numeric);
}

inline int cmd_synth(const std::vector<std::string>& classes, std::size_t per_class, std::size_t points,
                     std::uint64_t seed, const std::string& out_dir, std::ostream& out) {
  for (const auto& c : classes) parse_shape(c);
  SynthOptions o;
  o.per_class = per_class;
  o.n_points = points;
  o.seed = seed;
  const Dataset ds = synth_shapes(classes, o);
  write_dataset(out_dir, ds);
  out << "classes,items\n" << ds.num_classes() << ',' << ds.size() << '\n';
  return 0;
}

// ---------------------------------------------------------------- entry point

/// Parses argv and runs one command. Errors are reported on `err`; the return value is the
/// process exit status (0 ok, 1 usage, 2 data, 3 numeric).
inline int run_command(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Masked point-cloud autoencoder with geometric tokens and external attention", "geomae"};
  app.require_subcommand(1);
  app.failure_message(CLI::FailureMessage::help);

  ConfigOptions co;
  auto add_config = [&](CLI::App* c) {
    c->add_option("--config", co.file, "JSON config file");
    c->add_option("--set", co.sets, "Override one config key (key=value)")->take_all();
    c->add_option("--preset", co.preset, "Model preset: default, tiny or gradcheck");
    c->add_option("--threads", co.threads, "Worker threads (0 = all cores)");
  };
  std::string dataset, test, ckpt, out_path, input, scope = "local", head = "linear", report;
  std::size_t n_way = 5, m_shot = 10, per_class = 10, points = 1024;
  std::uint64_t seed = 0;
  std::optional<std::size_t> epochs;
  std::vector<std::string> classes{"cone", "cube", "cylinder", "sphere", "torus"};

  auto* pre = app.add_subcommand("pretrain", "Masked reconstruction pretraining");
  add_config(pre);
  pre->add_option("--dataset", dataset, "Dataset root")->required();
  pre->add_option("--out", out_path, "Output directory")->required();
  pre->add_option("--epochs", epochs, "Epoch count");

  auto* ft = app.add_subcommand("finetune", "Train a classifier head on a pretrained backbone");
  add_config(ft);
  ft->add_option("--checkpoint", ckpt, "Pretrained checkpoint")->required();
  ft->add_option("--dataset", dataset, "Training dataset root")->required();
  ft->add_option("--test", test, "Held-out dataset root");
  ft->add_option("--scope", scope, "global or local");
  ft->add_option("--head", head, "linear or nonlinear");
  ft->add_option("--out", out_path, "Classifier checkpoint to write");
  ft->add_option("--epochs", epochs, "Epoch count");

  auto* ev = app.add_subcommand("eval", "Accuracy of a classifier checkpoint");
  add_config(ev);
  ev->add_option("--checkpoint", ckpt, "Classifier checkpoint")->required();
  ev->add_option("--dataset", dataset, "Dataset root")->required();

  auto* fsh = app.add_subcommand("fewshot", "n-way m-shot episodes");
  add_config(fsh);
  fsh->add_option("--checkpoint", ckpt, "Pretrained checkpoint")->required();
  fsh->add_option("--dataset", dataset, "Dataset root")->required();
  fsh->add_option("--n", n_way, "Classes per episode");
  fsh->add_option("--m", m_shot, "Training items per class");
  fsh->add_option("--scope", scope, "global or local");
  fsh->add_option("--head", head, "linear or nonlinear");
  fsh->add_option("--report", report, "Per-episode CSV");
  fsh->add_option("--epochs", epochs, "Epoch count per episode");

  auto* ex = app.add_subcommand("extract", "Global feature vectors");
  add_config(ex);
  ex->add_option("--checkpoint", ckpt, "Checkpoint")->required();
  ex->add_option("--input", input, "Cloud file or dataset root")->required();
  ex->add_option("--out", out_path, "Output CSV (default stdout)");

  auto* de = app.add_subcommand("describe", "SPFH descriptor per patch center");
  add_config(de);
  de->add_option("--input", input, "Cloud file")->required();
  de->add_option("--out", out_path, "Output CSV (default stdout)");

  auto* rec = app.add_subcommand("reconstruct", "Dump input, visible and predicted patches");
  add_config(rec);
  rec->add_option("--checkpoint", ckpt, "Pretrained checkpoint")->required();
  rec->add_option("--input", input, "Cloud file")->required();
  rec->add_option("--out", out_path, "Output directory")->required();

  auto* sc = app.add_subcommand("selfcheck", "Oracle, gradient and invariant suites");
  sc->add_option("--seed", seed, "Suite seed");

  auto* sy = app.add_subcommand("synth", "Write a synthetic labeled dataset");
  sy->add_option("--classes", classes, "Shape classes")->delimiter(',');
  sy->add_option("--per-class", per_class, "Clouds per class");
  sy->add_option("--points", points, "Points per cloud");
  sy->add_option("--seed", seed, "Seed");
  sy->add_option("--out", out_path, "Output directory")->required();

  std::vector<std::string> argv(args.rbegin(), args.rend());
  try {
    app.parse(argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : static_cast<int>(ErrorKind::usage);
  }

  try {
    ResolvedConfig rc;
    if (!sc->parsed() && !sy->parsed()) {
      rc = resolve_config(co);
      if (epochs) rc.train.epochs = *epochs;
      rc.train.validate();
    }
    if (pre->parsed()) return cmd_pretrain(rc, co, dataset, out_path, out);
    if (ft->parsed()) return cmd_finetune(rc, co, ckpt, dataset, test, scope, head, out_path, out);
    if (ev->parsed()) return cmd_eval(rc, co, ckpt, dataset, out);
    if (fsh->parsed()) return cmd_fewshot(rc, co, ckpt, dataset, n_way, m_shot, scope, head, report, out);
    if (ex->parsed()) return cmd_extract(rc, co, ckpt, input, out_path, out);
    if (de->parsed()) return cmd_describe(rc, input, out_path, out);
    if (rec->parsed()) return cmd_reconstruct(rc, ckpt, input, out_path, out);
    if (sc->parsed()) return cmd_selfcheck(seed, out);
    if (sy->parsed()) return cmd_synth(classes, per_class, points, seed, out_path, out);
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return static_cast<int>(e.kind());
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return static_cast<int>(ErrorKind::data);
  }
  return static_cast<int>(ErrorKind::usage);
}

}  // namespace geomae::cli

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "aimd/checkpoint.hpp"
#include "aimd/evaluation.hpp"
#include "aimd/training.hpp"

namespace fs = std::filesystem;
using namespace aimd;

namespace {

struct Globals {
  std::string config;
  std::optional<uint64_t> seed;
  std::string out = "out";
};

TrainConfig resolve_config(const Globals& g, TrainConfig base) {
  TrainConfig c = g.config.empty() ? std::move(base) : load_config(g.config, std::move(base));
  if (g.seed) c.seed = *g.seed;
  return c;
}

void write_text(const fs::path& p, const std::string& text) {
  fs::create_directories(p.parent_path().empty() ? fs::path(".") : p.parent_path());
  std::ofstream os(p);
  os << text;
  if (!os) throw std::runtime_error("cannot write " + p.string());
}

DetectionDataset load_dir(const std::string& dir, const std::string& identifier = "") {
  return load_dataset(fs::path(dir) / "annotations.json", identifier);
}

std::vector<double> parse_values(const std::string& s) {
  std::vector<double> v;
  for (const auto& t : detail::split_strings(s)) v.push_back(std::stod(t));
  if (v.empty()) throw ConfigError("empty value list");
  return v;
}

ExperimentData experiment_from(const std::vector<std::string>& data_dirs, const std::string& eval_dir,
                               const ToyBenchmark& toy) {
  if (data_dirs.empty() && eval_dir.empty()) return make_toy_experiment(toy);
  if (data_dirs.size() != 2 || eval_dir.empty())
    throw ConfigError("pass exactly two --data directories and one --eval directory, or none for the toy benchmark");
  ExperimentData e;
  e.train = {load_dir(data_dirs[0], "A"), load_dir(data_dirs[1], "B")};
  e.eval = load_dir(eval_dir, "eval");
  e.cat_a = e.train[0].annotated_categories;
  e.cat_b = e.train[1].annotated_categories;
  return e;
}

std::string one_line(std::string s) {
  std::replace(s.begin(), s.end(), '\n', ' ');
  return s;
}

std::vector<uint64_t> seed_list(uint64_t first, int n) {
  std::vector<uint64_t> s;
  for (int i = 0; i < n; ++i) s.push_back(first + i);
  return s;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Anno-incomplete multi-dataset detection toolkit"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--config", g.config, "Run configuration file (INI)");
  app.add_option_function<uint64_t>("--seed", [&](uint64_t s) { g.seed = s; }, "Random seed");
  app.add_option("--out", g.out, "Output directory");
  spdlog::set_level(spdlog::level::warn);
  app.add_flag_callback("-v,--verbose", [] { spdlog::set_level(spdlog::level::info); });

  // build-splits
  auto* bs = app.add_subcommand("build-splits", "Split a fully annotated COCO JSON into two anno-incomplete datasets");
  std::string bs_input, bs_grouping;
  bs->add_option("--input", bs_input, "COCO annotations JSON")->required();
  bs->add_option("--grouping", bs_grouping, "Category grouping file (name<TAB>A|B)")->required();
  bs->callback([&] {
    const auto src = load_dataset(bs_input, "full");
    std::vector<CategorySpec> cats;
    for (const auto& [id, name] : src.category_names) cats.push_back({id, name, Group::kUnassigned});
    const auto [ca, cb] = divide_categories(cats, load_grouping(bs_grouping));
    const auto split = assign_and_erase(src, ca, cb, g.seed.value_or(0));
    save_dataset(split.a, fs::path(g.out) / "A");
    save_dataset(split.b, fs::path(g.out) / "B");
    write_text(fs::path(g.out) / "split_report.tsv", split.report.to_text());
    std::cout << split.report.to_text();
  });

  // gen-synthetic
  auto* gs = app.add_subcommand("gen-synthetic", "Generate the synthetic shapes benchmark");
  ToyBenchmark toy;
  gs->add_option("--train-images", toy.train_images);
  gs->add_option("--eval-images", toy.eval_images);
  gs->add_option("--image-size", toy.image_size);
  gs->add_option("--min-objects", toy.min_objects);
  gs->add_option("--max-objects", toy.max_objects);
  gs->callback([&] {
    if (g.seed) toy.data_seed = toy.split_seed = *g.seed;
    const auto e = make_toy_experiment(toy);
    save_dataset(e.train[0], fs::path(g.out) / "A");
    save_dataset(e.train[1], fs::path(g.out) / "B");
    save_dataset(e.eval, fs::path(g.out) / "eval");
    std::string grouping;
    for (const auto& v : default_shape_vocabulary()) grouping += v.kind + "\t" + group_name(v.group) + "\n";
    write_text(fs::path(g.out) / "grouping.tsv", grouping);
    std::cout << "wrote " << g.out << '\n';
  });

  // train-teacher
  auto* tt = app.add_subcommand("train-teacher", "Train a single-dataset expert");
  std::string tt_data, tt_eval;
  tt->add_option("--data", tt_data, "Dataset directory")->required();
  tt->add_option("--eval", tt_eval, "Held-out dataset directory for snapshots");
  tt->callback([&] {
    const auto cfg = resolve_config(g, toy_train_config());
    const auto data = load_dir(tt_data);
    std::optional<DetectionDataset> ev;
    if (!tt_eval.empty()) ev = load_dir(tt_eval);
    auto r = train_teacher(data, cfg, ev ? &*ev : nullptr);
    save_checkpoint(*r.model, fs::path(g.out) / "checkpoint");
    write_text(fs::path(g.out) / "run.jsonl", r.record.to_jsonl());
    std::cout << "teacher checkpoint: " << (fs::path(g.out) / "checkpoint").string() << '\n';
  });

  // train-target
  auto* tg = app.add_subcommand("train-target", "Train the multi-branch target (or the plain baseline with --mtb)");
  std::vector<std::string> tg_data, tg_teachers;
  std::string tg_eval;
  bool tg_mtb = false;
  tg->add_option("--data", tg_data, "Dataset directories, one per branch")->required();
  tg->add_option("--teacher", tg_teachers, "Teacher checkpoint directories, same order as --data");
  tg->add_option("--eval", tg_eval, "Held-out dataset directory for snapshots");
  tg->add_flag("--mtb", tg_mtb, "Train the plain multi-branch baseline");
  tg->callback([&] {
    const auto cfg = resolve_config(g, toy_train_config());
    std::vector<DetectionDataset> sets;
    for (size_t k = 0; k < tg_data.size(); ++k) sets.push_back(load_dir(tg_data[k], std::string(1, char('A' + k))));
    std::optional<DetectionDataset> ev;
    if (!tg_eval.empty()) ev = load_dir(tg_eval);
    std::unique_ptr<Model> model;
    RunRecord record;
    if (tg_mtb) {
      auto r = train_multibranch_baseline(sets, cfg, ev ? &*ev : nullptr);
      model = std::move(r.model);
      record = std::move(r.record);
    } else {
      std::unique_ptr<TeacherBundle> bundle;
      if (!tg_teachers.empty()) {
        std::vector<std::unique_ptr<Model>> experts;
        for (const auto& t : tg_teachers) experts.push_back(std::make_unique<Model>(load_checkpoint<Scalar>(t)));
        bundle = std::make_unique<TeacherBundle>(std::move(experts));
      }
      auto r = train_target(sets, bundle.get(), cfg, ev ? &*ev : nullptr);
      model = std::move(r.model);
      record = std::move(r.record);
    }
    save_checkpoint(*model, fs::path(g.out) / "checkpoint");
    write_text(fs::path(g.out) / "run.jsonl", record.to_jsonl());
    std::cout << "target checkpoint: " << (fs::path(g.out) / "checkpoint").string() << '\n';
  });

  // eval
  auto* ev = app.add_subcommand("eval", "COCO mAP of a checkpoint on a dataset");
  std::string ev_ckpt, ev_data;
  ev->add_option("--checkpoint", ev_ckpt)->required();
  ev->add_option("--data", ev_data)->required();
  ev->callback([&] {
    const auto cfg = resolve_config(g, toy_train_config());
    const auto model = load_checkpoint<Scalar>(ev_ckpt);
    const auto data = load_dir(ev_data);
    const auto preds = infer(model, data.images, cfg.decode);
    const auto r = coco_map(preds, data);
    nlohmann::json j{{"mAP", r.map}, {"mAP50", r.map50}, {"mAP75", r.map75}};
    for (const auto& br : model.config().branches) {
      const std::set<int> cats(br.category_ids.begin(), br.category_ids.end());
      j["mAP_" + br.name] = coco_map(preds, data, cats).map;
    }
    write_text(fs::path(g.out) / "metrics.json", j.dump(1) + "\n");
    write_text(fs::path(g.out) / "results.json", results_to_json(preds).dump() + "\n");
    std::cout << j.dump() << '\n';
  });

  // ablate
  auto* ab = app.add_subcommand("ablate", "Ablation grid over AFI and the amalgamation losses");
  std::vector<std::string> ab_data;
  std::string ab_eval;
  int ab_seeds = 1;
  ab->add_option("--data", ab_data, "Two dataset directories (default: toy benchmark)");
  ab->add_option("--eval", ab_eval, "Held-out dataset directory");
  ab->add_option("--seeds", ab_seeds, "Number of seeds")->check(CLI::PositiveNumber);
  ab->callback([&] {
    const auto cfg = resolve_config(g, toy_train_config());
    const auto data = experiment_from(ab_data, ab_eval, ToyBenchmark{});
    TeacherCache cache;
    const auto t = run_ablation_grid(cfg, standard_ablation_grid(), seed_list(cfg.seed, ab_seeds),
                                     make_target_runner(data, cache));
    write_text(fs::path(g.out) / "ablation.tsv", t.to_text());
    std::cout << t.to_text();
  });

  // sweep
  auto* sw = app.add_subcommand("sweep", "Sweep the pseudo-label threshold or temperature");
  std::vector<std::string> sw_data;
  std::string sw_eval, sw_param = "theta", sw_values = "0,0.2,0.4,0.6,0.8,1";
  int sw_seeds = 1;
  sw->add_option("--param", sw_param, "theta or T_hat");
  sw->add_option("--values", sw_values, "Comma-separated values");
  sw->add_option("--data", sw_data);
  sw->add_option("--eval", sw_eval);
  sw->add_option("--seeds", sw_seeds)->check(CLI::PositiveNumber);
  sw->callback([&] {
    const auto cfg = resolve_config(g, toy_train_config());
    const auto param = parse_sweep_parameter(sw_param);
    const auto data = experiment_from(sw_data, sw_eval, ToyBenchmark{});
    TeacherCache cache;
    const auto t = run_sweep(param, parse_values(sw_values), cfg, seed_list(cfg.seed, sw_seeds),
                             make_target_runner(data, cache));
    write_text(fs::path(g.out) / "sweep.tsv", t.to_text());
    std::cout << t.to_text();
  });

  // heatmap
  auto* hm = app.add_subcommand("heatmap", "Confidence heatmap of one category on one image");
  std::string hm_ckpt, hm_data;
  int64_t hm_image = 0;
  int hm_cat = 0;
  hm->add_option("--checkpoint", hm_ckpt)->required();
  hm->add_option("--data", hm_data)->required();
  hm->add_option("--image-id", hm_image)->required();
  hm->add_option("--category", hm_cat)->required();
  hm->callback([&] {
    const auto model = load_checkpoint<Scalar>(hm_ckpt);
    const auto data = load_dir(hm_data);
    const auto& im = data.images.at(data.image_index(hm_image));
    const auto p = fs::path(g.out) / ("heatmap_" + std::to_string(hm_image) + "_" + std::to_string(hm_cat) + ".ppm");
    fs::create_directories(g.out);
    const auto h = emit_heatmap(model, im, hm_cat, p);
    std::cout << p.string() << " boxes=" << h.boxes.size() << '\n';
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    std::cerr << "error: usage: " << one_line(e.what()) << '\n';
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "error: config: " << one_line(e.what()) << '\n';
    return 3;
  } catch (const ShapeError& e) {
    std::cerr << "error: shape: " << one_line(e.what()) << '\n';
    return 4;
  } catch (const DomainError& e) {
    std::cerr << "error: domain: " << one_line(e.what()) << '\n';
    return 5;
  } catch (const NumericalError& e) {
    std::cerr << "error: numerical: " << one_line(e.what()) << '\n';
    return 6;
  } catch (const std::exception& e) {
    std::cerr << "error: runtime: " << one_line(e.what()) << '\n';
    return 1;
  }
  return 0;
}

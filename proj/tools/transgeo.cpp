// transgeo: command-line front end for dataset generation, training, export and evaluation.

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "transgeo/transgeo.hpp"

using namespace transgeo;

namespace {

struct ConfigArgs {
  std::string path;
  std::vector<std::string> overrides;
};

void add_config_args(CLI::App* cmd, ConfigArgs& a) {
  cmd->add_option("-c,--config", a.path, "key = value run configuration");
  cmd->add_option("-s,--set", a.overrides, "extra key=value setting (repeatable)");
}

RunConfig resolve(const ConfigArgs& a) {
  RunConfig cfg = a.path.empty() ? RunConfig{} : load_config(a.path);
  for (const auto& kv : a.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    set_config_value(cfg, detail::trim(kv.substr(0, eq)), detail::trim(kv.substr(eq + 1)));
  }
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"Cross-view geo-localization with a transformer: toy-scale pipeline"};
  app.require_subcommand(1);

  EmitOptions emit;
  std::string synth_out = "data";
  std::uint64_t synth_seed = 0;
  std::string synth_mode = "aligned";
  double landmarks_per_tile = 6.0;
  double radius_min = SceneSpec{}.radius_min_m, radius_max = SceneSpec{}.radius_max_m;
  double height_min = SceneSpec{}.height_min_m, height_max = SceneSpec{}.height_max_m;
  int palette = SceneSpec{}.palette_size;
  auto* synth = app.add_subcommand("synth-gen", "render a synthetic street/aerial dataset");
  synth->add_option("-o,--out", synth_out, "output directory");
  synth->add_option("-n,--count", emit.n, "number of samples");
  synth->add_option("--seed", synth_seed, "world and placement seed");
  synth->add_option("--mode", synth_mode, "aligned | offset")->check(CLI::IsMember({"aligned", "offset"}));
  synth->add_flag("--unknown-orientation", emit.unknown_orientation, "random horizontal panorama roll");
  synth->add_option("--fov", emit.fov_deg, "panorama field of view in degrees");
  synth->add_option("--test-fraction", emit.test_fraction, "fraction of samples tagged test");
  synth->add_option("--street-height", emit.street_height);
  synth->add_option("--street-width", emit.street_width);
  synth->add_option("--aerial-px", emit.aerial_px);
  synth->add_option("--extent", emit.tile_extent_m, "tile ground extent in meters");
  synth->add_option("--view-range", emit.view_range_m, "panorama view range in meters");
  synth->add_option("--landmarks-per-tile", landmarks_per_tile);
  synth->add_option("--radius-min", radius_min, "smallest landmark radius in meters");
  synth->add_option("--radius-max", radius_max, "largest landmark radius in meters");
  synth->add_option("--height-min", height_min, "shortest landmark in meters");
  synth->add_option("--height-max", height_max, "tallest landmark in meters");
  synth->add_option("--palette", palette, "number of landmark colors");

  ConfigArgs s1_args, ex_args, s2_args, ev_args;
  std::string ex_ckpt, s2_ckpt, ev_ckpt, ev_split = "train";
  auto* s1 = app.add_subcommand("train-stage1", "regular training of both streams");
  add_config_args(s1, s1_args);
  auto* ex = app.add_subcommand("export-attn", "write one attention map per aerial image");
  add_config_args(ex, ex_args);
  ex->add_option("--checkpoint", ex_ckpt, "stage-1 checkpoint")->required();
  auto* s2 = app.add_subcommand("train-stage2", "attend-and-zoom-in training from stage-1 weights");
  add_config_args(s2, s2_args);
  s2->add_option("--checkpoint", s2_ckpt, "stage-1 checkpoint")->required();
  auto* ev = app.add_subcommand("eval", "retrieval metrics for a checkpoint");
  add_config_args(ev, ev_args);
  ev->add_option("--checkpoint", ev_ckpt)->required();
  ev->add_option("--split", ev_split, "train | test | all");

  StreamModel fm;
  fm.patch_size = 16;
  fm.model_dim = 384;
  fm.layers = 12;
  fm.heads = 6;
  fm.embed_out = 1000;
  int flops_side = 256;
  int flops_channels = 3;
  double flops_beta = 1.0, flops_gamma = 1.0;
  auto* fl = app.add_subcommand("flops", "analytic per-image encoder cost");
  fl->add_option("--patch", fm.patch_size);
  fl->add_option("--dim", fm.model_dim);
  fl->add_option("--layers", fm.layers);
  fl->add_option("--heads", fm.heads);
  fl->add_option("--mlp-ratio", fm.mlp_ratio);
  fl->add_option("--embed", fm.embed_out);
  fl->add_option("--side", flops_side, "square input side in pixels");
  fl->add_option("--channels", flops_channels);
  fl->add_option("--beta", flops_beta, "kept patch fraction");
  fl->add_option("--gamma", flops_gamma, "patch-count scale");

  std::string polar_in, polar_out;
  int polar_h = 64, polar_w = 256;
  std::vector<double> polar_center;
  auto* po = app.add_subcommand("polar", "polar-transform an aerial image");
  po->add_option("-i,--in", polar_in)->required();
  po->add_option("-o,--out", polar_out)->required();
  po->add_option("--height", polar_h);
  po->add_option("--width", polar_w);
  po->add_option("--center", polar_center, "query pixel x y")->expected(2);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*synth) {
      emit.mode = parse_placement_mode(synth_mode);
      SceneSpec scene = default_scene(emit, synth_seed, landmarks_per_tile);
      scene.radius_min_m = radius_min;
      scene.radius_max_m = radius_max;
      scene.height_min_m = height_min;
      scene.height_max_m = height_max;
      scene.palette_size = palette;
      auto index = emit_dataset(scene, emit, synth_out);
      std::cout << "wrote " << index.size() << " samples to " << synth_out << "\n";
    } else if (*s1) {
      auto r = train_stage1(resolve(s1_args), &std::cerr);
      std::cout << "checkpoint " << r.checkpoint << " train R@1 " << r.final_train_r1 << "\n";
    } else if (*ex) {
      RunConfig cfg = resolve(ex_args);
      const auto n = export_attention(cfg, ex_ckpt);
      std::cout << "wrote " << n << " attention maps to " << cfg.resolved_attn_dir() << "\n";
    } else if (*s2) {
      auto r = train_stage2(resolve(s2_args), s2_ckpt, &std::cerr);
      std::cout << "checkpoint " << r.checkpoint << " train R@1 " << r.final_train_r1 << "\n";
    } else if (*ev) {
      RunConfig cfg = resolve(ev_args);
      auto rep = evaluate(cfg, ev_ckpt, ev_split);
      std::cout << metrics_csv(rep.metrics);
    } else if (*fl) {
      ViTConfig cfg = fm.vit(flops_side, flops_side);
      cfg.channels = flops_channels;
      cfg.validate();
      std::uint64_t tokens = cfg.grid().size() + 1;
      if (flops_beta != 1.0 || flops_gamma != 1.0) {
        CropPolicy p{flops_beta, flops_gamma, fm.patch_size};
        p.validate();
        const ScaledGrid g = scaled_grid(flops_side, flops_gamma, fm.patch_size);
        cfg.image_height = cfg.image_width = g.side_px;
        tokens = keep_count(flops_beta, g.grid.size()) + 1;
      }
      std::cout << flops_csv(flops(cfg, tokens));
    } else if (*po) {
      Image in = load_ppm(polar_in);
      Image out = polar_center.empty() ? polar_transform(in, polar_h, polar_w)
                                       : polar_transform_at(in, polar_center[0], polar_center[1], polar_h, polar_w);
      save_ppm(out, polar_out);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

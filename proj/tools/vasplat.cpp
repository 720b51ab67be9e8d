// vasplat: train, render, evaluate and serve layered Gaussian head models.

#include <iostream>

#include <CLI11.hpp>

#include "vasplat/cli.hpp"
#include "vasplat/error.hpp"
#include "vasplat/parallel.hpp"
#include "vasplat/service.hpp"

using namespace vasplat;
namespace fs = std::filesystem;

int main(int argc, char** argv) {
  CLI::App app{"Layered Gaussian head avatars with valence/arousal control"};
  app.require_subcommand(1);

  fs::path config;
  auto* train = app.add_subcommand("train", "Run all training stages from a config JSON");
  train->add_option("config", config, "Config file")->required()->check(CLI::ExistingFile);

  fs::path checkpoint, out;
  RenderRequest request;
  double v = 0.0, a = 0.0;
  bool sweep = false;
  auto* render = app.add_subcommand("render", "Render one frame to PNG");
  render->add_option("--checkpoint", checkpoint)->required();
  render->add_option("--frame", request.frame);
  auto* v_opt = render->add_option("-v,--valence", v);
  auto* a_opt = render->add_option("-a,--arousal", a);
  render->add_option("--yaw", request.yaw, "Degrees");
  render->add_option("--pitch", request.pitch, "Degrees");
  render->add_option("--width", request.width);
  render->add_option("--height", request.height);
  render->add_flag("--va-sweep", sweep, "Render the 12 evaluation points into --out (a directory)");
  render->add_option("--out", out)->required();

  fs::path dataset, metrics;
  std::optional<fs::path> predictions;
  auto* eval = app.add_subcommand("eval", "Image metrics of a checkpoint against a dataset");
  eval->add_option("--checkpoint", checkpoint);
  eval->add_option("--dataset", dataset)->required();
  eval->add_option("--out", metrics)->required();
  eval->add_option("--predictions", predictions, "Directory of NNNNN.png frames to score instead");

  CloneCommand clone_cmd;
  auto* clone = app.add_subcommand("clone", "Seamless cloning of source regions into a destination");
  clone->add_option("--src", clone_cmd.source)->required()->check(CLI::ExistingFile);
  clone->add_option("--dst", clone_cmd.destination)->required()->check(CLI::ExistingFile);
  clone->add_option("--mask", clone_cmd.mask);
  clone->add_option("--landmarks", clone_cmd.landmarks);
  clone->add_option("--margin", clone_cmd.margin);
  clone->add_option("--tol", clone_cmd.tolerance);
  clone->add_option("--out", clone_cmd.out)->required();

  BenchCommand bench_cmd;
  auto* bench = app.add_subcommand("bench", "Rasterizer throughput");
  bench->add_option("--checkpoint", bench_cmd.checkpoint);
  bench->add_option("--gaussians", bench_cmd.gaussians);
  bench->add_option("--width", bench_cmd.width);
  bench->add_option("--height", bench_cmd.height);
  bench->add_option("--reps", bench_cmd.repetitions);
  bench->add_option("--workers", bench_cmd.workers);
  bench->add_option("--seed", bench_cmd.seed);
  bench->add_option("--out", bench_cmd.out);

  std::uint64_t seed = 0;
  SynthSpec spec;
  auto* synth = app.add_subcommand("synth", "Write the synthetic rig dataset");
  synth->add_option("--seed", seed);
  synth->add_option("--frames", spec.frames);
  auto* size_opt = synth->add_option("--size", spec.width, "Square image size");
  synth->add_option("--out", out)->required();

  int frame = 0;
  auto* attn = app.add_subcommand("attn-dump", "Gate magnitude splats per condition type");
  attn->add_option("--checkpoint", checkpoint)->required();
  attn->add_option("--frame", frame);
  attn->add_option("--out", out)->required();

  std::string bind;
  int threads = default_workers();
  auto* serve = app.add_subcommand("serve", "HTTP/WebSocket render service (bind: VASPLAT_BIND)");
  serve->add_option("--checkpoint", checkpoint)->required();
  serve->add_option("--bind", bind, "host:port, overrides VASPLAT_BIND");
  serve->add_option("--threads", threads, "Concurrent renders")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << nlohmann::json{{"error", "usage"}, {"message", e.what()}}.dump() << std::endl;
    return 64;
  }

  return run_command([&]() -> int {
    if (*train) return cmd_train(config);
    if (*render) {
      if (sweep) return cmd_render_sweep(checkpoint, request.frame, out);
      if (*v_opt || *a_opt) request.emotion = Vec2(v, a);
      return cmd_render(checkpoint, request, out);
    }
    if (*eval) {
      if (checkpoint.empty() && !predictions) fail(ErrorCode::kUsage, "eval needs --checkpoint or --predictions");
      return cmd_eval(checkpoint, dataset, metrics, predictions);
    }
    if (*clone) return cmd_clone(clone_cmd);
    if (*bench) return cmd_bench(bench_cmd);
    if (*synth) {
      if (*size_opt) spec.height = spec.width;
      return cmd_synth(seed, out, spec);
    }
    if (*attn) return cmd_attn_dump(checkpoint, out, frame);
    if (*serve) {
      auto [host, port] = default_bind();
      if (!bind.empty()) {
        setenv("VASPLAT_BIND", bind.c_str(), 1);
        std::tie(host, port) = default_bind();
      }
      // Listen first so clients get 503 instead of connection refused while loading.
      RenderService service(checkpoint, false);
      HttpServer server(service, host, port, threads);
      server.start();
      std::cerr << nlohmann::json{{"listening", host + ":" + std::to_string(server.port())}}.dump()
                << std::endl;
      service.reload();
      std::cerr << nlohmann::json{{"ready", checkpoint.string()}}.dump() << std::endl;
      server.wait();
      return 0;
    }
    return 64;
  });
}

// Command-line front end: train, encode, decode, eval, inspect.
//
// Exit codes: 0 success, 2 bad arguments or unreadable inputs,
// 3 corrupt bitstream, 4 model/stream configuration mismatch.

#include <CLI11.hpp>
#include <cstdlib>
#include <iostream>

#include "gcm/trainer.hpp"

using namespace gcm;

namespace {

bool log_enabled() { return std::getenv("GCMC_LOG") != nullptr; }

void logmsg(const std::string& m) {
  if (log_enabled()) std::cerr << "[gcmc] " << m << "\n";
}

std::vector<uint8_t> read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path);
  return std::vector<uint8_t>(std::istreambuf_iterator<char>(f),
                              std::istreambuf_iterator<char>());
}

void atomic_write(const std::string& path, const void* data, size_t n) {
  std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + tmp);
    f.write((const char*)data, (std::streamsize)n);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    throw std::runtime_error("cannot rename " + tmp + " to " + path);
}

void atomic_write_text(const std::string& path, const std::string& text) {
  atomic_write(path, text.data(), text.size());
}

struct Cleanup {
  int code = 0;
};

int run(int argc, char** argv) {
  CLI::App app{"gcmc: learned image compression"};
  app.require_subcommand(1);

  // ---- train ----
  auto* cmd_train = app.add_subcommand("train", "train a model on PPM images");
  std::string t_config = "N=48;M=32;Mz=48;layers=3;k=12;n=3;blocks=gdn";
  std::string t_resume, t_out = "model.ck", t_csv;
  double t_lambda = 8.0;
  size_t t_steps = 500, t_crop = 64, t_drop = SIZE_MAX;
  uint64_t t_seed = 1;
  int t_threads = 1;
  std::vector<std::string> t_images;
  cmd_train->add_option("--config", t_config, "model configuration string");
  cmd_train->add_option("--resume", t_resume, "checkpoint to continue from");
  cmd_train->add_option("--out", t_out, "output checkpoint path");
  cmd_train->add_option("--csv", t_csv, "training log CSV path");
  cmd_train->add_option("--lambda", t_lambda, "rate-distortion weight");
  cmd_train->add_option("--steps", t_steps, "training steps");
  cmd_train->add_option("--crop", t_crop, "square crop size (multiple of 64)");
  cmd_train->add_option("--lr-drop-step", t_drop, "step after which the main lr drops");
  cmd_train->add_option("--seed", t_seed, "random seed");
  cmd_train->add_option("--threads", t_threads, "worker threads (accepted; single-threaded build)");
  cmd_train->add_option("images", t_images, "training images (PPM)")->required();

  // ---- encode ----
  auto* cmd_enc = app.add_subcommand("encode", "compress a PPM image");
  std::string e_model, e_out = "out.gcm", e_in;
  int e_lambda_idx = kLambdaUnset;
  cmd_enc->add_option("--model", e_model, "checkpoint path")->required();
  cmd_enc->add_option("--out", e_out, "output bitstream path");
  cmd_enc->add_option("--lambda-index", e_lambda_idx, "preset index stored in the header")
      ->check(CLI::Range(0, 255));
  cmd_enc->add_option("input", e_in, "input image (PPM)")->required();

  // ---- decode ----
  auto* cmd_dec = app.add_subcommand("decode", "decompress a bitstream");
  std::string d_model, d_out = "out.ppm", d_in;
  cmd_dec->add_option("--model", d_model, "checkpoint path")->required();
  cmd_dec->add_option("--out", d_out, "output image path (PPM)");
  cmd_dec->add_option("input", d_in, "input bitstream")->required();

  // ---- eval ----
  auto* cmd_eval = app.add_subcommand("eval", "rate-distortion numbers from real streams");
  std::string v_model, v_csv;
  double v_lambda = 0.0;
  std::vector<std::string> v_images;
  cmd_eval->add_option("--model", v_model, "checkpoint path")->required();
  cmd_eval->add_option("--lambda", v_lambda, "lambda recorded in the CSV");
  cmd_eval->add_option("--csv", v_csv, "write CSV here instead of stdout");
  cmd_eval->add_option("images", v_images, "evaluation images (PPM)")->required();

  // ---- inspect ----
  auto* cmd_ins = app.add_subcommand("inspect", "dump a stream header or model wiring");
  std::string i_in, i_coverage_csv, i_config;
  cmd_ins->add_option("input", i_in, "bitstream to inspect");
  cmd_ins->add_option("--coverage-csv", i_coverage_csv,
                      "write the causal-coverage matrix of a model config");
  cmd_ins->add_option("--config", i_config, "model configuration for --coverage-csv");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);  // help text, success
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  if (cmd_train->parsed()) {
    ModelConfig cfg = ModelConfig::parse(t_config);
    ParamStore ps;
    if (!t_resume.empty()) {
      cfg = load_checkpoint(t_resume, ps);
      logmsg("resumed from " + t_resume);
    } else {
      Rng rng(t_seed);
      init_codec(ps, cfg, rng);
    }
    std::vector<Tensor> imgs;
    for (const auto& p : t_images) imgs.push_back(read_ppm(p));
    TrainConfig tc;
    tc.steps = t_steps;
    tc.lambda = t_lambda;
    tc.crop = t_crop;
    tc.seed = t_seed;
    tc.lr_drop_step = t_drop;
    tc.checkpoint_path = t_out;
    std::ostringstream csv;
    TrainResult res = train(ps, cfg, tc, imgs, &csv);
    if (!t_csv.empty()) atomic_write_text(t_csv, csv.str());
    if (res.diverged) {
      std::cerr << "training diverged after step " << res.steps_done
                << "; last snapshot restored\n";
      save_checkpoint(t_out, cfg, ps);
    }
    logmsg("trained " + std::to_string(res.steps_done) + " steps, last loss " +
           std::to_string(res.last_loss));
    std::cout << "steps=" << res.steps_done << " loss=" << res.last_loss
              << " bpp=" << res.last_bpp << " distortion=" << res.last_dist
              << "\n";
    return 0;
  }

  if (cmd_enc->parsed()) {
    ParamStore ps;
    ModelConfig cfg = load_checkpoint(e_model, ps);
    Tensor img = read_ppm(e_in);
    CompressStats st = compress(ps, cfg, img, (uint8_t)e_lambda_idx);
    atomic_write(e_out, st.bytes.data(), st.bytes.size());
    logmsg("encoded " + e_in + " -> " + e_out);
    std::cout << "bytes=" << st.bytes.size() << " bpp=" << st.bpp << "\n";
    return 0;
  }

  if (cmd_dec->parsed()) {
    ParamStore ps;
    ModelConfig cfg = load_checkpoint(d_model, ps);
    std::vector<uint8_t> bytes = read_file(d_in);
    Tensor img = decompress(ps, cfg, bytes);
    // write through a temp name for atomicity
    std::string tmp = d_out + ".tmp";
    write_ppm(tmp, img);
    if (std::rename(tmp.c_str(), d_out.c_str()) != 0)
      throw std::runtime_error("cannot rename " + tmp + " to " + d_out);
    logmsg("decoded " + d_in + " -> " + d_out);
    return 0;
  }

  if (cmd_eval->parsed()) {
    ParamStore ps;
    ModelConfig cfg = load_checkpoint(v_model, ps);
    std::vector<std::pair<std::string, Tensor>> imgs;
    for (const auto& p : v_images) imgs.emplace_back(p, read_ppm(p));
    std::ostringstream csv;
    rd_sweep(ps, cfg, v_lambda, imgs, &csv);
    if (v_csv.empty())
      std::cout << csv.str();
    else
      atomic_write_text(v_csv, csv.str());
    return 0;
  }

  if (cmd_ins->parsed()) {
    bool did = false;
    if (!i_in.empty()) {
      StreamInfo s = parse_header(read_file(i_in));
      std::cout << "version=" << (int)s.version << "\n"
                << "config_hash=" << s.hash << "\n"
                << "width=" << s.width << "\n"
                << "height=" << s.height << "\n"
                << "lambda_index=" << (int)s.lambda_index << "\n"
                << "hyper_bytes=" << s.z_bytes << "\n"
                << "latent_bytes=" << s.y_bytes << "\n";
      did = true;
    }
    if (!i_coverage_csv.empty()) {
      if (i_config.empty())
        throw CLI::ValidationError("--coverage-csv requires --config");
      ModelConfig cfg = ModelConfig::parse(i_config);
      // small spatial probe is enough to expose blind spots
      size_t M = std::min<size_t>(cfg.M, 4), H = 4, W = 4;
      auto cov = structural_coverage(cfg.ctx, M, H, W);
      std::ostringstream os;
      for (size_t p = 0; p < cov.size(); ++p) {
        for (size_t q = 0; q < cov[p].size(); ++q)
          os << (q ? "," : "") << (int)cov[p][q];
        os << "\n";
      }
      atomic_write_text(i_coverage_csv, os.str());
      did = true;
    }
    if (!did)
      throw CLI::ValidationError("inspect needs a bitstream or --coverage-csv");
    return 0;
  }

  return 2;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const HashMismatch& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  } catch (const CorruptStream& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const CLI::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}

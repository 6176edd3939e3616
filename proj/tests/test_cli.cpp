// Exercises the command-line tool end to end through std::system, checking
// the documented exit codes: 0 ok, 2 bad arguments, 3 corrupt stream,
// 4 configuration mismatch.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <fstream>

#include "gcm/image.hpp"
#include "gcm/layers.hpp"

#ifndef GCMC_BIN
#define GCMC_BIN "./gcmc"
#endif

using namespace gcm;

namespace {

int run(const std::string& args) {
  std::string cmd = std::string(GCMC_BIN) + " " + args + " >cli_out.log 2>&1";
  int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

void make_image(const std::string& path, uint64_t seed) {
  Rng rng(seed);
  Tensor img({3, 64, 80});
  for (size_t i = 0; i < img.size(); ++i)
    img[i] = std::clamp(0.5 + 0.25 * std::sin((double)i * 0.01) + 0.02 * rng.normal(),
                        0.0, 1.0);
  write_ppm(path, img);
}

const char* kCfg = "\"N=8;M=4;Mz=6;layers=2;k=4;n=3;blocks=gdn\"";

}  // namespace

TEST_CASE("cli: full train/encode/decode/eval/inspect flow") {
  make_image("cli_a.ppm", 1);
  make_image("cli_b.ppm", 2);

  CHECK(run(std::string("train --config ") + kCfg +
            " --steps 5 --crop 64 --seed 7 --out cli_model.ck --csv cli_train.csv"
            " cli_a.ppm cli_b.ppm") == 0);
  std::ifstream csv("cli_train.csv");
  std::string header;
  std::getline(csv, header);
  CHECK(header == "step,loss,rate_bpp,distortion_d");

  CHECK(run("encode --model cli_model.ck --lambda-index 1 --out cli_a.gcm cli_a.ppm") ==
        0);
  CHECK(run("decode --model cli_model.ck --out cli_a_dec.ppm cli_a.gcm") == 0);
  Tensor dec = read_ppm("cli_a_dec.ppm");
  CHECK(dec.dim(1) == 64);
  CHECK(dec.dim(2) == 80);

  CHECK(run("eval --model cli_model.ck --lambda 8 --csv cli_eval.csv cli_a.ppm") == 0);
  std::ifstream ecsv("cli_eval.csv");
  std::getline(ecsv, header);
  CHECK(header == "image,lambda,bpp,msssim,msssim_db,psnr");

  CHECK(run("inspect cli_a.gcm") == 0);
}

TEST_CASE("cli: exit codes for failure modes") {
  // bad arguments
  CHECK(run("") == 2);
  CHECK(run("frobnicate") == 2);
  CHECK(run("decode --model cli_model.ck") == 2);
  CHECK(run("encode --model missing.ck --out x.gcm cli_a.ppm") == 2);

  // corrupt stream
  {
    std::ofstream f("cli_bad.gcm", std::ios::binary);
    f << "not a stream";
  }
  CHECK(run("decode --model cli_model.ck --out x.ppm cli_bad.gcm") == 3);
  CHECK(run("inspect cli_bad.gcm") == 3);

  // model/stream mismatch
  CHECK(run("train --config \"N=9;M=4;Mz=6;layers=2;k=4;n=3;blocks=gdn\""
            " --steps 1 --crop 64 --seed 7 --out cli_other.ck cli_a.ppm") == 0);
  CHECK(run("decode --model cli_other.ck --out x.ppm cli_a.gcm") == 4);
}

TEST_CASE("cli: coverage matrix export") {
  CHECK(run(std::string("inspect --coverage-csv cli_cov.csv --config ") + kCfg) == 0);
  std::ifstream f("cli_cov.csv");
  std::string line;
  size_t rows = 0;
  while (std::getline(f, line)) ++rows;
  CHECK(rows == 64);  // 4 probe channels x 4 x 4 positions
}

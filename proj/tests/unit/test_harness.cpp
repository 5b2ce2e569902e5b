#include <cstdlib>
#include <fstream>

#include "doctest.h"
#include "ibr/harness/pipeline.hpp"
#include "ibr/nn/model.hpp"
#include "support.hpp"

using namespace ibr;
using ibr::test::code_of;
using nlohmann::json;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("ibr_harness_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

void write_bytes(const fs::path& p, const std::vector<unsigned char>& b) {
  std::ofstream(p, std::ios::binary).write(reinterpret_cast<const char*>(b.data()), std::streamsize(b.size()));
}

std::vector<unsigned char> read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(in), {});
}

Dataset<float> byte_images(Index n, Index c, Index h, Index w, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Dataset<float> d{"bytes", Tensor<float>::zeros(Shape{n, c, h, w}), {}, 10};
  for (Index i = 0; i < d.images.numel(); ++i) d.images.data[i] = float(rng() % 256) / 255.0f;
  for (Index i = 0; i < n; ++i) d.labels.push_back(int(rng() % 10));
  return d;
}

json small_config(const fs::path& out) {
  return json{{"schema_version", 1},
              {"dataset", "synthetic"},
              {"synthetic", {{"classes", 3}, {"per_class", 30}, {"test_per_class", 6}, {"image_size", 10}}},
              {"objectives", {"Base", "DVIB"}},
              {"train", {{"epochs", 1}, {"batch_size", 16}}},
              {"attacks", {{{"kind", "FGSM"}}, {{"kind", "CW"}, {"max_iters", 10}}}},
              {"sample_limit", 8},
              {"attack_chunk", 3},
              {"output_dir", out.string()}};
}

}  // namespace

TEST_CASE("MNIST IDX round trip and format guards") {
  const fs::path dir = scratch("idx");
  const Dataset<float> d = byte_images(3, 1, 28, 28, 1);
  write_mnist(d, dir / "img", dir / "lbl");
  const Dataset<float> back = load_mnist(dir / "img", dir / "lbl");
  CHECK(back.images.shape == Shape{3, 1, 28, 28});
  CHECK((back.images.data == d.images.data).all());
  CHECK(back.labels == d.labels);

  std::vector<unsigned char> img = read_bytes(dir / "img");
  img[3] = 0x04;
  write_bytes(dir / "bad", img);
  try {
    load_mnist(dir / "bad", dir / "lbl");
    FAIL("expected BadMagic");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::bad_magic);
    CHECK(std::string(e.what()).find("offset 0") != std::string::npos);
  }

  img = read_bytes(dir / "img");
  img.resize(img.size() - 10);
  write_bytes(dir / "short", img);
  CHECK(code_of([&] { load_mnist(dir / "short", dir / "lbl"); }) == ErrorCode::truncated_file);

  write_mnist(d.head(2), dir / "img2", dir / "lbl2");
  CHECK(code_of([&] { load_mnist(dir / "img", dir / "lbl2"); }) == ErrorCode::count_mismatch);
  CHECK(code_of([&] { load_mnist(dir / "missing", dir / "lbl"); }) == ErrorCode::io_error);
}

TEST_CASE("standard MNIST test file matches its header") {
  const char* dir = std::getenv("IBR_MNIST_DIR");
  if (!dir || !fs::exists(fs::path(dir) / "t10k-images-idx3-ubyte")) return;
  const Dataset<float> d = load_mnist_dir(dir, "test");
  CHECK(d.size() == 10000);
  CHECK(d.images.shape == Shape{10000, 1, 28, 28});
  for (int y : d.labels) CHECK(y < 10);
  CHECK(d.images.data.minCoeff() >= 0);
  CHECK(d.images.data.maxCoeff() <= 1);
}

TEST_CASE("CIFAR-10 records") {
  const fs::path dir = scratch("cifar");
  const Dataset<float> one = byte_images(1, 3, 32, 32, 2);
  write_cifar10(one, dir / "one.bin");
  CHECK(fs::file_size(dir / "one.bin") == 3073);
  const Dataset<float> back = load_cifar10({dir / "one.bin"});
  CHECK((back.images.data == one.images.data).all());
  CHECK(back.labels == one.labels);

  std::vector<unsigned char> b = read_bytes(dir / "one.bin");
  b.push_back(0);
  write_bytes(dir / "odd.bin", b);
  CHECK(code_of([&] { load_cifar10({dir / "odd.bin"}); }) == ErrorCode::record_size_mismatch);
  b.pop_back();
  b[0] = 10;
  write_bytes(dir / "label.bin", b);
  CHECK(code_of([&] { load_cifar10({dir / "label.bin"}); }) == ErrorCode::label_out_of_range);

  const char* cifar = std::getenv("IBR_CIFAR10_DIR");
  if (cifar && fs::exists(fs::path(cifar) / "test_batch.bin")) CHECK(load_cifar10_dir(cifar, "test").size() == 10000);
}

TEST_CASE("synthetic data") {
  SyntheticSpec s{4, 5, 12, 1, 0.1};
  const Dataset<float> a = make_synthetic(s, 7), b = make_synthetic(s, 7), c = make_synthetic(s, 8);
  CHECK((a.images.data == b.images.data).all());
  CHECK(a.labels == b.labels);
  CHECK(!(a.images.data == c.images.data).all());
  CHECK(a.size() == 20);
  CHECK(a.images.data.minCoeff() >= 0);
  CHECK(a.images.data.maxCoeff() <= 1);
  s.per_class = 0;
  CHECK(code_of([&] { make_synthetic(s, 1); }) == ErrorCode::empty_dataset);
  s.per_class = 5;
  s.classes = 1;
  CHECK(code_of([&] { make_synthetic(s, 1); }) == ErrorCode::config_error);
}

TEST_CASE("D1 Base learns easy synthetic data in three epochs") {
  // Pinned fixture: 10 classes, 28x28, low noise.
  const SyntheticSpec s{10, 100, 28, 1, 0.1};
  SyntheticSpec both = s;
  both.per_class = 130;
  const Dataset<float> all = make_synthetic(both, 11);
  const Dataset<float> train_set = all.head(1000), test_set = all.slice(1000, 300);
  NetworkSpec spec;
  const ChannelStats st = channel_stats(train_set);
  spec.input_mean = st.mean;
  spec.input_std = st.std;
  TrainConfig tc;
  tc.epochs = 3;
  const TrainResult<float> r = train(build_model<float>(spec, 1), tc, train_set, &test_set);
  CHECK(r.log.last("test")->acc_top1 >= 0.99);
}

TEST_CASE("config parsing") {
  const json base = small_config("unused");
  CHECK(parse_config(base).models.size() == 2);

  json j = base;
  j["surprise"] = 1;
  CHECK(code_of([&] { parse_config(j); }) == ErrorCode::config_error);
  j = base;
  j["train"]["momentum"] = 0.9;
  CHECK(code_of([&] { parse_config(j); }) == ErrorCode::config_error);
  j = base;
  j["attacks"][0]["eps"] = 0.1;
  CHECK(code_of([&] { parse_config(j); }) == ErrorCode::config_error);
  j = base;
  j["schema_version"] = 2;
  CHECK(code_of([&] { parse_config(j); }) == ErrorCode::config_error);
  j = base;
  j.erase("schema_version");
  CHECK(code_of([&] { parse_config(j); }) == ErrorCode::config_error);
  j = base;
  j["dataset"] = "imagenet64";
  CHECK(code_of([&] { parse_config(j); }) == ErrorCode::config_error);
  j = base;
  j["objectives"] = {"SVBI"};
  CHECK(code_of([&] { parse_config(j); }) == ErrorCode::config_error);
  j = base;
  j["tabacof"] = json::object();
  CHECK(code_of([&] { parse_config(j); }) == ErrorCode::config_error);
  j = base;
  j["attacks"][0]["gamma"] = 2.0;
  CHECK(code_of([&] { parse_config(j); }) == ErrorCode::config_error);

  // SVBI follows its Base teacher whatever order the config lists them in.
  j = base;
  j["objectives"] = {"SVBI", "DVIB", "Base"};
  const ExperimentConfig ordered = parse_config(j);
  CHECK(ordered.models[0].objective == Objective::Base);
  CHECK(ordered.models[1].objective == Objective::SVBI);

  // The hash ignores the output directory and tracks everything else.
  const std::string h = config_hash(parse_config(base));
  CHECK(h.size() == 16);
  CHECK(config_hash(parse_config(small_config("elsewhere"))) == h);
  j = base;
  j["attacks"][1]["max_iters"] = 11;
  CHECK(config_hash(parse_config(j)) != h);
}

TEST_CASE("exit codes") {
  CHECK(exit_code_for(ErrorCode::config_error) == 2);
  CHECK(exit_code_for(ErrorCode::bad_magic) == 3);
  CHECK(exit_code_for(ErrorCode::record_size_mismatch) == 3);
  CHECK(exit_code_for(ErrorCode::stage_failure) == 4);
}

TEST_CASE("training-only pipeline has no norm section") {
  const fs::path out = scratch("train_only");
  json j = small_config(out);
  j["attacks"] = json::array();
  const ExperimentReport r = run_experiment(parse_config(j));
  CHECK(!r.has_attacks);
  CHECK(r.models.size() == 2);
  CHECK(fs::exists(out / "report.json"));
  CHECK(!fs::exists(out / "norms.csv"));
  CHECK(!fs::exists(out / "l2.svg"));
  CHECK(!load_report(out / "report.json").has_attacks);
  CHECK(!json::parse(read_text(out / "report.json")).contains("norms"));
}

TEST_CASE("pipeline is deterministic, resumable and limited to the first samples") {
  const fs::path a = scratch("run_a"), b = scratch("run_b");
  const ExperimentReport ra = run_experiment(parse_config(small_config(a)));
  run_experiment(parse_config(small_config(b)));
  for (const char* f : {"robustness.csv", "norms.csv", "report.json", "l0_frac.svg", "samples/D1_Base_CW.csv"})
    CHECK(read_text(a / f) == read_text(b / f));

  const std::string hash = config_hash(parse_config(small_config(a)));
  CHECK(read_text(a / "robustness.csv").rfind("# config_hash=" + hash + "\n", 0) == 0);
  CHECK(read_text(a / "norms.csv").rfind("# config_hash=" + hash + "\n", 0) == 0);
  CHECK(read_text(a / "l2.svg").find(hash) != std::string::npos);
  CHECK(ra.config_hash == hash);

  const std::vector<SampleRecord> recs = read_samples_csv(a / "samples/D1_DVIB_FGSM.csv", "D1", "DVIB", "FGSM");
  REQUIRE(recs.size() == 8);
  for (std::size_t i = 0; i < recs.size(); ++i) CHECK(recs[i].id == Index(i));

  // A second run finds every stage complete and leaves the stage files untouched.
  const auto stamp = fs::last_write_time(a / "stages/train_D1_Base.json");
  const auto model_stamp = fs::last_write_time(a / "models/D1_Base.ibab");
  std::ostringstream log;
  RunOptions opt;
  opt.log = &log;
  run_experiment(parse_config(small_config(a)), opt);
  CHECK(fs::last_write_time(a / "stages/train_D1_Base.json") == stamp);
  CHECK(fs::last_write_time(a / "models/D1_Base.ibab") == model_stamp);
  CHECK(log.str().find("running") == std::string::npos);
  CHECK(read_text(a / "robustness.csv") == read_text(b / "robustness.csv"));

  // Changing one attack reruns only that attack's stages.
  json j = small_config(a);
  j["attacks"][1]["max_iters"] = 12;
  std::ostringstream log2;
  opt.log = &log2;
  run_experiment(parse_config(j), opt);
  CHECK(log2.str().find("[train_D1_Base] up to date") != std::string::npos);
  CHECK(log2.str().find("[attack_D1_Base_FGSM] up to date") != std::string::npos);
  CHECK(log2.str().find("[attack_D1_Base_CW] running") != std::string::npos);
}

TEST_CASE("stage failure keeps completed manifests") {
  const fs::path out = scratch("failure");
  json j = small_config(out);
  j["attacks"] = json::array();
  run_experiment(parse_config(j));
  // Training stays complete; the attack stage then fails to load the corrupted checkpoint.
  write_text(out / "models/D1_Base.ibab", "not a checkpoint");
  j["attacks"] = {{{"kind", "FGSM"}}};
  const ExperimentConfig cfg = parse_config(j);
  CHECK(code_of([&] { run_experiment(cfg); }) == ErrorCode::stage_failure);
  CHECK(read_manifest(out, "train_D1_Base").has_value());
  CHECK(read_manifest(out, "train_D1_DVIB").has_value());
  CHECK(!read_manifest(out, "attack_D1_Base_FGSM").has_value());
}

TEST_CASE("analyze refuses missing stages") {
  const fs::path out = scratch("analyze_only");
  RunOptions opt;
  opt.train = opt.attack = opt.probe = opt.plot = false;
  CHECK(code_of([&] { run_experiment(parse_config(small_config(out)), opt); }) == ErrorCode::stage_failure);
}

TEST_CASE("plots") {
  ExperimentReport r;
  r.config_hash = "0123456789abcdef";
  CHECK(code_of([&] { norm_chart_svg(r, "l2"); }) == ErrorCode::empty_report);
  CHECK(code_of([&] { emit_plots(r, scratch("noplot")); }) == ErrorCode::empty_report);
  std::vector<SampleRecord> recs;
  for (const char* attack : {"FGSM", "CW", "EAD", "JSMA1PX"})
    for (const char* objective : {"Base", "SVBI", "DVIB"})
      for (Index id = 0; id < 3; ++id)
        recs.push_back({"D1", objective, attack, id, 1, -1, 1, int(id % 2), id % 2 == 0, {0.1 * double(id), 0.5, 0.03}, 5});
  r.results = aggregate(recs);
  r.has_attacks = true;
  const fs::path dir = scratch("plots");
  const std::vector<fs::path> files = emit_plots(r, dir);
  REQUIRE(files.size() == 3);
  for (const fs::path& f : files) {
    const std::string svg = read_text(f);
    std::size_t groups = 0;
    for (std::size_t at = svg.find("class=\"bar-group\""); at != std::string::npos;
         at = svg.find("class=\"bar-group\"", at + 1))
      ++groups;
    CHECK(groups == 4);
    for (const char* attack : {"FGSM", "CW", "EAD", "JSMA1PX"})
      CHECK(svg.find(std::string(">") + attack + "</text>") != std::string::npos);
    CHECK(svg.find(r.config_hash) != std::string::npos);
  }
  CHECK(norm_chart_svg(r, "linf") == norm_chart_svg(r, "linf"));
  CHECK(read_text(dir / "l2.svg") == norm_chart_svg(r, "l2"));

  write_report_files(r, dir);
  CHECK(to_json(load_report(dir / "report.json")) == to_json(r));
  CHECK(plot_report(dir).size() == 3);
}

TEST_CASE("sample CSV and PNG writers") {
  const fs::path dir = scratch("writers");
  std::vector<SampleRecord> recs{{"D2", "SVBI", "EAD", 4, 7, 3, 7, 3, true, {0.25, 1.5, 0.125}, 42},
                                 {"D2", "SVBI", "EAD", 5, 2, 1, 2, 2, false, {0, 0, 0}, 200}};
  write_samples_csv(recs, "abc", dir / "s.csv");
  const std::string text = read_text(dir / "s.csv");
  CHECK(text.rfind("# config_hash=abc\nid,label,target,pred_clean,pred_adv,success,l0_frac,l2,linf,iters\n", 0) == 0);
  const std::vector<SampleRecord> back = read_samples_csv(dir / "s.csv", "D2", "SVBI", "EAD");
  REQUIRE(back.size() == 2);
  CHECK(back[0].id == 4);
  CHECK(back[0].target == 3);
  CHECK(back[0].success);
  CHECK(back[0].norms == recs[0].norms);
  CHECK(back[1].iterations == 200);

  const Tensor<float> x = Tensor<float>::full(Shape{3, 4, 5}, 0.5f), y = Tensor<float>::full(Shape{3, 4, 5}, 1.0f);
  write_png_pair(x, y, dir / "pair.png", "abc");
  const std::vector<unsigned char> png = read_bytes(dir / "pair.png");
  REQUIRE(png.size() > 8);
  CHECK(png[1] == 'P');
  CHECK(png[2] == 'N');
  CHECK(png[3] == 'G');
  CHECK(code_of([&] { write_png_pair(x, Tensor<float>::zeros(Shape{1, 4, 5}), dir / "bad.png", "abc"); }) ==
        ErrorCode::shape_mismatch);
}

#include "ibr/harness/report.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

namespace ibr {

using nlohmann::json;

std::string format_real(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw Error(ErrorCode::io_error, "cannot write " + tmp.string());
    out << text;
    if (!out) throw Error(ErrorCode::io_error, "short write to " + tmp.string());
  }
  fs::rename(tmp, path);
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::io_error, "cannot open " + path.string());
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

namespace {

json moments_json(const Moments& m) { return {{"mean", m.mean}, {"stddev", m.stddev}}; }
Moments moments_from(const json& j) { return {j.at("mean").get<double>(), j.at("stddev").get<double>()}; }

}  // namespace

json to_json(const ExperimentReport& r) {
  json models = json::array(), robustness = json::array(), norms = json::array(), hits = json::array(),
       probes = json::array();
  for (const ModelSummary& m : r.models)
    models.push_back({{"tier", m.tier},
                      {"objective", m.objective},
                      {"beta", m.beta},
                      {"test_acc", m.test_acc},
                      {"bpp", m.bpp},
                      {"params", m.params},
                      {"encoder_params", m.encoder_params}});
  for (const RobustnessRow& x : r.results.robustness)
    robustness.push_back({{"tier", x.tier},
                          {"objective", x.objective},
                          {"attack", x.attack},
                          {"clean_acc", x.clean_acc},
                          {"adv_acc", x.adv_acc},
                          {"drop", x.drop_points}});
  for (const NormSummary& x : r.results.norms)
    norms.push_back({{"tier", x.tier},
                     {"objective", x.objective},
                     {"attack", x.attack},
                     {"subset", x.subset},
                     {"count", x.count},
                     {"l0_frac", moments_json(x.l0_frac)},
                     {"l2", moments_json(x.l2)},
                     {"linf", moments_json(x.linf)}});
  for (const HitCount& h : r.results.hits)
    hits.push_back({{"tier", h.tier},
                    {"objective", h.objective},
                    {"attack", h.attack},
                    {"target", h.target},
                    {"hits", h.hits},
                    {"total", h.total}});
  for (const ProbeSummary& p : r.probes)
    probes.push_back(
        {{"tier", p.tier}, {"objective", p.objective}, {"layer", p.layer}, {"mse", p.mse}, {"psnr", p.psnr}});
  json j{{"provenance",
          {{"config_hash", r.config_hash},
           {"build_id", r.build_id},
           {"master_seed", r.master_seed},
           {"dataset", r.dataset},
           {"precision", r.precision},
           {"stages", r.stage_hashes}}},
         {"models", models}};
  if (r.has_attacks) {
    j["robustness"] = robustness;
    j["norms"] = norms;
    j["hits"] = hits;
  }
  if (!r.probes.empty()) j["probes"] = probes;
  return j;
}

ExperimentReport report_from_json(const json& j) {
  ExperimentReport r;
  try {
    const json& p = j.at("provenance");
    r.config_hash = p.at("config_hash").get<std::string>();
    r.build_id = p.at("build_id").get<std::string>();
    r.master_seed = p.at("master_seed").get<std::uint64_t>();
    r.dataset = p.at("dataset").get<std::string>();
    r.precision = p.at("precision").get<std::string>();
    r.stage_hashes = p.at("stages").get<std::map<std::string, std::string>>();
    for (const json& m : j.at("models"))
      r.models.push_back({m.at("tier"), m.at("objective"), m.at("beta"), m.at("test_acc"), m.at("bpp"),
                          m.at("params"), m.at("encoder_params")});
    r.has_attacks = j.contains("norms");
    if (r.has_attacks) {
      for (const json& x : j.at("robustness"))
        r.results.robustness.push_back(
            {x.at("tier"), x.at("objective"), x.at("attack"), x.at("clean_acc"), x.at("adv_acc"), x.at("drop")});
      for (const json& x : j.at("norms"))
        r.results.norms.push_back({x.at("tier"), x.at("objective"), x.at("attack"), x.at("subset"), x.at("count"),
                                   moments_from(x.at("l0_frac")), moments_from(x.at("l2")),
                                   moments_from(x.at("linf"))});
      for (const json& x : j.at("hits"))
        r.results.hits.push_back(
            {x.at("tier"), x.at("objective"), x.at("attack"), x.at("target"), x.at("hits"), x.at("total")});
    }
    if (j.contains("probes"))
      for (const json& x : j.at("probes"))
        r.probes.push_back({x.at("tier"), x.at("objective"), x.at("layer"), x.at("mse"), x.at("psnr")});
  } catch (const json::exception& e) {
    throw Error(ErrorCode::io_error, std::string("malformed report: ") + e.what());
  }
  return r;
}

ExperimentReport load_report(const fs::path& path) {
  try {
    return report_from_json(json::parse(read_text(path)));
  } catch (const json::parse_error& e) {
    throw Error(ErrorCode::io_error, path.string() + ": " + e.what());
  }
}

std::string robustness_csv(const ExperimentReport& r) {
  std::string s = "# config_hash=" + r.config_hash + "\ntier,objective,attack,clean_acc,adv_acc,drop\n";
  for (const RobustnessRow& x : r.results.robustness)
    s += x.tier + "," + x.objective + "," + x.attack + "," + format_real(x.clean_acc) + "," + format_real(x.adv_acc) +
         "," + format_real(x.drop_points) + "\n";
  return s;
}

std::string norms_csv(const ExperimentReport& r) {
  std::string s = "# config_hash=" + r.config_hash +
                  "\ntier,objective,attack,l0_frac_mean,l2_mean,linf_mean,l0_frac_std,l2_std,linf_std,subset,count\n";
  for (const NormSummary& x : r.results.norms)
    s += x.tier + "," + x.objective + "," + x.attack + "," + format_real(x.l0_frac.mean) + "," +
         format_real(x.l2.mean) + "," + format_real(x.linf.mean) + "," + format_real(x.l0_frac.stddev) + "," +
         format_real(x.l2.stddev) + "," + format_real(x.linf.stddev) + "," + x.subset + "," + std::to_string(x.count) +
         "\n";
  return s;
}

std::vector<fs::path> write_report_files(const ExperimentReport& r, const fs::path& dir) {
  std::vector<fs::path> out{dir / "report.json"};
  write_text(out.back(), to_json(r).dump(2) + "\n");
  if (r.has_attacks) {
    out.push_back(dir / "robustness.csv");
    write_text(out.back(), robustness_csv(r));
    out.push_back(dir / "norms.csv");
    write_text(out.back(), norms_csv(r));
  }
  return out;
}

namespace {

std::string xml_escape(const std::string& s) {
  std::string o;
  for (char c : s) {
    switch (c) {
      case '&': o += "&amp;"; break;
      case '<': o += "&lt;"; break;
      case '>': o += "&gt;"; break;
      case '"': o += "&quot;"; break;
      default: o += c;
    }
  }
  return o;
}

const char* kPalette[] = {"#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f",
                          "#edc948", "#b07aa1", "#ff9da7", "#9c755f", "#bab0ac"};

std::string fixed(double v, int digits = 2) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

}  // namespace

std::string norm_chart_svg(const ExperimentReport& r, const std::string& metric) {
  if (metric != "l0_frac" && metric != "l2" && metric != "linf")
    throw Error(ErrorCode::config_error, "unknown norm metric '" + metric + "'");
  std::vector<const NormSummary*> rows;
  for (const NormSummary& n : r.results.norms)
    if (n.subset == "all") rows.push_back(&n);
  if (rows.empty()) throw Error(ErrorCode::empty_report, "report holds no norm summaries");

  std::set<std::string> attack_set, series_set;
  for (const NormSummary* n : rows) {
    attack_set.insert(n->attack);
    series_set.insert(n->tier + " " + n->objective);
  }
  const std::vector<std::string> attacks(attack_set.begin(), attack_set.end());
  const std::vector<std::string> series(series_set.begin(), series_set.end());
  const auto value = [&](const NormSummary& n) {
    return metric == "l0_frac" ? n.l0_frac.mean : metric == "l2" ? n.l2.mean : n.linf.mean;
  };
  double vmax = 0;
  for (const NormSummary* n : rows) vmax = std::max(vmax, value(*n));
  if (!(vmax > 0)) vmax = 1;

  const double bar_w = 18, gap = 30, left = 60, top = 40, plot_h = 240, legend_w = 140;
  const double group_w = bar_w * double(series.size()) + gap;
  const double width = left + group_w * double(attacks.size()) + legend_w, height = top + plot_h + 50;
  const std::string title = metric == "l0_frac" ? "Mean fraction of pixels perturbed"
                            : metric == "l2"    ? "Mean L2 norm of the perturbation"
                                                : "Mean Linf norm of the perturbation";
  std::ostringstream s;
  s << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
    << "<!-- config_hash=" << r.config_hash << " -->\n"
    << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << fixed(width) << "\" height=\"" << fixed(height)
    << "\" font-family=\"sans-serif\" font-size=\"11\">\n"
    << "<text x=\"" << fixed(left) << "\" y=\"20\" font-size=\"14\">" << title << "</text>\n"
    << "<line x1=\"" << fixed(left) << "\" y1=\"" << fixed(top + plot_h) << "\" x2=\""
    << fixed(left + group_w * double(attacks.size())) << "\" y2=\"" << fixed(top + plot_h) << "\" stroke=\"black\"/>\n";
  for (int t = 0; t <= 4; ++t) {
    const double y = top + plot_h * (1 - t / 4.0);
    s << "<text x=\"" << fixed(left - 6) << "\" y=\"" << fixed(y + 4) << "\" text-anchor=\"end\">"
      << format_real(vmax * t / 4.0) << "</text>\n";
  }
  for (std::size_t g = 0; g < attacks.size(); ++g) {
    const double gx = left + gap / 2 + group_w * double(g);
    s << "<g class=\"bar-group\" data-attack=\"" << xml_escape(attacks[g]) << "\">\n";
    for (std::size_t k = 0; k < series.size(); ++k)
      for (const NormSummary* n : rows) {
        if (n->attack != attacks[g] || n->tier + " " + n->objective != series[k]) continue;
        const double h = plot_h * value(*n) / vmax;
        s << "  <rect x=\"" << fixed(gx + bar_w * double(k)) << "\" y=\"" << fixed(top + plot_h - h) << "\" width=\""
          << fixed(bar_w - 2) << "\" height=\"" << fixed(h) << "\" fill=\"" << kPalette[k % 10] << "\"><title>"
          << xml_escape(series[k]) << ": " << format_real(value(*n)) << "</title></rect>\n";
      }
    s << "  <text class=\"group-label\" x=\"" << fixed(gx + bar_w * double(series.size()) / 2) << "\" y=\""
      << fixed(top + plot_h + 16) << "\" text-anchor=\"middle\">" << xml_escape(attacks[g]) << "</text>\n</g>\n";
  }
  const double lx = left + group_w * double(attacks.size()) + 20;
  for (std::size_t k = 0; k < series.size(); ++k) {
    const double ly = top + 16 * double(k);
    s << "<rect x=\"" << fixed(lx) << "\" y=\"" << fixed(ly) << "\" width=\"10\" height=\"10\" fill=\""
      << kPalette[k % 10] << "\"/><text x=\"" << fixed(lx + 14) << "\" y=\"" << fixed(ly + 9) << "\">"
      << xml_escape(series[k]) << "</text>\n";
  }
  s << "</svg>\n";
  return s.str();
}

std::vector<fs::path> emit_plots(const ExperimentReport& r, const fs::path& dir) {
  std::vector<fs::path> out;
  std::vector<std::string> svgs;
  for (const char* metric : {"l0_frac", "l2", "linf"}) svgs.push_back(norm_chart_svg(r, metric));
  const char* names[] = {"l0_frac.svg", "l2.svg", "linf.svg"};
  for (std::size_t i = 0; i < svgs.size(); ++i) {
    out.push_back(dir / names[i]);
    write_text(out.back(), svgs[i]);
  }
  return out;
}

void write_samples_csv(const std::vector<SampleRecord>& records, const std::string& hash, const fs::path& path) {
  std::string s = "# config_hash=" + hash + "\nid,label,target,pred_clean,pred_adv,success,l0_frac,l2,linf,iters\n";
  for (const SampleRecord& x : records)
    s += std::to_string(x.id) + "," + std::to_string(x.label) + "," + std::to_string(x.target) + "," +
         std::to_string(x.pred_clean) + "," + std::to_string(x.pred_adv) + "," + (x.success ? "1" : "0") + "," +
         format_real(x.norms.l0_frac) + "," + format_real(x.norms.l2) + "," + format_real(x.norms.linf) + "," +
         std::to_string(x.iterations) + "\n";
  write_text(path, s);
}

std::vector<SampleRecord> read_samples_csv(const fs::path& path, const std::string& tier, const std::string& objective,
                                           const std::string& attack) {
  std::istringstream in(read_text(path));
  std::vector<SampleRecord> out;
  std::string line;
  bool header = false;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    if (!header) {
      header = true;
      continue;
    }
    SampleRecord r{tier, objective, attack, 0, 0, -1, 0, 0, false, {}, 0};
    long id = 0;
    int success = 0;
    if (std::sscanf(line.c_str(), "%ld,%d,%d,%d,%d,%d,%lf,%lf,%lf,%d", &id, &r.label, &r.target, &r.pred_clean,
                    &r.pred_adv, &success, &r.norms.l0_frac, &r.norms.l2, &r.norms.linf, &r.iterations) != 10)
      throw Error(ErrorCode::io_error, path.string() + ": malformed row '" + line + "'");
    r.id = id;
    r.success = success != 0;
    out.push_back(r);
  }
  return out;
}

void write_png_pair(const Tensor<float>& clean, const Tensor<float>& adv, const fs::path& path,
                    const std::string& hash) {
  Shape sc = clean.shape, sa = adv.shape;
  if (sc.rank() == 4) sc = sc.sample_shape();
  if (sa.rank() == 4) sa = sa.sample_shape();
  if (sc != sa || sc.rank() != 3 || (sc[0] != 1 && sc[0] != 3))
    throw Error(ErrorCode::shape_mismatch, "PNG pairs need matching [1|3,H,W] images");
  const Index c = sc[0], h = sc[1], w = sc[2], gap = 2, total_w = 2 * w + gap;
  std::vector<png_byte> pixels(std::size_t(h * total_w * c), 255);
  for (int side = 0; side < 2; ++side) {
    const Tensor<float>& img = side == 0 ? clean : adv;
    for (Index y = 0; y < h; ++y)
      for (Index x = 0; x < w; ++x)
        for (Index ch = 0; ch < c; ++ch) {
          const float v = std::clamp(img.data[(ch * h + y) * w + x], 0.0f, 1.0f);
          pixels[std::size_t((y * total_w + x + side * (w + gap)) * c + ch)] = png_byte(std::lround(v * 255.0f));
        }
  }
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  FILE* fp = std::fopen(path.string().c_str(), "wb");
  if (!fp) throw Error(ErrorCode::io_error, "cannot write " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw Error(ErrorCode::io_error, "libpng failed on " + path.string());
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, png_uint_32(total_w), png_uint_32(h), 8, c == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  std::string key = "config_hash", text = hash;
  png_text t{};
  t.compression = PNG_TEXT_COMPRESSION_NONE;
  t.key = key.data();
  t.text = text.data();
  png_set_text(png, info, &t, 1);
  png_write_info(png, info);
  for (Index y = 0; y < h; ++y) png_write_row(png, &pixels[std::size_t(y * total_w * c)]);
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
}

}  // namespace ibr

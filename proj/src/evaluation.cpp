#include "corn/evaluation.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>
#include <sstream>

#include "corn/errors.hpp"
#include "corn/image_io.hpp"
#include "json.hpp"

namespace corn {
namespace {

namespace F = torch::nn::functional;

torch::Tensor to_luma(const torch::Tensor& image) {
  auto x = image.to(torch::kFloat64);
  if (x.dim() == 2) return x;
  if (x.dim() != 3 || x.size(0) != 3) throw ShapeError("metric expects [3, H, W] or [H, W] images");
  return 0.299 * x[0] + 0.587 * x[1] + 0.114 * x[2];
}

torch::Tensor gaussian_window() {
  auto coords = torch::arange(kSsimWindow, torch::kFloat64) - (kSsimWindow - 1) / 2.0;
  auto g = torch::exp(-coords * coords / (2 * kSsimSigma * kSsimSigma));
  g = g / g.sum();
  return torch::outer(g, g).view({1, 1, kSsimWindow, kSsimWindow});
}

MetricSummary summary_of(const std::vector<double>& values) {
  MetricSummary s;
  if (values.empty()) return s;
  double sum = 0.0;
  for (double v : values) sum += v;
  s.mean = sum / values.size();
  double var = 0.0;
  for (double v : values) var += (v - s.mean) * (v - s.mean);
  s.std = std::sqrt(var / values.size());
  return s;
}

std::string shell_quote(const std::string& s) {
  std::string out = "'";
  for (char c : s) {
    if (c == '\'') out += "'\\''";
    else out += c;
  }
  return out + "'";
}

}  // namespace

double metric_l1(const torch::Tensor& a, const torch::Tensor& b) {
  if (!a.sizes().equals(b.sizes())) throw ShapeError("metric_l1: shape mismatch");
  return (a.to(torch::kFloat64) - b.to(torch::kFloat64)).abs().mean().item<double>();
}

double metric_ssim(const torch::Tensor& a, const torch::Tensor& b) {
  if (!a.sizes().equals(b.sizes())) throw ShapeError("metric_ssim: shape mismatch");
  auto x = to_luma(a).unsqueeze(0).unsqueeze(0);
  auto y = to_luma(b).unsqueeze(0).unsqueeze(0);
  if (x.size(2) < kSsimWindow || x.size(3) < kSsimWindow) {
    throw InvalidInput("metric_ssim: image smaller than the 11x11 window");
  }
  const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  auto w = gaussian_window();
  auto mu_x = F::conv2d(x, w);
  auto mu_y = F::conv2d(y, w);
  auto sxx = F::conv2d(x * x, w) - mu_x * mu_x;
  auto syy = F::conv2d(y * y, w) - mu_y * mu_y;
  auto sxy = F::conv2d(x * y, w) - mu_x * mu_y;
  auto map = ((2 * mu_x * mu_y + c1) * (2 * sxy + c2)) /
             ((mu_x * mu_x + mu_y * mu_y + c1) * (sxx + syy + c2));
  return map.mean().item<double>();
}

PerceptualScorer external_scorer(const std::string& command) {
  return [command](const torch::Tensor& a, const torch::Tensor& b) {
    auto dir = std::filesystem::temp_directory_path();
    std::random_device rd;
    const auto tag = std::to_string(rd());
    const auto pa = dir / ("corn_lpips_a_" + tag + ".png");
    const auto pb = dir / ("corn_lpips_b_" + tag + ".png");
    write_png_rgb(pa, a);
    write_png_rgb(pb, b);
    const auto cmd = command + " " + shell_quote(pa.string()) + " " + shell_quote(pb.string());
    FILE* pipe = popen(cmd.c_str(), "r");
    if (!pipe) throw IoError("cannot run scorer: " + command);
    std::string output;
    char buf[256];
    while (fgets(buf, sizeof(buf), pipe)) output += buf;
    const int status = pclose(pipe);
    std::filesystem::remove(pa);
    std::filesystem::remove(pb);
    if (status != 0) throw IoError("scorer failed: " + command);
    try {
      return std::stod(output);
    } catch (const std::exception&) {
      throw IoError("scorer printed no number: " + command);
    }
  };
}

std::vector<torch::Tensor> synthesize_sequence(const torch::Tensor& image, const Camera& source,
                                               const std::vector<Camera>& poses,
                                               FieldParameters& params,
                                               const RenderSettings& settings) {
  torch::NoGradGuard no_grad;
  params->eval();
  const auto points = sample_cube_points(settings.points, settings.cube_extent, settings.point_seed);
  const auto cloud = build_feature_cloud(params, image, source, points);
  std::vector<torch::Tensor> out;
  out.reserve(poses.size());
  for (const auto& pose : poses) out.push_back(render_cloud(cloud, pose, params, settings.splat).rgb);
  return out;
}

// ---------------------------------------------------------------------------

void summarize(EvalReport& report) {
  std::vector<double> l1, ssim, bl1, bssim, lp;
  size_t wins = 0;
  bool all_lpips = !report.pairs.empty();
  for (const auto& p : report.pairs) {
    l1.push_back(p.l1);
    ssim.push_back(p.ssim);
    bl1.push_back(p.baseline_l1);
    bssim.push_back(p.baseline_ssim);
    if (p.l1 < p.baseline_l1) ++wins;
    if (p.lpips) lp.push_back(*p.lpips);
    else all_lpips = false;
  }
  // Sorting makes the floating-point sums independent of pair order.
  for (auto* v : {&l1, &ssim, &bl1, &bssim, &lp}) std::sort(v->begin(), v->end());
  report.l1 = summary_of(l1);
  report.ssim = summary_of(ssim);
  report.baseline_l1 = summary_of(bl1);
  report.baseline_ssim = summary_of(bssim);
  report.lpips = all_lpips ? std::optional<MetricSummary>(summary_of(lp)) : std::nullopt;
  report.win_fraction =
      report.pairs.empty() ? 0.0 : static_cast<double>(wins) / static_cast<double>(report.pairs.size());
}

std::string EvalReport::to_json() const {
  using nlohmann::json;
  auto summ = [](const MetricSummary& s) { return json{{"mean", s.mean}, {"std", s.std}}; };
  json j;
  j["pair_count"] = pairs.size();
  j["l1"] = summ(l1);
  j["ssim"] = summ(ssim);
  j["baseline_l1"] = summ(baseline_l1);
  j["baseline_ssim"] = summ(baseline_ssim);
  j["lpips"] = lpips ? summ(*lpips) : json("unavailable");
  j["win_fraction"] = win_fraction;
  j["config"] = config;
  json rows = json::array();
  for (const auto& p : pairs) {
    rows.push_back({{"object_id", p.object_id},
                    {"source_view", p.source_view},
                    {"target_view", p.target_view},
                    {"l1", p.l1},
                    {"ssim", p.ssim},
                    {"baseline_l1", p.baseline_l1},
                    {"baseline_ssim", p.baseline_ssim},
                    {"lpips", p.lpips ? json(*p.lpips) : json(nullptr)}});
  }
  j["pairs"] = rows;
  return j.dump(2);
}

std::string EvalReport::to_csv() const {
  std::ostringstream out;
  out.precision(10);
  out << "object_id,source_view,target_view,l1,ssim,baseline_l1,baseline_ssim,lpips\n";
  for (const auto& p : pairs) {
    out << p.object_id << "," << p.source_view << "," << p.target_view << "," << p.l1 << ","
        << p.ssim << "," << p.baseline_l1 << "," << p.baseline_ssim << ",";
    if (p.lpips) out << *p.lpips;
    else out << "unavailable";
    out << "\n";
  }
  return out.str();
}

EvalReport evaluate(const Dataset& dataset, FieldParameters& params, const EvalOptions& options) {
  if (options.pairs <= 0) throw InvalidInput("evaluate: pair count must be positive");
  const auto objects = dataset.split_indices(options.split);
  if (objects.empty()) throw InvalidInput("evaluate: split '" + options.split + "' is empty");

  std::mt19937_64 rng(options.seed);
  struct Pick {
    size_t object;
    int64_t source, target;
  };
  std::vector<Pick> picks;
  for (int64_t i = 0; i < options.pairs; ++i) {
    std::uniform_int_distribution<size_t> obj_dist(0, objects.size() - 1);
    const size_t obj = objects[obj_dist(rng)];
    const auto views = static_cast<int64_t>(dataset.view_count(obj));
    if (views < 2) throw InvalidInput("evaluate: object with fewer than two views");
    std::uniform_int_distribution<int64_t> src_dist(0, views - 1), tgt_dist(0, views - 2);
    const int64_t s = src_dist(rng);
    int64_t t = tgt_dist(rng);
    if (t >= s) ++t;
    picks.push_back({obj, s, t});
  }

  torch::NoGradGuard no_grad;
  params->eval();
  const auto& rs = options.render;
  const auto points = sample_cube_points(rs.points, rs.cube_extent, rs.point_seed);

  EvalReport report;
  for (const auto& pick : picks) {
    const auto source = dataset.load_view(pick.object, pick.source);
    const auto target = dataset.load_view(pick.object, pick.target);
    const auto cloud = build_feature_cloud(params, source.image, source.camera, points);
    const auto pred = render_cloud(cloud, target.camera, params, rs.splat).rgb;
    PairScore p;
    p.object_id = dataset.object(pick.object).id;
    p.source_view = pick.source;
    p.target_view = pick.target;
    p.l1 = metric_l1(pred, target.image);
    p.ssim = metric_ssim(pred, target.image);
    p.baseline_l1 = metric_l1(source.image, target.image);
    p.baseline_ssim = metric_ssim(source.image, target.image);
    if (options.lpips) p.lpips = options.lpips(pred, target.image);
    report.pairs.push_back(std::move(p));
  }
  report.config = {{"pairs", std::to_string(options.pairs)},
                   {"seed", std::to_string(options.seed)},
                   {"split", options.split},
                   {"points", std::to_string(rs.points)},
                   {"cube_extent", std::to_string(rs.cube_extent)},
                   {"point_seed", std::to_string(rs.point_seed)},
                   {"splat_radius", std::to_string(rs.splat.radius)},
                   {"splat_falloff", std::to_string(rs.splat.falloff)},
                   {"splat_top_k", std::to_string(rs.splat.top_k)}};
  summarize(report);
  return report;
}

void write_report(const EvalReport& report, const std::filesystem::path& json_path) {
  if (json_path.has_parent_path()) std::filesystem::create_directories(json_path.parent_path());
  std::ofstream j(json_path);
  if (!j) throw IoError("cannot write " + json_path.string());
  j << report.to_json() << "\n";
  auto csv_path = json_path;
  csv_path.replace_extension(".csv");
  std::ofstream c(csv_path);
  if (!c) throw IoError("cannot write " + csv_path.string());
  c << report.to_csv();
}

}  // namespace corn

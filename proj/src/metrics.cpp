#include "opt/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "opt/error.hpp"

namespace opt::metrics {

Eigen::MatrixXd to_gray(const FrameImage& img) {
  Eigen::MatrixXd g(img.height, img.width);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      g(y, x) = 0.299 * img.at(y, x, 0) + 0.587 * img.at(y, x, 1) + 0.114 * img.at(y, x, 2);
  return g;
}

namespace {

// (H+1)×(W+1) inclusive prefix sums.
Eigen::MatrixXd integral(const Eigen::MatrixXd& m) {
  Eigen::MatrixXd s = Eigen::MatrixXd::Zero(m.rows() + 1, m.cols() + 1);
  for (Eigen::Index y = 0; y < m.rows(); ++y)
    for (Eigen::Index x = 0; x < m.cols(); ++x) s(y + 1, x + 1) = m(y, x) + s(y, x + 1) + s(y + 1, x) - s(y, x);
  return s;
}

double box(const Eigen::MatrixXd& s, Eigen::Index y, Eigen::Index x, int k) {
  return s(y + k, x + k) - s(y, x + k) - s(y + k, x) + s(y, x);
}

}  // namespace

double ssim_gray(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), "ssim: image shapes differ");
  const int k = kSsimWindow;
  require(a.rows() >= k && a.cols() >= k, "ssim: images must be at least 8x8");
  auto sa = integral(a), sb = integral(b);
  auto saa = integral(a.cwiseProduct(a)), sbb = integral(b.cwiseProduct(b)), sab = integral(a.cwiseProduct(b));
  const double n = k * k;
  double total = 0.0;
  int64_t count = 0;
  for (Eigen::Index y = 0; y + k <= a.rows(); ++y) {
    for (Eigen::Index x = 0; x + k <= a.cols(); ++x) {
      double ma = box(sa, y, x, k) / n, mb = box(sb, y, x, k) / n;
      double va = box(saa, y, x, k) / n - ma * ma;
      double vb = box(sbb, y, x, k) / n - mb * mb;
      double cov = box(sab, y, x, k) / n - ma * mb;
      total += ((2 * ma * mb + kSsimC1) * (2 * cov + kSsimC2)) /
               ((ma * ma + mb * mb + kSsimC1) * (va + vb + kSsimC2));
      ++count;
    }
  }
  return total / static_cast<double>(count);
}

double ssim(const FrameImage& a, const FrameImage& b) {
  require(a.same_shape(b), "ssim: image shapes differ (" + std::to_string(a.height) + "x" + std::to_string(a.width) +
                               " vs " + std::to_string(b.height) + "x" + std::to_string(b.width) + ")");
  return ssim_gray(to_gray(a), to_gray(b));
}

double lmd(const std::vector<face3d::Landmarks2D>& pred, const std::vector<face3d::Landmarks2D>& gt, bool mouth_only) {
  require(pred.size() == gt.size(), "lmd: sequences are not aligned (" + std::to_string(pred.size()) + " vs " +
                                        std::to_string(gt.size()) + " frames)");
  require(!pred.empty(), "lmd: empty sequence");
  double total = 0.0;
  int64_t count = 0;
  for (size_t t = 0; t < pred.size(); ++t) {
    require(pred[t].count() == gt[t].count(), "lmd: landmark counts differ");
    int first = mouth_only ? kMouthFirst : 0;
    require(pred[t].count() > first, "lmd: too few landmarks for the mouth subset");
    for (int i = first; i < pred[t].count(); ++i) {
      total += (pred[t].points.row(i) - gt[t].points.row(i)).norm();
      ++count;
    }
  }
  return total / static_cast<double>(count);
}

double csim(const std::vector<float>& e1, const std::vector<float>& e2) {
  require(e1.size() == e2.size() && !e1.empty(), "csim: embedding sizes differ");
  double dot = 0.0, n1 = 0.0, n2 = 0.0;
  for (size_t i = 0; i < e1.size(); ++i) {
    dot += static_cast<double>(e1[i]) * e2[i];
    n1 += static_cast<double>(e1[i]) * e1[i];
    n2 += static_cast<double>(e2[i]) * e2[i];
  }
  require(n1 > 0.0 && n2 > 0.0, "csim: zero-norm embedding");
  require(std::abs(std::sqrt(n1) - 1.0) < 1e-3 && std::abs(std::sqrt(n2) - 1.0) < 1e-3,
          "csim: embeddings must be unit-norm");
  return std::clamp(dot, -1.0, 1.0);
}

nlohmann::json MetricsReport::to_json() const {
  nlohmann::json per = nlohmann::json::array();
  for (const auto& c : clips)
    per.push_back({{"clip_id", c.clip_id}, {"frames", c.frames}, {"ssim", c.ssim}, {"lmd", c.lmd}, {"csim", c.csim}});
  return {{"clips", per},
          {"aggregate", {{"ssim", ssim}, {"lmd", lmd}, {"csim", csim}}},
          {"clip_count", clip_count},
          {"frame_count", frame_count},
          {"lmd_mouth_only", mouth_only},
          {"config", config}};
}

MetricsReport MetricsReport::from_json(const nlohmann::json& j) {
  std::vector<ClipMetrics> clips;
  for (const auto& c : j.at("clips"))
    clips.push_back({c.at("clip_id").get<std::string>(), c.at("frames").get<int>(), c.at("ssim").get<double>(),
                     c.at("lmd").get<double>(), c.at("csim").get<double>()});
  auto r = aggregate(std::move(clips), j.at("lmd_mouth_only").get<bool>(), j.at("config"));
  return r;
}

void MetricsReport::write_csv(const std::filesystem::path& path) const {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write " + path.string());
  f.precision(10);
  f << "clip_id,frames,ssim,lmd,csim\n";
  for (const auto& c : clips) f << c.clip_id << ',' << c.frames << ',' << c.ssim << ',' << c.lmd << ',' << c.csim << '\n';
  f << "aggregate," << frame_count << ',' << ssim << ',' << lmd << ',' << csim << '\n';
}

MetricsReport aggregate(std::vector<ClipMetrics> clips, bool mouth_only, nlohmann::json config) {
  MetricsReport r;
  r.mouth_only = mouth_only;
  r.config = std::move(config);
  r.clip_count = static_cast<int>(clips.size());
  for (const auto& c : clips) {
    r.frame_count += c.frames;
    r.ssim += c.ssim;
    r.lmd += c.lmd;
    r.csim += c.csim;
  }
  if (!clips.empty()) {
    r.ssim /= r.clip_count;
    r.lmd /= r.clip_count;
    r.csim /= r.clip_count;
  }
  r.clips = std::move(clips);
  return r;
}

ClipMetrics evaluate_clip(const std::string& clip_id, const std::vector<FrameImage>& generated,
                          const std::vector<FrameImage>& ground_truth,
                          const std::vector<face3d::Landmarks2D>& generated_landmarks,
                          const std::vector<face3d::Landmarks2D>& gt_landmarks, const EmbedFn& embed_fn,
                          bool mouth_only) {
  require(!generated.empty(), "evaluate_clip(" + clip_id + "): no generated frames");
  require(generated.size() == ground_truth.size(), "evaluate_clip(" + clip_id + "): generated has " +
                                                       std::to_string(generated.size()) + " frames, ground truth " +
                                                       std::to_string(ground_truth.size()));
  require(static_cast<bool>(embed_fn), "evaluate_clip(" + clip_id + "): missing embedding network");
  ClipMetrics m;
  m.clip_id = clip_id;
  m.frames = static_cast<int>(generated.size());
  for (size_t t = 0; t < generated.size(); ++t) {
    m.ssim += ssim(generated[t], ground_truth[t]);
    m.csim += csim(embed_fn(generated[t]), embed_fn(ground_truth[t]));
  }
  m.ssim /= m.frames;
  m.csim /= m.frames;
  m.lmd = lmd(generated_landmarks, gt_landmarks, mouth_only);
  return m;
}

}  // namespace opt::metrics

#include "plot.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include "radloc/io.hpp"
#include "radloc/se2.hpp"

namespace radloc::tools {

namespace {

constexpr double kW = 640, kH = 480, kPad = 48;

struct Box {
  double x0, x1, y0, y1;
};

Box bounds(const std::vector<std::pair<double, double>>& pts) {
  Box b{1e300, -1e300, 1e300, -1e300};
  for (const auto& [x, y] : pts) {
    b.x0 = std::min(b.x0, x);
    b.x1 = std::max(b.x1, x);
    b.y0 = std::min(b.y0, y);
    b.y1 = std::max(b.y1, y);
  }
  if (b.x1 - b.x0 < 1e-9) b.x1 = b.x0 + 1;
  if (b.y1 - b.y0 < 1e-9) b.y1 = b.y0 + 1;
  return b;
}

std::string num(double v) {
  std::ostringstream os;
  os.precision(6);
  os << v;
  return os.str();
}

class Svg {
 public:
  Svg() { os_ << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW << "\" height=\"" << kH << "\">\n"
              << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"; }

  template <typename Fx, typename Fy>
  void line(const std::vector<std::pair<double, double>>& pts, Fx fx, Fy fy, const char* color) {
    os_ << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
    for (const auto& [x, y] : pts) os_ << num(fx(x)) << ',' << num(fy(y)) << ' ';
    os_ << "\"/>\n";
  }

  void text(double x, double y, const std::string& s, const char* anchor = "start") {
    os_ << "<text x=\"" << num(x) << "\" y=\"" << num(y) << "\" font-family=\"sans-serif\" font-size=\"12\" "
        << "text-anchor=\"" << anchor << "\">" << s << "</text>\n";
  }

  void frame() {
    os_ << "<rect x=\"" << kPad << "\" y=\"" << kPad << "\" width=\"" << kW - 2 * kPad << "\" height=\""
        << kH - 2 * kPad << "\" fill=\"none\" stroke=\"#888\"/>\n";
  }

  void save(const std::filesystem::path& p) {
    os_ << "</svg>\n";
    io::write_text(p, os_.str());
  }

 private:
  std::ostringstream os_;
};

std::vector<std::pair<double, double>> xy(std::span<const StampedPose> t) {
  std::vector<std::pair<double, double>> out;
  for (const StampedPose& s : t) out.emplace_back(s.pose.x, s.pose.y);
  return out;
}

}  // namespace

void plot_trajectories(std::span<const StampedPose> traj, std::span<const StampedPose> gt,
                       const std::filesystem::path& svg) {
  const auto a = xy(traj), b = xy(gt);
  std::vector<std::pair<double, double>> all = a;
  all.insert(all.end(), b.begin(), b.end());
  const Box bx = bounds(all);
  const double s = std::min((kW - 2 * kPad) / (bx.x1 - bx.x0), (kH - 2 * kPad) / (bx.y1 - bx.y0));
  auto fx = [&](double x) { return kPad + (x - bx.x0) * s; };
  auto fy = [&](double y) { return kH - kPad - (y - bx.y0) * s; };
  Svg g;
  g.frame();
  g.line(b, fx, fy, "black");
  g.line(a, fx, fy, "#d62728");
  g.text(kPad, kPad - 16, "ground truth (black), estimate (red)");
  g.text(kW - kPad, kH - kPad + 20, num(bx.x1 - bx.x0) + " m wide", "end");
  g.save(svg);
}

void plot_errors(std::span<const StampedPose> traj, std::span<const StampedPose> gt, const std::filesystem::path& svg) {
  std::vector<std::pair<double, double>> et, er;
  double d = 0.0, emax = 1e-9, rmax = 1e-9;
  for (std::size_t i = 0; i < gt.size() && i < traj.size(); ++i) {
    if (i > 0) d += std::hypot(gt[i].pose.x - gt[i - 1].pose.x, gt[i].pose.y - gt[i - 1].pose.y);
    const double e = std::hypot(traj[i].pose.x - gt[i].pose.x, traj[i].pose.y - gt[i].pose.y);
    const double r = rad2deg(std::abs(wrap_angle(traj[i].pose.theta - gt[i].pose.theta)));
    et.emplace_back(d, e);
    er.emplace_back(d, r);
    emax = std::max(emax, e);
    rmax = std::max(rmax, r);
  }
  const double dmax = std::max(d, 1e-9);
  auto fx = [&](double x) { return kPad + x / dmax * (kW - 2 * kPad); };
  auto fe = [&](double y) { return kH - kPad - y / emax * (kH - 2 * kPad); };
  auto fr = [&](double y) { return kH - kPad - y / rmax * (kH - 2 * kPad); };
  Svg g;
  g.frame();
  g.line(et, fx, fe, "#1f77b4");
  g.line(er, fx, fr, "#ff7f0e");
  g.text(kPad, kPad - 16, "translation error (blue, max " + num(emax) + " m), heading error (orange, max " +
                              num(rmax) + " deg)");
  g.text(kW - kPad, kH - kPad + 20, "distance travelled " + num(d) + " m", "end");
  g.save(svg);
}

}  // namespace radloc::tools

#include "setr/flow.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>

namespace setr {

namespace {

constexpr double kGradIsZero = 1e-10;

double clampd(double v, double lo, double hi) { return v < lo ? lo : (v > hi ? hi : v); }

double sample_bilinear(const Grid& img, double x, double y) {
  const Index w = img.cols(), h = img.rows();
  x = clampd(x, 0.0, static_cast<double>(w - 1));
  y = clampd(y, 0.0, static_cast<double>(h - 1));
  const Index x0 = static_cast<Index>(std::floor(x));
  const Index y0 = static_cast<Index>(std::floor(y));
  const Index x1 = std::min(x0 + 1, w - 1);
  const Index y1 = std::min(y0 + 1, h - 1);
  const double fx = x - static_cast<double>(x0);
  const double fy = y - static_cast<double>(y0);
  const double top = img(y0, x0) * (1.0 - fx) + img(y0, x1) * fx;
  const double bot = img(y1, x0) * (1.0 - fx) + img(y1, x1) * fx;
  return top * (1.0 - fy) + bot * fy;
}

// Centered differences with replicated borders.
void centered_gradient(const Grid& img, Grid& gx, Grid& gy) {
  const Index w = img.cols(), h = img.rows();
  gx.resize(h, w);
  gy.resize(h, w);
  for (Index y = 0; y < h; ++y) {
    for (Index x = 0; x < w; ++x) {
      const Index xm = std::max<Index>(x - 1, 0), xp = std::min(x + 1, w - 1);
      const Index ym = std::max<Index>(y - 1, 0), yp = std::min(y + 1, h - 1);
      gx(y, x) = 0.5 * (img(y, xp) - img(y, xm));
      gy(y, x) = 0.5 * (img(yp, x) - img(ym, x));
    }
  }
}

// Forward differences, zero at the far borders (Neumann).
void forward_gradient(const Grid& img, Grid& gx, Grid& gy) {
  const Index w = img.cols(), h = img.rows();
  gx.resize(h, w);
  gy.resize(h, w);
  for (Index y = 0; y < h; ++y) {
    for (Index x = 0; x < w; ++x) {
      gx(y, x) = x + 1 < w ? img(y, x + 1) - img(y, x) : 0.0;
      gy(y, x) = y + 1 < h ? img(y + 1, x) - img(y, x) : 0.0;
    }
  }
}

// Discrete divergence, the negative adjoint of forward_gradient.
void divergence(const Grid& px, const Grid& py, Grid& div) {
  const Index w = px.cols(), h = px.rows();
  div.resize(h, w);
  for (Index y = 0; y < h; ++y) {
    for (Index x = 0; x < w; ++x) {
      double dx;
      if (x == 0)
        dx = px(y, 0);
      else if (x == w - 1)
        dx = -px(y, x - 1);
      else
        dx = px(y, x) - px(y, x - 1);
      double dy;
      if (y == 0)
        dy = py(0, x);
      else if (y == h - 1)
        dy = -py(y - 1, x);
      else
        dy = py(y, x) - py(y - 1, x);
      div(y, x) = dx + dy;
    }
  }
}

Grid warp_grid(const Grid& img, const Grid& u, const Grid& v) {
  Grid out(img.rows(), img.cols());
  for (Index y = 0; y < img.rows(); ++y)
    for (Index x = 0; x < img.cols(); ++x)
      out(y, x) = sample_bilinear(img, static_cast<double>(x) + u(y, x),
                                  static_cast<double>(y) + v(y, x));
  return out;
}

double energy_from_grids(const Grid& i0, const Grid& i1, const Grid& u, const Grid& v,
                         double lambda) {
  const Grid warped = warp_grid(i1, u, v);
  Grid ux, uy, vx, vy;
  forward_gradient(u, ux, uy);
  forward_gradient(v, vx, vy);
  const double data = (warped - i0).abs().sum();
  const double tv = (ux.square() + uy.square()).sqrt().sum() +
                    (vx.square() + vy.square()).sqrt().sum();
  return lambda * data + tv;
}

std::vector<Grid> build_grid_pyramid(const Grid& base, int levels, double scale) {
  std::vector<Grid> pyr;
  pyr.push_back(base);
  const double sigma = 0.6 * std::sqrt(1.0 / (scale * scale) - 1.0);
  for (int l = 1; l < levels; ++l) {
    const Grid& prev = pyr.back();
    const Index nw = static_cast<Index>(std::lround(static_cast<double>(prev.cols()) * scale));
    const Index nh = static_cast<Index>(std::lround(static_cast<double>(prev.rows()) * scale));
    if (nw < 8 || nh < 8) {
      std::fprintf(stderr, "build_pyramid: clamped to %d levels (next level %lldx%lld < 8x8)\n",
                   l, static_cast<long long>(nw), static_cast<long long>(nh));
      break;
    }
    pyr.push_back(resample_bilinear(gaussian_smooth(prev, sigma), nh, nw));
  }
  return pyr;
}

// One pyramid level of the primal-dual scheme.
void solve_level(const Grid& i0, const Grid& i1, Grid& u, Grid& v, const TvL1Params& p,
                 std::vector<double>* warp_energies, double lambda) {
  const Index w = i0.cols(), h = i0.rows();
  const double l_t = p.lambda * p.theta;
  const double taut = p.tau / p.theta;

  Grid i1x, i1y;
  centered_gradient(i1, i1x, i1y);

  Grid p11 = Grid::Zero(h, w), p12 = Grid::Zero(h, w);
  Grid p21 = Grid::Zero(h, w), p22 = Grid::Zero(h, w);
  Grid i1w, i1wx, i1wy, rho_c, grad2, v1(h, w), v2(h, w);
  Grid div1, div2, ux, uy, vx, vy;

  // Warps are accepted only when they do not increase the level objective;
  // the warped linearization can overshoot once the flow is near a fixed
  // point, and reverting keeps the energy non-increasing.
  double energy_kept = energy_from_grids(i0, i1, u, v, lambda);

  for (int warp_it = 0; warp_it < p.warps_per_level; ++warp_it) {
    const Grid u_kept = u, v_kept = v;
    i1w = warp_grid(i1, u, v);
    i1wx = warp_grid(i1x, u, v);
    i1wy = warp_grid(i1y, u, v);
    grad2 = i1wx.square() + i1wy.square();
    rho_c = i1w - i1wx * u - i1wy * v - i0;

    double error = std::numeric_limits<double>::infinity();
    const double eps2 = p.stop_epsilon * p.stop_epsilon;
    for (int n = 0; n < p.iterations_per_warp && error > eps2; ++n) {
      // data-term thresholding
      for (Index y = 0; y < h; ++y) {
        for (Index x = 0; x < w; ++x) {
          const double rho = rho_c(y, x) + i1wx(y, x) * u(y, x) + i1wy(y, x) * v(y, x);
          double d1, d2;
          if (rho < -l_t * grad2(y, x)) {
            d1 = l_t * i1wx(y, x);
            d2 = l_t * i1wy(y, x);
          } else if (rho > l_t * grad2(y, x)) {
            d1 = -l_t * i1wx(y, x);
            d2 = -l_t * i1wy(y, x);
          } else if (grad2(y, x) < kGradIsZero) {
            d1 = 0.0;
            d2 = 0.0;
          } else {
            const double fi = -rho / grad2(y, x);
            d1 = fi * i1wx(y, x);
            d2 = fi * i1wy(y, x);
          }
          v1(y, x) = u(y, x) + d1;
          v2(y, x) = v(y, x) + d2;
        }
      }

      divergence(p11, p12, div1);
      divergence(p21, p22, div2);
      error = 0.0;
      for (Index y = 0; y < h; ++y) {
        for (Index x = 0; x < w; ++x) {
          const double u_prev = u(y, x), v_prev = v(y, x);
          u(y, x) = v1(y, x) + p.theta * div1(y, x);
          v(y, x) = v2(y, x) + p.theta * div2(y, x);
          error += (u(y, x) - u_prev) * (u(y, x) - u_prev) +
                   (v(y, x) - v_prev) * (v(y, x) - v_prev);
        }
      }
      error /= static_cast<double>(w * h);

      // dual ascent
      forward_gradient(u, ux, uy);
      forward_gradient(v, vx, vy);
      for (Index y = 0; y < h; ++y) {
        for (Index x = 0; x < w; ++x) {
          const double g1 = std::sqrt(ux(y, x) * ux(y, x) + uy(y, x) * uy(y, x));
          const double g2 = std::sqrt(vx(y, x) * vx(y, x) + vy(y, x) * vy(y, x));
          const double ng1 = 1.0 + taut * g1;
          const double ng2 = 1.0 + taut * g2;
          p11(y, x) = (p11(y, x) + taut * ux(y, x)) / ng1;
          p12(y, x) = (p12(y, x) + taut * uy(y, x)) / ng1;
          p21(y, x) = (p21(y, x) + taut * vx(y, x)) / ng2;
          p22(y, x) = (p22(y, x) + taut * vy(y, x)) / ng2;
        }
      }
    }

    if (p.median_filter) {
      u = median_filter_3x3(u);
      v = median_filter_3x3(v);
    }

    const double energy_now = energy_from_grids(i0, i1, u, v, lambda);
    if (energy_now <= energy_kept) {
      energy_kept = energy_now;
    } else {
      u = u_kept;
      v = v_kept;
    }
    if (warp_energies) warp_energies->push_back(energy_kept);
  }
}

}  // namespace

void TvL1Params::validate() const {
  if (!(tau > 0.0 && tau <= 0.125)) {
    throw std::invalid_argument("tv_l1: tau must be in (0, 0.125], got " + fmt_double(tau));
  }
  if (pyramid_levels < 1) throw std::invalid_argument("tv_l1: pyramid_levels must be >= 1");
  if (!(pyramid_scale > 0.0 && pyramid_scale < 1.0)) {
    throw std::invalid_argument("tv_l1: pyramid_scale must be in (0, 1), got " +
                                fmt_double(pyramid_scale));
  }
  if (lambda <= 0.0 || theta <= 0.0) throw std::invalid_argument("tv_l1: lambda and theta must be positive");
  if (warps_per_level < 1 || iterations_per_warp < 1) {
    throw std::invalid_argument("tv_l1: warps and iterations must be >= 1");
  }
  if (stop_epsilon < 0.0) throw std::invalid_argument("tv_l1: stop_epsilon must be >= 0");
}

Grid gaussian_smooth(const Grid& img, double sigma) {
  if (sigma <= 0.0) return img;
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> kernel(static_cast<size_t>(2 * radius + 1));
  double norm = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    kernel[static_cast<size_t>(i + radius)] = std::exp(-0.5 * i * i / (sigma * sigma));
    norm += kernel[static_cast<size_t>(i + radius)];
  }
  for (double& k : kernel) k /= norm;

  const Index w = img.cols(), h = img.rows();
  Grid tmp(h, w), out(h, w);
  for (Index y = 0; y < h; ++y) {
    for (Index x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int i = -radius; i <= radius; ++i) {
        const Index xi = std::clamp<Index>(x + i, 0, w - 1);
        acc += kernel[static_cast<size_t>(i + radius)] * img(y, xi);
      }
      tmp(y, x) = acc;
    }
  }
  for (Index y = 0; y < h; ++y) {
    for (Index x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int i = -radius; i <= radius; ++i) {
        const Index yi = std::clamp<Index>(y + i, 0, h - 1);
        acc += kernel[static_cast<size_t>(i + radius)] * tmp(yi, x);
      }
      out(y, x) = acc;
    }
  }
  return out;
}

Grid resample_bilinear(const Grid& img, Index new_height, Index new_width) {
  Grid out(new_height, new_width);
  const double sx = static_cast<double>(img.cols()) / static_cast<double>(new_width);
  const double sy = static_cast<double>(img.rows()) / static_cast<double>(new_height);
  for (Index y = 0; y < new_height; ++y) {
    for (Index x = 0; x < new_width; ++x) {
      const double src_x = (static_cast<double>(x) + 0.5) * sx - 0.5;
      const double src_y = (static_cast<double>(y) + 0.5) * sy - 0.5;
      out(y, x) = sample_bilinear(img, src_x, src_y);
    }
  }
  return out;
}

Grid median_filter_3x3(const Grid& img) {
  const Index w = img.cols(), h = img.rows();
  Grid out(h, w);
  double window[9];
  for (Index y = 0; y < h; ++y) {
    for (Index x = 0; x < w; ++x) {
      int n = 0;
      for (Index dy = -1; dy <= 1; ++dy)
        for (Index dx = -1; dx <= 1; ++dx)
          window[n++] = img(std::clamp<Index>(y + dy, 0, h - 1),
                            std::clamp<Index>(x + dx, 0, w - 1));
      std::nth_element(window, window + 4, window + 9);
      out(y, x) = window[4];
    }
  }
  return out;
}

std::vector<Frame> build_pyramid(const Frame& frame, int levels, double scale) {
  if (levels < 1) throw std::invalid_argument("build_pyramid: levels must be >= 1");
  if (!(scale > 0.0 && scale < 1.0)) {
    throw std::invalid_argument("build_pyramid: scale must be in (0, 1)");
  }
  if (frame.width() < 8 || frame.height() < 8) {
    throw std::invalid_argument("build_pyramid: frame smaller than 8x8");
  }
  std::vector<Grid> grids = build_grid_pyramid(frame.intensity, levels, scale);
  std::vector<Frame> pyr;
  pyr.reserve(grids.size());
  for (Grid& g : grids) pyr.push_back(Frame{std::move(g)});
  return pyr;
}

Frame warp(const Frame& frame, const FlowField& flow) {
  if (frame.width() != flow.width() || frame.height() != flow.height()) {
    throw std::invalid_argument("warp: frame " + shape_str(frame.height(), frame.width()) +
                                " vs flow " + shape_str(flow.height(), flow.width()));
  }
  return Frame{warp_grid(frame.intensity, flow.u, flow.v)};
}

double tv_l1_energy(const Frame& prev, const Frame& next, const FlowField& flow, double lambda) {
  const Grid warped = warp_grid(next.intensity, flow.u, flow.v);
  Grid ux, uy, vx, vy;
  forward_gradient(flow.u, ux, uy);
  forward_gradient(flow.v, vx, vy);
  const double data = (warped - prev.intensity).abs().sum();
  const double tv = (ux.square() + uy.square()).sqrt().sum() +
                    (vx.square() + vy.square()).sqrt().sum();
  return lambda * data + tv;
}

FlowField tv_l1_flow(const Frame& prev, const Frame& next, const TvL1Params& params,
                     TvL1Trace* trace) {
  params.validate();
  if (prev.width() != next.width() || prev.height() != next.height()) {
    throw std::invalid_argument("tv_l1_flow: frame dimensions differ, " +
                                shape_str(prev.height(), prev.width()) + " vs " +
                                shape_str(next.height(), next.width()));
  }
  if (std::min(prev.width(), prev.height()) < 16) {
    throw std::invalid_argument("tv_l1_flow: minimum dimension is 16 pixels");
  }

  // Joint normalization to [0, 255]: the data-attachment weight is
  // calibrated against that intensity scale.
  const double lo = std::min(prev.intensity.minCoeff(), next.intensity.minCoeff());
  const double hi = std::max(prev.intensity.maxCoeff(), next.intensity.maxCoeff());
  const double span = hi > lo ? hi - lo : 1.0;
  const Grid n0 = (prev.intensity - lo) * (255.0 / span);
  const Grid n1 = (next.intensity - lo) * (255.0 / span);

  const std::vector<Grid> pyr0 = build_grid_pyramid(n0, params.pyramid_levels, params.pyramid_scale);
  const std::vector<Grid> pyr1 = build_grid_pyramid(n1, params.pyramid_levels, params.pyramid_scale);
  const int levels = static_cast<int>(std::min(pyr0.size(), pyr1.size()));

  Grid u = Grid::Zero(pyr0.back().rows(), pyr0.back().cols());
  Grid v = u;
  for (int l = levels - 1; l >= 0; --l) {
    const Grid& i0 = pyr0[static_cast<size_t>(l)];
    const Grid& i1 = pyr1[static_cast<size_t>(l)];
    std::vector<double>* energies = (trace && l == 0) ? &trace->finest_level_energy : nullptr;
    solve_level(i0, i1, u, v, params, energies, params.lambda);
    if (l > 0) {
      const Grid& finer = pyr0[static_cast<size_t>(l - 1)];
      const double fx = static_cast<double>(finer.cols()) / static_cast<double>(u.cols());
      const double fy = static_cast<double>(finer.rows()) / static_cast<double>(u.rows());
      u = resample_bilinear(u, finer.rows(), finer.cols()) * fx;
      v = resample_bilinear(v, finer.rows(), finer.cols()) * fy;
    }
  }
  return FlowField{std::move(u), std::move(v)};
}

QuantizedFlow flow_to_export(const FlowField& flow, double clip) {
  if (!(clip > 0.0)) throw std::invalid_argument("flow_to_export: clip must be positive");
  QuantizedFlow q;
  q.width = flow.width();
  q.height = flow.height();
  q.clip = clip;
  const size_t n = static_cast<size_t>(flow.width() * flow.height());
  q.u.resize(n);
  q.v.resize(n);
  auto encode = [clip](double x) -> uint8_t {
    const double c = clampd(x, -clip, clip);
    return static_cast<uint8_t>(std::floor((c + clip) / (2.0 * clip) * 255.0 + 0.5));
  };
  size_t i = 0;
  for (Index y = 0; y < flow.height(); ++y) {
    for (Index x = 0; x < flow.width(); ++x, ++i) {
      q.u[i] = encode(flow.u(y, x));
      q.v[i] = encode(flow.v(y, x));
    }
  }
  return q;
}

FlowField dequantize_flow(const QuantizedFlow& q) {
  FlowField f;
  f.u.resize(q.height, q.width);
  f.v.resize(q.height, q.width);
  auto decode = [&q](uint8_t b) {
    return static_cast<double>(b) / 255.0 * 2.0 * q.clip - q.clip;
  };
  size_t i = 0;
  for (Index y = 0; y < q.height; ++y) {
    for (Index x = 0; x < q.width; ++x, ++i) {
      f.u(y, x) = decode(q.u[i]);
      f.v(y, x) = decode(q.v[i]);
    }
  }
  return f;
}

}  // namespace setr

#pragma once

#include "stillsplat/core.hpp"

#include <array>

namespace stillsplat {

// SSIM with the standard settings: 11x11 Gaussian window, sigma 1.5,
// C1 = (0.01 L)^2, C2 = (0.03 L)^2, L = 1. The map is evaluated on the
// interior where the window fits (margin 5); averaged over RGB.

namespace ssim_detail {

constexpr int kWin = 11;
constexpr int kHalf = kWin / 2;
constexpr double kC1 = 0.01 * 0.01;
constexpr double kC2 = 0.03 * 0.03;

inline const std::array<double, kWin * kWin>& kernel() {
  static const std::array<double, kWin * kWin> k = [] {
    std::array<double, kWin * kWin> out{};
    double sum = 0;
    for (int i = 0; i < kWin; ++i)
      for (int j = 0; j < kWin; ++j) {
        double dy = i - kHalf, dx = j - kHalf;
        out[i * kWin + j] = std::exp(-(dx * dx + dy * dy) / (2.0 * 1.5 * 1.5));
        sum += out[i * kWin + j];
      }
    for (auto& v : out) v /= sum;
    return out;
  }();
  return k;
}

}  // namespace ssim_detail

// Weighted SSIM loss: mean over interior pixels of w * (1 - ssim), ssim
// averaged over channels. Optionally accumulates dLoss/dx into `dx`
// (full-image size, added to existing contents).
inline double weighted_ssim_loss(const Image& x, const Image& y, const GridF& w,
                                 Image* dx = nullptr) {
  using namespace ssim_detail;
  if (!x.same_shape(y) || x.height() != w.height() || x.width() != w.width())
    throw std::invalid_argument("weighted_ssim_loss: shape mismatch");
  int H = x.height(), W = x.width();
  if (H < kWin || W < kWin)
    throw std::invalid_argument("weighted_ssim_loss: image smaller than the SSIM window");
  const auto& k = kernel();
  long interior = static_cast<long>(H - 2 * kHalf) * (W - 2 * kHalf);
  double loss = 0;

  for (int ch = 0; ch < 3; ++ch) {
    for (int r = kHalf; r < H - kHalf; ++r) {
      for (int c = kHalf; c < W - kHalf; ++c) {
        double mx = 0, my = 0, mxx = 0, myy = 0, mxy = 0;
        for (int i = 0; i < kWin; ++i)
          for (int j = 0; j < kWin; ++j) {
            double kv = k[i * kWin + j];
            double xv = x.at(r + i - kHalf, c + j - kHalf)[ch];
            double yv = y.at(r + i - kHalf, c + j - kHalf)[ch];
            mx += kv * xv;
            my += kv * yv;
            mxx += kv * xv * xv;
            myy += kv * yv * yv;
            mxy += kv * xv * yv;
          }
        double sx = mxx - mx * mx, sy = myy - my * my, sxy = mxy - mx * my;
        double A1 = 2 * mx * my + kC1, A2 = 2 * sxy + kC2;
        double B1 = mx * mx + my * my + kC1, B2 = sx + sy + kC2;
        double S = (A1 * A2) / (B1 * B2);
        double wv = w.at(r, c);
        loss += wv * (1.0 - S) / 3.0;
        if (!dx) continue;

        double u = -wv / (3.0 * interior);  // dLoss/dS at this pixel/channel
        double dS_dA1 = A2 / (B1 * B2);
        double dS_dA2 = A1 / (B1 * B2);
        double dS_dB1 = -S / B1;
        double dS_dB2 = -S / B2;
        // sigma_x^2 = mxx - mx^2, sigma_xy = mxy - mx my
        double dS_dmx = dS_dA1 * 2 * my + dS_dB1 * 2 * mx + dS_dB2 * (-2 * mx) +
                        dS_dA2 * 2 * (-my);
        double dS_dmxx = dS_dB2;
        double dS_dmxy = dS_dA2 * 2;
        for (int i = 0; i < kWin; ++i)
          for (int j = 0; j < kWin; ++j) {
            double kv = k[i * kWin + j];
            int rr = r + i - kHalf, cc = c + j - kHalf;
            double xv = x.at(rr, cc)[ch];
            double yv = y.at(rr, cc)[ch];
            (*dx).at(rr, cc)[ch] += u * kv * (dS_dmx + dS_dmxx * 2 * xv + dS_dmxy * yv);
          }
      }
    }
  }
  return loss / interior;
}

// Plain mean SSIM index over the interior, averaged over channels.
inline double ssim_index(const Image& a, const Image& b) {
  GridF ones(a.height(), a.width(), 1.0);
  return 1.0 - weighted_ssim_loss(a, b, ones, nullptr);
}

}  // namespace stillsplat

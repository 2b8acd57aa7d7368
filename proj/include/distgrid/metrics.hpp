#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace distgrid {

inline constexpr double kPsnrCap = 100.0;  // identical images report 100 dB

/// PSNR in dB over [0,1] float channels, capped at 100 dB.
double psnr(std::span<const double> a, std::span<const double> b);

/// Mean SSIM over an 11x11 Gaussian window (sigma 1.5), standard constants
/// C1 = 0.01^2, C2 = 0.03^2, averaged over channels. Inputs are channel
/// planes in [0,1].
double ssim(std::span<const double> a, std::span<const double> b, uint32_t width, uint32_t height,
            uint32_t channels);

}  // namespace distgrid

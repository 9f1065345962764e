#include "camforge/zones.hpp"

#include <algorithm>
#include <stdexcept>
#include <string>

namespace camforge {

std::string_view zone_name(Zone z) {
  switch (z) {
    case Zone::upper_east: return "Upper East";
    case Zone::upper_west: return "Upper West";
    case Zone::middle_east: return "Middle East";
    case Zone::middle_west: return "Middle West";
    case Zone::lower_east: return "Lower East";
    case Zone::lower_west: return "Lower West";
  }
  return "?";
}

std::string_view zone_key(Zone z) {
  switch (z) {
    case Zone::upper_east: return "upper_east";
    case Zone::upper_west: return "upper_west";
    case Zone::middle_east: return "middle_east";
    case Zone::middle_west: return "middle_west";
    case Zone::lower_east: return "lower_east";
    case Zone::lower_west: return "lower_west";
  }
  return "?";
}

std::optional<Zone> zone_from_key(std::string_view key) {
  for (Zone z : kAllZones) {
    if (zone_key(z) == key) return z;
  }
  return std::nullopt;
}

namespace {
std::size_t ceil_div(std::size_t a, std::size_t b) { return (a + b - 1) / b; }
}  // namespace

ZoneBounds zone_bounds(Zone z, std::size_t height, std::size_t width) {
  const std::size_t band = ceil_div(height, 3);
  const std::size_t half = ceil_div(width, 2);
  if (2 * band >= height || half >= width) {
    throw std::invalid_argument("zone tiling of a " + std::to_string(height) + "x" +
                                std::to_string(width) + " map leaves an empty zone");
  }
  const int idx = static_cast<int>(z);
  const std::size_t band_idx = static_cast<std::size_t>(idx / 2);
  const bool east = idx % 2 == 0;
  ZoneBounds b{};
  b.row_begin = band_idx * band;
  b.row_end = band_idx == 2 ? height : (band_idx + 1) * band;
  b.col_begin = east ? half : 0;
  b.col_end = east ? width : half;
  return b;
}

Zone zone_of(std::size_t row, std::size_t col, std::size_t height, std::size_t width) {
  const std::size_t band = std::min<std::size_t>(row / ceil_div(height, 3), 2);
  const bool east = col >= ceil_div(width, 2);
  return static_cast<Zone>(band * 2 + (east ? 0 : 1));
}

}  // namespace camforge

#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <string_view>

namespace camforge {

/// Six-way image tiling: three horizontal bands by two vertical halves.
/// "west" is the left half of the image as stored, "east" the right half.
enum class Zone : int { upper_east, upper_west, middle_east, middle_west, lower_east, lower_west };

inline constexpr std::array<Zone, 6> kAllZones{Zone::upper_east,  Zone::upper_west, Zone::middle_east,
                                               Zone::middle_west, Zone::lower_east, Zone::lower_west};

std::string_view zone_name(Zone z);        // "Upper East", ...
std::string_view zone_key(Zone z);         // "upper_east", ...
std::optional<Zone> zone_from_key(std::string_view key);

struct ZoneBounds {
  std::size_t row_begin, row_end, col_begin, col_end;
};

/// Bands of ceil(H/3), ceil(H/3), remainder rows; halves of ceil(W/2) and
/// remainder columns. Throws if any zone would be empty.
ZoneBounds zone_bounds(Zone z, std::size_t height, std::size_t width);
Zone zone_of(std::size_t row, std::size_t col, std::size_t height, std::size_t width);

}  // namespace camforge

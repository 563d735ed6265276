#pragma once

// Domain constants shared by the world generator, the model, the objectives
// and the data tooling: the 12x3 discrete view grid, the token id layout of
// the closed vocabulary, and the landmark class space.

#include <cmath>

namespace gela {

inline constexpr int kNumHeadings = 12;
inline constexpr int kNumElevations = 3;
inline constexpr int kNumViews = 36;   // 12 headings x 3 elevations
inline constexpr int kStopSlot = 36;   // appended stop slot
inline constexpr int kNumSlots = 37;   // 36 views + stop

// Reserved vocabulary ids. Word tokens start at kFirstWordId.
inline constexpr int kClsId = 0;
inline constexpr int kPadId = 1;
inline constexpr int kMaskId = 2;
inline constexpr int kFirstWordId = 3;

// Landmark class space for masked region classification: class 0 is
// background, classes 1..7 are landmark classes.
inline constexpr int kNumClasses = 8;

inline constexpr double kPi = 3.14159265358979323846;
inline constexpr double kTwoPi = 2.0 * kPi;

// View index layout: 12 headings per elevation row, rows stacked
// bottom(-pi/6), level(0), top(+pi/6); view = row * 12 + column.
inline constexpr int view_index(int heading_col, int elevation_row) {
    return elevation_row * kNumHeadings + heading_col;
}
inline constexpr int heading_col_of(int view) { return view % kNumHeadings; }
inline constexpr int elevation_row_of(int view) { return view / kNumHeadings; }

// Orientation angles of a view cell center. Elevation rows are labeled
// bottom(-pi/6), level(0), top(+pi/6).
inline double view_heading(int view) { return heading_col_of(view) * (kTwoPi / kNumHeadings); }
inline double view_elevation(int view) {
    static constexpr double kElev[3] = {-kPi / 6.0, 0.0, kPi / 6.0};
    return kElev[elevation_row_of(view)];
}

// Normalized panorama frame: x in [0,1) spans heading [0,2pi), y in [0,1]
// spans elevation top(+pi/2) to bottom(-pi/2). Cells tile the frame in 12
// columns and 3 rows; elevation row 2 (up) is the top band.
inline double cell_x_min(int heading_col) { return heading_col / static_cast<double>(kNumHeadings); }
inline double cell_x_max(int heading_col) { return (heading_col + 1) / static_cast<double>(kNumHeadings); }
inline double cell_y_min(int elevation_row) { return (2 - elevation_row) / 3.0; }
inline double cell_y_max(int elevation_row) { return (3 - elevation_row) / 3.0; }

inline int heading_col_of_x(double x) {
    int c = static_cast<int>(std::floor(x * kNumHeadings));
    if (c < 0) c = 0;
    if (c >= kNumHeadings) c = kNumHeadings - 1;
    return c;
}
inline int elevation_row_of_y(double y) {
    int band = static_cast<int>(std::floor(y * 3.0));
    if (band < 0) band = 0;
    if (band > 2) band = 2;
    return 2 - band;
}

inline double wrap_angle_2pi(double a) {
    a = std::fmod(a, kTwoPi);
    return a < 0 ? a + kTwoPi : a;
}

// Wrap to (-pi, pi].
inline double wrap_angle_pi(double a) {
    a = std::fmod(a + kPi, kTwoPi);
    if (a <= 0) a += kTwoPi;
    return a - kPi;
}

}  // namespace gela

#pragma once

namespace afgeo {

/// Axis-aligned box in image pixels.
struct Box {
  double x_min = 0, y_min = 0, x_max = 0, y_max = 0;

  double width() const { return x_max - x_min; }
  double height() const { return y_max - y_min; }
  double area() const { return width() * height(); }
  double center_x() const { return 0.5 * (x_min + x_max); }
  double center_y() const { return 0.5 * (y_min + y_max); }
  bool valid() const { return x_min < x_max && y_min < y_max; }

  friend bool operator==(const Box&, const Box&) = default;
};

/// Intersection over union, in [0,1]; 0 when either box is empty.
double iou(const Box& a, const Box& b);

}  // namespace afgeo

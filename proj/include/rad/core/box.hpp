#pragma once

namespace rad {

// Axis-aligned box, corner convention: (x, y) is the top-left corner.
struct Box {
  float x = 0, y = 0, w = 0, h = 0;

  float area() const { return w * h; }
  float right() const { return x + w; }
  float bottom() const { return y + h; }
  float center_x() const { return x + 0.5f * w; }
  float center_y() const { return y + 0.5f * h; }
  friend bool operator==(const Box&, const Box&) = default;
};

// Intersection over union; 0 when either box is degenerate.
double box_iou(const Box& a, const Box& b);

}  // namespace rad

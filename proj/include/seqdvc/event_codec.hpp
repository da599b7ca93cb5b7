#pragma once

#include <cstdint>
#include <stdexcept>
#include <vector>

// Conversion between second-based time intervals and length-N binary frame
// vectors. Frame t covers the uniform span [t*d/N, (t+1)*d/N) of a
// duration-d video.

namespace seqdvc {

struct TimeInterval {
  double start_sec = 0.0;
  double end_sec = 0.0;
  double duration_sec = 0.0;
};

struct EventVector {
  std::vector<std::uint8_t> bits;  // values in {0,1}

  int frame_count() const { return static_cast<int>(bits.size()); }
  bool any() const;
  int first_one() const;  // -1 when empty
  int last_one() const;   // -1 when empty
};

using EventSequence = std::vector<EventVector>;

// Decoding an all-zero vector has no defined interval; callers treat this as
// the stop condition.
struct NoEventError : std::runtime_error {
  NoEventError() : std::runtime_error("event vector has no one-bits") {}
};

// Bit t is set iff frame t's span intersects the closed interval
// [start, end]. A zero-length interval maps to its single containing frame.
EventVector encode_event(const TimeInterval& interval, int n_frames);

// First one-bit starts the interval, one past the last one-bit ends it;
// interior holes are ignored.
TimeInterval decode_event(const EventVector& vec, double duration_sec);

// Sort by (first one-bit, last one-bit) ascending; duplicates retained.
// Throws on any all-zero vector.
EventSequence sort_and_validate(std::vector<EventVector> events);

}  // namespace seqdvc

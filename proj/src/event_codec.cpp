#include "seqdvc/event_codec.hpp"

#include <algorithm>
#include <cmath>

namespace seqdvc {

bool EventVector::any() const {
  for (std::uint8_t b : bits)
    if (b) return true;
  return false;
}

int EventVector::first_one() const {
  for (std::size_t i = 0; i < bits.size(); ++i)
    if (bits[i]) return static_cast<int>(i);
  return -1;
}

int EventVector::last_one() const {
  for (std::size_t i = bits.size(); i > 0; --i)
    if (bits[i - 1]) return static_cast<int>(i - 1);
  return -1;
}

EventVector encode_event(const TimeInterval& interval, int n_frames) {
  if (n_frames < 1) throw std::invalid_argument("encode_event: n_frames must be >= 1");
  if (interval.start_sec > interval.end_sec) {
    throw std::invalid_argument("encode_event: start after end");
  }
  if (interval.end_sec > interval.duration_sec) {
    throw std::invalid_argument("encode_event: end beyond duration");
  }
  if (interval.start_sec < 0.0) {
    throw std::invalid_argument("encode_event: negative start");
  }
  const double d = interval.duration_sec;
  const double span = d / n_frames;
  EventVector v;
  v.bits.assign(static_cast<std::size_t>(n_frames), 0);
  for (int t = 0; t < n_frames; ++t) {
    const bool hit = t * span <= interval.end_sec && (t + 1) * span > interval.start_sec;
    v.bits[static_cast<std::size_t>(t)] = hit ? 1 : 0;
  }
  if (!v.any()) {
    // Point interval at the exact video end: clamp to the final frame.
    const int t = std::min(n_frames - 1,
                           static_cast<int>(std::floor(interval.start_sec / span)));
    v.bits[static_cast<std::size_t>(std::max(0, t))] = 1;
  }
  return v;
}

TimeInterval decode_event(const EventVector& vec, double duration_sec) {
  const int f = vec.first_one();
  if (f < 0) throw NoEventError();
  const int l = vec.last_one();
  const double span = duration_sec / vec.frame_count();
  TimeInterval out;
  // N*(d/N) can land one ulp past d; keep the interval inside the video.
  out.start_sec = std::min(f * span, duration_sec);
  out.end_sec = std::min((l + 1) * span, duration_sec);
  out.duration_sec = duration_sec;
  return out;
}

EventSequence sort_and_validate(std::vector<EventVector> events) {
  for (const auto& e : events) {
    if (!e.any()) throw NoEventError();
  }
  std::stable_sort(events.begin(), events.end(),
                   [](const EventVector& a, const EventVector& b) {
                     if (a.first_one() != b.first_one()) return a.first_one() < b.first_one();
                     return a.last_one() < b.last_one();
                   });
  return events;
}

}  // namespace seqdvc

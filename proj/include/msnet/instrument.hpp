#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace msnet::instrument {

/// Collects multiply-accumulate tallies reported by convolution kernels while
/// it is active on the calling thread. Tallies are keyed by the dotted label
/// path that was open when the kernel ran.
///
/// Kernels charge dense-equivalent MACs: each output element costs
/// (input channels per group) x (kernel taps), padding taps included. For
/// transposed convolutions this is the zero-insertion view, so they are
/// charged per output element as well. Batch norm, activations, residual adds
/// and parameter-free cost-volume builders are never charged.
class MacRecorder {
 public:
  void push(std::string label);
  void pop();
  void add(std::uint64_t macs);

  std::string current_path() const;
  const std::map<std::string, std::uint64_t>& tallies() const { return tallies_; }
  std::uint64_t total() const;

 private:
  std::vector<std::string> stack_;
  std::map<std::string, std::uint64_t> tallies_;
};

/// Recorder bound to this thread, or nullptr when counting is off.
MacRecorder* active_recorder() noexcept;

/// Binds a recorder to the current thread for the lifetime of the scope.
class RecordingScope {
 public:
  explicit RecordingScope(MacRecorder& recorder) noexcept;
  ~RecordingScope();
  RecordingScope(const RecordingScope&) = delete;
  RecordingScope& operator=(const RecordingScope&) = delete;

 private:
  MacRecorder* previous_;
};

/// Pushes a label onto the active recorder (no-op when none is active).
class LabelScope {
 public:
  explicit LabelScope(const std::string& label);
  ~LabelScope();
  LabelScope(const LabelScope&) = delete;
  LabelScope& operator=(const LabelScope&) = delete;

 private:
  MacRecorder* recorder_;
};

inline void record_macs(std::uint64_t macs) {
  if (auto* r = active_recorder()) r->add(macs);
}

}  // namespace msnet::instrument

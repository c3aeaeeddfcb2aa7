#include "msnet/instrument.hpp"

namespace msnet::instrument {
namespace {
thread_local MacRecorder* t_recorder = nullptr;
}

void MacRecorder::push(std::string label) { stack_.push_back(std::move(label)); }

void MacRecorder::pop() {
  if (!stack_.empty()) stack_.pop_back();
}

std::string MacRecorder::current_path() const {
  std::string path;
  for (const auto& part : stack_) {
    if (!path.empty()) path += '.';
    path += part;
  }
  return path;
}

void MacRecorder::add(std::uint64_t macs) { tallies_[current_path()] += macs; }

std::uint64_t MacRecorder::total() const {
  std::uint64_t sum = 0;
  for (const auto& [path, macs] : tallies_) sum += macs;
  return sum;
}

MacRecorder* active_recorder() noexcept { return t_recorder; }

RecordingScope::RecordingScope(MacRecorder& recorder) noexcept : previous_(t_recorder) {
  t_recorder = &recorder;
}

RecordingScope::~RecordingScope() { t_recorder = previous_; }

LabelScope::LabelScope(const std::string& label) : recorder_(t_recorder) {
  if (recorder_) recorder_->push(label);
}

LabelScope::~LabelScope() {
  if (recorder_) recorder_->pop();
}

}  // namespace msnet::instrument

#pragma once

#include <Eigen/Dense>
#include <stdexcept>
#include <string>
#include <vector>

namespace metatest {

// Named slice of a flat parameter vector, viewed as a rows x cols matrix
// (column-major, matching Eigen's default).
struct ParamSegment {
  std::string name;
  int rows = 0;
  int cols = 0;
  int offset = 0;

  int size() const { return rows * cols; }
};

class ParamLayout {
 public:
  int add(std::string name, int rows, int cols) {
    if (rows <= 0 || cols <= 0)
      throw std::invalid_argument("ParamLayout: segment '" + name + "' has empty shape");
    for (const auto& s : segments_)
      if (s.name == name)
        throw std::invalid_argument("ParamLayout: duplicate segment name '" + name + "'");
    ParamSegment seg{std::move(name), rows, cols, total_};
    total_ += seg.size();
    segments_.push_back(std::move(seg));
    return static_cast<int>(segments_.size()) - 1;
  }

  const std::vector<ParamSegment>& segments() const { return segments_; }
  const ParamSegment& segment(int i) const { return segments_.at(i); }
  int segment_count() const { return static_cast<int>(segments_.size()); }
  int total_size() const { return total_; }

  int index_of(const std::string& name) const {
    for (int i = 0; i < segment_count(); ++i)
      if (segments_[i].name == name) return i;
    throw std::invalid_argument("ParamLayout: no segment named '" + name + "'");
  }

  bool operator==(const ParamLayout& other) const {
    if (segments_.size() != other.segments_.size()) return false;
    for (size_t i = 0; i < segments_.size(); ++i) {
      const auto& a = segments_[i];
      const auto& b = other.segments_[i];
      if (a.name != b.name || a.rows != b.rows || a.cols != b.cols) return false;
    }
    return true;
  }

 private:
  std::vector<ParamSegment> segments_;
  int total_ = 0;
};

// Flat f64 parameter vector plus the layout mapping slices to named matrices.
struct ParamVector {
  ParamLayout layout;
  Eigen::VectorXd values;

  static ParamVector zeros(ParamLayout l) {
    ParamVector p;
    p.values = Eigen::VectorXd::Zero(l.total_size());
    p.layout = std::move(l);
    return p;
  }

  Eigen::Map<const Eigen::MatrixXd> matrix(int seg) const {
    const auto& s = layout.segment(seg);
    return {values.data() + s.offset, s.rows, s.cols};
  }

  Eigen::Map<Eigen::MatrixXd> matrix(int seg) {
    const auto& s = layout.segment(seg);
    return {values.data() + s.offset, s.rows, s.cols};
  }

  Eigen::Map<const Eigen::MatrixXd> matrix(const std::string& name) const {
    return matrix(layout.index_of(name));
  }

  Eigen::Map<Eigen::MatrixXd> matrix(const std::string& name) {
    return matrix(layout.index_of(name));
  }

  bool all_finite() const { return values.allFinite(); }

  void require_finite(const char* where) const {
    if (!all_finite())
      throw std::runtime_error(std::string(where) + ": non-finite parameter value");
  }
};

}  // namespace metatest

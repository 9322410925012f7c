#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "fpo/autodiff.hpp"
#include "fpo/rng.hpp"
#include "fpo/tensor.hpp"

namespace fpo {

// Flat vector of trainable parameters plus the optimizer step counter.
// Segments give names and shapes to slices of the vector. Snapshots are
// plain copies and restore bit-exactly.
class ParamSet {
 public:
  struct Segment {
    std::string name;
    int offset = 0;
    int rows = 0;
    int cols = 0;
  };

  int add(const std::string& name, int rows, int cols) {
    Segment s;
    s.name = name;
    s.offset = static_cast<int>(values.size());
    s.rows = rows;
    s.cols = cols;
    segments_.push_back(s);
    values.resize(values.size() + static_cast<size_t>(rows) * cols, 0.0);
    return static_cast<int>(segments_.size()) - 1;
  }

  const Segment& segment(int id) const { return segments_[id]; }
  int num_segments() const { return static_cast<int>(segments_.size()); }

  Matrix segment_matrix(int id) const {
    const Segment& s = segments_[id];
    Matrix m(s.rows, s.cols);
    for (int i = 0; i < m.size(); ++i) m.data[i] = values[s.offset + i];
    return m;
  }

  void set_segment(int id, const Matrix& m) {
    const Segment& s = segments_[id];
    if (m.rows != s.rows || m.cols != s.cols) throw std::invalid_argument("set_segment: shape mismatch");
    for (int i = 0; i < m.size(); ++i) values[s.offset + i] = m.data[i];
  }

  std::vector<double> snapshot() const { return values; }

  void restore(const std::vector<double>& snap) {
    if (snap.size() != values.size()) throw std::invalid_argument("restore: size mismatch");
    values = snap;
  }

  std::vector<double> values;
  int64_t step = 0;

 private:
  std::vector<Segment> segments_;
};

enum class Activation { kTanh, kSwish };

inline const char* activation_name(Activation a) { return a == Activation::kTanh ? "tanh" : "swish"; }

inline Activation activation_from_name(const std::string& s) {
  if (s == "tanh") return Activation::kTanh;
  if (s == "swish") return Activation::kSwish;
  throw std::invalid_argument("unknown activation: " + s);
}

// Fills w (rows x cols) with a gain-scaled orthogonal matrix via
// Gram-Schmidt on the smaller side.
inline void orthogonal_init(Matrix* w, Rng& rng, double gain) {
  const int r = w->rows, c = w->cols;
  Matrix g(r, c);
  for (double& v : g.data) v = rng.normal();
  const bool by_cols = r >= c;
  const int nvec = by_cols ? c : r;
  const int dim = by_cols ? r : c;
  auto get = [&](int v, int i) -> double& { return by_cols ? g.at(i, v) : g.at(v, i); };
  for (int v = 0; v < nvec; ++v) {
    for (int u = 0; u < v; ++u) {
      double d = 0.0;
      for (int i = 0; i < dim; ++i) d += get(v, i) * get(u, i);
      for (int i = 0; i < dim; ++i) get(v, i) -= d * get(u, i);
    }
    double nrm = 0.0;
    for (int i = 0; i < dim; ++i) nrm += get(v, i) * get(v, i);
    nrm = std::sqrt(nrm);
    if (nrm < 1e-12) throw std::runtime_error("orthogonal_init: degenerate draw");
    for (int i = 0; i < dim; ++i) get(v, i) /= nrm;
  }
  for (double& v : g.data) v *= gain;
  *w = std::move(g);
}

// Fully connected network, sizes = [in, h1, ..., out]. Hidden layers use the
// configured activation; the output layer is linear. Parameters live in an
// externally owned ParamSet.
class Mlp {
 public:
  struct Leaves {
    std::vector<Tape::Ref> weights;
    std::vector<Tape::Ref> biases;
  };

  Mlp() = default;

  Mlp(std::vector<int> sizes, Activation act, ParamSet* params, const std::string& name)
      : sizes_(std::move(sizes)), act_(act) {
    if (sizes_.size() < 2) throw std::invalid_argument("Mlp: need at least input and output sizes");
    for (int s : sizes_) {
      if (s <= 0) throw std::invalid_argument("Mlp: non-positive layer size");
    }
    for (size_t l = 0; l + 1 < sizes_.size(); ++l) {
      w_ids_.push_back(params->add(name + ".W" + std::to_string(l), sizes_[l], sizes_[l + 1]));
      b_ids_.push_back(params->add(name + ".b" + std::to_string(l), 1, sizes_[l + 1]));
    }
  }

  const std::vector<int>& sizes() const { return sizes_; }
  Activation activation() const { return act_; }
  int input_dim() const { return sizes_.front(); }
  int output_dim() const { return sizes_.back(); }
  int num_layers() const { return static_cast<int>(w_ids_.size()); }

  // Orthogonal hidden layers (gain sqrt(2)), output layer scaled by
  // final_gain, zero biases.
  void init_params(ParamSet* params, Rng& rng, double final_gain) const {
    for (int l = 0; l < num_layers(); ++l) {
      Matrix w(sizes_[l], sizes_[l + 1]);
      const bool last = l + 1 == num_layers();
      orthogonal_init(&w, rng, last ? final_gain : std::sqrt(2.0));
      params->set_segment(w_ids_[l], w);
      params->set_segment(b_ids_[l], Matrix(1, sizes_[l + 1], 0.0));
    }
  }

  // Parameter leaves for one tape build; reused across forwards on the tape.
  Leaves leaves(Tape& tape, const ParamSet& params) const {
    Leaves lv;
    for (int l = 0; l < num_layers(); ++l) {
      lv.weights.push_back(tape.leaf(params.segment_matrix(w_ids_[l]), true));
      lv.biases.push_back(tape.leaf(params.segment_matrix(b_ids_[l]), true));
    }
    return lv;
  }

  Tape::Ref forward(Tape& tape, const Leaves& lv, Tape::Ref input) const {
    if (input.cols != input_dim()) throw std::invalid_argument("Mlp::forward: input width mismatch");
    tape.value(input).require_finite("Mlp::forward input");
    Tape::Ref x = input;
    for (int l = 0; l < num_layers(); ++l) {
      x = tape.add_rowvec(tape.matmul(x, lv.weights[l]), lv.biases[l]);
      if (l + 1 < num_layers()) {
        x = act_ == Activation::kTanh ? tape.tanh_of(x) : tape.swish_of(x);
      }
    }
    return x;
  }

  // Convenience: single forward pass, values only.
  Matrix forward_values(const ParamSet& params, const Matrix& input) const {
    Tape tape(false);
    Leaves lv = leaves(tape, params);
    Tape::Ref out = forward(tape, lv, tape.constant(input));
    return tape.value(out);
  }

  // Adds d(loss)/d(leaf) into the flat gradient vector (same layout as the
  // ParamSet this Mlp was registered in).
  void accumulate_grads(const Tape& tape, const Leaves& lv, const ParamSet& params,
                        std::vector<double>* flat) const {
    for (int l = 0; l < num_layers(); ++l) {
      add_segment_grad(tape, lv.weights[l], params.segment(w_ids_[l]), flat);
      add_segment_grad(tape, lv.biases[l], params.segment(b_ids_[l]), flat);
    }
  }

  static void add_segment_grad(const Tape& tape, Tape::Ref leaf, const ParamSet::Segment& seg,
                               std::vector<double>* flat) {
    Matrix g = tape.gradient(leaf);
    for (int i = 0; i < g.size(); ++i) (*flat)[seg.offset + i] += g.data[i];
  }

 private:
  std::vector<int> sizes_;
  Activation act_ = Activation::kTanh;
  std::vector<int> w_ids_;
  std::vector<int> b_ids_;
};

}  // namespace fpo

#pragma once

// Named parameter registry and the PTGC0001 checkpoint format:
//   "PTGC0001" then per parameter, until EOF:
//   u32 name length, name bytes, u32 rank, rank x u64 extents,
//   product(extents) x f64 values. All integers and floats little-endian.

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "ptgcn/tensor.hpp"

namespace ptgcn {

static_assert(std::endian::native == std::endian::little,
              "binary formats assume a little-endian host");

struct Parameter {
  std::string name;
  Tensor tensor;
  bool trainable = true;
};

class ParameterSet {
public:
  /// Registers a zero-initialized tensor and returns a handle sharing storage.
  Tensor add(const std::string &name, Shape shape, bool trainable = true) {
    if (index_.count(name))
      throw ContractError("duplicate parameter name '" + name + "'");
    Tensor t(std::move(shape), 0.0, trainable);
    index_[name] = params_.size();
    params_.push_back({name, t, trainable});
    return t;
  }

  /// Uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
  template <class Rng>
  Tensor add_xavier(const std::string &name, Shape shape, std::size_t fan_in,
                    std::size_t fan_out, Rng &rng) {
    Tensor t = add(name, std::move(shape));
    double a = std::sqrt(6.0 / double(fan_in + fan_out));
    std::uniform_real_distribution<double> dist(-a, a);
    for (auto &v : t.data())
      v = dist(rng);
    return t;
  }

  template <class Rng>
  Tensor add_normal(const std::string &name, Shape shape, double stddev,
                    Rng &rng) {
    Tensor t = add(name, std::move(shape));
    std::normal_distribution<double> dist(0.0, stddev);
    for (auto &v : t.data())
      v = dist(rng);
    return t;
  }

  const std::vector<Parameter> &all() const { return params_; }
  std::vector<Parameter> &all() { return params_; }

  const Parameter *find(const std::string &name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &params_[it->second];
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto &p : params_)
      n += p.tensor.size();
    return n;
  }

  void zero_grad() {
    for (auto &p : params_)
      p.tensor.zero_grad();
  }

  std::vector<std::vector<double>> snapshot() const {
    std::vector<std::vector<double>> s;
    for (const auto &p : params_)
      s.emplace_back(p.tensor.data().begin(), p.tensor.data().end());
    return s;
  }

  void restore(const std::vector<std::vector<double>> &s) {
    if (s.size() != params_.size())
      throw ShapeError("snapshot has wrong parameter count");
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (s[i].size() != params_[i].tensor.size())
        throw ShapeError("snapshot size mismatch for " + params_[i].name);
      std::copy(s[i].begin(), s[i].end(), params_[i].tensor.data().begin());
    }
  }

  void save(std::ostream &out) const {
    out.write("PTGC0001", 8);
    for (const auto &p : params_) {
      put<std::uint32_t>(out, static_cast<std::uint32_t>(p.name.size()));
      out.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
      put<std::uint32_t>(out, static_cast<std::uint32_t>(p.tensor.rank()));
      for (auto e : p.tensor.shape())
        put<std::uint64_t>(out, e);
      out.write(reinterpret_cast<const char *>(p.tensor.data().data()),
                static_cast<std::streamsize>(p.tensor.size() * sizeof(double)));
    }
    if (!out)
      throw Error("checkpoint write failed");
  }

  void save(const std::string &path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out)
      throw Error("cannot write checkpoint '" + path + "'");
    save(out);
  }

  /// Loads values into the registered parameters. The file must hold exactly
  /// the registered names with identical shapes.
  void load(std::istream &in) {
    char magic[8];
    if (!in.read(magic, 8) || std::memcmp(magic, "PTGC0001", 8) != 0)
      throw ValidationError("not a PTGC0001 checkpoint");
    std::map<std::string, bool> loaded;
    while (in.peek() != std::char_traits<char>::eof()) {
      auto len = get<std::uint32_t>(in);
      std::string name(len, '\0');
      in.read(name.data(), len);
      auto rank = get<std::uint32_t>(in);
      Shape shape(rank);
      for (auto &e : shape)
        e = static_cast<std::size_t>(get<std::uint64_t>(in));
      if (!in)
        throw ValidationError("truncated checkpoint");
      auto it = index_.find(name);
      if (it == index_.end())
        throw ValidationError("checkpoint parameter '" + name +
                              "' is not part of this model");
      auto &t = params_[it->second].tensor;
      if (t.shape() != shape)
        throw ShapeError("checkpoint parameter '" + name + "' has shape " +
                         shape_str(shape) + ", model expects " +
                         shape_str(t.shape()));
      in.read(reinterpret_cast<char *>(t.data().data()),
              static_cast<std::streamsize>(t.size() * sizeof(double)));
      if (!in)
        throw ValidationError("truncated checkpoint values for '" + name + "'");
      loaded[name] = true;
    }
    if (loaded.size() != params_.size())
      for (const auto &p : params_)
        if (!loaded.count(p.name))
          throw ValidationError("checkpoint lacks parameter '" + p.name + "'");
  }

  void load(const std::string &path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
      throw LookupError("cannot open checkpoint '" + path + "'");
    load(in);
  }

private:
  template <class T> static void put(std::ostream &out, T v) {
    out.write(reinterpret_cast<const char *>(&v), sizeof(T));
  }
  template <class T> static T get(std::istream &in) {
    T v{};
    in.read(reinterpret_cast<char *>(&v), sizeof(T));
    return v;
  }

  std::vector<Parameter> params_;
  std::map<std::string, std::size_t> index_;
};

} // namespace ptgcn

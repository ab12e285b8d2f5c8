#include "vdf/phantom.hpp"

#include <Eigen/Eigenvalues>
#include <Eigen/Geometry>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <random>
#include <set>
#include <sstream>

#include "json.hpp"
#include "vdf/nifti.hpp"
#include "vdf/random.hpp"

namespace vdf {

namespace {

constexpr double kDeg = 3.14159265358979323846 / 180.0;
constexpr double kTwoPi = 6.28318530717958647692;

std::string fmt_float(float v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", static_cast<double>(v));
  return buf;
}

Eigen::Matrix3d pose_matrix(const Eigen::Vector3d& deg) {
  return (Eigen::AngleAxisd(deg[0] * kDeg, Eigen::Vector3d::UnitX()) *
          Eigen::AngleAxisd(deg[1] * kDeg, Eigen::Vector3d::UnitY()) *
          Eigen::AngleAxisd(deg[2] * kDeg, Eigen::Vector3d::UnitZ()))
      .toRotationMatrix();
}

// Classifies voxels against a head frame and the face rule of a spec.
struct HeadModel {
  HeadFrame frame;
  Eigen::Vector3d spacing;
  const PhantomSpec& shape;

  // Head-normalised coordinates of a voxel.
  Eigen::Vector3d local(Index d, Index h, Index w) const {
    const Eigen::Vector3d idx(static_cast<double>(d), static_cast<double>(h), static_cast<double>(w));
    const Eigen::Vector3d mm = (idx - frame.centre).cwiseProduct(spacing);
    return (frame.axes.transpose() * mm).cwiseQuotient(frame.semi_mm);
  }

  double nose_distance(const Eigen::Vector3d& u) const {
    return (u - Eigen::Vector3d(shape.nose_centre[0], shape.nose_centre[1], 0.0)).norm();
  }
  bool in_head(const Eigen::Vector3d& u) const { return u.squaredNorm() <= 1.0; }
  bool in_nose(const Eigen::Vector3d& u) const { return nose_distance(u) <= shape.nose_radius; }
  bool foreground(const Eigen::Vector3d& u) const { return in_head(u) || in_nose(u); }

  bool in_face(const Eigen::Vector3d& u) const {
    if (u[1] <= 0.0) return false;  // never behind the coronal mid-plane
    if (nose_distance(u) <= shape.nose_radius + shape.dilation) return true;
    return u[1] - shape.face_slope * u[0] > shape.face_offset - shape.dilation;
  }
};

MaskVolume mask_from_model(const HeadModel& model, const Volume<float>& like) {
  MaskVolume m = like.like<std::uint8_t>(1);
  for (Index d = 0; d < m.dims.d; ++d)
    for (Index h = 0; h < m.dims.h; ++h)
      for (Index w = 0; w < m.dims.w; ++w) {
        const Eigen::Vector3d u = model.local(d, h, w);
        if (model.foreground(u) && model.in_face(u)) m.at(d, h, w) = 0;
      }
  return m;
}

void validate_spec(const PhantomSpec& s) {
  const Dims3& d = s.protocol.dims;
  if (d.d < 8 || d.h < 8 || d.w < 8) throw ConfigError("phantom dims must be at least 8 per axis");
  if (!(s.protocol.spacing.array() > 0.0f).all()) throw ConfigError("phantom spacing must be positive");
  if (!(s.radius_fraction.array() > 0.0).all() || !(s.radius_fraction.array() < 1.0).all())
    throw ConfigError("head radius fractions must lie in (0, 1)");
  if (!(s.nose_radius > 0.0) || !(s.dilation >= 0.0) || !(s.texture_amplitude >= 0.0))
    throw ConfigError("invalid face or texture parameters");
}

}  // namespace

std::string Protocol::id() const {
  return dims.str() + "@" + fmt_float(spacing[0]) + "x" + fmt_float(spacing[1]) + "x" + fmt_float(spacing[2]);
}

std::vector<Protocol> default_protocols(std::size_t count) {
  // Physical extents stay near 64-77 mm so the same anatomy fits every grid.
  std::vector<Protocol> table{
      {{32, 32, 32}, {2.0f, 2.0f, 2.0f}},        {{40, 48, 48}, {1.6f, 1.5f, 1.5f}},
      {{48, 48, 48}, {1.5f, 1.5f, 1.5f}},        {{48, 64, 48}, {1.5f, 1.2f, 1.5f}},
      {{56, 56, 56}, {1.25f, 1.25f, 1.25f}},     {{64, 64, 48}, {1.125f, 1.125f, 1.5f}},
      {{64, 64, 64}, {1.0f, 1.0f, 1.0f}},        {{72, 80, 72}, {1.0f, 0.875f, 1.0f}},
      {{80, 80, 64}, {0.875f, 0.875f, 1.125f}},  {{96, 96, 64}, {0.75f, 0.75f, 1.125f}},
  };
  if (count <= table.size()) {
    table.resize(count);
    return table;
  }
  std::set<std::string> seen;
  for (const auto& p : table) seen.insert(p.id());
  for (std::uint64_t k = 0; table.size() < count; ++k) {
    const std::uint64_t r = splitmix64(k);
    Dims3 d{32 + 8 * static_cast<Index>(r % 9), 32 + 8 * static_cast<Index>((r >> 8) % 9),
            32 + 8 * static_cast<Index>((r >> 16) % 9)};
    Protocol p{d, {}};
    for (int a = 0; a < 3; ++a)  // ~72 mm field of view, spacing on a 1/64 mm lattice
      p.spacing[a] = std::round(72.0f / static_cast<float>(d[a]) * 64.0f) / 64.0f;
    if (seen.insert(p.id()).second) table.push_back(p);
  }
  return table;
}

PhantomSpec PhantomSpec::sample(const Protocol& protocol, std::uint64_t seed) {
  PhantomSpec s;
  s.protocol = protocol;
  s.seed = seed;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  for (int a = 0; a < 3; ++a) s.radius_fraction[a] *= 1.0 + 0.05 * unit(rng);
  for (int a = 0; a < 3; ++a) s.centre_offset[a] = 0.03 * static_cast<double>(protocol.dims[a]) * unit(rng);
  for (int a = 0; a < 3; ++a) s.pose_deg[a] = 5.0 * unit(rng);
  s.nose_centre[0] += 0.05 * unit(rng);
  s.face_offset += 0.04 * unit(rng);
  return s;
}

HeadFrame head_frame(const PhantomSpec& spec) {
  const Dims3& d = spec.protocol.dims;
  const Eigen::Vector3d dims(static_cast<double>(d.d), static_cast<double>(d.h), static_cast<double>(d.w));
  HeadFrame f;
  f.centre = (dims - Eigen::Vector3d::Ones()) * 0.5 + spec.centre_offset;
  f.axes = pose_matrix(spec.pose_deg);
  f.semi_mm = spec.radius_fraction.cwiseProduct(dims.cwiseProduct(spec.protocol.spacing.cast<double>())) * 0.5;
  return f;
}

Phantom generate_phantom(const PhantomSpec& spec) {
  validate_spec(spec);
  const Dims3& dims = spec.protocol.dims;
  const HeadModel model{head_frame(spec), spec.protocol.spacing.cast<double>(), spec};

  // Low-frequency texture: a few random plane waves in head units.
  std::mt19937_64 rng(derive_seed(spec.seed, 0x7e47));
  std::uniform_real_distribution<double> freq(0.5, 2.0), phase(0.0, kTwoPi);
  std::normal_distribution<double> dir(0.0, 1.0);
  constexpr int kWaves = 4;
  std::array<Eigen::Vector3d, kWaves> k;
  std::array<double, kWaves> ph;
  for (int i = 0; i < kWaves; ++i) {
    Eigen::Vector3d v(dir(rng), dir(rng), dir(rng));
    k[static_cast<std::size_t>(i)] = v.normalized() * freq(rng) * kTwoPi;
    ph[static_cast<std::size_t>(i)] = phase(rng);
  }

  Phantom p;
  p.image = Volume<float>(dims, spec.protocol.spacing, 0.0f);
  Index margin = std::numeric_limits<Index>::max();
  for (Index d = 0; d < dims.d; ++d)
    for (Index h = 0; h < dims.h; ++h)
      for (Index w = 0; w < dims.w; ++w) {
        const Eigen::Vector3d u = model.local(d, h, w);
        if (!model.foreground(u)) continue;
        margin = std::min({margin, d, h, w, dims.d - 1 - d, dims.h - 1 - h, dims.w - 1 - w});
        const double r = u.norm();
        double base;
        if (!model.in_head(u))
          base = 0.5;  // nose
        else if (r > 0.9)
          base = 0.45;  // scalp
        else if (r > 0.8)
          base = 0.25;  // skull
        else if (r < 0.25)
          base = 0.6;  // ventricles
        else
          base = 0.8;  // brain
        double tex = 0.0;
        for (int i = 0; i < kWaves; ++i)
          tex += std::sin(k[static_cast<std::size_t>(i)].dot(u) + ph[static_cast<std::size_t>(i)]);
        const double value = base + spec.texture_amplitude * tex / kWaves;
        p.image.at(d, h, w) = static_cast<float>(std::clamp(value, 0.21, 1.0));
      }
  if (margin == std::numeric_limits<Index>::max()) throw ConfigError("phantom has no foreground");
  if (margin < 2)
    throw ConfigError("phantom head reaches within " + std::to_string(margin) + " voxels of the field-of-view border");
  p.mask = mask_from_model(model, p.image);
  return p;
}

MaskVolume oracle_deface(const Volume<float>& image, const PhantomSpec& spec) {
  validate_spec(spec);
  require_same_dims(image, spec.protocol.dims, "oracle_deface");
  const HeadModel model{head_frame(spec), image.spacing.cast<double>(), spec};
  return mask_from_model(model, image);
}

MaskVolume oracle_deface_estimated(const Volume<float>& image, const PhantomSpec& shape, double foreground_level) {
  image.validate();
  const Eigen::Vector3d spacing = image.spacing.cast<double>();
  Eigen::Vector3d sum = Eigen::Vector3d::Zero();
  Index count = 0;
  for (Index d = 0; d < image.dims.d; ++d)
    for (Index h = 0; h < image.dims.h; ++h)
      for (Index w = 0; w < image.dims.w; ++w)
        if (image.at(d, h, w) > foreground_level) {
          sum += Eigen::Vector3d(static_cast<double>(d), static_cast<double>(h), static_cast<double>(w));
          ++count;
        }
  if (count == 0) throw EmptyInputError("image has no foreground above " + std::to_string(foreground_level));
  const Eigen::Vector3d centroid = sum / static_cast<double>(count);
  Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
  for (Index d = 0; d < image.dims.d; ++d)
    for (Index h = 0; h < image.dims.h; ++h)
      for (Index w = 0; w < image.dims.w; ++w)
        if (image.at(d, h, w) > foreground_level) {
          const Eigen::Vector3d mm =
              (Eigen::Vector3d(static_cast<double>(d), static_cast<double>(h), static_cast<double>(w)) - centroid)
                  .cwiseProduct(spacing);
          cov += mm * mm.transpose();
        }
  cov /= static_cast<double>(count);

  // Principal axes, each matched to the voxel axis it is closest to.
  const Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> eig(cov);
  HeadFrame f;
  f.centre = centroid;
  f.axes = Eigen::Matrix3d::Identity();
  Eigen::Vector3d var = cov.diagonal();
  std::array<int, 3> owner{-1, -1, -1};
  for (int e = 0; e < 3; ++e) {
    Eigen::Index axis = 0;
    eig.eigenvectors().col(e).cwiseAbs().maxCoeff(&axis);
    owner[static_cast<std::size_t>(axis)] = e;
  }
  const bool distinct = owner[0] >= 0 && owner[1] >= 0 && owner[2] >= 0;
  if (distinct) {
    for (int a = 0; a < 3; ++a) {
      const int e = owner[static_cast<std::size_t>(a)];
      Eigen::Vector3d v = eig.eigenvectors().col(e);
      if (v[a] < 0) v = -v;
      f.axes.col(a) = v;
      var[a] = eig.eigenvalues()[e];
    }
  }
  // A solid ellipsoid has variance a^2 / 5 along a semi-axis of length a.
  f.semi_mm = (5.0 * var.cwiseMax(1e-12)).cwiseSqrt();

  const HeadModel model{f, spacing, shape};
  return mask_from_model(model, image);
}

// ---------------------------------------------------------------------------

std::string to_string(Split s) {
  switch (s) {
    case Split::Train:
      return "train";
    case Split::Val:
      return "val";
    case Split::Test:
      return "test";
  }
  return "train";
}

Split split_from_string(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "val") return Split::Val;
  if (s == "test") return Split::Test;
  throw ConfigError("unknown split '" + s + "' (expected train, val or test)");
}

SplitCounts split_counts(std::size_t protocols, double val_fraction, double test_fraction) {
  if (protocols < 3) throw ConfigError("at least 3 protocols are needed for disjoint train/val/test splits");
  if (!(val_fraction > 0 && test_fraction > 0 && val_fraction + test_fraction < 1))
    throw ConfigError("split fractions must be positive and leave room for training");
  const double n = static_cast<double>(protocols);
  SplitCounts c;
  c.val = std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(n * val_fraction + 1e-9)));
  c.test = std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(n * test_fraction + 1e-9)));
  if (c.val + c.test >= protocols) throw ConfigError("split fractions leave no training protocol");
  c.train = protocols - c.val - c.test;
  return c;
}

std::vector<ManifestRow> DatasetManifest::split(Split s) const {
  std::vector<ManifestRow> out;
  for (const auto& r : rows)
    if (r.split == s) out.push_back(r);
  return out;
}

std::vector<std::string> DatasetManifest::protocols(Split s) const {
  std::vector<std::string> out;
  for (const auto& r : rows)
    if (r.split == s && std::find(out.begin(), out.end(), r.protocol) == out.end()) out.push_back(r.protocol);
  return out;
}

std::string DatasetManifest::to_jsonl() const {
  std::string out;
  for (const auto& r : rows) {
    nlohmann::ordered_json j;
    j["id"] = r.id;
    j["image"] = r.image;
    j["mask"] = r.mask;
    j["protocol"] = r.protocol;
    j["split"] = to_string(r.split);
    j["seed"] = seed;
    out += j.dump() + "\n";
  }
  return out;
}

DatasetManifest DatasetManifest::from_jsonl(const std::string& text) {
  DatasetManifest m;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      ManifestRow r;
      r.id = j.at("id").get<std::string>();
      r.image = j.at("image").get<std::string>();
      r.mask = j.value("mask", std::string());
      r.protocol = j.at("protocol").get<std::string>();
      r.split = split_from_string(j.at("split").get<std::string>());
      m.seed = j.value("seed", std::uint64_t{0});
      m.rows.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("manifest line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return m;
}

DatasetManifest build_manifest(std::vector<ManifestRow> rows, std::uint64_t seed, const ManifestOptions& opt) {
  std::vector<std::string> protocols;
  for (const auto& r : rows)
    if (std::find(protocols.begin(), protocols.end(), r.protocol) == protocols.end()) protocols.push_back(r.protocol);
  std::sort(protocols.begin(), protocols.end());
  SplitCounts c;
  if (opt.counts) {
    c = *opt.counts;
    if (protocols.size() < 3) throw ConfigError("at least 3 protocols are needed for disjoint train/val/test splits");
    if (c.train + c.val + c.test != protocols.size() || c.train == 0 || c.val == 0 || c.test == 0)
      throw ConfigError("explicit split counts must be positive and sum to " + std::to_string(protocols.size()));
  } else {
    c = split_counts(protocols.size(), opt.val_fraction, opt.test_fraction);
  }
  std::mt19937_64 rng(seed);
  std::shuffle(protocols.begin(), protocols.end(), rng);
  std::map<std::string, Split> assign;
  for (std::size_t i = 0; i < protocols.size(); ++i)
    assign[protocols[i]] = i < c.train ? Split::Train : (i < c.train + c.val ? Split::Val : Split::Test);
  DatasetManifest m;
  m.seed = seed;
  for (auto& r : rows) r.split = assign.at(r.protocol);
  m.rows = std::move(rows);
  return m;
}

DatasetManifest make_corpus(const std::filesystem::path& root, const CorpusOptions& opt) {
  if (opt.count == 0) throw EmptyInputError("corpus needs at least one phantom");
  if (opt.protocols < 3) throw ConfigError("at least 3 protocols are needed for disjoint train/val/test splits");
  if (opt.count < opt.protocols) throw ConfigError("fewer phantoms than protocols");
  std::error_code ec;
  std::filesystem::create_directories(root / "images", ec);
  if (!ec) std::filesystem::create_directories(root / "masks", ec);
  if (ec) throw IoError("cannot create corpus directories under '" + root.string() + "': " + ec.message());

  const std::vector<Protocol> protocols = default_protocols(opt.protocols);
  std::vector<ManifestRow> rows(opt.count);
  std::vector<std::string> errors(opt.count);
  const long long n = static_cast<long long>(opt.count);
#pragma omp parallel for schedule(dynamic)
  for (long long i = 0; i < n; ++i) {
    const auto idx = static_cast<std::size_t>(i);
    try {
      const Protocol& proto = protocols[idx % protocols.size()];
      char id[32];
      std::snprintf(id, sizeof id, "ph%04zu", idx);
      const Phantom ph = generate_phantom(PhantomSpec::sample(proto, derive_seed(opt.seed, idx)));
      ManifestRow r{id, std::string("images/") + id + ".nii", std::string("masks/") + id + ".nii", proto.id(),
                    Split::Train};
      write_nifti(ph.image, root / r.image);
      write_nifti(ph.mask, root / r.mask);
      rows[idx] = std::move(r);
    } catch (const std::exception& e) {
      errors[idx] = e.what();
    }
  }
  for (std::size_t i = 0; i < errors.size(); ++i)
    if (!errors[i].empty()) {
      if (errors[i].rfind("i/o error", 0) == 0) throw IoError(errors[i].substr(11));
      throw ConfigError("phantom " + std::to_string(i) + ": " + errors[i]);
    }
  DatasetManifest m = build_manifest(std::move(rows), opt.seed, opt.manifest);
  const std::string text = m.to_jsonl();
  write_file_atomic(root / kManifestFile, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
  return m;
}

DatasetManifest read_manifest(const std::filesystem::path& root) {
  const auto bytes = read_file(root / kManifestFile);
  return DatasetManifest::from_jsonl(std::string(bytes.begin(), bytes.end()));
}

}  // namespace vdf

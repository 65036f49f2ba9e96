#include "crnkit/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include "crnkit/errors.hpp"
#include "crnkit/rng.hpp"

namespace crnkit::data {

namespace {

constexpr std::uint64_t kAlign = 8;

std::size_t dtype_size(Dtype d) { return d == Dtype::f32 ? 4 : 8; }

std::string dtype_name(Dtype d) { return d == Dtype::f32 ? "f32" : "f64"; }

Dtype dtype_from_name(const std::string& s) {
  if (s == "f32") return Dtype::f32;
  if (s == "f64") return Dtype::f64;
  throw FormatError("unknown dtype '" + s + "'");
}

std::size_t shape_count(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t e : s) n *= e;
  return n;
}

// Payload scalars are stored little-endian; this code targets little-endian
// hosts and memcpy's accordingly.
void append_f32(std::vector<unsigned char>& out, double v) {
  float f = static_cast<float>(v);
  unsigned char buf[4];
  std::memcpy(buf, &f, 4);
  out.insert(out.end(), buf, buf + 4);
}

void append_f64(std::vector<unsigned char>& out, double v) {
  unsigned char buf[8];
  std::memcpy(buf, &v, 8);
  out.insert(out.end(), buf, buf + 8);
}

}  // namespace

void FeatureBundle::add(const std::string& name, const Tensor& t, Dtype dtype) {
  if (name.empty() || name.find_first_of(" \t\n") != std::string::npos) {
    throw FormatError("bundle entry name '" + name + "' must be non-empty with no whitespace");
  }
  if (has(name)) throw FormatError("duplicate bundle entry '" + name + "'");
  while (payload_.size() % kAlign != 0) payload_.push_back(0);
  ManifestEntry e;
  e.name = name;
  e.dtype = dtype;
  e.shape = t.shape();
  e.offset = payload_.size();
  const double* p = t.data();
  payload_.reserve(payload_.size() + t.size() * dtype_size(dtype));
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (dtype == Dtype::f32)
      append_f32(payload_, p[i]);
    else
      append_f64(payload_, p[i]);
  }
  entries_.push_back(std::move(e));
}

bool FeatureBundle::has(const std::string& name) const {
  for (const auto& e : entries_)
    if (e.name == name) return true;
  return false;
}

const ManifestEntry& FeatureBundle::entry(const std::string& name) const {
  for (const auto& e : entries_)
    if (e.name == name) return e;
  throw FormatError("bundle has no entry '" + name + "'");
}

Tensor FeatureBundle::tensor(const std::string& name) const {
  const ManifestEntry& e = entry(name);
  const std::size_t count = shape_count(e.shape);
  const std::size_t bytes = count * dtype_size(e.dtype);
  if (e.offset + bytes > payload_.size()) {
    throw FormatError("bundle entry '" + name + "' extends past payload end");
  }
  std::vector<double> values(count);
  const unsigned char* base = payload_.data() + e.offset;
  if (e.dtype == Dtype::f32) {
    for (std::size_t i = 0; i < count; ++i) {
      float f;
      std::memcpy(&f, base + i * 4, 4);
      values[i] = static_cast<double>(f);
    }
  } else {
    for (std::size_t i = 0; i < count; ++i) {
      double v;
      std::memcpy(&v, base + i * 8, 8);
      values[i] = v;
    }
  }
  return Tensor::from(e.shape, std::move(values));
}

void FeatureBundle::add_raw(ManifestEntry entry) { entries_.push_back(std::move(entry)); }

void save_feature_bundle(const FeatureBundle& bundle, const std::filesystem::path& path) {
  std::ostringstream manifest;
  for (const auto& e : bundle.entries()) {
    manifest << e.name << ' ' << dtype_name(e.dtype) << ' ';
    for (std::size_t i = 0; i < e.shape.size(); ++i) {
      if (i) manifest << ',';
      manifest << e.shape[i];
    }
    if (e.shape.empty()) manifest << 1;
    manifest << ' ' << e.offset << '\n';
  }
  const std::string m = manifest.str();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << m.size() << '\n';
  out.write(m.data(), static_cast<std::streamsize>(m.size()));
  out.write(reinterpret_cast<const char*>(bundle.payload().data()),
            static_cast<std::streamsize>(bundle.payload().size()));
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

FeatureBundle load_feature_bundle(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::string len_line;
  if (!std::getline(in, len_line)) throw FormatError("missing manifest length line");
  std::size_t manifest_len = 0;
  try {
    std::size_t pos = 0;
    manifest_len = std::stoull(len_line, &pos);
    if (pos != len_line.size()) throw std::invalid_argument("");
  } catch (const std::exception&) {
    throw FormatError("manifest length line is not a decimal byte count");
  }
  std::string manifest(manifest_len, '\0');
  in.read(manifest.data(), static_cast<std::streamsize>(manifest_len));
  if (static_cast<std::size_t>(in.gcount()) != manifest_len) {
    throw FormatError("manifest truncated");
  }
  FeatureBundle bundle;
  std::vector<unsigned char>& payload = bundle.mutable_payload();
  {
    std::vector<char> buf(1 << 16);
    while (in.read(buf.data(), static_cast<std::streamsize>(buf.size())) || in.gcount() > 0) {
      payload.insert(payload.end(), buf.data(), buf.data() + in.gcount());
    }
  }
  std::set<std::string> seen;
  std::istringstream ms(manifest);
  std::string line;
  while (std::getline(ms, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    ManifestEntry e;
    std::string dtype, dims;
    if (!(ls >> e.name >> dtype >> dims >> e.offset)) {
      throw FormatError("malformed manifest line: '" + line + "'");
    }
    e.dtype = dtype_from_name(dtype);
    std::istringstream ds(dims);
    std::string dim;
    while (std::getline(ds, dim, ',')) {
      try {
        e.shape.push_back(std::stoull(dim));
      } catch (const std::exception&) {
        throw FormatError("entry '" + e.name + "' has malformed shape '" + dims + "'");
      }
    }
    if (e.shape.empty()) throw FormatError("entry '" + e.name + "' has empty shape");
    if (!seen.insert(e.name).second) throw FormatError("duplicate bundle entry '" + e.name + "'");
    if (e.offset % kAlign != 0) {
      throw FormatError("entry '" + e.name + "' offset is not 8-byte aligned");
    }
    const std::size_t bytes = shape_count(e.shape) * dtype_size(e.dtype);
    if (e.offset + bytes > payload.size()) {
      throw FormatError("entry '" + e.name + "' extends past payload end");
    }
    bundle.add_raw(std::move(e));
  }
  return bundle;
}

// ---- segmentation --------------------------------------------------------------

std::vector<std::vector<int>> segment_clips(int L, int N, int T) {
  if (L < 1 || N < 1 || T < 1) throw ConfigError("segment_clips: L, N, T must be positive");
  std::vector<std::vector<int>> clips(static_cast<std::size_t>(N));
  for (int i = 0; i < N; ++i) {
    const int anchor = static_cast<int>(std::floor((i + 0.5) * static_cast<double>(L) / N));
    const int lo = anchor - T / 2;
    std::vector<int>& w = clips[static_cast<std::size_t>(i)];
    w.reserve(static_cast<std::size_t>(T));
    for (int k = 0; k < T; ++k) w.push_back(std::clamp(lo + k, 0, L - 1));
  }
  return clips;
}

std::vector<std::pair<int, int>> segment_subtitles(int S, int M) {
  if (M < 1) throw ConfigError("segment_subtitles: M must be positive");
  if (S < M) {
    throw ConfigError("segment_subtitles: S=" + std::to_string(S) + " shorter than M=" +
                      std::to_string(M) + " segments");
  }
  const int len = S / M;
  const int stride = std::max(1, len / 2);
  std::vector<std::pair<int, int>> spans;
  spans.reserve(static_cast<std::size_t>(M));
  for (int i = 0; i < M; ++i) {
    const int start = std::min(i * stride, S - len);
    spans.emplace_back(start, start + len);
  }
  return spans;
}

Tensor project_features(const Tensor& raw, const Tensor& W) { return linear(raw, W); }

// ---- synthetic tasks -------------------------------------------------------------

std::string task_kind_name(TaskKind k) {
  switch (k) {
    case TaskKind::count: return "count";
    case TaskKind::transition: return "transition";
    case TaskKind::longform_choice: return "longform-choice";
  }
  throw ContractError("task_kind_name: bad enum");
}

TaskKind task_kind_from_name(const std::string& name) {
  if (name == "count") return TaskKind::count;
  if (name == "transition") return TaskKind::transition;
  if (name == "longform-choice") return TaskKind::longform_choice;
  throw ConfigError("unknown task kind '" + name + "'");
}

namespace {

void fill_noise(double* p, std::size_t n, double scale, Rng& rng) {
  for (std::size_t i = 0; i < n; ++i) p[i] = rng.uniform(-scale, scale);
}

std::vector<double> unit_vector(int d, Rng& rng) {
  std::vector<double> v(static_cast<std::size_t>(d));
  double norm = 0.0;
  for (double& x : v) {
    x = rng.uniform(-1.0, 1.0);
    norm += x * x;
  }
  norm = std::sqrt(norm);
  for (double& x : v) x /= norm;
  return v;
}

// Unit vector with all-positive entries. The transition task uses +u and -u
// as its two motifs so their order is recoverable from the coordinate sum.
std::vector<double> positive_unit_vector(int d, Rng& rng) {
  std::vector<double> v = unit_vector(d, rng);
  for (double& x : v) x = std::abs(x);
  return v;
}

// Orthonormal candidate set (Gram-Schmidt over fresh draws). Keeps wrong
// choices' inner products with the planted token near zero, so the stored
// label stays recoverable from features at any reasonable noise scale.
std::vector<std::vector<double>> orthonormal_set(int count, int d, Rng& rng) {
  std::vector<std::vector<double>> out;
  out.reserve(static_cast<std::size_t>(count));
  while (static_cast<int>(out.size()) < count) {
    std::vector<double> v = unit_vector(d, rng);
    for (const auto& u : out) {
      double proj = 0.0;
      for (int i = 0; i < d; ++i) proj += v[static_cast<std::size_t>(i)] * u[static_cast<std::size_t>(i)];
      for (int i = 0; i < d; ++i) v[static_cast<std::size_t>(i)] -= proj * u[static_cast<std::size_t>(i)];
    }
    double norm = 0.0;
    for (double x : v) norm += x * x;
    if (norm < 1e-6) continue;  // redraw a degenerate direction
    norm = std::sqrt(norm);
    for (double& x : v) x /= norm;
    out.push_back(std::move(v));
  }
  return out;
}

void check_spec_common(const SyntheticSpec& spec) {
  if (spec.samples < 1) throw ConfigError("synthetic spec: samples must be positive");
  if (spec.d < 2) throw ConfigError("synthetic spec: d must be at least 2");
  if (spec.noise < 0.0) throw ConfigError("synthetic spec: noise must be non-negative");
}

double dot(const double* a, const double* b, int d) {
  double acc = 0.0;
  for (int i = 0; i < d; ++i) acc += a[i] * b[i];
  return acc;
}

}  // namespace

FeatureBundle gen_count_task(const SyntheticSpec& spec) {
  check_spec_common(spec);
  if (spec.N < 1 || spec.T < 1) throw ConfigError("count task: N and T must be positive");
  if (spec.motif_lo < 0 || spec.motif_hi < spec.motif_lo ||
      spec.motif_hi > spec.N * spec.T) {
    throw ConfigError("count task: motif count range out of bounds");
  }
  const int S = spec.samples, N = spec.N, T = spec.T, d = spec.d;
  Rng rng(mix_seed(spec.seed, fnv1a64("count")));
  const std::vector<double> motif = unit_vector(d, rng);
  const std::vector<double> qvec = unit_vector(d, rng);
  Tensor appearance({static_cast<std::size_t>(S), static_cast<std::size_t>(N),
                     static_cast<std::size_t>(T), static_cast<std::size_t>(d)});
  Tensor motion({static_cast<std::size_t>(S), static_cast<std::size_t>(N),
                 static_cast<std::size_t>(d)});
  Tensor question({static_cast<std::size_t>(S), static_cast<std::size_t>(d)});
  Tensor labels({static_cast<std::size_t>(S)});
  double* ap = appearance.data();
  double* mp = motion.data();
  double* qp = question.data();
  double* lp = labels.data();
  const int frames = N * T;
  std::vector<int> order(static_cast<std::size_t>(frames));
  for (int s = 0; s < S; ++s) {
    double* sample = ap + static_cast<std::size_t>(s) * frames * d;
    fill_noise(sample, static_cast<std::size_t>(frames) * d, spec.noise, rng);
    const int c = static_cast<int>(rng.uniform_int(spec.motif_lo, spec.motif_hi));
    for (int i = 0; i < frames; ++i) order[static_cast<std::size_t>(i)] = i;
    for (int i = 0; i < c; ++i) {  // partial Fisher-Yates: first c slots are the planted frames
      const int j = i + static_cast<int>(rng.below(static_cast<std::uint64_t>(frames - i)));
      std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
    }
    for (int i = 0; i < c; ++i) {
      double* frame = sample + static_cast<std::size_t>(order[static_cast<std::size_t>(i)]) * d;
      for (int k = 0; k < d; ++k) frame[k] += motif[static_cast<std::size_t>(k)];
    }
    fill_noise(mp + static_cast<std::size_t>(s) * N * d, static_cast<std::size_t>(N) * d,
               spec.noise, rng);
    double* q = qp + static_cast<std::size_t>(s) * d;
    for (int k = 0; k < d; ++k) q[k] = qvec[static_cast<std::size_t>(k)];
    lp[s] = static_cast<double>(c);
  }
  FeatureBundle bundle;
  bundle.add("appearance", appearance);
  bundle.add("motion", motion);
  bundle.add("question", question);
  bundle.add("labels", labels);
  bundle.add("task_kind", Tensor::scalar(0.0));
  return bundle;
}

FeatureBundle gen_transition_task(const SyntheticSpec& spec) {
  check_spec_common(spec);
  if (spec.N < 1 || spec.T < 1 || spec.N * spec.T < 2) {
    throw ConfigError("transition task: need at least two frames");
  }
  const int S = spec.samples, N = spec.N, T = spec.T, d = spec.d;
  Rng rng(mix_seed(spec.seed, fnv1a64("transition")));
  const std::vector<double> motif_a = positive_unit_vector(d, rng);
  std::vector<double> motif_b = motif_a;
  for (double& x : motif_b) x = -x;
  const std::vector<double> qvec = unit_vector(d, rng);
  Tensor appearance({static_cast<std::size_t>(S), static_cast<std::size_t>(N),
                     static_cast<std::size_t>(T), static_cast<std::size_t>(d)});
  Tensor motion({static_cast<std::size_t>(S), static_cast<std::size_t>(N),
                 static_cast<std::size_t>(d)});
  Tensor question({static_cast<std::size_t>(S), static_cast<std::size_t>(d)});
  Tensor labels({static_cast<std::size_t>(S)});
  double* ap = appearance.data();
  double* lp = labels.data();
  const int frames = N * T;
  for (int s = 0; s < S; ++s) {
    double* sample = ap + static_cast<std::size_t>(s) * frames * d;
    fill_noise(sample, static_cast<std::size_t>(frames) * d, spec.noise, rng);
    int p1 = static_cast<int>(rng.below(static_cast<std::uint64_t>(frames)));
    int p2 = static_cast<int>(rng.below(static_cast<std::uint64_t>(frames - 1)));
    if (p2 >= p1) ++p2;
    if (p1 > p2) std::swap(p1, p2);
    const int swapped = static_cast<int>(rng.below(2));
    const std::vector<double>& first = swapped ? motif_b : motif_a;
    const std::vector<double>& second = swapped ? motif_a : motif_b;
    for (int k = 0; k < d; ++k) {
      sample[static_cast<std::size_t>(p1) * d + k] += first[static_cast<std::size_t>(k)];
      sample[static_cast<std::size_t>(p2) * d + k] += second[static_cast<std::size_t>(k)];
    }
    lp[s] = static_cast<double>(swapped);
  }
  fill_noise(motion.data(), motion.size(), spec.noise, rng);
  double* qp = question.data();
  for (int s = 0; s < S; ++s)
    for (int k = 0; k < d; ++k)
      qp[static_cast<std::size_t>(s) * d + k] = qvec[static_cast<std::size_t>(k)];
  FeatureBundle bundle;
  bundle.add("appearance", appearance);
  bundle.add("motion", motion);
  bundle.add("question", question);
  bundle.add("labels", labels);
  bundle.add("task_kind", Tensor::scalar(1.0));
  return bundle;
}

FeatureBundle gen_longform_task(const SyntheticSpec& spec) {
  check_spec_common(spec);
  if (spec.segments < 3) throw ConfigError("long-form task: need at least 3 segments");
  if (spec.segment_tokens < 1) throw ConfigError("long-form task: segment_tokens must be positive");
  if (spec.choices < 2) throw ConfigError("long-form task: need at least 2 choices");
  const int S = spec.samples, M = spec.segments, Ts = spec.segment_tokens, d = spec.d;
  const int A = spec.choices;
  Rng rng(mix_seed(spec.seed, fnv1a64("longform")));
  const std::vector<double> qvec = unit_vector(d, rng);
  Tensor segments({static_cast<std::size_t>(S), static_cast<std::size_t>(M),
                   static_cast<std::size_t>(Ts), static_cast<std::size_t>(d)});
  Tensor question({static_cast<std::size_t>(S), static_cast<std::size_t>(d)});
  Tensor choices({static_cast<std::size_t>(S), static_cast<std::size_t>(A),
                  static_cast<std::size_t>(d)});
  Tensor labels({static_cast<std::size_t>(S)});
  double* sp = segments.data();
  double* qp = question.data();
  double* cp = choices.data();
  double* lp = labels.data();
  for (int s = 0; s < S; ++s) {
    double* seg = sp + static_cast<std::size_t>(s) * M * Ts * d;
    fill_noise(seg, static_cast<std::size_t>(M) * Ts * d, spec.noise, rng);
    double* ch = cp + static_cast<std::size_t>(s) * A * d;
    const std::vector<std::vector<double>> cands = orthonormal_set(A, d, rng);
    for (int a = 0; a < A; ++a)
      for (int k = 0; k < d; ++k)
        ch[static_cast<std::size_t>(a) * d + k] = cands[static_cast<std::size_t>(a)][static_cast<std::size_t>(k)];
    const int label = static_cast<int>(rng.below(static_cast<std::uint64_t>(A)));
    const int seg_idx = static_cast<int>(rng.below(static_cast<std::uint64_t>(M)));
    const int tok_idx = static_cast<int>(rng.below(static_cast<std::uint64_t>(Ts)));
    // Planted token mixes the correct answer with the question so the
    // question-modulated pre-selection has signal to amplify.
    double* tok = seg + (static_cast<std::size_t>(seg_idx) * Ts + tok_idx) * d;
    for (int k = 0; k < d; ++k) {
      tok[k] += ch[static_cast<std::size_t>(label) * d + k] + 0.5 * qvec[static_cast<std::size_t>(k)];
    }
    double* q = qp + static_cast<std::size_t>(s) * d;
    for (int k = 0; k < d; ++k) q[k] = qvec[static_cast<std::size_t>(k)];
    lp[s] = static_cast<double>(label);
  }
  FeatureBundle bundle;
  bundle.add("segments", segments);
  bundle.add("question", question);
  bundle.add("choices", choices);
  bundle.add("labels", labels);
  bundle.add("task_kind", Tensor::scalar(2.0));
  return bundle;
}

FeatureBundle generate(const SyntheticSpec& spec) {
  switch (spec.kind) {
    case TaskKind::count: return gen_count_task(spec);
    case TaskKind::transition: return gen_transition_task(spec);
    case TaskKind::longform_choice: return gen_longform_task(spec);
  }
  throw ContractError("generate: bad enum");
}

TaskKind bundle_task(const FeatureBundle& bundle) {
  const double v = bundle.tensor("task_kind").value();
  if (v == 0.0) return TaskKind::count;
  if (v == 1.0) return TaskKind::transition;
  if (v == 2.0) return TaskKind::longform_choice;
  throw FormatError("bundle task_kind value out of range");
}

std::size_t bundle_samples(const FeatureBundle& bundle) {
  return bundle.tensor("labels").size();
}

double stored_label(const FeatureBundle& bundle, std::size_t sample) {
  Tensor labels = bundle.tensor("labels");
  if (sample >= labels.size()) throw IndexError("sample index out of range");
  return labels.data()[sample];
}

// Oracles recover the label from features alone. The planted motif dominates
// every inner product at the generators' noise scales, so a fixed 0.5
// threshold on <frame, motif-estimate> separates planted from noise frames.

int count_oracle(const FeatureBundle& bundle, std::size_t sample) {
  Tensor appearance = bundle.tensor("appearance");
  const std::size_t S = appearance.extent(0);
  if (sample >= S) throw IndexError("sample index out of range");
  const std::size_t N = appearance.extent(1), T = appearance.extent(2), d = appearance.extent(3);
  const int dd = static_cast<int>(d);
  const std::size_t frames = N * T;
  // The motif is the bundle-wide common direction of planted frames. Estimate
  // it as the largest-norm frame across this sample; count-0 samples have no
  // planted frame, so fall back on a cross-sample scan for a planted frame.
  std::vector<double> motif;
  double best_norm2 = 0.0;
  const double* base = appearance.data();
  for (std::size_t s2 = 0; s2 < S && motif.empty(); ++s2) {
    const std::size_t probe = (sample + s2) % S;
    const double* sdata = base + probe * frames * d;
    for (std::size_t f = 0; f < frames; ++f) {
      const double* frame = sdata + f * d;
      double n2 = dot(frame, frame, dd);
      if (n2 > best_norm2) best_norm2 = n2;
    }
    if (best_norm2 > 0.5) {  // a planted frame has norm^2 ~ 1, noise ~ d*noise^2
      for (std::size_t f = 0; f < frames; ++f) {
        const double* frame = sdata + f * d;
        if (dot(frame, frame, dd) == best_norm2) motif.assign(frame, frame + d);
      }
    }
    best_norm2 = 0.0;
  }
  if (motif.empty()) return 0;  // no planted frame anywhere: all labels are 0
  double inv = 1.0 / std::sqrt(dot(motif.data(), motif.data(), dd));
  for (double& x : motif) x *= inv;
  const double* sdata = base + sample * frames * d;
  int count = 0;
  for (std::size_t f = 0; f < frames; ++f) {
    if (dot(sdata + f * d, motif.data(), dd) > 0.5) ++count;
  }
  return count;
}

int transition_oracle(const FeatureBundle& bundle, std::size_t sample) {
  Tensor appearance = bundle.tensor("appearance");
  const std::size_t S = appearance.extent(0);
  if (sample >= S) throw IndexError("sample index out of range");
  const std::size_t N = appearance.extent(1), T = appearance.extent(2), d = appearance.extent(3);
  const int dd = static_cast<int>(d);
  const std::size_t frames = N * T;
  const double* sdata = appearance.data() + sample * frames * d;
  // The two planted frames are the two largest-norm frames. Motifs are +u and
  // -u with u elementwise positive, so the earlier planted frame's coordinate
  // sum tells which motif came first: positive means the in-order pattern.
  std::vector<std::pair<double, std::size_t>> norms;
  norms.reserve(frames);
  for (std::size_t f = 0; f < frames; ++f) {
    const double* fr = sdata + f * d;
    norms.emplace_back(dot(fr, fr, dd), f);
  }
  std::sort(norms.begin(), norms.end(), std::greater<>());
  std::size_t f1 = norms[0].second, f2 = norms[1].second;
  if (f1 > f2) std::swap(f1, f2);
  const double* first = sdata + f1 * d;
  double sum = 0.0;
  for (std::size_t k = 0; k < d; ++k) sum += first[k];
  return sum > 0.0 ? 0 : 1;
}

int longform_oracle(const FeatureBundle& bundle, std::size_t sample) {
  Tensor segments = bundle.tensor("segments");
  Tensor choices = bundle.tensor("choices");
  const std::size_t S = segments.extent(0);
  if (sample >= S) throw IndexError("sample index out of range");
  const std::size_t M = segments.extent(1), Ts = segments.extent(2), d = segments.extent(3);
  const std::size_t A = choices.extent(1);
  const int dd = static_cast<int>(d);
  const double* seg = segments.data() + sample * M * Ts * d;
  const double* ch = choices.data() + sample * A * d;
  double best = -1e300;
  int best_choice = 0;
  for (std::size_t a = 0; a < A; ++a) {
    double peak = -1e300;
    for (std::size_t t = 0; t < M * Ts; ++t) {
      peak = std::max(peak, dot(seg + t * d, ch + a * d, dd));
    }
    if (peak > best) {
      best = peak;
      best_choice = static_cast<int>(a);
    }
  }
  return best_choice;
}

int label_oracle(const FeatureBundle& bundle, std::size_t sample) {
  switch (bundle_task(bundle)) {
    case TaskKind::count: return count_oracle(bundle, sample);
    case TaskKind::transition: return transition_oracle(bundle, sample);
    case TaskKind::longform_choice: return longform_oracle(bundle, sample);
  }
  throw ContractError("label_oracle: bad enum");
}

}  // namespace crnkit::data

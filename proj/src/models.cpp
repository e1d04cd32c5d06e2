#include "phl/models.hpp"

#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include "phl/data.hpp"

namespace phl {

namespace {

Tensor glorot(Index fan_in, Index fan_out, Index rows, Index cols, std::mt19937_64& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor t(rows, cols);
  for (Index r = 0; r < rows; ++r) {
    for (Index c = 0; c < cols; ++c) t(r, c) = dist(rng);
  }
  return t;
}

NodeId bind(ExprGraph& graph, const Parameter& p, Bindings& bindings,
            std::vector<NodeId>& nodes) {
  const NodeId id = graph.input(p.name);
  bindings[p.name] = p.value;
  nodes.push_back(id);
  return id;
}

}  // namespace

std::string to_string(HeadKind kind) {
  switch (kind) {
    case HeadKind::None: return "none";
    case HeadKind::Linear: return "linear";
    case HeadKind::NonLinear: return "nonlinear";
    case HeadKind::FixedRandom: return "fixed-random";
    case HeadKind::FixedPretrained: return "fixed-pretrained";
    case HeadKind::DiagonalLowRank: return "diagonal";
    case HeadKind::PCALinear: return "pca";
  }
  return "?";
}

HeadKind parse_head_kind(const std::string& text) {
  for (HeadKind k : {HeadKind::None, HeadKind::Linear, HeadKind::NonLinear, HeadKind::FixedRandom,
                     HeadKind::FixedPretrained, HeadKind::DiagonalLowRank, HeadKind::PCALinear}) {
    if (to_string(k) == text) return k;
  }
  throw ConfigError("unknown head kind '" + text + "'");
}

bool is_linear_family(HeadKind kind) {
  return kind == HeadKind::Linear || kind == HeadKind::FixedRandom ||
         kind == HeadKind::FixedPretrained || kind == HeadKind::DiagonalLowRank ||
         kind == HeadKind::PCALinear;
}

Index parameter_count(const ParameterList& params) {
  Index n = 0;
  for (const auto& p : params) n += p.value.size();
  return n;
}

// Flat order: parameters in list order, each in row-major order.
Vector flatten(const ParameterList& params) {
  Vector flat(parameter_count(params));
  Index k = 0;
  for (const auto& p : params) {
    for (Index r = 0; r < p.value.rows(); ++r) {
      for (Index c = 0; c < p.value.cols(); ++c) flat(k++) = p.value(r, c);
    }
  }
  return flat;
}

void unflatten(ParameterList& params, const Vector& flat) {
  if (flat.size() != parameter_count(params)) {
    throw ShapeError("parameter load: expected " + std::to_string(parameter_count(params)) +
                     " values, got " + std::to_string(flat.size()));
  }
  Index k = 0;
  for (auto& p : params) {
    for (Index r = 0; r < p.value.rows(); ++r) {
      for (Index c = 0; c < p.value.cols(); ++c) p.value(r, c) = flat(k++);
    }
  }
}

std::uint64_t checksum(const ParameterList& params) {
  std::uint64_t h = 14695981039346656037ull;
  for (const auto& p : params) h = checksum(p.value, h);
  return h;
}

NodeId Encoder::build(ExprGraph& graph, NodeId x, Bindings& bindings,
                      std::vector<NodeId>& param_nodes) const {
  NodeId act = x;
  const std::size_t layers = sizes.size() - 1;
  for (std::size_t k = 0; k < layers; ++k) {
    const NodeId w = bind(graph, params[2 * k], bindings, param_nodes);
    act = graph.matmul(act, w);
    if (k + 1 < layers) {
      const NodeId b = bind(graph, params[2 * k + 1], bindings, param_nodes);
      act = graph.relu(graph.add(act, b));
    }
  }
  return act;
}

Tensor Encoder::features(const Tensor& x) const {
  if (x.cols() != input_dim()) {
    throw ShapeError("encoder: input has " + std::to_string(x.cols()) + " columns, expected " +
                     std::to_string(input_dim()));
  }
  Tensor act = x;
  const std::size_t layers = sizes.size() - 1;
  for (std::size_t k = 0; k < layers; ++k) {
    Tensor next;
    next.noalias() = act * params[2 * k].value;
    if (k + 1 < layers) {
      next.rowwise() += params[2 * k + 1].value.row(0);
      next = next.cwiseMax(0.0);
    }
    act = std::move(next);
  }
  return act;
}

Encoder init_encoder(std::span<const Index> sizes, std::uint64_t seed) {
  if (sizes.size() < 2) throw ConfigError("encoder: need at least two layer sizes");
  for (Index s : sizes) {
    if (s < 1) throw ConfigError("encoder: layer sizes must be positive");
  }
  Encoder enc;
  enc.sizes.assign(sizes.begin(), sizes.end());
  std::mt19937_64 rng(derive_seed(seed, 0xe4c));
  for (std::size_t k = 0; k + 1 < sizes.size(); ++k) {
    const Index in = sizes[k], out = sizes[k + 1];
    enc.params.push_back({"encoder.W" + std::to_string(k), glorot(in, out, in, out, rng)});
    if (k + 2 < sizes.size()) {
      enc.params.push_back({"encoder.b" + std::to_string(k), Tensor::Zero(1, out)});
    }
  }
  return enc;
}

const Tensor& Head::param(std::string_view name) const {
  for (const auto& p : params) {
    if (p.name == name) return p.value;
  }
  throw Error("head has no parameter " + std::string(name));
}

Tensor& Head::param(std::string_view name) {
  return const_cast<Tensor&>(static_cast<const Head&>(*this).param(name));
}

NodeId Head::build(ExprGraph& graph, NodeId h, Mode mode, Bindings& bindings,
                   std::vector<NodeId>& param_nodes, std::optional<NodeId>* bn_node) const {
  if (bn_node) bn_node->reset();
  switch (kind) {
    case HeadKind::None:
      return h;
    case HeadKind::DiagonalLowRank: {
      const NodeId a = bind(graph, params[0], bindings, param_nodes);
      return graph.matmul(h, graph.transpose(a));
    }
    case HeadKind::Linear:
    case HeadKind::FixedRandom:
    case HeadKind::FixedPretrained:
    case HeadKind::PCALinear: {
      const NodeId a = bind(graph, params[0], bindings, param_nodes);
      const NodeId b = bind(graph, params[1], bindings, param_nodes);
      return graph.add(graph.matmul(h, graph.transpose(a)), b);
    }
    case HeadKind::NonLinear: {
      std::size_t k = 0;
      const NodeId w1 = bind(graph, params[k++], bindings, param_nodes);
      NodeId act = graph.matmul(h, graph.transpose(w1));
      if (batchnorm) {
        const NodeId gamma = bind(graph, params[k++], bindings, param_nodes);
        const NodeId beta = bind(graph, params[k++], bindings, param_nodes);
        if (mode == Mode::Train) {
          act = graph.batchnorm(act, gamma, beta);
          if (bn_node) *bn_node = act;
        } else {
          act = graph.batchnorm(act, gamma, beta, graph.constant(running_mean),
                                graph.constant(running_var));
        }
      } else {
        act = graph.add(act, bind(graph, params[k++], bindings, param_nodes));
      }
      act = graph.relu(act);
      const NodeId w2 = bind(graph, params[k++], bindings, param_nodes);
      const NodeId b2 = bind(graph, params[k++], bindings, param_nodes);
      return graph.add(graph.matmul(act, graph.transpose(w2)), b2);
    }
  }
  throw Error("unreachable head kind");
}

Tensor Head::apply(const Tensor& h) const {
  if (h.cols() != in_dim) {
    throw ShapeError("head: input has " + std::to_string(h.cols()) + " columns, expected " +
                     std::to_string(in_dim));
  }
  ExprGraph graph;
  Bindings bindings;
  std::vector<NodeId> nodes;
  bindings["h"] = h;
  const NodeId out = build(graph, graph.input("h"), Mode::Eval, bindings, nodes);
  graph.forward(bindings);
  return graph.value(out);
}

std::optional<Tensor> Head::analysis_map() const {
  switch (kind) {
    case HeadKind::None: return std::nullopt;
    case HeadKind::NonLinear: return params[0].value;
    default: return params[0].value;
  }
}

void Head::update_running_stats(const RowVector& batch_mean, const RowVector& batch_var,
                                Index batch) {
  const double n = static_cast<double>(batch);
  const RowVector unbiased = batch > 1 ? RowVector(batch_var * (n / (n - 1.0))) : batch_var;
  running_mean = bn_momentum * running_mean + (1.0 - bn_momentum) * batch_mean;
  running_var = bn_momentum * running_var + (1.0 - bn_momentum) * unbiased;
}

Head init_head(HeadKind kind, Index m, Index d, std::optional<Index> hidden, std::uint64_t seed,
               bool batchnorm) {
  if (m < 1 || d < 1) throw ConfigError("head: dimensions must be positive");
  if (d > m) {
    throw ConfigError("head: output dimension d = " + std::to_string(d) +
                      " exceeds feature dimension m = " + std::to_string(m));
  }
  if (kind == HeadKind::NonLinear && (!hidden || *hidden < 1)) {
    throw ConfigError("head: nonlinear head requires a positive hidden dimension");
  }
  if (kind != HeadKind::NonLinear && hidden && *hidden != 0) {
    throw ConfigError("head: hidden dimension only applies to the nonlinear head");
  }
  Head head;
  head.kind = kind;
  head.in_dim = m;
  head.out_dim = kind == HeadKind::None ? m : d;
  head.trainable = kind == HeadKind::Linear || kind == HeadKind::NonLinear;
  std::mt19937_64 rng(derive_seed(seed, 0x4ead));
  switch (kind) {
    case HeadKind::None:
      break;
    case HeadKind::Linear:
    case HeadKind::FixedRandom:
    case HeadKind::FixedPretrained:
      head.params.push_back({"head.A", glorot(m, d, d, m, rng)});
      head.params.push_back({"head.b", Tensor::Zero(1, d)});
      break;
    case HeadKind::PCALinear:
      head.params.push_back({"head.A", Tensor::Identity(d, m)});
      head.params.push_back({"head.b", Tensor::Zero(1, d)});
      break;
    case HeadKind::DiagonalLowRank:
      head.params.push_back({"head.A", Tensor::Identity(d, m)});
      break;
    case HeadKind::NonLinear: {
      const Index hid = *hidden;
      head.hidden = hid;
      head.batchnorm = batchnorm;
      head.params.push_back({"head.W1", glorot(m, hid, hid, m, rng)});
      if (batchnorm) {
        head.params.push_back({"head.gamma", Tensor::Ones(1, hid)});
        head.params.push_back({"head.beta", Tensor::Zero(1, hid)});
        head.running_mean = RowVector::Zero(hid);
        head.running_var = RowVector::Ones(hid);
      } else {
        head.params.push_back({"head.b1", Tensor::Zero(1, hid)});
      }
      head.params.push_back({"head.W2", glorot(hid, d, d, hid, rng)});
      head.params.push_back({"head.b2", Tensor::Zero(1, d)});
      break;
    }
  }
  return head;
}

Vector head_parameters(const Head& head) { return flatten(head.params); }

void head_load(Head& head, const Vector& flat) { unflatten(head.params, flat); }

ForwardPass build_forward(const Encoder& encoder, const Head& head, const Tensor& x, Mode mode) {
  if (x.cols() != encoder.input_dim()) {
    throw ShapeError("forward: batch has " + std::to_string(x.cols()) + " columns, encoder expects " +
                     std::to_string(encoder.input_dim()));
  }
  if (head.in_dim != encoder.output_dim()) {
    throw ShapeError("forward: head expects m = " + std::to_string(head.in_dim) +
                     ", encoder produces " + std::to_string(encoder.output_dim()));
  }
  ForwardPass pass;
  pass.bindings["x"] = x;
  pass.x = pass.graph.input("x");
  pass.h = encoder.build(pass.graph, pass.x, pass.bindings, pass.encoder_nodes);
  pass.z = head.build(pass.graph, pass.h, mode, pass.bindings, pass.head_nodes, &pass.bn);
  return pass;
}

ForwardPass forward(const Encoder& encoder, const Head& head, const Tensor& x, Mode mode) {
  ForwardPass pass = build_forward(encoder, head, x, mode);
  pass.graph.forward(pass.bindings);
  return pass;
}

void save_checkpoint(const std::filesystem::path& dir, const Encoder& encoder, const Head& head) {
  std::filesystem::create_directories(dir);
  std::ostringstream manifest;
  manifest << "phl-checkpoint 1\n";
  manifest << "encoder.sizes";
  for (Index s : encoder.sizes) manifest << ' ' << s;
  manifest << "\nhead.kind " << to_string(head.kind) << "\n";
  manifest << "head.dims " << head.in_dim << ' ' << head.out_dim << ' ' << head.hidden << "\n";
  manifest << "head.trainable " << (head.trainable ? 1 : 0) << "\n";
  manifest << "head.batchnorm " << (head.batchnorm ? 1 : 0) << "\n";
  auto write = [&](const std::string& name, const Tensor& t) {
    const std::string file = name + ".pht";
    save_tensor(dir / file, t);
    manifest << "tensor " << name << ' ' << t.rows() << ' ' << t.cols() << ' ' << file << "\n";
  };
  for (const auto& p : encoder.params) write(p.name, p.value);
  for (const auto& p : head.params) write(p.name, p.value);
  if (head.kind == HeadKind::NonLinear && head.batchnorm) {
    write("head.running_mean", head.running_mean);
    write("head.running_var", head.running_var);
  }
  const auto tmp = dir / "manifest.txt.tmp";
  {
    std::ofstream os(tmp, std::ios::trunc);
    os << manifest.str();
    if (!os) throw FormatError("cannot write checkpoint manifest in " + dir.string());
  }
  std::filesystem::rename(tmp, dir / "manifest.txt");
}

Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream is(dir / "manifest.txt");
  if (!is) throw FormatError("no checkpoint manifest in " + dir.string());
  std::string line, key;
  std::getline(is, line);
  if (line != "phl-checkpoint 1") throw FormatError("unsupported checkpoint header: " + line);

  std::vector<Index> sizes;
  HeadKind kind = HeadKind::None;
  Index m = 0, d = 0, hidden = 0;
  bool trainable = false, batchnorm = true;
  std::map<std::string, Tensor> tensors;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    ls >> key;
    if (key == "encoder.sizes") {
      Index s;
      while (ls >> s) sizes.push_back(s);
    } else if (key == "head.kind") {
      std::string k;
      ls >> k;
      kind = parse_head_kind(k);
    } else if (key == "head.dims") {
      ls >> m >> d >> hidden;
    } else if (key == "head.trainable") {
      int t;
      ls >> t;
      trainable = t != 0;
    } else if (key == "head.batchnorm") {
      int b;
      ls >> b;
      batchnorm = b != 0;
    } else if (key == "tensor") {
      std::string name, file;
      Index rows, cols;
      ls >> name >> rows >> cols >> file;
      Tensor t = load_tensor(dir / file);
      if (t.rows() != rows || t.cols() != cols) {
        throw FormatError("checkpoint tensor " + name + " does not match its manifest shape");
      }
      tensors[name] = std::move(t);
    } else {
      throw FormatError("unknown checkpoint manifest key " + key);
    }
  }

  Checkpoint ck;
  ck.encoder = init_encoder(sizes, 0);
  for (auto& p : ck.encoder.params) {
    const auto it = tensors.find(p.name);
    if (it == tensors.end()) throw FormatError("checkpoint lacks " + p.name);
    require_same_shape(p.value, it->second, "checkpoint");
    p.value = it->second;
  }
  const std::optional<Index> hid =
      kind == HeadKind::NonLinear ? std::optional<Index>(hidden) : std::nullopt;
  ck.head = init_head(kind, m, kind == HeadKind::None ? m : d, hid, 0, batchnorm);
  ck.head.trainable = trainable;
  for (auto& p : ck.head.params) {
    const auto it = tensors.find(p.name);
    if (it == tensors.end()) throw FormatError("checkpoint lacks " + p.name);
    require_same_shape(p.value, it->second, "checkpoint");
    p.value = it->second;
  }
  if (kind == HeadKind::NonLinear && batchnorm) {
    ck.head.running_mean = tensors.at("head.running_mean").row(0);
    ck.head.running_var = tensors.at("head.running_var").row(0);
  }
  return ck;
}

}  // namespace phl

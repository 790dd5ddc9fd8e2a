#include "prunekit/engine.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "prunekit/errors.hpp"

namespace prunekit::engine {

namespace {

std::string where(std::size_t op_index, const ArchOp& op) {
  return "arch_graph op " + std::to_string(op_index) + " (" + to_string(op.kind) +
         (op.layer.empty() ? "" : " " + op.layer) + ")";
}

}  // namespace

Plan build_plan(const ArchGraph& graph, const std::vector<LayerTensor>& layers) {
  Plan plan;
  plan.input = graph.input;
  plan.num_classes = graph.num_classes;
  plan.layer_count = layers.size();
  plan.activation_op.assign(layers.size(), std::numeric_limits<std::size_t>::max());
  if (graph.input.size() == 0) throw ContractError("arch_graph: empty input shape");

  std::vector<int> uses(layers.size(), 0);
  Shape3 cur = graph.input;
  for (std::size_t i = 0; i < graph.ops.size(); ++i) {
    const ArchOp& op = graph.ops[i];
    PlannedOp p{op, 0, cur, cur};
    switch (op.kind) {
      case OpKind::conv2d:
      case OpKind::dense: {
        std::size_t li = layers.size();
        for (std::size_t k = 0; k < layers.size(); ++k)
          if (layers[k].name() == op.layer) li = k;
        if (li == layers.size()) throw ContractError(where(i, op) + ": unknown layer");
        const auto& layer = layers[li];
        p.layer_index = li;
        ++uses[li];
        const auto& s = layer.shape();
        if (op.kind == OpKind::conv2d) {
          if (layer.kind() != LayerKind::conv2d)
            throw ContractError(where(i, op) + ": layer is not conv2d");
          if (op.stride < 1 || op.pad < 0) throw ContractError(where(i, op) + ": bad stride/pad");
          if (s[1] != cur.c)
            throw ContractError(where(i, op) + ": expects " + std::to_string(s[1]) +
                                " input channels, got " + std::to_string(cur.c));
          const auto padded_h = static_cast<long>(cur.h) + 2 * op.pad;
          const auto padded_w = static_cast<long>(cur.w) + 2 * op.pad;
          if (padded_h < static_cast<long>(s[2]) || padded_w < static_cast<long>(s[3]))
            throw ContractError(where(i, op) + ": kernel larger than input");
          p.kernel_h = s[2];
          p.kernel_w = s[3];
          p.out = {s[0], static_cast<std::size_t>((padded_h - static_cast<long>(s[2])) / op.stride + 1),
                   static_cast<std::size_t>((padded_w - static_cast<long>(s[3])) / op.stride + 1)};
        } else {
          if (layer.kind() != LayerKind::dense)
            throw ContractError(where(i, op) + ": layer is not dense");
          if (s[1] != cur.size())
            throw ContractError(where(i, op) + ": expects " + std::to_string(s[1]) +
                                " inputs, got " + std::to_string(cur.size()));
          p.out = {s[0], 1, 1};
        }
        plan.activation_op[li] = i;
        break;
      }
      case OpKind::relu:
        break;
      case OpKind::maxpool:
        if (op.size < 1 || cur.h < static_cast<std::size_t>(op.size) ||
            cur.w < static_cast<std::size_t>(op.size))
          throw ContractError(where(i, op) + ": window does not fit");
        p.out = {cur.c, cur.h / op.size, cur.w / op.size};
        break;
      case OpKind::flatten:
        p.out = {cur.size(), 1, 1};
        break;
    }
    cur = p.out;
    plan.ops.push_back(std::move(p));
  }
  for (std::size_t k = 0; k < layers.size(); ++k)
    if (uses[k] != 1)
      throw ContractError("arch_graph must use layer " + layers[k].name() + " exactly once");
  if (cur.size() != graph.num_classes)
    throw ContractError("arch_graph output size " + std::to_string(cur.size()) +
                        " != num_classes " + std::to_string(graph.num_classes));
  for (std::size_t k = 0; k < layers.size(); ++k) {
    const auto op = plan.activation_op[k];
    if (op + 1 < plan.ops.size() && plan.ops[op + 1].op.kind == OpKind::relu)
      plan.activation_op[k] = op + 1;
  }
  return plan;
}

template <typename T>
Params<T> Params<T>::zeros_like(const Params& other) {
  Params out;
  for (const auto& w : other.weights) out.weights.emplace_back(w.size(), T(0));
  for (const auto& b : other.biases) out.biases.emplace_back(b.size(), T(0));
  return out;
}

template <typename T>
void Params<T>::add(const Params& other) {
  for (std::size_t l = 0; l < weights.size(); ++l) {
    for (std::size_t i = 0; i < weights[l].size(); ++i) weights[l][i] += other.weights[l][i];
    for (std::size_t i = 0; i < biases[l].size(); ++i) biases[l][i] += other.biases[l][i];
  }
}

template <typename T>
void Params<T>::scale(T factor) {
  for (auto& w : weights)
    for (auto& v : w) v *= factor;
  for (auto& b : biases)
    for (auto& v : b) v *= factor;
}

namespace {

template <typename T>
Params<T> masked_params_impl(const ModelSnapshot& model) {
  Params<T> p;
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    const auto eff = effective_weights(model.layers[l], model.masks[l]);
    p.weights.emplace_back(eff.begin(), eff.end());
    const auto bias = model.layers[l].bias();
    if (bias.empty())
      p.biases.emplace_back(model.layers[l].out_channels(), T(0));
    else
      p.biases.emplace_back(bias.begin(), bias.end());
  }
  return p;
}

template <typename T>
void conv_forward(const PlannedOp& p, const std::vector<T>& w, const std::vector<T>& b,
                  const T* in, T* out) {
  const auto& in_s = p.in;
  const auto& out_s = p.out;
  const std::size_t kernel_h = p.kernel_h;
  const std::size_t kernel_w = p.kernel_w;
  const long pad = p.op.pad;
  const long stride = p.op.stride;
  for (std::size_t oc = 0; oc < out_s.c; ++oc) {
    const T* wo = w.data() + oc * in_s.c * kernel_h * kernel_w;
    for (std::size_t oy = 0; oy < out_s.h; ++oy) {
      for (std::size_t ox = 0; ox < out_s.w; ++ox) {
        double acc = b[oc];
        for (std::size_t ic = 0; ic < in_s.c; ++ic) {
          const T* wi = wo + ic * kernel_h * kernel_w;
          const T* xi = in + ic * in_s.h * in_s.w;
          for (std::size_t ky = 0; ky < kernel_h; ++ky) {
            const long iy = static_cast<long>(oy) * stride + static_cast<long>(ky) - pad;
            if (iy < 0 || iy >= static_cast<long>(in_s.h)) continue;
            const T* row = xi + iy * static_cast<long>(in_s.w);
            const T* wrow = wi + ky * kernel_w;
            for (std::size_t kx = 0; kx < kernel_w; ++kx) {
              const long ix = static_cast<long>(ox) * stride + static_cast<long>(kx) - pad;
              if (ix < 0 || ix >= static_cast<long>(in_s.w)) continue;
              acc += static_cast<double>(wrow[kx]) * static_cast<double>(row[ix]);
            }
          }
        }
        out[(oc * out_s.h + oy) * out_s.w + ox] = static_cast<T>(acc);
      }
    }
  }
}

template <typename T>
void conv_backward(const PlannedOp& p, const std::vector<T>& w, const T* in, const T* dout,
                   std::vector<T>& dw, std::vector<T>& db, T* din) {
  const auto& in_s = p.in;
  const auto& out_s = p.out;
  const std::size_t kernel_h = p.kernel_h;
  const std::size_t kernel_w = p.kernel_w;
  const long pad = p.op.pad;
  const long stride = p.op.stride;
  for (std::size_t oc = 0; oc < out_s.c; ++oc) {
    const std::size_t wbase = oc * in_s.c * kernel_h * kernel_w;
    for (std::size_t oy = 0; oy < out_s.h; ++oy) {
      for (std::size_t ox = 0; ox < out_s.w; ++ox) {
        const T g = dout[(oc * out_s.h + oy) * out_s.w + ox];
        if (g == T(0)) continue;
        db[oc] += g;
        for (std::size_t ic = 0; ic < in_s.c; ++ic) {
          const std::size_t wb = wbase + ic * kernel_h * kernel_w;
          const std::size_t xb = ic * in_s.h * in_s.w;
          for (std::size_t ky = 0; ky < kernel_h; ++ky) {
            const long iy = static_cast<long>(oy) * stride + static_cast<long>(ky) - pad;
            if (iy < 0 || iy >= static_cast<long>(in_s.h)) continue;
            for (std::size_t kx = 0; kx < kernel_w; ++kx) {
              const long ix = static_cast<long>(ox) * stride + static_cast<long>(kx) - pad;
              if (ix < 0 || ix >= static_cast<long>(in_s.w)) continue;
              const std::size_t xi = xb + static_cast<std::size_t>(iy) * in_s.w + static_cast<std::size_t>(ix);
              const std::size_t wi = wb + ky * kernel_w + kx;
              dw[wi] += g * in[xi];
              if (din) din[xi] += g * w[wi];
            }
          }
        }
      }
    }
  }
}

template <typename T>
double softmax_xent(std::span<const T> z, std::size_t label, T* dz) {
  double m = -std::numeric_limits<double>::infinity();
  for (auto v : z) m = std::max(m, static_cast<double>(v));
  double sum = 0.0;
  for (auto v : z) sum += std::exp(static_cast<double>(v) - m);
  const double lse = m + std::log(sum);
  if (dz) {
    for (std::size_t j = 0; j < z.size(); ++j)
      dz[j] = static_cast<T>(std::exp(static_cast<double>(z[j]) - lse) - (j == label ? 1.0 : 0.0));
  }
  return lse - static_cast<double>(z[label]);
}

}  // namespace

Params<float> masked_params(const ModelSnapshot& model) { return masked_params_impl<float>(model); }
Params<double> masked_params_f64(const ModelSnapshot& model) {
  return masked_params_impl<double>(model);
}

template <typename T>
void forward(const Plan& plan, const Params<T>& params, std::span<const float> input,
             Tape<T>& tape) {
  if (input.size() != plan.input.size())
    throw ContractError("forward: input has " + std::to_string(input.size()) + " values, expected " +
                        std::to_string(plan.input.size()));
  tape.values.resize(plan.ops.size() + 1);
  tape.argmax.resize(plan.ops.size());
  tape.values[0].assign(input.begin(), input.end());
  for (std::size_t i = 0; i < plan.ops.size(); ++i) {
    const PlannedOp& p = plan.ops[i];
    const auto& in = tape.values[i];
    auto& out = tape.values[i + 1];
    out.resize(p.out.size());
    switch (p.op.kind) {
      case OpKind::conv2d:
        conv_forward(p, params.weights[p.layer_index], params.biases[p.layer_index], in.data(),
                     out.data());
        break;
      case OpKind::dense: {
        const auto& w = params.weights[p.layer_index];
        const auto& b = params.biases[p.layer_index];
        const std::size_t n_in = in.size();
        for (std::size_t o = 0; o < out.size(); ++o) {
          double acc = b[o];
          const T* row = w.data() + o * n_in;
          for (std::size_t k = 0; k < n_in; ++k)
            acc += static_cast<double>(row[k]) * static_cast<double>(in[k]);
          out[o] = static_cast<T>(acc);
        }
        break;
      }
      case OpKind::relu:
        for (std::size_t k = 0; k < in.size(); ++k) out[k] = in[k] > T(0) ? in[k] : T(0);
        break;
      case OpKind::maxpool: {
        auto& arg = tape.argmax[i];
        arg.resize(out.size());
        const std::size_t k = static_cast<std::size_t>(p.op.size);
        for (std::size_t c = 0; c < p.out.c; ++c)
          for (std::size_t oy = 0; oy < p.out.h; ++oy)
            for (std::size_t ox = 0; ox < p.out.w; ++ox) {
              std::size_t best = (c * p.in.h + oy * k) * p.in.w + ox * k;
              for (std::size_t dy = 0; dy < k; ++dy)
                for (std::size_t dx = 0; dx < k; ++dx) {
                  const std::size_t idx = (c * p.in.h + oy * k + dy) * p.in.w + ox * k + dx;
                  if (in[idx] > in[best]) best = idx;
                }
              const std::size_t o = (c * p.out.h + oy) * p.out.w + ox;
              out[o] = in[best];
              arg[o] = static_cast<std::uint32_t>(best);
            }
        break;
      }
      case OpKind::flatten:
        std::copy(in.begin(), in.end(), out.begin());
        break;
    }
  }
}

template <typename T>
double backward(const Plan& plan, const Params<T>& params, Tape<T>& tape, std::size_t label,
                Params<T>& grad) {
  const std::size_t n = plan.ops.size();
  if (label >= plan.num_classes) throw ContractError("backward: label out of range");
  tape.grads.resize(n + 1);
  for (std::size_t i = 0; i <= n; ++i) tape.grads[i].assign(tape.values[i].size(), T(0));
  const double loss = softmax_xent<T>(tape.values[n], label, tape.grads[n].data());
  for (std::size_t i = n; i-- > 0;) {
    const PlannedOp& p = plan.ops[i];
    const auto& in = tape.values[i];
    const auto& dout = tape.grads[i + 1];
    auto& din = tape.grads[i];
    // The network input needs no gradient.
    const bool want_din = i > 0;
    switch (p.op.kind) {
      case OpKind::conv2d:
        conv_backward(p, params.weights[p.layer_index], in.data(), dout.data(),
                      grad.weights[p.layer_index], grad.biases[p.layer_index],
                      want_din ? din.data() : nullptr);
        break;
      case OpKind::dense: {
        const auto& w = params.weights[p.layer_index];
        auto& dw = grad.weights[p.layer_index];
        auto& db = grad.biases[p.layer_index];
        const std::size_t n_in = in.size();
        for (std::size_t o = 0; o < dout.size(); ++o) {
          const T g = dout[o];
          if (g == T(0)) continue;
          db[o] += g;
          T* dwr = dw.data() + o * n_in;
          const T* wr = w.data() + o * n_in;
          for (std::size_t k = 0; k < n_in; ++k) dwr[k] += g * in[k];
          if (want_din)
            for (std::size_t k = 0; k < n_in; ++k) din[k] += g * wr[k];
        }
        break;
      }
      case OpKind::relu:
        for (std::size_t k = 0; k < in.size(); ++k) din[k] = in[k] > T(0) ? dout[k] : T(0);
        break;
      case OpKind::maxpool: {
        const auto& arg = tape.argmax[i];
        for (std::size_t o = 0; o < dout.size(); ++o) din[arg[o]] += dout[o];
        break;
      }
      case OpKind::flatten:
        std::copy(dout.begin(), dout.end(), din.begin());
        break;
    }
  }
  return loss;
}

double cross_entropy(std::span<const float> z, std::size_t label) {
  return softmax_xent<float>(z, label, nullptr);
}
double cross_entropy(std::span<const double> z, std::size_t label) {
  return softmax_xent<double>(z, label, nullptr);
}

template <typename T>
std::size_t argmax(std::span<const T> values) {
  std::size_t best = 0;
  for (std::size_t j = 1; j < values.size(); ++j)
    if (values[j] > values[best]) best = j;
  return best;
}

template <typename T>
bool in_top_k(std::span<const T> values, std::size_t label, std::size_t k) {
  // Count classes ranked strictly ahead of the label.
  std::size_t ahead = 0;
  for (std::size_t j = 0; j < values.size(); ++j) {
    if (j == label) continue;
    if (values[j] > values[label] || (values[j] == values[label] && j < label)) ++ahead;
  }
  return ahead < k;
}

template struct Params<float>;
template struct Params<double>;
template void forward<float>(const Plan&, const Params<float>&, std::span<const float>, Tape<float>&);
template void forward<double>(const Plan&, const Params<double>&, std::span<const float>, Tape<double>&);
template double backward<float>(const Plan&, const Params<float>&, Tape<float>&, std::size_t, Params<float>&);
template double backward<double>(const Plan&, const Params<double>&, Tape<double>&, std::size_t, Params<double>&);
template std::size_t argmax<float>(std::span<const float>);
template std::size_t argmax<double>(std::span<const double>);
template bool in_top_k<float>(std::span<const float>, std::size_t, std::size_t);
template bool in_top_k<double>(std::span<const double>, std::size_t, std::size_t);

}  // namespace prunekit::engine

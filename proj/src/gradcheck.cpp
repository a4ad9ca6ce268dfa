#include "idproxy/gradcheck.hpp"

#include <algorithm>
#include <memory>
#include <numeric>

namespace idproxy::nn {

GradReport grad_check_case(const std::string& name, const KernelCase& kc, Rng& rng,
                           double eps, double tolerance, int max_coords_per_input) {
  for (const auto& t : kc.inputs)
    for (double v : t.data)
      if (!std::isfinite(v)) fail(ErrClass::numeric, name + ": non-finite check point");

  const std::vector<TensorD> analytic = kc.backward(kc.inputs);
  if (analytic.size() != kc.inputs.size())
    fail(ErrClass::internal, name + ": backward returned wrong arity");

  std::vector<TensorD> point = kc.inputs;
  double max_err = 0.0;
  for (size_t ti = 0; ti < point.size(); ++ti) {
    auto& data = point[ti].data;
    std::vector<size_t> coords(data.size());
    std::iota(coords.begin(), coords.end(), size_t{0});
    if (max_coords_per_input > 0 &&
        data.size() > static_cast<size_t>(max_coords_per_input)) {
      // Fisher-Yates prefix: deterministic coordinate sample.
      for (int i = 0; i < max_coords_per_input; ++i) {
        const size_t j =
            static_cast<size_t>(i) +
            static_cast<size_t>(rng.uniform_int(static_cast<int64_t>(data.size() - i)));
        std::swap(coords[static_cast<size_t>(i)], coords[j]);
      }
      coords.resize(static_cast<size_t>(max_coords_per_input));
    }
    for (size_t c : coords) {
      const double saved = data[c];
      data[c] = saved + eps;
      const double fp = kc.forward(point);
      data[c] = saved - eps;
      const double fm = kc.forward(point);
      data[c] = saved;
      const double numeric = (fp - fm) / (2.0 * eps);
      if (!std::isfinite(numeric)) fail(ErrClass::numeric, name + ": non-finite difference");
      max_err = std::max(max_err, rel_err(analytic[ti].data[c], numeric));
    }
  }
  GradReport rep;
  rep.op_name = name;
  rep.max_rel_err = max_err;
  rep.tolerance = tolerance;
  rep.passed = max_err <= tolerance;
  return rep;
}

GradReport grad_check(const std::string& kernel, Rng& rng, double eps, double tolerance) {
  const auto& factory = KernelRegistry::builtin().get(kernel);
  KernelCase kc = factory(rng);
  return grad_check_case(kernel, kc, rng, eps, tolerance);
}

namespace {

TensorD random_tensor(Rng& rng, int64_t r, int64_t c, double scale = 1.0) {
  TensorD t({r, c});
  for (auto& v : t.data) v = rng.normal() * scale;
  return t;
}

// Wraps a matrix-output kernel into a scalar function via a random cotangent.
struct Cotangent {
  MatD c;
  double reduce(const MatD& y) const { return (y.array() * c.array()).sum(); }
};

KernelCase make_matmul_case(Rng& rng) {
  const int64_t m = 3, k = 4, n = 2;
  KernelCase kc;
  kc.inputs = {random_tensor(rng, m, k), random_tensor(rng, k, n)};
  auto ct = std::make_shared<Cotangent>(Cotangent{random_tensor(rng, m, n).mat()});
  kc.forward = [ct](const std::vector<TensorD>& in) {
    return ct->reduce(matmul<double>(in[0].mat(), in[1].mat()));
  };
  kc.backward = [ct](const std::vector<TensorD>& in) {
    MatD da, db;
    matmul_backward<double>(in[0].mat(), in[1].mat(), ct->c, da, db);
    return std::vector<TensorD>{TensorD::from_mat(da), TensorD::from_mat(db)};
  };
  return kc;
}

KernelCase make_add_case(Rng& rng) {
  KernelCase kc;
  kc.inputs = {random_tensor(rng, 3, 5), random_tensor(rng, 3, 5)};
  auto ct = std::make_shared<Cotangent>(Cotangent{random_tensor(rng, 3, 5).mat()});
  kc.forward = [ct](const std::vector<TensorD>& in) {
    return ct->reduce(add<double>(in[0].mat(), in[1].mat()));
  };
  kc.backward = [ct](const std::vector<TensorD>& in) {
    (void)in;
    return std::vector<TensorD>{TensorD::from_mat(ct->c), TensorD::from_mat(ct->c)};
  };
  return kc;
}

KernelCase make_add_bias_case(Rng& rng) {
  KernelCase kc;
  kc.inputs = {random_tensor(rng, 4, 6), random_tensor(rng, 1, 6)};
  auto ct = std::make_shared<Cotangent>(Cotangent{random_tensor(rng, 4, 6).mat()});
  kc.forward = [ct](const std::vector<TensorD>& in) {
    VecD b = in[1].mat().row(0).transpose();
    return ct->reduce(add_bias<double>(in[0].mat(), b));
  };
  kc.backward = [ct](const std::vector<TensorD>& in) {
    (void)in;
    VecD db = add_bias_backward_bias<double>(ct->c);
    MatD dbm(1, db.size());
    dbm.row(0) = db.transpose();
    return std::vector<TensorD>{TensorD::from_mat(ct->c), TensorD::from_mat(dbm)};
  };
  return kc;
}

KernelCase make_concat_case(Rng& rng) {
  KernelCase kc;
  kc.inputs = {random_tensor(rng, 3, 2), random_tensor(rng, 3, 4), random_tensor(rng, 3, 1)};
  auto ct = std::make_shared<Cotangent>(Cotangent{random_tensor(rng, 3, 7).mat()});
  kc.forward = [ct](const std::vector<TensorD>& in) {
    MatD a = in[0].mat(), b = in[1].mat(), c = in[2].mat();
    return ct->reduce(concat_cols<double>({&a, &b, &c}));
  };
  kc.backward = [ct](const std::vector<TensorD>& in) {
    std::vector<TensorD> grads;
    Eigen::Index at = 0;
    for (const auto& t : in) {
      grads.push_back(TensorD::from_mat(ct->c.middleCols(at, t.cols())));
      at += t.cols();
    }
    return grads;
  };
  return kc;
}

KernelCase make_softmax_case(Rng& rng) {
  KernelCase kc;
  kc.inputs = {random_tensor(rng, 3, 6)};
  auto ct = std::make_shared<Cotangent>(Cotangent{random_tensor(rng, 3, 6).mat()});
  kc.forward = [ct](const std::vector<TensorD>& in) {
    return ct->reduce(softmax_rows<double>(in[0].mat()));
  };
  kc.backward = [ct](const std::vector<TensorD>& in) {
    const MatD y = softmax_rows<double>(in[0].mat());
    return std::vector<TensorD>{TensorD::from_mat(softmax_rows_backward<double>(y, ct->c))};
  };
  return kc;
}

KernelCase make_log_softmax_case(Rng& rng) {
  KernelCase kc;
  kc.inputs = {random_tensor(rng, 3, 6)};
  auto ct = std::make_shared<Cotangent>(Cotangent{random_tensor(rng, 3, 6).mat()});
  kc.forward = [ct](const std::vector<TensorD>& in) {
    return ct->reduce(log_softmax_rows<double>(in[0].mat()));
  };
  kc.backward = [ct](const std::vector<TensorD>& in) {
    const MatD y = log_softmax_rows<double>(in[0].mat());
    return std::vector<TensorD>{
        TensorD::from_mat(log_softmax_rows_backward<double>(y, ct->c))};
  };
  return kc;
}

KernelCase make_sigmoid_case(Rng& rng) {
  KernelCase kc;
  kc.inputs = {random_tensor(rng, 3, 5, 2.0)};
  auto ct = std::make_shared<Cotangent>(Cotangent{random_tensor(rng, 3, 5).mat()});
  kc.forward = [ct](const std::vector<TensorD>& in) {
    return ct->reduce(sigmoid<double>(in[0].mat()));
  };
  kc.backward = [ct](const std::vector<TensorD>& in) {
    const MatD y = sigmoid<double>(in[0].mat());
    return std::vector<TensorD>{TensorD::from_mat(sigmoid_backward<double>(y, ct->c))};
  };
  return kc;
}

KernelCase make_relu_case(Rng& rng) {
  KernelCase kc;
  TensorD x = random_tensor(rng, 3, 5);
  // Keep entries away from the kink, where the derivative is undefined.
  for (auto& v : x.data)
    if (std::fabs(v) < 1e-3) v = v < 0 ? v - 1e-3 : v + 1e-3;
  kc.inputs = {std::move(x)};
  auto ct = std::make_shared<Cotangent>(Cotangent{random_tensor(rng, 3, 5).mat()});
  kc.forward = [ct](const std::vector<TensorD>& in) {
    return ct->reduce(relu<double>(in[0].mat()));
  };
  kc.backward = [ct](const std::vector<TensorD>& in) {
    return std::vector<TensorD>{TensorD::from_mat(relu_backward<double>(in[0].mat(), ct->c))};
  };
  return kc;
}

KernelCase make_layer_norm_case(Rng& rng) {
  KernelCase kc;
  TensorD gamma = random_tensor(rng, 1, 6, 0.5);
  for (auto& v : gamma.data) v += 1.0;
  kc.inputs = {random_tensor(rng, 3, 6), std::move(gamma), random_tensor(rng, 1, 6, 0.5)};
  auto ct = std::make_shared<Cotangent>(Cotangent{random_tensor(rng, 3, 6).mat()});
  kc.forward = [ct](const std::vector<TensorD>& in) {
    VecD g = in[1].mat().row(0).transpose(), b = in[2].mat().row(0).transpose();
    return ct->reduce(layer_norm<double>(in[0].mat(), g, b));
  };
  kc.backward = [ct](const std::vector<TensorD>& in) {
    VecD g = in[1].mat().row(0).transpose(), b = in[2].mat().row(0).transpose();
    LayerNormCache<double> cache;
    layer_norm<double>(in[0].mat(), g, b, &cache);
    MatD dx;
    VecD dgamma, dbeta;
    layer_norm_backward<double>(cache, g, ct->c, dx, dgamma, dbeta);
    MatD dgm(1, dgamma.size()), dbm(1, dbeta.size());
    dgm.row(0) = dgamma.transpose();
    dbm.row(0) = dbeta.transpose();
    return std::vector<TensorD>{TensorD::from_mat(dx), TensorD::from_mat(dgm),
                                TensorD::from_mat(dbm)};
  };
  return kc;
}

KernelCase make_l2_normalize_case(Rng& rng) {
  KernelCase kc;
  TensorD x = random_tensor(rng, 3, 5);
  for (Eigen::Index i = 0; i < 3; ++i) {
    // keep rows clear of the degenerate-norm floor
    if (x.mat().row(i).norm() < 0.5) x.mat().row(i)(0) += 1.0;
  }
  kc.inputs = {std::move(x)};
  auto ct = std::make_shared<Cotangent>(Cotangent{random_tensor(rng, 3, 5).mat()});
  kc.forward = [ct](const std::vector<TensorD>& in) {
    return ct->reduce(l2_normalize_rows<double>(in[0].mat()));
  };
  kc.backward = [ct](const std::vector<TensorD>& in) {
    VecD norms;
    const MatD y = l2_normalize_rows<double>(in[0].mat(), &norms);
    return std::vector<TensorD>{
        TensorD::from_mat(l2_normalize_rows_backward<double>(y, norms, ct->c))};
  };
  return kc;
}

KernelCase make_elementwise_mul_case(Rng& rng) {
  KernelCase kc;
  kc.inputs = {random_tensor(rng, 3, 5), random_tensor(rng, 3, 5)};
  auto ct = std::make_shared<Cotangent>(Cotangent{random_tensor(rng, 3, 5).mat()});
  kc.forward = [ct](const std::vector<TensorD>& in) {
    return ct->reduce(elementwise_mul<double>(in[0].mat(), in[1].mat()));
  };
  kc.backward = [ct](const std::vector<TensorD>& in) {
    return std::vector<TensorD>{
        TensorD::from_mat(ct->c.cwiseProduct(in[1].mat()).eval()),
        TensorD::from_mat(ct->c.cwiseProduct(in[0].mat()).eval())};
  };
  return kc;
}

KernelCase make_cross_entropy_binary_case(Rng& rng) {
  KernelCase kc;
  TensorD p({4, 3}), y({4, 3});
  for (auto& v : p.data) v = 0.05 + 0.9 * rng.uniform();  // interior of the clip range
  for (auto& v : y.data) v = rng.uniform() < 0.5 ? 0.0 : 1.0;
  kc.inputs = {std::move(p), std::move(y)};
  kc.forward = [](const std::vector<TensorD>& in) {
    return cross_entropy_binary<double>(in[0].mat(), in[1].mat());
  };
  kc.backward = [](const std::vector<TensorD>& in) {
    // The loss is linear in y: d/dy = (log(1-p) - log(p)) / N.
    TensorD dy({in[1].rows(), in[1].cols()});
    const double inv_n = 1.0 / static_cast<double>(in[1].numel());
    for (size_t i = 0; i < dy.data.size(); ++i) {
      const double pc = clip_prob(in[0].data[i]);
      dy.data[i] = inv_n * (std::log(1.0 - pc) - std::log(pc));
    }
    return std::vector<TensorD>{
        TensorD::from_mat(cross_entropy_binary_backward<double>(in[0].mat(), in[1].mat())),
        std::move(dy)};
  };
  return kc;
}

KernelRegistry build_registry() {
  KernelRegistry reg;
  reg.add("matmul", make_matmul_case);
  reg.add("add", make_add_case);
  reg.add("add_bias", make_add_bias_case);
  reg.add("concat", make_concat_case);
  reg.add("softmax", make_softmax_case);
  reg.add("log_softmax", make_log_softmax_case);
  reg.add("sigmoid", make_sigmoid_case);
  reg.add("relu", make_relu_case);
  reg.add("layer_norm", make_layer_norm_case);
  reg.add("l2_normalize", make_l2_normalize_case);
  reg.add("elementwise_mul", make_elementwise_mul_case);
  reg.add("cross_entropy_binary", make_cross_entropy_binary_case);
  return reg;
}

}  // namespace

const KernelRegistry& KernelRegistry::builtin() {
  static const KernelRegistry reg = build_registry();
  return reg;
}

}  // namespace idproxy::nn

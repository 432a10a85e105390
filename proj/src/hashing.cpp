#include "episeg/hashing.hpp"

#include <stdexcept>

#include "episeg/rng.hpp"

namespace episeg {

namespace {
// Keeps the hashing tables on their own stream so they never collide with
// draws made for initialization or episode sampling under the same run seed.
constexpr std::uint64_t kHashingStreamTag = 0x68617368u;  // "hash"
}  // namespace

HashingSpec build_hashing(std::uint64_t seed, std::int64_t m, std::int64_t d) {
  if (m <= 0 || d <= 0) throw std::invalid_argument("build_hashing: m and d must be positive");
  HashingSpec spec;
  spec.seed = seed;
  spec.m = m;
  spec.d = d;
  spec.kappa.resize(static_cast<std::size_t>(d));
  spec.zeta.resize(static_cast<std::size_t>(d));
  Rng rng(derive_seed(seed, kHashingStreamTag));
  for (std::int64_t i = 0; i < d; ++i) {
    spec.kappa[static_cast<std::size_t>(i)] =
        static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(m)));
    spec.zeta[static_cast<std::size_t>(i)] = rng.below(2) ? 1.0 : -1.0;
  }
  return spec;
}

namespace {

void check_spec(const HashingSpec& spec) {
  if (spec.m <= 0 || spec.d <= 0 ||
      spec.kappa.size() != static_cast<std::size_t>(spec.d) ||
      spec.zeta.size() != static_cast<std::size_t>(spec.d))
    throw std::invalid_argument("hashing: spec tables do not match (m, d)");
  for (std::int64_t k : spec.kappa)
    if (k < 0 || k >= spec.m) throw std::invalid_argument("hashing: kappa entry out of range");
  for (double z : spec.zeta)
    if (z != 1.0 && z != -1.0) throw std::invalid_argument("hashing: zeta entry not in {-1, +1}");
}

}  // namespace

Tensor hash_forward(Tape& tape, const Tensor& x, const HashingSpec& spec) {
  check_same_tape(tape, x, "hash_forward");
  check_spec(spec);
  if (x.rank() != 1 || x.extent(0) != spec.m)
    throw std::invalid_argument("hash_forward: x must have shape [m]");
  Tensor out = op_output(tape, {spec.d}, tape.recording() && x.requires_grad());
  const auto xv = x.data();
  auto ov = out.data();
  for (std::int64_t i = 0; i < spec.d; ++i)
    ov[i] = spec.zeta[static_cast<std::size_t>(i)] * xv[spec.kappa[static_cast<std::size_t>(i)]];
  check_finite(out, "hash_forward");
  if (out.requires_grad()) {
    const auto kappa = spec.kappa;
    const auto zeta = spec.zeta;
    tape.record_step([x, out, kappa, zeta]() {
      if (!x.requires_grad()) return;
      const auto g = out.grad();
      auto gx = x.grad();
      for (std::size_t i = 0; i < g.size(); ++i)
        gx[static_cast<std::size_t>(kappa[i])] += zeta[i] * g[i];
    });
  }
  return out;
}

Tensor as_matrix(const HashingSpec& spec) {
  check_spec(spec);
  Tensor w = Tensor::zeros({spec.d, spec.m});
  auto wv = w.data();
  for (std::int64_t i = 0; i < spec.d; ++i)
    wv[i * spec.m + spec.kappa[static_cast<std::size_t>(i)]] =
        spec.zeta[static_cast<std::size_t>(i)];
  return w;
}

}  // namespace episeg

#pragma once

// One outer block of the MPC loop on the fine simulation grid.

#include <cstdint>
#include <memory>
#include <optional>
#include <vector>

#include "reachctl/lti_model.hpp"
#include "reachctl/mpc.hpp"

namespace reachctl {

/// Everything needed to run the inner controller on the plant: the continuous
/// model, the time grid, the disturbance and the shared MPC configuration.
struct ClosedLoopPlant {
  StructuredLti sys;
  TimeGrid grid;
  NoiseModel noise;
  std::shared_ptr<const MpcConfig> mpc;
  std::vector<Index> velocity_indices;  // state index of the velocity for each x^s coordinate
  FineStepper stepper;
  std::int64_t resample_every = 1;

  ClosedLoopPlant() = default;
  ClosedLoopPlant(StructuredLti s, TimeGrid g, NoiseModel w, std::shared_ptr<const MpcConfig> cfg,
                  std::vector<Index> vel)
      : sys(std::move(s)), grid(g), noise(std::move(w)), mpc(std::move(cfg)),
        velocity_indices(std::move(vel)) {
    require(mpc != nullptr, "ClosedLoopPlant: null MPC config");
    require(noise.dim() == sys.n_w(), "ClosedLoopPlant: noise dimension != n_w");
    require(mpc->J == grid.J(), "ClosedLoopPlant: MPC horizon must equal the inner step count");
    require(std::abs(mpc->model.step - grid.inner_step()) <= 1e-12 * grid.inner_step(),
            "ClosedLoopPlant: MPC model step must equal the inner step");
    require(static_cast<Index>(velocity_indices.size()) == sys.n_s,
            "ClosedLoopPlant: need one velocity index per stochastic coordinate");
    stepper = FineStepper(sys, grid.sim_step());
    resample_every = std::max<std::int64_t>(
        1, std::llround(noise.sample_interval() / grid.sim_step()));
  }

  Index n() const { return sys.n(); }
  Index n_s() const { return sys.n_s; }
};

/// Per-thread buffers for simulate_block.
struct BlockWorkspace {
  Vector w, noise_scratch, step_scratch, u;
};

/// Runs block k from x (updated in place). The reference starts at the anchor
/// center in robust mode and at x^s otherwise. `observe(i, x)` is called for
/// the fine indices i = 0..J·S of the block; returning false stops the block
/// early. MpcInfeasible propagates to the caller. Returns true if the block
/// ran to its end.
template <class Observer>
bool simulate_block(const ClosedLoopPlant& plant, TrackingMpc& mpc, int k, Vector& x,
                    const CommandParams& cmd, const Vector& center, RandomStream& rng,
                    BlockWorkspace& ws, Observer&& observe) {
  const MpcConfig& cfg = *plant.mpc;
  const Index ns = plant.n_s();
  const bool robust = cfg.mode == MpcMode::robust;
  const Vector start = robust ? Vector(center) : Vector(x.head(ns));
  const Command c = reference_from_command(cmd, start, cfg.model.step, cfg.J, plant.n(),
                                           plant.velocity_indices);
  mpc.begin_block(k, c, x, robust ? std::optional<Vector>(center) : std::nullopt);
  if (ws.w.size() != plant.sys.n_w()) ws.w = Vector::Zero(plant.sys.n_w());
  if (!observe(std::int64_t{0}, static_cast<const Vector&>(x))) return false;
  const int S = plant.grid.substeps();
  std::int64_t i = 0;
  for (int j = 0; j < cfg.J; ++j) {
    ws.u = mpc.step(j, x);
    for (int s = 0; s < S; ++s, ++i) {
      if (i % plant.resample_every == 0) plant.noise.sample(rng, ws.w, ws.noise_scratch);
      plant.stepper.step(x, ws.u, ws.w, ws.step_scratch);
      if (!observe(i + 1, static_cast<const Vector&>(x))) return false;
    }
  }
  return true;
}

}  // namespace reachctl

"""Influence-augmented local simulator.

Composes a local simulator with a frozen influence predictor behind the
plain simulator interface, so policy trainers cannot tell it apart from the
global simulator. Each step: read the head distributions for the current
d-set window (recurrent predictors advance their hidden state by exactly
one row), sample one influence value per head, drive the local transition
with the sampled values, then append the new d-set row to the window.
"""

from __future__ import annotations

import time

import numpy as np

from .aip import PredictorVariant
from .core import Bits, DsetWindow, Simulator, make_rng


class IalsSimulator(Simulator):
    """Local simulator plus predictor, usable wherever a simulator is."""

    def __init__(self, local_sim, variant: PredictorVariant):
        if local_sim.descriptor.fingerprint() != variant.fingerprint:
            raise ValueError(
                f"predictor was trained for {variant.env_id} "
                f"({variant.fingerprint}), local simulator is "
                f"{local_sim.descriptor.env_id} ({local_sim.descriptor.fingerprint()})")
        self.local = local_sim
        self.variant = variant
        self.k = variant.k
        self.descriptor = local_sim.descriptor
        self.window = DsetWindow(self.descriptor.dset_width, self.k)
        self._stream = None
        self._pending_row: Bits | None = None
        self._rng = None

    def reset(self, seed: int) -> Bits:
        obs = self.local.reset(seed)
        self._rng = make_rng(seed, "influence-sampling")
        self.window.clear()
        row = self.local.current_dset_row()
        self.window.append(row)
        self._stream = self.variant.begin_stream()
        self._pending_row = row
        return obs

    def step(self, action: int):
        if self._stream is None:
            raise RuntimeError("step before reset")
        influence = self._stream.feed_sample(self._pending_row, self._rng)
        obs, reward, done = self.local.step_with_influence(action, influence)
        row = self.local.current_dset_row()
        self.window.append(row)
        self._pending_row = row
        return obs, reward, done


def throughput_bench(sim: Simulator, steps: int, seed: int = 0,
                     warmup: int = 200) -> dict:
    """Wall-clock steps/second under random actions, after a warmup."""
    if steps <= 0:
        raise ValueError("need a positive step count")
    rng = make_rng(seed, "bench-actions")
    n_actions = sim.descriptor.action_count

    def run(n: int) -> float:
        sim.reset(seed)
        start = time.perf_counter()
        done = False
        episode = 0
        for _ in range(n):
            if done:
                episode += 1
                sim.reset(seed + episode)
            _, _, done = sim.step(int(rng.integers(0, n_actions)))
        return time.perf_counter() - start

    run(min(warmup, steps))
    elapsed = run(steps)
    return {"env_id": sim.descriptor.env_id, "steps": steps,
            "seconds": elapsed, "steps_per_sec": steps / elapsed}


def compare_throughput(reference: Simulator, candidate: Simulator,
                       steps: int, seed: int = 0) -> dict:
    """Steps/sec of both simulators plus the candidate/reference ratio."""
    ref = throughput_bench(reference, steps, seed)
    cand = throughput_bench(candidate, steps, seed)
    return {"reference": ref, "candidate": cand,
            "ratio": cand["steps_per_sec"] / ref["steps_per_sec"]}

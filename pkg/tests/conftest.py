"""Shared full-size pipeline runs.

Training at 256 x 256 takes minutes, so each run is computed once per
session and reused by the acceptance suite and the slow pipeline tests.
"""

from dataclasses import dataclass

import numpy as np
import pytest

from noise2detail.cli import run_ablation
from noise2detail.noise import NoiseSpec, phantom, psnr
from noise2detail.pipeline import DenoiseReport, PipelineConfig, StageOutputs, blend, denoise, refine_pd

PHANTOM_SIZE = 256
PHANTOM_SEED = 0
ABLATION_SEEDS = range(5)


@dataclass
class Run:
    clean: np.ndarray
    noisy: np.ndarray
    level: float
    final: np.ndarray
    outputs: StageOutputs
    report: DenoiseReport


def _run(clean, spec: NoiseSpec | None, cfg: PipelineConfig | None = None) -> Run:
    if spec is None:
        noisy, level = clean, 0.0
    else:
        noisy, level = spec.apply(clean)
    final, outputs, report = denoise(noisy, cfg or PipelineConfig(), clean=clean)
    return Run(clean, noisy, level, final, outputs, report)


def ablation_rows(run: Run, strides=(2, 4, 8)) -> dict[tuple[int, ...], float]:
    """Blend PSNR for the cumulative J-sets, reusing the run's stage-1 network."""
    net = run.outputs.networks["stage1"]
    refined = dict(run.outputs.refined)
    for j in strides:
        if j not in refined:
            refined[j] = refine_pd(run.noisy, net, j)
    rows = {(): psnr(run.outputs.xbar, run.clean)}
    for n in range(1, len(strides) + 1):
        js = tuple(strides[:n])
        rows[js] = psnr(blend(run.outputs.xbar, {j: refined[j] for j in js}), run.clean)
    return rows


@pytest.fixture(scope="session")
def clean_phantom():
    return phantom(PHANTOM_SIZE, seed=PHANTOM_SEED)


@pytest.fixture(scope="session")
def gaussian_run(clean_phantom):
    return _run(clean_phantom, NoiseSpec("gaussian", 25.0, seed=0))


class _PoissonRuns:
    def __init__(self, clean):
        self.clean = clean
        self._cache: dict[int, Run] = {}
        self._rows: dict[int, dict] = {}

    @staticmethod
    def spec(seed: int) -> NoiseSpec:
        return NoiseSpec("poisson", (10.0, 50.0), seed=seed)

    def __getitem__(self, seed: int) -> Run:
        if seed not in self._cache:
            self._cache[seed] = _run(self.clean, self.spec(seed))
        return self._cache[seed]

    def ablation(self, seed: int) -> dict[tuple[int, ...], float]:
        """J-set rows; stage 3 is skipped unless a full run for this seed already exists."""
        if seed not in self._rows:
            if seed in self._cache:
                self._rows[seed] = ablation_rows(self._cache[seed])
            else:
                noisy, _ = self.spec(seed).apply(self.clean)
                rows = run_ablation(self.clean, noisy, PipelineConfig())
                self._rows[seed] = {r["J"]: r["psnr_blend"] for r in rows}
        return self._rows[seed]


@pytest.fixture(scope="session")
def poisson_runs(clean_phantom):
    """Full pipeline runs on the Poisson phantom, computed on first access per seed."""
    return _PoissonRuns(clean_phantom)


@pytest.fixture(scope="session")
def clean_run(clean_phantom):
    return _run(clean_phantom, None)

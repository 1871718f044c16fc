"""
Empowerkit - Synthetic conditional-MI benchmark

Per component:

    z ~ N(0, sigma_z^2),  x = z + e,  e ~ N(0, 1)
    y = z + x*z + f  if z > 0  else  f,   f ~ N(0, n^2)

Given z > 0, (x, y) is bivariate Gaussian with I(X; Y | z) = 0.5 ln(1 + z^2/n^2);
for z <= 0, y is pure noise and the conditional MI is 0. Components are
independent, so MI adds across dimensions.

Also holds the exact tabular oracle used to validate the estimators on
discrete joints with known conditional MI.
"""
import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import ContractViolation, EstimatorDivergence, NonFiniteActivation
from .mi_estimators import (
    CmiBatch,
    EstimatorConfig,
    EstimatorKind,
    build_estimator,
    estimate_batch,
    estimate_mi,
    train_estimator,
)
from .numerics import make_rng

logger = logging.getLogger(__name__)

BENCH_COLUMNS = ['kind', 'dim', 'train_size', 'seed', 'rmse', 'theoretical_avg_mi', 'wall_seconds']
ORACLE_COLUMNS = ['kind', 'joint', 'exact', 'estimate', 'abs_error']

# Grid evaluation runs in blocks of this many z values to bound memory.
GRID_BLOCK = 64


@dataclass
class SynthConfig:
    dim: int = 1
    sigma_z: float = 1.0
    n: float = 0.5
    train_size: int = 20000
    seed: int = 0

    def __post_init__(self):
        if self.dim < 1:
            raise ContractViolation("dim must be positive")
        if self.sigma_z <= 0 or self.n <= 0:
            raise ContractViolation("sigma_z and n must be positive")


def sample_synth(config, count, rng, z=None):
    """
    Draw ``count`` samples. Pass ``z`` (count, dim) to sample x and y
    conditionally on fixed contexts.
    """
    if count < 1:
        raise ContractViolation("count must be at least 1")
    shape = (count, config.dim)
    if z is None:
        z = rng.normal(0.0, config.sigma_z, size=shape)
    else:
        z = np.asarray(z, dtype=np.float64).reshape(shape)
    x = z + rng.normal(0.0, 1.0, size=shape)
    f = rng.normal(0.0, config.n, size=shape)
    y = np.where(z > 0.0, z + x * z + f, f)
    return CmiBatch(x, y, z)


def synthetic_negative_sampler(batch, rng):
    """x~ = z + fresh unit noise, i.e. a draw from p(x|z) independent of y."""
    return batch.z + rng.normal(0.0, 1.0, size=batch.z.shape)


def theoretical_cmi(z, n):
    """0.5 ln(1 + z^2/n^2) for z > 0, 0 otherwise (elementwise)."""
    if n <= 0:
        raise ContractViolation("n must be positive")
    z = np.asarray(z, dtype=np.float64)
    out = np.where(z > 0.0, 0.5 * np.log1p((z / n) ** 2), 0.0)
    return float(out) if out.ndim == 0 else out


def theoretical_cmi_rows(z_rows, n):
    """Conditional MI of multi-dimensional contexts: the sum over components."""
    return np.sum(theoretical_cmi(np.atleast_2d(z_rows), n), axis=1)


def average_theoretical_mi(config, samples=1_000_000, seed=0):
    """Monte-Carlo E_z[theoretical_cmi(z, n)] times dim."""
    z = make_rng(seed).normal(0.0, config.sigma_z, size=samples)
    return float(np.mean(theoretical_cmi(z, config.n))) * config.dim


def rmse(estimates, truth):
    estimates = np.asarray(estimates, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    return float(np.sqrt(np.mean((estimates - truth) ** 2)))


def per_context_estimates(handle, config, z_grid, samples_per_z, rng):
    """
    Conditional-MI readout at every grid context, averaging over
    ``samples_per_z`` conditional draws of (x, y).
    """
    z_grid = np.atleast_2d(np.asarray(z_grid, dtype=np.float64))
    estimates = np.empty(len(z_grid))
    for start in range(0, len(z_grid), GRID_BLOCK):
        block = z_grid[start:start + GRID_BLOCK]
        z_rep = np.repeat(block, samples_per_z, axis=0)
        batch = sample_synth(config, len(z_rep), rng, z=z_rep)
        joint = estimate_batch(handle, batch).reshape(len(block), samples_per_z)
        if handle.kind == EstimatorKind.KLD:
            negatives = synthetic_negative_sampler(batch, rng)
            t_neg = handle.critic.forward(batch.critic_input(negatives))[:, 0]
            t_neg = np.minimum(t_neg, handle.config.kld_clamp).reshape(len(block), samples_per_z)
            estimates[start:start + len(block)] = joint.mean(axis=1) - np.exp(t_neg - 1.0).mean(axis=1)
        else:
            estimates[start:start + len(block)] = joint.mean(axis=1)
    return estimates


@dataclass
class BenchRow:
    kind: str
    dim: int
    train_size: int
    seed: object
    rmse: float
    theoretical_avg_mi: float
    wall_seconds: float
    failed: bool = False


@dataclass
class BenchReport:
    rows: list = field(default_factory=list)
    aggregates: list = field(default_factory=list)

    @property
    def failed_cells(self):
        return [row for row in self.rows if row.failed]

    def mean_rmse(self, kind, dim, train_size):
        for row in self.aggregates:
            if (row.kind, row.dim, row.train_size) == (kind, dim, train_size):
                return row.rmse
        raise KeyError((kind, dim, train_size))

    def best_kind(self, dim, train_size):
        cells = [row for row in self.aggregates
                 if (row.dim, row.train_size) == (dim, train_size) and not row.failed]
        if not cells:
            return None
        return min(cells, key=lambda row: row.rmse).kind


def run_cell(kind, dim, train_size, seed, estimator_config, epochs, sigma_z=1.0, n=0.5,
             grid_size=2000, samples_per_z=128):
    """
    Train one estimator on one synthetic dataset and score it.

    Data depends on (seed, dim, train_size) only, so all kinds in a cell see
    the same samples; the z grid depends on (seed, dim).

    Returns:
        RMSE of the per-context readout against the closed form
    """
    config = SynthConfig(dim=dim, sigma_z=sigma_z, n=n, train_size=train_size, seed=seed)
    data = sample_synth(config, train_size, make_rng([seed, dim, train_size]))
    kind_index = list(EstimatorKind.values).index(EstimatorKind(kind).value)
    rng = make_rng([seed, dim, train_size, kind_index + 1])
    handle = build_estimator(kind, dim, dim, dim, rng, estimator_config)
    train_estimator(handle, data, synthetic_negative_sampler, epochs, rng)

    grid_rng = make_rng([seed, dim, 0])
    z_grid = grid_rng.normal(0.0, sigma_z, size=(grid_size, dim))
    try:
        estimates = per_context_estimates(handle, config, z_grid, samples_per_z, grid_rng)
    except NonFiniteActivation as exc:
        raise EstimatorDivergence(kind, epochs, []) from exc
    if not np.all(np.isfinite(estimates)):
        raise EstimatorDivergence(kind, epochs, [])
    return rmse(estimates, theoretical_cmi_rows(z_grid, n))


def rmse_benchmark(kinds, dims=(1, 2, 3, 4), sizes=(20000, 40000, 60000), seeds=(0, 1, 2, 3, 4),
                   estimator_config=None, epochs=20, sigma_z=1.0, n=0.5, grid_size=2000,
                   samples_per_z=128, record_timing=False):
    """
    Score every (kind, dim, size) cell for every seed.

    A diverging estimator marks its row failed and the run continues.
    ``wall_seconds`` is reported as 0 unless ``record_timing`` is set, so that
    reruns produce identical reports; timings are always logged.
    """
    if not seeds:
        raise ContractViolation("at least one seed is required")
    estimator_config = estimator_config or EstimatorConfig()
    report = BenchReport()
    for dim in dims:
        avg_mi = average_theoretical_mi(SynthConfig(dim=dim, sigma_z=sigma_z, n=n))
        for size in sizes:
            for kind in kinds:
                kind = EstimatorKind(kind).value
                cell_rows = []
                for seed in seeds:
                    started = time.perf_counter()
                    try:
                        score = run_cell(kind, dim, size, seed, estimator_config, epochs, sigma_z, n,
                                         grid_size, samples_per_z)
                        failed = False
                    except EstimatorDivergence as exc:
                        logger.warning("cell %s dim=%d size=%d seed=%d failed: %s", kind, dim, size, seed, exc)
                        score, failed = float('nan'), True
                    elapsed = time.perf_counter() - started
                    logger.info("cell %s dim=%d size=%d seed=%d rmse=%.4f (%.1fs)", kind, dim, size, seed, score, elapsed)
                    row = BenchRow(kind, dim, size, seed, score, avg_mi,
                                   elapsed if record_timing else 0.0, failed)
                    cell_rows.append(row)
                    report.rows.append(row)
                scores = [row.rmse for row in cell_rows if not row.failed]
                report.aggregates.append(BenchRow(
                    kind, dim, size, 'mean',
                    float(np.mean(scores)) if scores else float('nan'),
                    avg_mi,
                    sum(row.wall_seconds for row in cell_rows),
                    failed=not scores,
                ))
    return report


def _fmt(value):
    if isinstance(value, float):
        return 'nan' if math.isnan(value) else f"{value:.6f}"
    return str(value)


def write_bench_csv(path, report):
    """One row per (cell, seed), then one aggregate row per cell with seed 'mean'."""
    path = Path(path)
    with path.open('w', newline='') as fh:
        writer = csv.writer(fh, lineterminator='\n')
        writer.writerow(BENCH_COLUMNS)
        for row in report.rows + report.aggregates:
            writer.writerow([_fmt(getattr(row, column)) for column in BENCH_COLUMNS])


@dataclass
class TabularJoint:
    """Probability tensor p[x, y, z] over finite supports."""

    p: np.ndarray
    name: str = ''

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=np.float64)
        if self.p.ndim != 3:
            raise ContractViolation("p must be indexed as p[x, y, z]")
        if np.any(self.p < 0.0):
            raise ContractViolation("probabilities must be non-negative")
        if abs(self.p.sum() - 1.0) > 1e-12:
            raise ContractViolation(f"probabilities sum to {self.p.sum()!r}, not 1")

    @property
    def shape(self):
        return self.p.shape

    def x_given_z(self):
        pz = self.p.sum(axis=(0, 1))
        return self.p.sum(axis=1) / np.where(pz > 0.0, pz, 1.0)[None, :]


def tabular_cmi(joint):
    """Exact I(X; Y | Z) in nats by summation, with 0 log 0 = 0."""
    p = joint.p
    pz = p.sum(axis=(0, 1))
    pxz = p.sum(axis=1)
    pyz = p.sum(axis=0)
    mask = p > 0.0
    num = (p * pz[None, None, :])[mask]
    den = (pxz[:, None, :] * pyz[None, :, :])[mask]
    return float(np.sum(p[mask] * np.log(num / den)))


def independent_joint(support=4, contexts=2):
    """p(x|z) p(y|z) p(z) with z-dependent, non-uniform conditionals."""
    p = np.zeros((support, support, contexts))
    for z in range(contexts):
        px = 1.0 + (np.arange(support) + z) % support
        py = 1.0 + (np.arange(support)[::-1] + 2 * z) % support
        p[:, :, z] = np.outer(px / px.sum(), py / py.sum()) / contexts
    return TabularJoint(p, 'independent')


def bijection_joint(support=4, contexts=2):
    """x uniform, y = (x + z) mod support: I(X; Y | Z) = ln(support)."""
    p = np.zeros((support, support, contexts))
    for z in range(contexts):
        for x in range(support):
            p[x, (x + z) % support, z] = 1.0 / (support * contexts)
    return TabularJoint(p, 'bijection')


def mixed_bijection_joint(support=4, contexts=2, mix=0.5):
    """The bijection with probability 1 - mix, uniform y with probability mix."""
    base = bijection_joint(support, contexts).p
    uniform = np.full_like(base, 1.0 / (support * support * contexts))
    return TabularJoint((1.0 - mix) * base + mix * uniform, 'mixed_bijection')


ORACLE_JOINTS = {
    'independent': independent_joint,
    'bijection': bijection_joint,
    'mixed_bijection': mixed_bijection_joint,
}


def _one_hot(indices, width):
    out = np.zeros((len(indices), width))
    out[np.arange(len(indices)), indices] = 1.0
    return out


def sample_tabular(joint, count, rng):
    """
    Draw (x, y, z): x is the support index plus U[0, 1) jitter, y and z are
    one-hot. y depends on x only through its bin, so the continuous
    conditional MI equals ``tabular_cmi(joint)``.
    """
    nx, ny, nz = joint.shape
    flat = rng.choice(joint.p.size, size=count, p=joint.p.ravel())
    ix, iy, iz = np.unravel_index(flat, joint.shape)
    x = (ix + rng.uniform(0.0, 1.0, size=count))[:, None]
    return CmiBatch(x, _one_hot(iy, ny), _one_hot(iz, nz))


def tabular_negative_sampler(joint):
    """Sampler drawing x~ from p(x|z) of ``joint`` for each row's context."""
    cdf = np.cumsum(joint.x_given_z().T, axis=1)

    def sampler(batch, rng):
        iz = np.argmax(batch.z, axis=1)
        u = rng.uniform(0.0, 1.0, size=len(batch))
        ix = np.minimum((u[:, None] > cdf[iz]).sum(axis=1), cdf.shape[1] - 1)
        return (ix + rng.uniform(0.0, 1.0, size=len(batch)))[:, None]

    return sampler


@dataclass
class OracleRow:
    kind: str
    joint: str
    exact: float
    estimate: float
    abs_error: float


def run_oracle(kinds, joint_names, samples=20000, seed=0, estimator_config=None, epochs=30,
               support=4, contexts=2):
    """Train every kind on samples of every oracle joint and compare with the exact value."""
    estimator_config = estimator_config or EstimatorConfig()
    rows = []
    for joint_index, name in enumerate(joint_names):
        joint = ORACLE_JOINTS[name](support, contexts)
        exact = tabular_cmi(joint)
        sampler = tabular_negative_sampler(joint)
        data = sample_tabular(joint, samples, make_rng([seed, joint_index]))
        heldout = sample_tabular(joint, max(1000, samples // 10), make_rng([seed, joint_index, 1]))
        for kind in kinds:
            kind = EstimatorKind(kind).value
            rng = make_rng([seed, joint_index, list(EstimatorKind.values).index(kind) + 2])
            handle = build_estimator(kind, 1, support, contexts, rng, estimator_config)
            train_estimator(handle, data, sampler, epochs, rng)
            estimate = estimate_mi(handle, heldout, sampler, rng)
            rows.append(OracleRow(kind, name, exact, estimate, abs(estimate - exact)))
            logger.info("oracle %s on %s: exact %.4f estimate %.4f", kind, name, exact, estimate)
    return rows


def write_oracle_csv(path, rows):
    with Path(path).open('w', newline='') as fh:
        writer = csv.writer(fh, lineterminator='\n')
        writer.writerow(ORACLE_COLUMNS)
        for row in rows:
            writer.writerow([_fmt(getattr(row, column)) for column in ORACLE_COLUMNS])

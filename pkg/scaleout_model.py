"""Analytic many-cluster estimate built on single-cluster measurements.

Each cluster's tile iteration takes max(compute, memory) cycles, scaled by the
expected slowest-of-N imbalance within its group. Group bandwidth is shared
equally among the group's clusters.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
from dotenv import dotenv_values

from cluster_sim import ClusterMetrics, DmaModel, geomean
from stencil_ir import StencilSpec, TileShape, lower

DEFAULT_GRID = {2: (16384, 16384), 3: (512, 512, 512)}
ASSUMED_UTIL = {"saris": 0.81, "base": 0.35}

# Highest reported fraction of peak compute for related stencil frameworks.
PEAK_FRACTION_FOOTNOTES = (
    ("Bricks", "Xeon Gold 6130", "FP32", 0.45),
    ("ARTEMIS", "Tesla P100", "FP64", 0.36),
    ("DRStencil", "Tesla P100", "FP64", 0.48),
    ("AN5D", "Tesla V100 SXM2", "FP32", 0.69),
    ("EBISU", "A100", "FP64", 0.49),
)


class ScaleoutInputError(ValueError):
    pass


class MachineFileError(ValueError):
    pass


@dataclass(frozen=True)
class MachineDescriptor:
    groups: int = 8
    clusters_per_group: int = 4
    cores_per_cluster: int = 8
    pin_rate_gbps: float = 3.2
    pins: int = 128
    freq_ghz: float = 1.0
    flops_per_cycle: int = 2

    @property
    def clusters(self) -> int:
        return self.groups * self.clusters_per_group

    @property
    def group_bandwidth(self) -> float:
        """Bytes per cycle delivered by one group's memory device."""
        return self.pin_rate_gbps * self.pins / 8 / self.freq_ghz

    @property
    def cluster_bandwidth(self) -> float:
        return self.group_bandwidth / self.clusters_per_group

    @property
    def peak_gflops(self) -> float:
        return self.clusters * self.cores_per_cluster * self.flops_per_cycle * self.freq_ghz

    def scaled(self, bandwidth: float) -> "MachineDescriptor":
        return MachineDescriptor(**{**{f.name: getattr(self, f.name) for f in fields(self)},
                                    "pins": self.pins * bandwidth})


def load_machine(path) -> MachineDescriptor:
    """Read a KEY=value machine file; keys are the descriptor fields in upper case."""
    if not Path(path).is_file():
        raise MachineFileError(f"machine file {path} not found")
    values = dotenv_values(path)
    known = {f.name.upper(): f for f in fields(MachineDescriptor)}
    kwargs = {}
    for key, raw in values.items():
        f = known.get(key.upper())
        if f is None:
            raise MachineFileError(f"{path}: unknown key {key!r}")
        try:
            value = float(raw) if f.type in ("float", float) else int(raw)
        except (TypeError, ValueError):
            raise MachineFileError(f"{path}: {key} must be a number, got {raw!r}") from None
        if value <= 0:
            raise MachineFileError(f"{path}: {key} must be positive")
        kwargs[f.name] = value
    return MachineDescriptor(**kwargs)


@dataclass(frozen=True)
class ScaleoutEstimate:
    kernel: str
    tc_base: float
    tm_base: float
    tc_saris: float
    tm_saris: float
    imbalance_factor: float
    fpu_util_base: float
    fpu_util_saris: float
    speedup: float
    gflops: float
    peak_fraction: float

    @property
    def cmtr(self) -> float:
        return self.tc_saris / self.tm_saris if self.tm_saris else math.inf

    @property
    def cmtr_base(self) -> float:
        return self.tc_base / self.tm_base if self.tm_base else math.inf

    @property
    def bound(self) -> str:
        return "memory" if self.cmtr < 1 else "compute"

    @property
    def base_bound(self) -> str:
        return "memory" if self.cmtr_base < 1 else "compute"


def expected_max_imbalance(ratios, draws: int, monte_carlo: bool = False,
                           trials: int = 20_000, seed: int = 0) -> float:
    """E[max of `draws` samples] / mean for the empirical ratio distribution.

    The exact value uses order statistics of the discrete distribution;
    `monte_carlo` samples it instead.
    """
    values = np.sort(np.asarray(list(ratios), dtype=np.float64))
    if values.size == 0 or draws < 1:
        return 1.0
    mean = values.mean()
    if monte_carlo:
        rng = np.random.default_rng(seed)
        return float(rng.choice(values, size=(trials, draws)).max(axis=1).mean() / mean)
    m = values.size
    k = np.arange(1, m + 1)
    weights = (k / m) ** draws - ((k - 1) / m) ** draws
    return float(np.dot(values, weights) / mean)


def _tiles(tile: TileShape, grid: tuple) -> int:
    n = 1
    for g, inner in zip(grid, tile.interior):
        n *= math.ceil(g / inner)
    return n


def estimate(spec: StencilSpec, metrics: dict, machine: MachineDescriptor, tile: TileShape,
             grid: tuple | None = None, monte_carlo: bool = False, seed: int = 0) -> ScaleoutEstimate:
    """Combine measured BASE and SARIS cluster metrics into a machine-wide estimate."""
    for variant in ("base", "saris"):
        m = metrics.get(variant)
        if m is None:
            raise ScaleoutInputError(f"{spec.name}: no {variant} cluster metrics")
        if m.cycles <= 0 or m.dma_bw_util <= 0:
            raise ScaleoutInputError(f"{spec.name}: {variant} metrics carry no cycles or DMA utilization")
    grid = grid or DEFAULT_GRID[spec.dims]
    imbalance = expected_max_imbalance(metrics["saris"].imbalance, machine.clusters_per_group,
                                       monte_carlo, seed=seed)

    times = {}
    utils = {}
    for variant in ("base", "saris"):
        m: ClusterMetrics = metrics[variant]
        tc = float(m.compute_cycles or m.cycles)
        tm = m.dma_bytes / (machine.cluster_bandwidth * m.dma_bw_util)
        tile_time = max(tc, tm) * imbalance
        times[variant] = (tc, tm, tile_time)
        utils[variant] = m.fpu_util * m.cycles / tile_time

    rounds = math.ceil(_tiles(tile, grid) / machine.clusters)
    runtime = rounds * times["saris"][2]
    total_flops = math.prod(grid) * sum(op.flops for op in lower(spec))
    gflops = total_flops / runtime * machine.freq_ghz
    return ScaleoutEstimate(
        kernel=spec.name,
        tc_base=times["base"][0], tm_base=times["base"][1],
        tc_saris=times["saris"][0], tm_saris=times["saris"][1],
        imbalance_factor=imbalance,
        fpu_util_base=utils["base"], fpu_util_saris=utils["saris"],
        speedup=times["base"][2] / times["saris"][2],
        gflops=gflops,
        peak_fraction=gflops / machine.peak_gflops,
    )


def classify_boundedness(estimates) -> tuple:
    labels = {e.kernel: e.bound for e in estimates}
    return labels, sum(1 for b in labels.values() if b == "memory")


def memory_bound_speedup(estimates) -> tuple:
    """(memory-bound kernels, geomean speedup over them); the geomean is None for an empty subset."""
    subset = [e for e in estimates if e.bound == "memory"]
    if not subset:
        return (), None
    return tuple(e.kernel for e in subset), geomean(e.speedup for e in subset)


def suite_summary(estimates) -> dict:
    estimates = list(estimates)
    _, memory_bound = classify_boundedness(estimates)
    subset, mb_speedup = memory_bound_speedup(estimates)
    return {
        "fpu_util_base": geomean(e.fpu_util_base for e in estimates),
        "fpu_util_saris": geomean(e.fpu_util_saris for e in estimates),
        "speedup": geomean(e.speedup for e in estimates),
        "peak_gflops": max((e.gflops for e in estimates), default=0.0),
        "peak_fraction": max((e.peak_fraction for e in estimates), default=0.0),
        "memory_bound": memory_bound,
        "memory_bound_kernels": subset,
        "memory_bound_speedup": mb_speedup,
    }


def analytic_cluster_metrics(spec: StencilSpec, variant: str, tile: TileShape, util: float | None = None,
                             cores: int = 8, dma: DmaModel | None = None) -> ClusterMetrics:
    """Cluster metrics from operation counts and an assumed FPU utilization."""
    util = util if util is not None else ASSUMED_UTIL[variant]
    if not 0 < util <= 1:
        raise ScaleoutInputError(f"utilization must be in (0, 1], got {util}")
    dma = dma or DmaModel()
    ops = lower(spec)
    compute = sum(1 for op in ops if op.op != "mov")
    cycles = math.ceil(tile.interior_cells * compute / (cores * util))
    nbytes, busy = dma.tile_traffic(spec, tile)
    return ClusterMetrics(
        kernel=spec.name, variant=variant, cycles=cycles, compute_cycles=cycles,
        fpu_util=util, fpu_util_geomean=util,
        dma_bytes=nbytes, dma_cycles=busy, dma_bw_util=nbytes / (dma.bus_bytes * busy),
        imbalance=(1.0,) * cores,
        flops=tile.interior_cells * sum(op.flops for op in ops),
        points=tile.interior_cells,
    )

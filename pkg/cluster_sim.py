"""Eight-core cluster: banked TCDM, lockstep core and DMA stepping, verification."""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from baseline_codegen import compile_baseline_cluster
from core_program import TCDM_BYTES, core_iterations, plan_layout
from reference_engine import Tile, coefficient_values, make_tile, run_reference
from saris_compiler import OptConfig, compile as compile_saris
from stencil_ir import StencilSpec, TileShape
from stream_core_vm import PORTS_PER_CORE, CoreMetrics, StreamCore, TcdmFault, TimingParams

BANKS = 32
DMA_BUS_BYTES = 64
VARIANTS = ("base", "saris")


class VerificationError(RuntimeError):
    pass


class TcdmModel:
    """Word-addressed FP64 scratchpad with one round-robin arbiter per bank."""

    def __init__(self, capacity: int = TCDM_BYTES, banks: int = BANKS, requestors: int = 8 * PORTS_PER_CORE):
        self.capacity = capacity
        self.banks = banks
        self.requestors = requestors
        self.words = np.zeros(capacity // 8, dtype=np.float64)
        self.pointer = [0] * banks
        self.conflicts = 0
        self.grants = 0

    def bank(self, addr: int) -> int:
        return (addr // 8) % self.banks

    def _check(self, addr: int, width: int = 8) -> None:
        if addr % width:
            raise TcdmFault(f"misaligned {width}-byte access at {addr:#x}")
        if not 0 <= addr < self.capacity:
            raise TcdmFault(f"access at {addr:#x} outside the {self.capacity} B TCDM")

    def read(self, addr: int) -> float:
        self._check(addr)
        return float(self.words[addr // 8])

    def write(self, addr: int, value: float) -> None:
        self._check(addr)
        self.words[addr // 8] = value

    def load(self, addr: int, values) -> None:
        values = np.asarray(values, dtype=np.float64).ravel()
        self._check(addr)
        self._check(addr + 8 * max(len(values) - 1, 0))
        self.words[addr // 8:addr // 8 + len(values)] = values

    def dump(self, addr: int, count: int) -> np.ndarray:
        return self.words[addr // 8:addr // 8 + count].copy()

    def arbitrate(self, requests: list) -> list:
        """Grant at most one request per bank; the pointer moves past each winner."""
        by_bank: dict = {}
        for req in requests:
            self._check(req.addr, req.width)
            by_bank.setdefault(self.bank(req.addr), []).append(req)
        granted = []
        for bank, reqs in by_bank.items():
            ptr = self.pointer[bank]
            winner = min(reqs, key=lambda r: (r.requestor - ptr) % self.requestors)
            self.pointer[bank] = (winner.requestor + 1) % self.requestors
            self.conflicts += len(reqs) - 1
            granted.append(winner)
        self.grants += len(granted)
        return granted


@dataclass(frozen=True)
class DmaModel:
    """512-bit DMA: fixed initiation latency plus one beat per touched 64 B line."""
    init_latency: int = 100
    bus_bytes: int = DMA_BUS_BYTES

    def transfer_cycles(self, rows: int, row_bytes: int, offset: int = 0) -> int:
        beats = math.ceil((offset % self.bus_bytes + row_bytes) / self.bus_bytes)
        return self.init_latency + rows * beats

    def transfers(self, spec: StencilSpec, tile: TileShape) -> list:
        """(rows, row bytes, line offset) per 2D/3D transfer: input footprints first, then the output.

        An input array moves only the box its taps reach around the interior,
        so an array read at offset zero moves no halo.
        """
        elem = tile.elem_size
        h = tile.halo
        ix = tile.interior[-1]
        out = []
        for array in spec.input_arrays:
            offsets = [t.offset for t in spec.taps if t.array == array]
            if not offsets:
                continue
            lo = [min(o[d] for o in offsets) for d in range(tile.dims)]
            hi = [max(o[d] for o in offsets) for d in range(tile.dims)]
            extents = [n + hi[d] - lo[d] for d, n in enumerate(tile.interior)]
            offset = ((ix + h + lo[-1]) * elem) % self.bus_bytes
            out.append((math.prod(extents[:-1]), extents[-1] * elem, offset))
        out.append((tile.interior_cells // ix, ix * elem, (h * elem) % self.bus_bytes))
        return out

    def tile_traffic(self, spec: StencilSpec, tile: TileShape) -> tuple:
        """(bytes moved, busy cycles) to fetch the next tile and write back the previous one."""
        moves = self.transfers(spec, tile)
        nbytes = sum(rows * row_bytes for rows, row_bytes, _ in moves)
        busy = sum(self.transfer_cycles(*move) for move in moves)
        return nbytes, busy


class DmaEngine:
    """Transfer queue of one tile iteration, stepped in lockstep with the cores."""

    def __init__(self, model: DmaModel, spec: StencilSpec, tile: TileShape):
        self.queue = deque(c for c in (model.transfer_cycles(*m) for m in model.transfers(spec, tile)) if c > 0)
        self.busy_cycles = 0

    @property
    def idle(self) -> bool:
        return not self.queue

    def step(self) -> None:
        if not self.queue:
            return
        self.busy_cycles += 1
        self.queue[0] -= 1
        if not self.queue[0]:
            self.queue.popleft()

    def drain(self) -> int:
        """Run the remaining transfers without cores to overlap; returns the total busy cycles."""
        while self.queue:
            self.busy_cycles += self.queue.popleft()
        return self.busy_cycles


@dataclass
class ClusterMetrics:
    kernel: str
    variant: str
    cycles: int
    compute_cycles: int = 0
    cores: list = field(default_factory=list)
    fpu_util: float = 0.0
    fpu_util_geomean: float = 0.0
    ipc: float = 0.0
    dma_bytes: int = 0
    dma_cycles: int = 0
    dma_bw_util: float = 0.0
    imbalance: tuple = ()
    bank_conflicts: int = 0
    unroll: int = 1
    flops: int = 0
    points: int = 0

    @property
    def imbalance_max(self) -> float:
        """Slowest over fastest active core."""
        return 1.0 / min(self.imbalance) if self.imbalance else 1.0


def geomean(values) -> float:
    values = [v for v in values if v > 0]
    if not values:
        return 0.0
    return float(np.exp(np.mean(np.log(values))))


def distribute(spec: StencilSpec, tile: TileShape, cores: int = 8) -> list:
    if tile.dims != spec.dims:
        raise ValueError(f"{spec.name} needs a {spec.dims}D tile")
    return core_iterations(tile, cores)


def measure_imbalance(finish_times) -> tuple:
    """Finish times normalized to the slowest core; idle cores are left out."""
    times = [t for t in finish_times if t > 0]
    if not times:
        return ()
    slowest = max(times)
    return tuple(t / slowest for t in times)


def compile_variant(spec: StencilSpec, tile: TileShape, variant: str, opt: OptConfig) -> tuple:
    """(per-core programs, reference association tag) for one variant."""
    if variant == "saris":
        program = compile_saris(spec, tile, opt)
        return program.cores, program.association
    if variant == "base":
        return compile_baseline_cluster(spec, tile, opt), opt.association
    raise ValueError(f"unknown variant {variant!r}")


def preload(tcdm: TcdmModel, spec: StencilSpec, tile: Tile, programs: list, layout) -> None:
    for name, arr in tile.arrays.items():
        tcdm.load(layout.array_base[name], arr)
    values = coefficient_values(spec, tile)
    seen = set()
    for prog in programs:
        for addr, names in prog.preload:
            if (addr, names) in seen:
                continue
            seen.add((addr, names))
            tcdm.load(addr, [values[n] for n in names])


def verify(spec: StencilSpec, tile: Tile, result: np.ndarray, assoc: str) -> None:
    expected = run_reference(spec, tile, assoc).out
    if np.array_equal(result, expected):
        return
    bad = np.argwhere(result != expected)
    where = tuple(int(v) for v in bad[0])
    raise VerificationError(
        f"{spec.name}: {len(bad)} points differ from the reference, first at {where} "
        f"({result[where]!r} != {expected[where]!r})"
    )


def run_cluster(spec: StencilSpec, variant: str, tile: TileShape, opt: OptConfig | None = None,
                timing: TimingParams | None = None, seed: int = 42, dma: DmaModel | None = None,
                trace: bool = False) -> tuple:
    """Simulate one tile iteration on all cores; returns (ClusterMetrics, per-core StreamCore).

    Metrics are only produced once the output tile matches the reference.
    """
    opt = opt or OptConfig()
    timing = timing or TimingParams(fpu_latency=opt.fpu_latency, frep_length=opt.frep_length)
    dma = dma or DmaModel()
    layout = plan_layout(spec, tile, opt.cores)
    programs, assoc = compile_variant(spec, tile, variant, opt)
    data = make_tile(spec, tile, seed)

    tcdm = TcdmModel(requestors=opt.cores * PORTS_PER_CORE)
    preload(tcdm, spec, data, programs, layout)
    cores = [StreamCore(prog, tcdm, timing, trace=trace) for prog in programs]
    engine = DmaEngine(dma, spec, tile)

    grants: list = []
    while True:
        requests = []
        for core in cores:
            requests.extend(core.step(grants))
        if all(core.done for core in cores):
            break
        engine.step()
        grants = tcdm.arbitrate(requests)
    engine.drain()

    result = tcdm.dump(layout.array_base[spec.output_array], tile.cells).reshape(tile.extents)
    verify(spec, data, result, assoc)
    return collect_metrics(spec, variant, tile, opt, cores, tcdm, dma, engine), cores


def collect_metrics(spec: StencilSpec, variant: str, tile: TileShape, opt: OptConfig,
                    cores: list, tcdm: TcdmModel, dma: DmaModel,
                    engine: DmaEngine | None = None) -> ClusterMetrics:
    """Cluster cycles are the longer of the slowest core and the overlapped DMA traffic."""
    per_core: list[CoreMetrics] = [c.metrics for c in cores]
    compute_cycles = max((m.cycles for m in per_core), default=0)
    compute = sum(m.compute_cycles for m in per_core)
    active = [m for m, c in zip(per_core, cores) if c.program.points]
    nbytes, busy = dma.tile_traffic(spec, tile)
    if engine is not None:
        busy = engine.drain()
    cycles = max(compute_cycles, busy)
    return ClusterMetrics(
        kernel=spec.name,
        variant=variant,
        cycles=cycles,
        compute_cycles=compute_cycles,
        cores=per_core,
        fpu_util=compute / (len(per_core) * cycles) if cycles else 0.0,
        fpu_util_geomean=geomean(m.fpu_util for m in active),
        ipc=geomean(m.ipc for m in active),
        dma_bytes=nbytes,
        dma_cycles=busy,
        dma_bw_util=nbytes / (dma.bus_bytes * busy) if busy else 0.0,
        imbalance=measure_imbalance(m.cycles for m in active),
        bank_conflicts=tcdm.conflicts,
        unroll=opt.unroll,
        flops=sum(m.flops for m in per_core),
        points=tile.interior_cells,
    )

"""Cycle-approximate model of one stream-register core.

The integer pipeline issues at most one instruction per cycle and offloads FP
instructions into an in-order FP queue; the FREP sequencer feeds the same
queue from its buffer, which lets the integer pipeline run ahead
(pseudo-dual-issue). Three stream units map ft0-ft2 onto memory streams.
The core is stepped externally: `step(grants)` consumes the grants for the
requests it returned on the previous cycle and returns the next requests.
"""
from __future__ import annotations

from collections import Counter, deque
from dataclasses import dataclass, field
from typing import Protocol

from core_program import FP_ARITH, SR_REGS, CoreProgram, Instr

PORT_LSU = 3
PORTS_PER_CORE = 4
NEVER = 1 << 60


class StreamProtocolError(RuntimeError):
    pass


class TcdmFault(RuntimeError):
    pass


@dataclass(frozen=True)
class TimingParams:
    fpu_latency: int = 3
    tcdm_latency: int = 1
    fifo_depth: int = 4
    frep_length: int = 16
    fpu_queue_depth: int = 8
    lsu_depth: int = 4
    branch_penalty: int = 1
    icache_penalty: int = 0
    icache_line: int = 8
    max_idle_cycles: int = 10_000


@dataclass(eq=False)
class MemRequest:
    core: int
    port: int
    addr: int
    write: bool = False
    value: float = 0.0
    width: int = 8
    tag: tuple = ()

    @property
    def requestor(self) -> int:
        return self.core * PORTS_PER_CORE + self.port


class Memory(Protocol):
    def read(self, addr: int) -> float: ...

    def write(self, addr: int, value: float) -> None: ...

    def arbitrate(self, requests: list) -> list: ...


@dataclass
class CoreMetrics:
    cycles: int = 0
    retired_int: int = 0
    retired_fp: int = 0
    compute_cycles: int = 0
    flops: int = 0
    stalls: Counter = field(default_factory=Counter)
    sr_pushed: list = field(default_factory=lambda: [0, 0, 0])
    sr_popped: list = field(default_factory=lambda: [0, 0, 0])
    launches: list = field(default_factory=lambda: [0, 0, 0])

    @property
    def ipc(self) -> float:
        return (self.retired_int + self.retired_fp) / self.cycles if self.cycles else 0.0

    @property
    def fpu_util(self) -> float:
        return self.compute_cycles / self.cycles if self.cycles else 0.0


class StreamUnit:
    """One SR slot: address generator plus a FIFO of (ready cycle, value).

    A launch that arrives while the generator is still running waits in a
    one-deep shadow slot and starts once the running stream has issued its
    last request, so back-to-back blocks stream without a bubble.
    """

    def __init__(self, index: int, depth: int):
        self.index = index
        self.depth = depth
        self.index_sets: dict = {}
        self.configured = False
        self.mode = None
        self.write = False
        self.fifo: deque = deque()
        self.remaining = 0
        self.pending = None
        self.indices: tuple = ()
        self.idx_addr = 0
        self.base = 0
        self.cursor = 0
        self.word_loaded = -1
        self.word_ready = 0
        self._addresses = None
        self.next_addr = 0
        self.queued: tuple = ()

    @property
    def busy(self) -> bool:
        return self.remaining > 0

    @property
    def saturated(self) -> bool:
        return self.busy and bool(self.queued)

    def undelivered(self) -> bool:
        return not self.write and bool(self.fifo or self.remaining or self.queued)

    def submit(self, launch: tuple) -> None:
        """Start `launch` now, or park it in the shadow slot behind the running stream."""
        if self.busy:
            self.queued = launch
        else:
            self._start(launch)

    def activate_queued(self) -> None:
        if self.queued and not self.busy:
            launch, self.queued = self.queued, ()
            self._start(launch)

    def _start(self, launch: tuple) -> None:
        if launch[0] == "indirect":
            self.launch_indirect(*launch[1:])
        else:
            self.launch_affine(*launch[1:])

    def launch_indirect(self, iset, base: int) -> None:
        self.mode, self.write = "indirect", False
        self.indices, self.idx_addr, self.base = iset.indices, iset.addr, base
        self.cursor, self.word_loaded = 0, -1
        self.remaining = len(iset.indices)
        self.configured = True

    def launch_affine(self, desc) -> None:
        self.mode, self.write = "affine", desc.write
        self._addresses = desc.addresses()
        self.remaining = desc.length
        self.next_addr = next(self._addresses) if self.remaining else 0
        self.configured = True

    def advance(self) -> None:
        self.remaining -= 1
        if self.mode == "indirect":
            self.cursor += 1
        elif self.remaining:
            self.next_addr = next(self._addresses)

    def ready_count(self, now: int) -> int:
        n = 0
        for ready, _ in self.fifo:
            if ready > now:
                break
            n += 1
        return n


class StreamCore:
    def __init__(self, program: CoreProgram, memory: Memory, timing: TimingParams | None = None,
                 core_id: int | None = None, trace: bool = False):
        self.program = program
        self.memory = memory
        self.timing = timing or TimingParams()
        self.core_id = program.core if core_id is None else core_id
        self.instrs = program.instrs
        self.labels = program.labels
        self.int_regs: dict = {"zero": 0}
        self.fp_regs: dict = {}
        self.fp_ready: dict = {}
        self.pc = 0
        self.cycle = 0
        self.done = False
        self.sr_enabled = False
        self.srs = [StreamUnit(i, self.timing.fifo_depth) for i in range(3)]
        self.fpq: deque = deque()
        self.lsu: deque = deque()
        self.seq_window: list = []
        self.seq_pos = 0
        self.seq_reps = 0
        self.seq_done = 0
        self.int_hold_until = 0
        self.int_hold_cause = ""
        self.fetched_lines: set = set()
        self.metrics = CoreMetrics()
        self.trace: list | None = [] if trace else None
        self._last_progress = 0

    # --------------------------------------------------------------- helpers

    @property
    def frep_active(self) -> bool:
        return self.seq_reps > 0

    def _mapped(self, reg: str):
        if not self.sr_enabled or reg not in SR_REGS:
            return None
        sr = self.srs[SR_REGS.index(reg)]
        return sr if sr.configured else None

    def _int(self, reg: str) -> int:
        return 0 if reg == "zero" else self.int_regs.get(reg, 0)

    def _check(self, addr: int, width: int = 8) -> None:
        if addr % width:
            raise TcdmFault(f"core {self.core_id}: misaligned {width}-byte access at {addr:#x}")

    def _drained(self, now: int) -> bool:
        if self.fpq or self.frep_active or self.lsu:
            return False
        if any(sr.write and (sr.fifo or sr.pending or sr.remaining or sr.queued) for sr in self.srs):
            return False
        return all(r <= now for r in self.fp_ready.values())

    def _stall(self, cause: str) -> str:
        self.metrics.stalls[cause] += 1
        return cause

    # --------------------------------------------------------------- launches

    def launch_indirect(self, mask: tuple, base: int, set_name: str) -> bool:
        """Restart the masked indirect SRs at `base`.

        A launch behind a running stream waits in the shadow slot. The result
        is False only while a masked SR already holds a queued launch, and
        then none of the masked SRs takes the launch.
        """
        for s in mask:
            if s > 1:
                raise StreamProtocolError(f"SR{s} cannot stream indirectly")
            if set_name not in self.srs[s].index_sets:
                raise StreamProtocolError(f"SR{s} launched with unconfigured index set {set_name!r}")
        if any(self.srs[s].saturated for s in mask):
            return False
        for s in mask:
            self.srs[s].submit(("indirect", self.srs[s].index_sets[set_name], base))
            self.metrics.launches[s] += 1
        return True

    def launch_affine(self, sr: int, desc_name: str) -> bool:
        if desc_name not in self.program.affine:
            raise StreamProtocolError(f"unknown affine descriptor {desc_name!r}")
        unit = self.srs[sr]
        if unit.saturated:
            return False
        unit.submit(("affine", self.program.affine[desc_name]))
        self.metrics.launches[sr] += 1
        return True

    # --------------------------------------------------------------- memory

    def _complete(self, granted: set, now: int) -> None:
        lat = self.timing.tcdm_latency
        for sr in self.srs:
            req = sr.pending
            if req is None:
                continue
            if id(req) not in granted:
                self.metrics.stalls["tcdm_conflict"] += 1
                continue
            sr.pending = None
            self._last_progress = now
            if req.tag == ("index",):
                sr.word_loaded = req.addr
                sr.word_ready = now + lat
            elif req.write:
                self.memory.write(req.addr, req.value)
                sr.fifo.popleft()
                sr.advance()
            else:
                sr.fifo.append((now + lat, self.memory.read(req.addr)))
                self.metrics.sr_pushed[sr.index] += 1
                sr.advance()
        if self.lsu:
            req = self.lsu[0]
            if id(req) not in granted:
                self.metrics.stalls["tcdm_conflict"] += 1
                return
            self.lsu.popleft()
            self._last_progress = now
            if req.tag and req.tag[0] == "load":
                reg = req.tag[1]
                self.fp_regs[reg] = self.memory.read(req.addr)
                self.fp_ready[reg] = now + lat
            elif req.tag != ("int",):
                self.memory.write(req.addr, req.value)

    def _generate(self, now: int) -> None:
        for sr in self.srs:
            if sr.pending is None:
                sr.activate_queued()
            if sr.pending is not None or not sr.remaining:
                continue
            if sr.write:
                if sr.fifo and sr.fifo[0][0] <= now:
                    self._check(sr.next_addr)
                    sr.pending = MemRequest(self.core_id, sr.index, sr.next_addr, True, sr.fifo[0][1])
                continue
            if len(sr.fifo) >= sr.depth:
                continue
            if sr.mode == "indirect":
                word = sr.idx_addr + 8 * (sr.cursor // 4)
                if word != sr.word_loaded:
                    sr.pending = MemRequest(self.core_id, sr.index, word, tag=("index",))
                    continue
                if sr.word_ready > now:
                    continue
                addr = sr.base + 8 * sr.indices[sr.cursor]
            else:
                addr = sr.next_addr
            self._check(addr)
            sr.pending = MemRequest(self.core_id, sr.index, addr)

    # --------------------------------------------------------------- FPU

    def _fpu_issue(self, now: int) -> str:
        if not self.fpq:
            return ""
        ins, addr = self.fpq[0]
        op = ins.op
        if op == "fld":
            if len(self.lsu) >= self.timing.lsu_depth:
                return self._stall("tcdm_conflict")
            if self.fp_ready.get(ins.rd, 0) > now:
                return self._stall("dependency")
            self._check(addr)
            self.lsu.append(MemRequest(self.core_id, PORT_LSU, addr, tag=("load", ins.rd)))
            self.fp_ready[ins.rd] = NEVER
        elif op == "fsd":
            if len(self.lsu) >= self.timing.lsu_depth:
                return self._stall("tcdm_conflict")
            if self.fp_ready.get(ins.rs[0], 0) > now:
                return self._stall("dependency")
            self._check(addr)
            self.lsu.append(MemRequest(self.core_id, PORT_LSU, addr, True, self.fp_regs.get(ins.rs[0], 0.0)))
        else:
            pops = [0, 0, 0]
            for reg in ins.rs:
                sr = self._mapped(reg)
                if sr is not None:
                    if sr.write:
                        raise StreamProtocolError(f"read from write stream {reg}")
                    pops[sr.index] += 1
                elif self.fp_ready.get(reg, 0) > now:
                    return self._stall("dependency")
            for sr in self.srs:
                if pops[sr.index] and sr.ready_count(now) < pops[sr.index]:
                    return self._stall("fifo_empty")
            out_sr = self._mapped(ins.rd)
            if out_sr is not None:
                if not out_sr.write:
                    raise StreamProtocolError(f"write to read stream {ins.rd}")
                if len(out_sr.fifo) >= out_sr.depth:
                    return self._stall("fifo_full")
            elif self.fp_ready.get(ins.rd, 0) == NEVER:
                return self._stall("dependency")

            vals = []
            for reg in ins.rs:
                sr = self._mapped(reg)
                if sr is not None:
                    vals.append(sr.fifo.popleft()[1])
                    self.metrics.sr_popped[sr.index] += 1
                else:
                    vals.append(self.fp_regs.get(reg, 0.0))
            kind = FP_ARITH.get(op)
            if kind == "add":
                value = vals[0] + vals[1]
            elif kind == "mul":
                value = vals[0] * vals[1]
            elif kind == "fma":
                value = vals[0] * vals[1] + vals[2]
            else:
                value = vals[0]
            ready = now + self.timing.fpu_latency
            if out_sr is not None:
                out_sr.fifo.append((ready, value))
            else:
                self.fp_regs[ins.rd] = value
                self.fp_ready[ins.rd] = ready
            if kind:
                self.metrics.compute_cycles += 1
                self.metrics.flops += 2 if kind == "fma" else 1
        self.fpq.popleft()
        self.metrics.retired_fp += 1
        self._last_progress = now
        return ""

    def _sequence(self) -> None:
        if not self.frep_active or len(self.fpq) >= self.timing.fpu_queue_depth:
            return
        self.fpq.append((self.seq_window[self.seq_pos], 0))
        self.seq_pos += 1
        if self.seq_pos == len(self.seq_window):
            self.seq_pos = 0
            self.seq_done += 1
            if self.seq_done == self.seq_reps:
                self.seq_reps = 0

    # --------------------------------------------------------------- integer pipeline

    def _int_issue(self, now: int) -> str:
        if self.int_hold_until > now:
            return self._stall(self.int_hold_cause)
        if self.pc >= len(self.instrs):
            return ""
        ins: Instr = self.instrs[self.pc]
        if self.timing.icache_penalty:
            line = self.pc // self.timing.icache_line
            if line not in self.fetched_lines:
                self.fetched_lines.add(line)
                self.int_hold_until = now + self.timing.icache_penalty
                self.int_hold_cause = "icache"
                return self._stall("icache")

        op = ins.op
        if ins.is_fp:
            if self.frep_active:
                return self._stall("frep_busy")
            if len(self.fpq) >= self.timing.fpu_queue_depth:
                return self._stall("fpu_busy")
            addr = 0
            if op == "fld":
                addr = self._int(ins.rs[0]) + ins.imm
            elif op == "fsd":
                addr = self._int(ins.rs[1]) + ins.imm
            self.fpq.append((ins, addr))
            self.pc += 1
            self._last_progress = now
            return ""

        next_pc = self.pc + 1
        regs = self.int_regs
        if op == "li":
            regs[ins.rd] = ins.imm
        elif op == "addi":
            regs[ins.rd] = self._int(ins.rs[0]) + ins.imm
        elif op == "add":
            regs[ins.rd] = self._int(ins.rs[0]) + self._int(ins.rs[1])
        elif op == "mv":
            regs[ins.rd] = self._int(ins.rs[0])
        elif op in ("bne", "beq"):
            differ = self._int(ins.rs[0]) != self._int(ins.rs[1])
            if differ == (op == "bne"):
                next_pc = self.labels[ins.label]
                self.int_hold_until = now + 1 + self.timing.branch_penalty
                self.int_hold_cause = "branch"
        elif op == "frep.o":
            if self.frep_active:
                return self._stall("frep_busy")
            window = self.instrs[self.pc + 1:self.pc + 1 + ins.imm]
            if len(window) > self.timing.frep_length:
                raise StreamProtocolError(f"FREP window of {len(window)} exceeds buffer of {self.timing.frep_length}")
            if any(w.op not in FP_ARITH and w.op != "fmv.d" for w in window):
                raise StreamProtocolError("FREP window may only hold FP compute and moves")
            reps = self._int(ins.rs[0])
            if reps > 0 and window:
                self.seq_window, self.seq_pos, self.seq_done, self.seq_reps = window, 0, 0, reps
            next_pc = self.pc + 1 + ins.imm
        elif op == "scfgw":
            pass
        elif op == "srcfg.idx":
            sr, name = ins.args
            key = (sr, name)
            if key not in self.program.index_sets:
                raise StreamProtocolError(f"no index set {name!r} for SR{sr}")
            self.srs[sr].index_sets[name] = self.program.index_sets[key]
            self.srs[sr].configured = True
        elif op == "srlaunch":
            mask, name = ins.args
            if not self.launch_indirect(mask, self._int(ins.rs[0]), name):
                return self._stall("sr_busy")
        elif op == "srlaunch.aff":
            if not self.launch_affine(*ins.args):
                return self._stall("sr_busy")
        elif op == "srenable":
            self.sr_enabled = True
        elif op == "srdisable":
            for sr in self.srs:
                if sr.configured and sr.undelivered():
                    raise StreamProtocolError(f"srdisable with undelivered values on SR{sr.index}")
            self.sr_enabled = False
        elif op == "sw":
            if len(self.lsu) >= self.timing.lsu_depth:
                return self._stall("tcdm_conflict")
            addr = self._int(ins.rs[1]) + ins.imm
            self._check(addr, 4)
            self.lsu.append(MemRequest(self.core_id, PORT_LSU, addr, True, 0.0, width=4, tag=("int",)))
        elif op == "srfence":
            if not self._drained(now):
                return self._stall("drain")
        else:
            raise StreamProtocolError(f"unknown instruction {op!r}")
        self.pc = next_pc
        self.metrics.retired_int += 1
        self._last_progress = now
        return ""

    # --------------------------------------------------------------- stepping

    def halted(self, now: int) -> bool:
        return self.pc >= len(self.instrs) and self._drained(now)

    def step(self, grants=()) -> list:
        """Advance one cycle; returns the memory requests presented this cycle."""
        if self.done:
            return []
        now = self.cycle
        granted = {id(r) for r in grants}
        self._complete(granted, now)
        if self.halted(now):
            self.done = True
            self.metrics.cycles = now
            return []
        pc = self.pc
        fp_cause = self._fpu_issue(now)
        self._sequence()
        int_cause = self._int_issue(now)
        self._generate(now)
        if self.trace is not None:
            text = self.instrs[pc].text().strip() if pc < len(self.instrs) else "-"
            cause = ",".join(c for c in (int_cause, fp_cause) if c) or "-"
            self.trace.append(f"{now} {pc} {text} {cause}")
        if now - self._last_progress > self.timing.max_idle_cycles:
            raise StreamProtocolError(f"core {self.core_id} made no progress for "
                                      f"{self.timing.max_idle_cycles} cycles at pc {self.pc}")
        self.cycle += 1
        requests = [sr.pending for sr in self.srs if sr.pending is not None]
        if self.lsu:
            requests.append(self.lsu[0])
        return requests


def launch_indirect(core: StreamCore, sr_mask: tuple, base_offset: int, set_name: str = "blk") -> bool:
    return core.launch_indirect(sr_mask, base_offset, set_name)


def run_to_completion(core: StreamCore, memory: Memory | None = None) -> CoreMetrics:
    """Step a core against a memory arbiter until it halts."""
    memory = memory or core.memory
    grants: list = []
    while True:
        requests = core.step(grants)
        if core.done:
            return core.metrics
        grants = memory.arbitrate(requests)

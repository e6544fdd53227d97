import unittest

from cluster_sim import TcdmModel
from core_program import AffineDesc, CoreProgram, IndexSet, Instr
from stream_core_vm import (
    StreamCore,
    StreamProtocolError,
    TcdmFault,
    TimingParams,
    launch_indirect,
    run_to_completion,
)


def _program(instrs, labels=None, index_sets=None, affine=None):
    return CoreProgram("test", "saris", 0, list(instrs), labels or {},
                       index_sets=index_sets or {}, affine=affine or {})


def _run(prog, words=(), timing=None, trace=False):
    tcdm = TcdmModel(requestors=4)
    tcdm.load(0, list(words) or [0.0])
    core = StreamCore(prog, tcdm, timing, trace=trace)
    metrics = run_to_completion(core, tcdm)
    return core, metrics, tcdm


class TestPipeline(unittest.TestCase):
    def test_empty_program(self):
        _, metrics, _ = _run(_program([]))
        self.assertEqual(metrics.cycles, 0)
        self.assertEqual(metrics.fpu_util, 0.0)
        self.assertEqual(metrics.ipc, 0.0)

    def test_dependent_fma_bubbles(self):
        prog = _program([
            Instr("fmadd.d", "fa0", ("fa1", "fa2", "fa3")),
            Instr("fmadd.d", "fa0", ("fa1", "fa2", "fa0")),
        ])
        _, metrics, _ = _run(prog, timing=TimingParams(fpu_latency=3))
        self.assertEqual(metrics.stalls["dependency"], 2)
        self.assertEqual(metrics.compute_cycles, 2)
        self.assertEqual(metrics.flops, 4)
        self.assertEqual(metrics.retired_fp, 2)

    def test_taken_branch_costs_one_bubble(self):
        prog = _program([
            Instr("li", "t1", imm=2),
            Instr("addi", "t1", ("t1",), -1),
            Instr("bne", rs=("t1", "zero"), label="loop"),
        ], labels={"loop": 1})
        core, metrics, _ = _run(prog)
        self.assertEqual(metrics.stalls["branch"], 1)
        self.assertEqual(metrics.retired_int, 5)
        self.assertEqual(core.int_regs["t1"], 0)

    def test_loads_and_stores(self):
        prog = _program([
            Instr("fld", "fa1", ("zero",), 8),
            Instr("fmul.d", "fa2", ("fa1", "fa1")),
            Instr("fsd", rs=("fa2", "zero"), imm=16),
        ])
        core, _, tcdm = _run(prog, words=(0.0, 3.0, 0.0))
        self.assertEqual(tcdm.read(16), 9.0)
        self.assertEqual(core.fp_regs["fa2"], 9.0)

    def test_misaligned_load_faults(self):
        prog = _program([Instr("fld", "fa0", ("zero",), 4)])
        with self.assertRaises(TcdmFault):
            _run(prog)

    def test_icache_penalty(self):
        prog = _program([Instr("li", "t1", imm=1), Instr("li", "t2", imm=2)])
        _, plain, _ = _run(prog)
        _, cold, _ = _run(prog, timing=TimingParams(icache_penalty=5))
        self.assertEqual(plain.cycles, 2)
        self.assertEqual(cold.cycles, 7)
        self.assertEqual(cold.stalls["icache"], 5)

    def test_trace_lines(self):
        prog = _program([Instr("li", "t1", imm=1)])
        core, _, _ = _run(prog, trace=True)
        self.assertEqual(core.trace[0].split()[:3], ["0", "0", "li"])
        self.assertTrue(core.trace[0].endswith("-"))


class TestHardwareLoop(unittest.TestCase):
    def test_pseudo_dual_issue(self):
        instrs = [
            Instr("li", "t5", imm=4),
            Instr("frep.o", rs=("t5",), imm=2),
            Instr("fadd.d", "fa0", ("fa1", "fa2")),
            Instr("fmul.d", "fa3", ("fa1", "fa2")),
        ] + [Instr("addi", "t1", ("t1",), 1) for _ in range(8)]
        core, metrics, _ = _run(_program(instrs))
        self.assertEqual(metrics.compute_cycles, 8)
        self.assertEqual(core.int_regs["t1"], 8)
        self.assertGreater(metrics.ipc, 1.0)
        self.assertLessEqual(metrics.ipc, 2.0)

    def test_window_rejects_memory_ops(self):
        prog = _program([
            Instr("li", "t5", imm=1),
            Instr("frep.o", rs=("t5",), imm=1),
            Instr("fld", "fa0", ("zero",), 0),
        ])
        with self.assertRaises(StreamProtocolError):
            _run(prog)

    def test_window_longer_than_buffer(self):
        instrs = [Instr("li", "t5", imm=1), Instr("frep.o", rs=("t5",), imm=3)]
        instrs += [Instr("fadd.d", "fa0", ("fa1", "fa2"))] * 3
        with self.assertRaises(StreamProtocolError):
            _run(_program(instrs), timing=TimingParams(frep_length=2))


class TestStreams(unittest.TestCase):
    def _stream_program(self):
        sets = {
            (0, "blk"): IndexSet((0, 1), 4096),
            (1, "blk"): IndexSet((2, 3), 4104),
        }
        return _program([
            Instr("li", "t0", imm=0),
            Instr("srcfg.idx", args=(0, "blk")),
            Instr("srcfg.idx", args=(1, "blk")),
            Instr("srlaunch", rs=("t0",), args=((0, 1), "blk")),
            Instr("srenable"),
            Instr("fadd.d", "fa0", ("ft0", "ft1")),
            Instr("fadd.d", "fa1", ("ft0", "ft1")),
            Instr("srfence"),
            Instr("srdisable"),
        ], index_sets=sets)

    def test_indirect_reads(self):
        core, metrics, _ = _run(self._stream_program(), words=(1.0, 2.0, 3.0, 4.0))
        self.assertEqual(core.fp_regs["fa0"], 4.0)
        self.assertEqual(core.fp_regs["fa1"], 6.0)
        self.assertEqual(metrics.sr_pushed, [2, 2, 0])
        self.assertEqual(metrics.sr_popped, metrics.sr_pushed)
        self.assertEqual(metrics.launches, [1, 1, 0])

    def test_output_is_independent_of_latencies(self):
        results = set()
        for lat in (1, 2, 5):
            core, _, _ = _run(self._stream_program(), words=(1.0, 2.0, 3.0, 4.0),
                              timing=TimingParams(fpu_latency=lat, tcdm_latency=lat, fifo_depth=1))
            results.add((core.fp_regs["fa0"], core.fp_regs["fa1"]))
        self.assertEqual(results, {(4.0, 6.0)})

    def test_affine_write_stream(self):
        prog = _program([
            Instr("srlaunch.aff", args=(2, "out")),
            Instr("srenable"),
            Instr("fld", "fa1", ("zero",), 0),
            Instr("fadd.d", "ft2", ("fa1", "fa1")),
            Instr("fmul.d", "ft2", ("fa1", "fa1")),
            Instr("srfence"),
            Instr("srdisable"),
        ], affine={"out": AffineDesc(64, (2,), (8,), write=True)})
        _, _, tcdm = _run(prog, words=(1.5,))
        self.assertEqual(tcdm.read(64), 3.0)
        self.assertEqual(tcdm.read(72), 2.25)

    def test_unconfigured_register_is_plain(self):
        prog = _program([
            Instr("fld", "ft0", ("zero",), 0),
            Instr("fadd.d", "fa0", ("ft0", "ft0")),
        ])
        core, _, _ = _run(prog, words=(2.0,))
        self.assertEqual(core.fp_regs["fa0"], 4.0)

    def test_read_from_write_stream(self):
        prog = _program([
            Instr("srlaunch.aff", args=(2, "out")),
            Instr("srenable"),
            Instr("fadd.d", "fa0", ("ft2", "ft2")),
        ], affine={"out": AffineDesc(64, (1,), (8,), write=True)})
        with self.assertRaises(StreamProtocolError):
            _run(prog)

    def test_launch_without_index_set(self):
        prog = _program([Instr("srlaunch", rs=("zero",), args=((0,), "blk"))])
        with self.assertRaises(StreamProtocolError):
            _run(prog)

    def test_relaunch_is_queued_behind_generator(self):
        tcdm = TcdmModel(requestors=4)
        core = StreamCore(_program([]), tcdm)
        core.srs[0].index_sets["blk"] = IndexSet((0, 1, 2), 4096)
        self.assertTrue(launch_indirect(core, (0,), 0))
        self.assertTrue(launch_indirect(core, (0,), 8))
        self.assertEqual(core.srs[0].base, 0)
        self.assertFalse(launch_indirect(core, (0,), 16))
        self.assertEqual(core.metrics.launches, [2, 0, 0])

    def test_queued_launch_streams_in_order(self):
        prog = _program([
            Instr("li", "t0", imm=0),
            Instr("li", "t1", imm=16),
            Instr("srcfg.idx", args=(0, "blk")),
            Instr("srlaunch", rs=("t0",), args=((0,), "blk")),
            Instr("srlaunch", rs=("t1",), args=((0,), "blk")),
            Instr("srenable"),
            Instr("fadd.d", "fa0", ("ft0", "ft0")),
            Instr("fadd.d", "fa1", ("ft0", "ft0")),
            Instr("srfence"),
            Instr("srdisable"),
        ], index_sets={(0, "blk"): IndexSet((0, 1), 4096)})
        core, metrics, _ = _run(prog, words=(1.0, 2.0, 10.0, 20.0))
        self.assertEqual(core.fp_regs["fa0"], 3.0)
        self.assertEqual(core.fp_regs["fa1"], 30.0)
        self.assertEqual(metrics.stalls["sr_busy"], 0)

    def test_disable_with_undelivered_values(self):
        prog = _program([
            Instr("srcfg.idx", args=(0, "blk")),
            Instr("srlaunch", rs=("zero",), args=((0,), "blk")),
            Instr("srenable"),
            Instr("fadd.d", "fa0", ("ft0", "ft0")),
            Instr("srfence"),
            Instr("srdisable"),
        ], index_sets={(0, "blk"): IndexSet((0, 1, 2), 4096)})
        with self.assertRaises(StreamProtocolError):
            _run(prog, words=(1.0, 2.0, 3.0))

    def test_starved_stream_is_reported(self):
        prog = _program([
            Instr("srcfg.idx", args=(0, "blk")),
            Instr("srenable"),
            Instr("fadd.d", "fa0", ("ft0", "ft0")),
        ], index_sets={(0, "blk"): IndexSet((0,), 4096)})
        with self.assertRaises(StreamProtocolError):
            _run(prog, timing=TimingParams(max_idle_cycles=50))

    def test_deterministic(self):
        a = _run(self._stream_program(), words=(1.0, 2.0, 3.0, 4.0))[1]
        b = _run(self._stream_program(), words=(1.0, 2.0, 3.0, 4.0))[1]
        self.assertEqual(a, b)


if __name__ == "__main__":
    unittest.main()

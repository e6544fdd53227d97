import dataclasses
import os
import tempfile
import unittest

from scaleout_model import (
    MachineDescriptor,
    MachineFileError,
    ScaleoutInputError,
    analytic_cluster_metrics,
    classify_boundedness,
    estimate,
    expected_max_imbalance,
    load_machine,
    memory_bound_speedup,
    suite_summary,
)
from stencil_ir import TileShape, catalog, kernel_by_name
from test_cluster_sim import suite_results

FULL_SUITE = os.getenv("SARIS_FULL_SUITE") == "1"


def _analytic(spec, tile=None):
    tile = tile or TileShape.for_spec(spec)
    return {v: analytic_cluster_metrics(spec, v, tile) for v in ("base", "saris")}


def _analytic_suite(machine=None):
    machine = machine or MachineDescriptor()
    out = []
    for spec in catalog():
        tile = TileShape.for_spec(spec)
        out.append(estimate(spec, _analytic(spec, tile), machine, tile))
    return out


class TestMachine(unittest.TestCase):
    def test_default_bandwidths(self):
        m = MachineDescriptor()
        self.assertEqual(m.clusters, 32)
        self.assertAlmostEqual(m.group_bandwidth, 51.2)
        self.assertAlmostEqual(m.cluster_bandwidth, 12.8)
        self.assertAlmostEqual(m.peak_gflops, 512.0)
        self.assertAlmostEqual(m.scaled(2).cluster_bandwidth, 25.6)

    def _write(self, tmp, text):
        path = os.path.join(tmp, "machine.env")
        with open(path, "w") as fh:
            fh.write(text)
        return path

    def test_load_machine(self):
        with tempfile.TemporaryDirectory() as tmp:
            m = load_machine(self._write(tmp, "GROUPS=4\nPINS=256\nPIN_RATE_GBPS=6.4\n"))
        self.assertEqual(m.groups, 4)
        self.assertEqual(m.pins, 256)
        self.assertAlmostEqual(m.group_bandwidth, 204.8)
        self.assertEqual(m.clusters_per_group, 4)

    def test_bad_machine_files(self):
        with tempfile.TemporaryDirectory() as tmp:
            for text in ("CHANNELS=2\n", "PINS=lots\n", "GROUPS=0\n"):
                with self.subTest(text=text):
                    with self.assertRaises(MachineFileError):
                        load_machine(self._write(tmp, text))
            with self.assertRaises(MachineFileError):
                load_machine(os.path.join(tmp, "missing.env"))


class TestImbalance(unittest.TestCase):
    def test_balanced_cluster(self):
        self.assertEqual(expected_max_imbalance((1.0,) * 8, 4), 1.0)
        self.assertEqual(expected_max_imbalance((), 4), 1.0)

    def test_exact_order_statistic(self):
        # max of four draws from {0.5, 1.0} is 0.5 only with probability 1/16
        expected = (0.5 / 16 + 15 / 16) / 0.75
        self.assertAlmostEqual(expected_max_imbalance((0.5, 1.0), 4), expected)

    def test_monte_carlo_agrees(self):
        ratios = (0.6, 0.8, 0.9, 1.0)
        exact = expected_max_imbalance(ratios, 4)
        sampled = expected_max_imbalance(ratios, 4, monte_carlo=True, seed=1)
        self.assertAlmostEqual(exact, sampled, delta=0.01)

    def test_single_draw_is_mean(self):
        self.assertAlmostEqual(expected_max_imbalance((0.5, 1.0), 1), 1.0)


class TestEstimate(unittest.TestCase):
    def test_analytic_suite_boundedness(self):
        labels, memory_bound = classify_boundedness(_analytic_suite())
        self.assertEqual(memory_bound, 7)
        for name in ("box3d1r", "j3d27pt", "star2d3r"):
            self.assertEqual(labels[name], "compute")
        self.assertEqual(labels["jacobi_2d"], "memory")

    def test_memory_time_follows_dma(self):
        spec = kernel_by_name("jacobi_2d")
        tile = TileShape.for_spec(spec)
        metrics = _analytic(spec, tile)
        est = estimate(spec, metrics, MachineDescriptor(), tile)
        # 64 B/cycle DMA against a 12.8 B/cycle cluster share
        self.assertAlmostEqual(est.tm_saris, 5 * metrics["saris"].dma_cycles)

    def test_abundant_bandwidth_is_compute_bound(self):
        _, memory_bound = classify_boundedness(_analytic_suite(MachineDescriptor().scaled(100)))
        self.assertEqual(memory_bound, 0)

    def test_unlimited_bandwidth_keeps_cluster_utilization(self):
        spec = kernel_by_name("j2d5pt")
        tile = TileShape.for_spec(spec)
        metrics = _analytic(spec, tile)
        metrics["saris"] = dataclasses.replace(metrics["saris"], imbalance=(0.5, 1.0))
        est = estimate(spec, metrics, MachineDescriptor().scaled(1e9), tile)
        imbalance = (0.5 / 16 + 15 / 16) / 0.75
        self.assertAlmostEqual(est.imbalance_factor, imbalance)
        self.assertAlmostEqual(est.fpu_util_saris, 0.81 / imbalance)

    def test_more_bandwidth_never_hurts(self):
        prev = None
        for scale in (0.5, 1, 2, 4):
            estimates = _analytic_suite(MachineDescriptor().scaled(scale))
            gflops = [e.gflops for e in estimates]
            if prev is not None:
                for a, b in zip(prev, gflops):
                    self.assertGreaterEqual(b, a)
            prev = gflops

    def test_peak_fraction_is_bounded(self):
        for est in _analytic_suite():
            with self.subTest(kernel=est.kernel):
                self.assertGreater(est.peak_fraction, 0)
                self.assertLessEqual(est.peak_fraction, 1)

    def test_missing_variant(self):
        spec = kernel_by_name("jacobi_2d")
        tile = TileShape.for_spec(spec)
        metrics = _analytic(spec, tile)
        with self.assertRaises(ScaleoutInputError):
            estimate(spec, {"saris": metrics["saris"]}, MachineDescriptor(), tile)
        metrics["base"] = dataclasses.replace(metrics["base"], cycles=0)
        with self.assertRaises(ScaleoutInputError):
            estimate(spec, metrics, MachineDescriptor(), tile)

    def test_bad_assumed_utilization(self):
        spec = kernel_by_name("jacobi_2d")
        with self.assertRaises(ScaleoutInputError):
            analytic_cluster_metrics(spec, "saris", TileShape.for_spec(spec), util=1.5)

    def test_empty_memory_bound_subset(self):
        self.assertEqual(memory_bound_speedup([]), ((), None))
        summary = suite_summary(_analytic_suite(MachineDescriptor().scaled(100)))
        self.assertIsNone(summary["memory_bound_speedup"])
        self.assertEqual(summary["memory_bound"], 0)

    def test_suite_summary(self):
        summary = suite_summary(_analytic_suite())
        self.assertEqual(len(summary["memory_bound_kernels"]), 7)
        self.assertGreater(summary["speedup"], 1.0)
        self.assertGreater(summary["memory_bound_speedup"], 1.0)

    @unittest.skipUnless(FULL_SUITE, "set SARIS_FULL_SUITE=1 to simulate the whole catalog")
    def test_simulated_suite_bands(self):
        machine = MachineDescriptor()
        best = suite_results()
        estimates = []
        for spec in catalog():
            metrics = {v: best[spec.name, v] for v in ("base", "saris")}
            estimates.append(estimate(spec, metrics, machine, TileShape.for_spec(spec)))
        summary = suite_summary(estimates)
        self.assertTrue(6 <= summary["memory_bound"] <= 8)
        self.assertTrue(1.8 <= summary["speedup"] <= 2.6)
        self.assertTrue(1.5 <= summary["memory_bound_speedup"] <= 2.1)
        self.assertTrue(all(e.base_bound == "compute" for e in estimates))
        self.assertGreater(summary["fpu_util_saris"], summary["fpu_util_base"])


if __name__ == "__main__":
    unittest.main()

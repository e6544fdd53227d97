import os
import tempfile
import unittest
from unittest import mock

import pandas as pd

import utils


def _frame(cycles=100):
    return pd.DataFrame([
        {"kernel": "jacobi_2d", "variant": "base", "cycles": cycles, "fpu_util": 0.2, "ipc": 0.9,
         "speedup": 1.0, "dma_bw_util": 0.7, "imbalance_max": 1.1},
        {"kernel": "jacobi_2d", "variant": "saris", "cycles": cycles // 2, "fpu_util": 0.6, "ipc": 1.2,
         "speedup": 2.0, "dma_bw_util": 0.7, "imbalance_max": 1.0},
    ])


class TestEnvironment(unittest.TestCase):
    def test_env_int(self):
        with mock.patch.dict(os.environ, {"SARIS_TEST_INT": "7"}):
            self.assertEqual(utils.env_int("SARIS_TEST_INT", 3), 7)
        with mock.patch.dict(os.environ, {"SARIS_TEST_INT": "seven"}):
            self.assertEqual(utils.env_int("SARIS_TEST_INT", 3), 3)
        with mock.patch.dict(os.environ, {"SARIS_TEST_INT": ""}):
            self.assertEqual(utils.env_int("SARIS_TEST_INT", 3), 3)

    def test_timing_from_env(self):
        with mock.patch.dict(os.environ, {"SARIS_FIFO_DEPTH": "2", "SARIS_FPU_LATENCY": "5"}):
            timing = utils.timing_from_env()
        self.assertEqual(timing.fifo_depth, 2)
        self.assertEqual(timing.fpu_latency, 5)
        self.assertEqual(timing.tcdm_latency, 1)


class TestArchive(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.url = f"sqlite:///{self.tmp.name}/results.db"
        utils.init_db(self.url)

    def tearDown(self):
        utils.get_engine(self.url).dispose()
        self.tmp.cleanup()

    def test_save_and_read_back(self):
        utils.save_report_data("run-a", _frame(), self.url)
        df = utils.get_report_data("run-a", self.url)
        self.assertEqual(list(df["variant"]), ["base", "saris"])
        self.assertEqual(list(df["cycles"]), [100, 50])
        self.assertAlmostEqual(df["speedup"].iloc[1], 2.0)

    def test_save_replaces_one_run(self):
        utils.save_report_data("run-a", _frame(100), self.url)
        utils.save_report_data("run-b", _frame(80), self.url)
        utils.save_report_data("run-a", _frame(60), self.url)
        self.assertEqual(list(utils.get_report_data("run-a", self.url)["cycles"]), [60, 30])
        self.assertEqual(list(utils.get_report_data("run-b", self.url)["cycles"]), [80, 40])
        self.assertEqual(utils.get_run_keys(self.url), ["run-a", "run-b"])

    def test_missing_speedup_is_stored_as_zero(self):
        df = _frame()
        df.loc[1, "speedup"] = float("nan")
        utils.save_report_data("run-c", df, self.url)
        self.assertEqual(utils.get_report_data("run-c", self.url)["speedup"].iloc[1], 0.0)

    def test_unknown_run_is_empty(self):
        self.assertTrue(utils.get_report_data("nope", self.url).empty)

    def test_connection_check(self):
        conn = utils.get_db_connection(self.url)
        conn.close()


if __name__ == "__main__":
    unittest.main()

import os
import tempfile
import unittest
from dataclasses import replace
from pathlib import Path

import numpy as np
from numpy.testing import assert_array_equal

from app.rcrn.bench import CSV_HEADER, PHASES, VARIANTS, build_variants, check_gate, median_seconds, run_bench, synthetic_batch
from app.rcrn.errors import NumericalError
from app.rcrn.schema import BenchSettings

SLOW = os.environ.get("RCRN_SLOW") == "1"

SMALL = BenchSettings(lengths=(2, 4), batch_size=2, dim=4, vocab_size=12)


class TestBench(unittest.TestCase):
    def test_grid_shape(self):
        report = run_bench(SMALL)
        self.assertEqual(len(report.rows), len(VARIANTS) * 2 * len(PHASES))
        for variant in VARIANTS:
            for T in SMALL.lengths:
                for phase in PHASES:
                    self.assertGreater(report.cell(variant, T, phase).seconds, 0.0)

    def test_csv_layout(self):
        report = run_bench(SMALL.model_copy(update={"lengths": (3,)}))
        lines = report.to_csv().splitlines()
        self.assertEqual(lines[0], ",".join(CSV_HEADER))
        variant, seq_len, phase, seconds, workers = lines[1].split(",")
        self.assertEqual((variant, seq_len, phase, workers), ("bilstm", "3", "train", "1"))
        self.assertEqual(len(seconds.split(".")[1]), 6)
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "bench.csv"
            report.write(path)
            self.assertEqual(path.read_text(), report.to_csv())

    def test_rcrn_variants_share_parameters(self):
        models = build_variants(SMALL)
        naive, fast = models["rcrn-naive-scan"], models["rcrn-optimized-scan"]
        self.assertEqual(naive.config.encoder.scan_impl, "naive")
        self.assertEqual(fast.config.encoder.scan_impl, "optimized")
        for name, p in naive.parameters().items():
            self.assertIs(p, fast.parameters()[name])
        self.assertEqual(models["3l-bilstm"].config.encoder.depth, 3)

    def test_gate_passes_and_catches_drift(self):
        models = build_variants(SMALL)
        batch = synthetic_batch(SMALL, 5)
        check_gate(models, batch)
        drifted = dict(models)
        fast = models["rcrn-optimized-scan"]
        other = build_variants(SMALL.model_copy(update={"seed": 9}))["rcrn-optimized-scan"]
        drifted["rcrn-optimized-scan"] = replace(other, embedding=fast.embedding)
        with self.assertRaises(NumericalError):
            check_gate(drifted, batch)

    def test_synthetic_batch_is_full_length(self):
        batch = synthetic_batch(SMALL, 7)
        self.assertEqual(batch.ids.shape, (2, 7))
        assert_array_equal(batch.mask, np.ones((2, 7)))
        self.assertTrue(((batch.ids >= 2) & (batch.ids < SMALL.vocab_size)).all())

    def test_median_runs_warmup_and_repeats(self):
        calls = []
        median_seconds(lambda: calls.append(1), warmup=3, repeats=5)
        self.assertEqual(len(calls), 8)


@unittest.skipUnless(SLOW, "set RCRN_SLOW=1 for the full timing grid")
class TestFullGrid(unittest.TestCase):
    def test_times_grow_with_length(self):
        settings = BenchSettings()
        report = run_bench(settings)
        self.assertEqual(len(report.rows), len(VARIANTS) * len(settings.lengths) * len(PHASES))
        for variant in VARIANTS:
            for phase in PHASES:
                times = [report.cell(variant, T, phase).seconds for T in settings.lengths]
                for shorter, longer in zip(times, times[1:]):
                    self.assertGreaterEqual(longer, 0.8 * shorter, (variant, phase))


if __name__ == "__main__":
    unittest.main()
